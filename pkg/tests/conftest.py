import numpy as np
import pytest

from slowflow import tensor as T
from slowflow.graph import GridSpec, build_graph
from slowflow.model import GraphConstants, ModelConfig, PhysicsGuidedGraphNet


@pytest.fixture(scope="session")
def tiny_gc():
    return GraphConstants(build_graph(GridSpec.regular(4, 8), level=0, radius_factor=0.6))


@pytest.fixture(scope="session")
def desk_gc():
    return GraphConstants(build_graph(GridSpec.regular(16, 32), level=2, radius_factor=0.6))


def make_net(in_ch=5, out_ch=3, hidden=8, blocks=1, seed=0, precision=np.float64, **kw):
    with T.precision(precision):
        return PhysicsGuidedGraphNet(ModelConfig(in_ch, out_ch, hidden, blocks, **kw), seed)


def param_gradient_errors(net, loss_fn, names=None, per_param=None, step=1e-5, seed=0):
    """Relative errors between tape and central-difference gradients in float64.

    ``per_param`` limits the number of sampled coordinates per parameter
    tensor (None checks every coordinate).
    """
    rng = np.random.default_rng(seed)
    names = list(net.params) if names is None else names
    with T.precision(np.float64):
        for n in names:
            net.set_param(n, net.params[n].data.astype(np.float64))
        with T.Tape() as tape:
            loss = loss_fn()
        grads = tape.backward(loss, [net.params[n] for n in names])
        grads = {n: grads[net.params[n]] for n in names}
        errs = []
        for n in names:
            base = net.params[n].data.copy()
            flat = base.reshape(-1)
            idx = np.arange(flat.size)
            if per_param is not None and flat.size > per_param:
                idx = rng.choice(flat.size, per_param, replace=False)
            for i in idx:
                vals = []
                for sgn in (1, -1):
                    x = flat.copy()
                    x[i] += sgn * step
                    net.params[n] = T.constant(x.reshape(base.shape))
                    vals.append(float(loss_fn().data))
                net.set_param(n, base)
                num = (vals[0] - vals[1]) / (2 * step)
                a = float(grads[n].reshape(-1)[i])
                errs.append(abs(a - num) / (abs(a) + abs(num) + 1e-8))
    return np.array(errs)


def pytest_terminal_summary(terminalreporter):
    import sys
    lines = getattr(sys.modules.get("test_acceptance"), "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
