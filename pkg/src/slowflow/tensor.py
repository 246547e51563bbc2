"""Dense arrays with tape-based reverse-mode differentiation.

Only the primitives the graph network needs are provided. Arrays are numpy
``ndarray`` values wrapped in :class:`Tensor`; operations act on the last
(channel) axis and, for gathers and segment reductions, on the row axis
``-2``. Any number of leading batch axes is allowed.

Recording happens only while a :class:`Tape` is active::

    with Tape() as tape:
        loss = reduce_sum(silu(matmul(x, w)))
    grads = tape.backward(loss, [w])
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

LAYERNORM_EPS = 1e-5

_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the storage dtype (float64 for finite differences)."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""


class NonFiniteError(FloatingPointError):
    """A forward value became NaN or infinite."""


class Tensor:
    """Immutable dense array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # Operator sugar; all route through the recorded primitives.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered log of primitive applications for one forward pass.

    Each record is ``(output, inputs, backward_fn)``; ``backward_fn`` maps
    the output gradient to one gradient (or ``None``) per input.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Propagate d(loss)/d(.) through the records in reverse creation order.

        Returns a mapping from each tensor in ``params`` (default: every
        leaf that requires grad and was consumed on this tape) to its
        gradient. Unreachable parameters receive zeros.
        """
        if loss.data.size != 1:
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        if params is None:
            seen: dict[int, Tensor] = {}
            produced = {id(r[0]) for r in self.records}
            for _, inputs, _ in self.records:
                for t in inputs:
                    if t.requires_grad and id(t) not in produced:
                        seen.setdefault(id(t), t)
            params = list(seen.values())
        else:
            params = list(params)

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        result = {}
        for p in params:
            g = grads.get(id(p))
            result[p] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.data.dtype).reshape(p.shape)
        return result


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss, params)


def _active_tape() -> Tape | None:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


def _emit(data: np.ndarray, inputs: Sequence[Tensor], fn: Callable) -> Tensor:
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        tape.records.append((out, tuple(inputs), fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def _logistic(x: np.ndarray) -> np.ndarray:
    return expit(x)


def logistic(x: Tensor) -> Tensor:
    s = _logistic(x.data)
    return _emit(s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _logistic(xd)
    return _emit(xd * s, (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))


def sqrt(x: Tensor) -> Tensor:
    """Square root; the derivative at exactly 0 is taken as 0."""
    r = np.sqrt(x.data)

    def fn(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(r > 0, 0.5 / np.where(r > 0, r, 1.0), 0.0)
        return (g * d,)

    return _emit(r, (x,), fn)


# ---------------------------------------------------------------- linear algebra


def matmul(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w`` with ``x`` of shape (..., n, k) and ``w`` of shape (k, m)."""
    if w.data.ndim != 2 or x.data.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul: shapes {x.shape} and {w.shape} do not conform")
    xd, wd = x.data, w.data
    k, m = wd.shape
    x2 = xd.reshape(-1, k)

    def fn(g):
        g2 = g.reshape(-1, m)
        return (g2 @ wd.T).reshape(xd.shape), x2.T @ g2

    return _emit((x2 @ wd).reshape(xd.shape[:-1] + (m,)), (x, w), fn)


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel (last) axis."""
    parts = [_as_tensor(p) for p in parts]
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeError(f"concat: shapes {parts[0].shape} and {p.shape} differ outside the channel axis")
    widths = [p.shape[-1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def fn(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _emit(np.concatenate([p.data for p in parts], axis=-1), parts, fn)


def split(x: Tensor, widths: Sequence[int]) -> list[Tensor]:
    """Inverse of :func:`concat` along the channel axis."""
    if sum(widths) != x.shape[-1]:
        raise ShapeError(f"split: widths {list(widths)} do not sum to channel extent {x.shape[-1]}")
    out = []
    start = 0
    for w in widths:
        out.append(slice_channels(x, start, start + w))
        start += w
    return out


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return _emit(x.data[..., start:stop].copy(), (x,), fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalise each row over the channel axis, then apply gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: input {x.shape} with gain {gain.shape} / bias {bias.shape}")
    xd = x.data
    # Row reductions span only the channel axis; storage precision suffices.
    xc = xd - xd.mean(axis=-1, keepdims=True)
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    gd = gain.data

    def fn(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        ggain = np.einsum("ij,ij->j", flat_g, xhat.reshape(-1, d))
        gbias = flat_g.sum(axis=0)
        return gx, ggain, gbias

    return _emit(xhat * gd + bias.data, (x, gain, bias), fn)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity, returned as one channel; 0 if either row is zero."""
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    na = np.sqrt(np.sum(ad * ad, axis=-1, keepdims=True, dtype=np.float64))
    nb = np.sqrt(np.sum(bd * bd, axis=-1, keepdims=True, dtype=np.float64))
    dot = np.sum(ad * bd, axis=-1, keepdims=True, dtype=np.float64)
    ok = (na > 0) & (nb > 0)
    denom = np.where(ok, na * nb, 1.0)
    cos = np.where(ok, dot / denom, 0.0)
    inv_a2 = np.where(ok, 1.0 / np.where(ok, na * na, 1.0), 0.0)
    inv_b2 = np.where(ok, 1.0 / np.where(ok, nb * nb, 1.0), 0.0)
    inv_ab = np.where(ok, 1.0 / denom, 0.0)
    dt = ad.dtype

    def fn(g):
        g64 = g.astype(np.float64)
        ga = g64 * (bd * inv_ab - cos * ad * inv_a2)
        gb = g64 * (ad * inv_ab - cos * bd * inv_b2)
        return ga.astype(dt), gb.astype(dt)

    return _emit(cos.astype(dt), (a, b), fn)


# ---------------------------------------------------------------- reductions


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.data.dtype)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(out, (x,), fn)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------- graph gathers / scatters


class Segments:
    """Precomputed scatter operator for a fixed target index list.

    Holding one of these per edge set avoids rebuilding the sparse
    incidence matrix on every forward pass.
    """

    def __init__(self, targets, n_nodes: int):
        targets = np.asarray(targets, dtype=np.int64).reshape(-1)
        if targets.size and (targets.min() < 0 or targets.max() >= n_nodes):
            bad = targets[(targets < 0) | (targets >= n_nodes)][0]
            raise IndexError(f"segment target {bad} out of range for {n_nodes} nodes")
        self.targets = targets
        self.n_nodes = int(n_nodes)
        e = targets.size
        self.matrix = sp.csr_matrix(
            (np.ones(e, dtype=np.float64), (targets, np.arange(e))), shape=(self.n_nodes, e)
        )
        self.counts = np.bincount(targets, minlength=self.n_nodes).astype(np.float64)

    @property
    def n_edges(self) -> int:
        return self.targets.size

    def scatter_sum(self, values: np.ndarray) -> np.ndarray:
        """Sum rows of ``values`` (..., E, D) into (..., n_nodes, D)."""
        lead = values.shape[:-2]
        flat = values.reshape((int(np.prod(lead, dtype=np.int64)),) + values.shape[-2:])
        out = np.empty((flat.shape[0], self.n_nodes, values.shape[-1]), dtype=values.dtype)
        for i in range(flat.shape[0]):
            out[i] = self.matrix @ flat[i].astype(np.float64)
        return out.reshape(lead + (self.n_nodes, values.shape[-1]))


def _segments(targets, n_nodes: int) -> Segments:
    if isinstance(targets, Segments):
        if targets.n_nodes != n_nodes:
            raise ShapeError(f"segments built for {targets.n_nodes} nodes, asked for {n_nodes}")
        return targets
    return Segments(targets, n_nodes)


def segment_aggregate(values: Tensor, targets, n_nodes: int, mode: str = "sum") -> Tensor:
    """Reduce edge rows onto their target nodes; isolated nodes get zero rows."""
    seg = _segments(targets, n_nodes)
    if values.shape[-2] != seg.n_edges:
        raise ShapeError(f"segment_aggregate: {values.shape[-2]} edge rows but {seg.n_edges} targets")
    if mode == "sum":
        w = None
    elif mode == "mean":
        w = np.where(seg.counts > 0, 1.0 / np.maximum(seg.counts, 1.0), 0.0).astype(values.data.dtype)[:, None]
    else:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    out = seg.scatter_sum(values.data)
    if w is not None:
        out = out * w

    def fn(g):
        if w is not None:
            g = g * w
        return (np.take(g, seg.targets, axis=-2),)

    return _emit(out, (values,), fn)


def gather_rows(x: Tensor, index) -> Tensor:
    """Select rows ``x[..., index, :]``; the backward pass scatter-adds."""
    seg = index if isinstance(index, Segments) else Segments(index, x.shape[-2])
    if seg.n_nodes != x.shape[-2]:
        raise ShapeError(f"gather_rows: index built for {seg.n_nodes} rows, input has {x.shape[-2]}")
    return _emit(np.take(x.data, seg.targets, axis=-2), (x,), lambda g: (seg.scatter_sum(g),))


# ---------------------------------------------------------------- checks


def assert_finite(x: Tensor, what: str = "value") -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError(f"non-finite entries in {what}")
    return x


def gradient_check(f: Callable[[Tensor], Tensor], point, step: float = 1e-3) -> float:
    """Max relative discrepancy between tape gradients and central differences.

    ``f`` maps a tensor to a scalar tensor. The relative error per coordinate
    is ``|a - n| / (|a| + |n| + 1e-8)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(point, dtype=default_dtype())
    x = parameter(x0)
    with Tape() as tape:
        y = f(x)
    analytic = tape.backward(y, [x])[x].astype(np.float64).reshape(-1)
    numeric = np.empty_like(analytic)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xp[i] += step
        xm = flat.copy()
        xm[i] -= step
        fp = float(f(constant(xp.reshape(x0.shape))).data.reshape(()))
        fm = float(f(constant(xm.reshape(x0.shape))).data.reshape(()))
        numeric[i] = (fp - fm) / (2.0 * step)
    if analytic.size == 0:
        return 0.0
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-8)
    return float(rel.max())
