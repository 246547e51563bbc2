"""Relative-L2 objective, Adam, cosine annealing and the staged schedule.

Stage one trains the base network with 1-step supervision, then finetunes it
with 2..M-step unrolls. Each later stage freezes everything before it and
trains a fresh residual network directly with N-step unrolls through the
composed stack. Every phase draws its batches from its own seeded stream and
ends with a checkpoint, which is what makes resuming exact.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .cascade import DivergenceError, ModelStack, single_step
from .model import GraphConstants
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class FrozenParameterError(TrainingError):
    """A parameter that should be frozen changed during training."""


@dataclass
class TrainConfig:
    Q: int = 2
    M: int = 3
    N: int = 4
    pretrain_epochs: int = 40
    finetune_epochs: int = 3
    residual_epochs: int = 6
    lr: float = 1e-3
    finetune_lr: float = 1e-5
    lr_min_ratio: float = 0.01
    batch_size: int = 8
    samples_per_epoch: int = 0  # 0 = every window once
    valid_samples: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.Q < 1 or self.M < 1 or self.N < 1:
            raise ValueError("Q, M and N must all be >= 1")
        if self.lr <= 0 or self.finetune_lr <= 0:
            raise ValueError("learning rates must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    phase: str
    epoch: int
    train_loss: float
    valid_loss: float
    lr: float


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    wall_clock: float = 0.0

    def add(self, rec: EpochRecord) -> None:
        if not (math.isfinite(rec.train_loss) and math.isfinite(rec.valid_loss)):
            raise TrainingError(f"non-finite loss in phase {rec.phase} epoch {rec.epoch}")
        self.records.append(rec)

    def to_lines(self) -> list[str]:
        return [f"{r.phase},{r.epoch},{r.train_loss!r},{r.valid_loss!r},{r.lr!r}" for r in self.records]

    def write(self, path) -> None:
        Path(path).write_text("phase,epoch,train_loss,valid_loss,lr\n" + "\n".join(self.to_lines()) + "\n")

    @classmethod
    def read(cls, path) -> "TrainReport":
        rep = cls()
        for line in Path(path).read_text().splitlines()[1:]:
            if line.strip():
                p, e, tl, vl, lr = line.split(",")
                rep.records.append(EpochRecord(p, int(e), float(tl), float(vl), float(lr)))
        return rep


# ---------------------------------------------------------------- objective


def relative_l2_loss(pred: Tensor, truth) -> Tensor:
    """Mean over samples and channels of |pred - truth| / |truth|, norms over the grid.

    Arrays are laid out (..., N_grid, C).
    """
    truth = np.asarray(truth.data if isinstance(truth, Tensor) else truth)
    if pred.shape != truth.shape:
        raise T.ShapeError(f"prediction {pred.shape} vs truth {truth.shape}")
    denom = np.sqrt(np.sum(np.square(truth, dtype=np.float64), axis=-2, keepdims=True))
    if np.any(denom == 0):
        raise TrainingError("degenerate target: a channel has zero norm over the grid")
    diff = T.sub(pred, T.constant(truth))
    norms = T.sqrt(T.reduce_sum(T.mul(diff, diff), axis=-2, keepdims=True))
    return T.reduce_mean(T.mul(norms, T.constant(1.0 / denom)))


def multi_step_loss(stack: ModelStack, states: np.ndarray, forcings: np.ndarray, s: int,
                    gc: GraphConstants) -> Tensor:
    """Average 1..s step losses of an unroll from ``states[:, 0]``.

    ``states`` is (B, s+1, N, C_p), ``forcings`` (B, s+1, N, C_f).
    """
    if s < 1 or states.shape[1] != s + 1 or forcings.shape[1] != s + 1:
        raise ValueError(f"window length must be s + 1 = {s + 1}")
    prev = T.constant(states[:, 0])
    total = None
    for k in range(s):
        try:
            pred = single_step(prev, T.constant(forcings[:, k]), T.constant(forcings[:, k + 1]), stack, gc)
        except T.NonFiniteError:
            raise DivergenceError(k + 1) from None
        if not np.all(np.isfinite(pred.data)):
            raise DivergenceError(k + 1)
        lk = relative_l2_loss(pred, states[:, k + 1])
        total = lk if total is None else T.add(total, lk)
        prev = pred
    return T.scale(total, 1.0 / s)


# ---------------------------------------------------------------- optimiser


def cosine_lr(epoch: float, total: float, lr_max: float, lr_min: float) -> float:
    if total <= 0:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * epoch / total))


class Adam:
    """Adaptive-moment updates keyed by parameter name."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for {name}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        out = {}
        for name, p in params.items():
            g = grads[name].astype(np.float64)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros(p.shape)
                self.v[name] = np.zeros(p.shape)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            out[name] = (p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
        return out


def optimizer_step(params, grads, lr, moments: Adam):
    return moments.step(params, grads, lr)


# ---------------------------------------------------------------- data windows


@dataclass
class WindowData:
    """Model-space arrays for one split: prognostic (T, N, C_p), forcing (T, N, C_f)."""

    prog: np.ndarray
    force: np.ndarray
    days: np.ndarray | None = None

    def __len__(self) -> int:
        return self.prog.shape[0]

    def starts(self, s: int) -> np.ndarray:
        return np.arange(len(self) - s)

    def windows(self, starts, s: int) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(starts)[:, None] + np.arange(s + 1)[None, :]
        return self.prog[idx], self.force[idx]


def evaluate_loss(stack: ModelStack, data: WindowData, s: int, gc: GraphConstants,
                  n_samples: int = 32, batch_size: int = 8) -> float:
    """Deterministic s-step loss on evenly spaced windows."""
    starts = data.starts(s)
    if n_samples and n_samples < len(starts):
        starts = starts[np.linspace(0, len(starts) - 1, n_samples).round().astype(int)]
    total, count = 0.0, 0
    for i in range(0, len(starts), batch_size):
        b = starts[i:i + batch_size]
        p, f = data.windows(b, s)
        total += float(multi_step_loss(stack, p, f, s, gc).data) * len(b)
        count += len(b)
    return total / count


# ---------------------------------------------------------------- loops


class Trainer:
    def __init__(self, stack: ModelStack, gc: GraphConstants, train: WindowData, valid: WindowData,
                 config: TrainConfig, report: TrainReport | None = None, rng: np.random.Generator | None = None):
        self.stack = stack
        self.gc = gc
        self.train = train
        self.valid = valid
        self.config = config
        self.report = report or TrainReport()
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)

    def _trainable(self):
        out = {}
        for q, m in enumerate(self.stack.models):
            if self.stack.frozen[q]:
                continue
            for name, p in m.params.items():
                if p.requires_grad:
                    out[(q, name)] = p
        return out

    def run_phase(self, phase: str, s: int, epochs: int, lr_max: float, optimizer: Adam | None = None) -> Adam:
        cfg = self.config
        opt = optimizer or Adam()
        lr_min = lr_max * cfg.lr_min_ratio
        for epoch in range(epochs):
            lr = cosine_lr(epoch, epochs - 1, lr_max, lr_min) if epochs > 1 else lr_max
            starts = self.rng.permutation(self.train.starts(s))
            if cfg.samples_per_epoch:
                starts = starts[:cfg.samples_per_epoch]
            losses = []
            for i in range(0, len(starts), cfg.batch_size):
                p, f = self.train.windows(starts[i:i + cfg.batch_size], s)
                params = self._trainable()
                with T.Tape() as tape:
                    loss = multi_step_loss(self.stack, p, f, s, self.gc)
                grads = tape.backward(loss, params.values())
                named = {f"{q}/{n}": t.data for (q, n), t in params.items()}
                gnamed = {f"{q}/{n}": grads[t] for (q, n), t in params.items()}
                new = opt.step(named, gnamed, lr)
                for (q, n) in params:
                    self.stack.models[q].set_param(n, new[f"{q}/{n}"])
                losses.append(float(loss.data))
            valid = evaluate_loss(self.stack, self.valid, s, self.gc, cfg.valid_samples, cfg.batch_size)
            if not math.isfinite(valid):
                raise TrainingError(f"validation loss is not finite in {phase} epoch {epoch}")
            rec = EpochRecord(phase, epoch, float(np.mean(losses)) if losses else float("nan"), valid, lr)
            self.report.add(rec)
            log.info("%s epoch %d train %.5f valid %.5f lr %.2e", phase, epoch, rec.train_loss, valid, lr)
        return opt


@dataclass
class Phase:
    name: str
    kind: str  # base | residual
    s: int
    epochs: int
    lr: float


def plan_phases(config: TrainConfig, prc: bool = True) -> list[Phase]:
    """The whole schedule as a flat list.

    With ``prc=False`` each residual stage's epochs are spent training the
    base at N steps instead, so both variants see the same epoch budget.
    """
    phases = [Phase("pretrain", "base", 1, config.pretrain_epochs, config.lr)] if config.pretrain_epochs else []
    if config.finetune_epochs:
        phases += [Phase(f"finetune_s{s}", "base", s, config.finetune_epochs, config.finetune_lr)
                   for s in range(2, config.M + 1)]
    for q in range(2, config.Q + 1):
        if prc:
            phases.append(Phase(f"residual{q}_s{config.N}", "residual", config.N, config.residual_epochs, config.lr))
        elif config.residual_epochs:
            phases.append(Phase(f"base_extra{q - 1}_s{config.N}", "base", config.N, config.residual_epochs, config.lr))
    return phases


def phase_rng(config: TrainConfig, index: int) -> np.random.Generator:
    """Independent sampling stream per phase, so a resumed run draws the same windows."""
    return np.random.default_rng([config.seed, index])


def _start_residual(stack: ModelStack, config: TrainConfig) -> list[str]:
    for q in range(stack.Q):
        if not stack.frozen[q]:
            stack.freeze(q)
    prints = [stack.fingerprint(q) for q in range(stack.Q)]
    stack.add_residual(config.seed + 1000 * stack.Q)
    return prints


def _check_frozen(stack: ModelStack, prints: list[str]) -> None:
    for q, fp in enumerate(prints):
        if stack.fingerprint(q) != fp:
            raise FrozenParameterError(f"frozen stage {q + 1} changed during residual training")


def run_phases(stack: ModelStack, gc, train: WindowData, valid: WindowData, config: TrainConfig,
               phases: list[Phase], report: TrainReport | None = None, checkpoint_dir=None,
               resume: bool = False, offset: int = 0) -> TrainReport:
    report = report or TrainReport()
    done = _completed_phases(checkpoint_dir, phases, offset) if resume else 0
    if done:
        tag = _phase_tag(offset + done - 1, phases[done - 1])
        _restore(stack, Path(checkpoint_dir) / tag)
        report.records = TrainReport.read(Path(checkpoint_dir) / tag / "report.csv").records
        log.info("resuming after phase %s", tag)
    for i, ph in enumerate(phases[done:], start=done):
        tr = Trainer(stack, gc, train, valid, config, report, phase_rng(config, offset + i))
        if ph.kind == "residual":
            prints = _start_residual(stack, config)
            tr.run_phase(ph.name, ph.s, ph.epochs, ph.lr)
            _check_frozen(stack, prints)
        else:
            tr.run_phase(ph.name, ph.s, ph.epochs, ph.lr)
        _checkpoint(stack, checkpoint_dir, _phase_tag(offset + i, ph), report)
    return report


def train_stage1(stack: ModelStack, gc, train: WindowData, valid: WindowData, config: TrainConfig,
                 report: TrainReport | None = None, checkpoint_dir=None) -> TrainReport:
    """Pretrain the base network at 1 step, then finetune at 2..M steps."""
    phases = [p for p in plan_phases(config) if p.kind == "base"]
    return run_phases(stack, gc, train, valid, config, phases, report, checkpoint_dir)


def train_residual_stage(stack: ModelStack, gc, train: WindowData, valid: WindowData, config: TrainConfig,
                         report: TrainReport | None = None, checkpoint_dir=None) -> TrainReport:
    """Freeze all current stages, append a zero-initialised residual net and train it at N steps."""
    plan = plan_phases(config)
    name = f"residual{stack.Q + 1}_s{config.N}"
    index = next((i for i, p in enumerate(plan) if p.name == name), len(plan))
    ph = Phase(name, "residual", config.N, config.residual_epochs, config.lr)
    return run_phases(stack, gc, train, valid, config, [ph], report, checkpoint_dir, offset=index)


def train_stack(stack: ModelStack, gc, train: WindowData, valid: WindowData, config: TrainConfig,
                prc: bool = True, checkpoint_dir=None, resume: bool = False) -> TrainReport:
    """Full schedule. With ``resume`` completed phases found in ``checkpoint_dir`` are skipped."""
    if resume and checkpoint_dir is None:
        raise TrainingError("resume needs a checkpoint directory")
    if stack.Q != 1:
        raise TrainingError(f"train_stack grows the stack itself; pass a base-only stack, got Q={stack.Q}")
    t0 = time.perf_counter()
    report = run_phases(stack, gc, train, valid, config, plan_phases(config, prc),
                        checkpoint_dir=checkpoint_dir, resume=resume)
    report.wall_clock = time.perf_counter() - t0
    return report


def _phase_tag(index: int, ph: Phase) -> str:
    return f"{index:02d}_{ph.name}"


def _completed_phases(directory, phases: list[Phase], offset: int) -> int:
    if directory is None:
        return 0
    done = 0
    for i, ph in enumerate(phases):
        d = Path(directory) / _phase_tag(offset + i, ph)
        if not ((d / "stack.json").exists() and (d / "report.csv").exists()):
            break
        done = i + 1
    return done


def _restore(stack: ModelStack, directory: Path) -> None:
    loaded = ModelStack.load(directory)
    stack.models[:] = loaded.models
    stack.frozen[:] = loaded.frozen


def _checkpoint(stack: ModelStack, directory, tag: str, report: TrainReport) -> None:
    if directory is None:
        return
    path = Path(directory) / tag
    stack.save(path)
    report.checkpoints.append(str(path))
    # Written last: its presence marks the phase as complete.
    report.write(path / "report.csv")
