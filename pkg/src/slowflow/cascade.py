"""Progressive residual correction and autoregressive rollout.

A stack holds one base network, which sees ``concat(state, F_t, F_{t+1})``,
and ``Q - 1`` residual networks, each of which sees only the previous
stage's prediction and adds a correction to it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .fileio import encode_weights, read_weights, write_weights
from .model import GraphConstants, ModelConfig, PhysicsGuidedGraphNet
from .tensor import Tensor


class DivergenceError(FloatingPointError):
    """A rollout produced non-finite values."""

    def __init__(self, step: int, partial=None):
        super().__init__(f"rollout diverged at step {step}")
        self.step = step
        self.partial = partial


@dataclass
class ModelStack:
    models: list
    frozen: list[bool] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.models:
            raise ValueError("a stack needs at least the base model")
        if not self.frozen:
            self.frozen = [False] * len(self.models)

    @property
    def Q(self) -> int:
        return len(self.models)

    @property
    def base(self):
        return self.models[0]

    @classmethod
    def create(cls, n_prog: int, n_force: int, Q: int = 2, hidden: int = 32, blocks: int = 4,
               pei: bool = True, aggregation: str = "adaptive", seed: int = 0,
               increment: bool = True) -> "ModelStack":
        if Q < 1:
            raise ValueError("Q must be >= 1")
        models = [PhysicsGuidedGraphNet(ModelConfig(n_prog + 2 * n_force, n_prog, hidden, blocks, pei, aggregation,
                                                  zero_head=increment, increment=increment), seed)]
        for q in range(1, Q):
            cfg = ModelConfig(n_prog, n_prog, hidden, blocks, pei, aggregation, zero_head=True)
            models.append(PhysicsGuidedGraphNet(cfg, seed + 1000 * q))
        return cls(models)

    def add_residual(self, seed: int) -> PhysicsGuidedGraphNet:
        b = self.base.config
        cfg = ModelConfig(b.out_channels, b.out_channels, b.hidden, b.blocks, b.pei, b.aggregation, zero_head=True)
        m = PhysicsGuidedGraphNet(cfg, seed)
        self.models.append(m)
        self.frozen.append(False)
        return m

    def freeze(self, q: int) -> None:
        """Detach model ``q`` from differentiation; no gradients or optimiser state."""
        m = self.models[q]
        if isinstance(m, PhysicsGuidedGraphNet):
            m.params = {k: T.constant(v.data) for k, v in m.params.items()}
        self.frozen[q] = True

    def fingerprint(self, q: int) -> str:
        return hashlib.sha256(encode_weights(self.models[q].state_dict())).hexdigest()

    # ------------------------------------------------------------ persistence

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        meta = {
            "Q": self.Q,
            "frozen": self.frozen,
            "configs": [m.config.to_dict() for m in self.models],
            "metadata": self.metadata,
        }
        for q, m in enumerate(self.models):
            write_weights(m.state_dict(), d / f"stage{q + 1}.nomw")
        (d / "stack.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "ModelStack":
        d = Path(directory)
        meta = json.loads((d / "stack.json").read_text())
        models = []
        for q, cfg in enumerate(meta["configs"]):
            m = PhysicsGuidedGraphNet(ModelConfig(**cfg))
            m.load_state_dict(read_weights(d / f"stage{q + 1}.nomw"))
            models.append(m)
        stack = cls(models, [False] * len(models), meta.get("metadata", {}))
        for q, fz in enumerate(meta["frozen"]):
            if fz:
                stack.freeze(q)
        return stack


def single_step(o_prev: Tensor, f_t: Tensor, f_t1: Tensor, stack: ModelStack, gc: GraphConstants,
                stages: list | None = None) -> Tensor:
    """One cascaded prediction; intermediate stage outputs go to ``stages`` if given."""
    if o_prev.shape[:-1] != f_t.shape[:-1] or f_t.shape != f_t1.shape:
        raise T.ShapeError(f"state {o_prev.shape} and forcings {f_t.shape}/{f_t1.shape} do not align")
    x = T.concat([o_prev, f_t, f_t1])
    pred = stack.models[0](x, gc)
    if stages is not None:
        stages.append(pred)
    for m in stack.models[1:]:
        pred = T.add(pred, m(pred, gc))
        if stages is not None:
            stages.append(pred)
    return pred


@dataclass
class RolloutTrajectory:
    initial: np.ndarray  # (..., N, C)
    states: list[np.ndarray]  # T entries of (..., N, C)
    stages: list[list[np.ndarray]] | None = None

    def __len__(self) -> int:
        return len(self.states)

    def as_array(self) -> np.ndarray:
        return np.stack(self.states)


def rollout(o_0: np.ndarray, forcings: np.ndarray, stack: ModelStack, gc: GraphConstants,
            keep_stages: bool = False) -> RolloutTrajectory:
    """Feed each prediction back in; ground-truth forcing at every step.

    ``forcings`` has ``T + 1`` entries on its first axis (indices 0..T).
    Raises :class:`DivergenceError` with the partial trajectory attached
    when a predicted state is non-finite.
    """
    forcings = np.asarray(forcings)
    steps = forcings.shape[0] - 1
    if steps < 1:
        raise ValueError("forcing sequence must cover at least one step (T + 1 >= 2 entries)")
    traj = RolloutTrajectory(np.array(o_0, copy=True), [], [] if keep_stages else None)
    prev = T.constant(o_0)
    for t in range(steps):
        stages = [] if keep_stages else None
        try:
            with np.errstate(all="ignore"):
                pred = single_step(prev, T.constant(forcings[t]), T.constant(forcings[t + 1]), stack, gc, stages)
        except T.NonFiniteError:
            # A blown-up intermediate stage output is divergence at this step.
            raise DivergenceError(t + 1, traj) from None
        if not np.all(np.isfinite(pred.data)):
            raise DivergenceError(t + 1, traj)
        traj.states.append(pred.data.copy())
        if keep_stages:
            traj.stages.append([s.data.copy() for s in stages])
        prev = pred
    return traj
