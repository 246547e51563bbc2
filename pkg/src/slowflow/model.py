"""Physics-guided graph network: grid->mesh encoder, gated message-passing
blocks on the mesh, and a mesh->grid decoder.

Every learned map is either an ``mlp`` (Linear, SiLU, LayerNorm) or a
``head`` (Linear, SiLU, Linear) where an unnormalised output is required.
Linear maps over a channel concatenation are evaluated blockwise, one
weight matrix per concatenated part, which lets static (batch-free) parts
broadcast against batched ones.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .graph import MultiScaleGraph
from .tensor import Tensor

GEOMETRY_CHANNELS = 4
MESH_NODE_CHANNELS = 3


@dataclass
class ModelConfig:
    in_channels: int
    out_channels: int
    hidden: int = 32
    blocks: int = 4
    pei: bool = True
    aggregation: str = "adaptive"  # adaptive | sum_only | mean_only
    zero_head: bool = False
    increment: bool = False  # output is added to the first out_channels of the input

    def __post_init__(self):
        if self.aggregation not in ("adaptive", "sum_only", "mean_only"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.blocks < 0 or self.hidden < 1:
            raise ValueError("blocks must be >= 0 and hidden >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


class GraphConstants:
    """Static graph arrays and scatter operators shared by every forward pass."""

    def __init__(self, graph: MultiScaleGraph):
        self.graph = graph
        ng, nm = graph.n_grid, graph.n_mesh
        me, g2m, m2g = graph.mesh_edges, graph.g2m, graph.m2g
        self.n_grid, self.n_mesh = ng, nm
        self.mesh_nodes = T.constant(graph.mesh_node_features())
        self.mesh_edge_feat = T.constant(_scaled(me.features))
        self.g2m_feat = T.constant(_scaled(g2m.features))
        self.m2g_feat = T.constant(_scaled(m2g.features))
        self.mesh_send = T.Segments(me.senders, nm)
        self.mesh_recv = T.Segments(me.receivers, nm)
        self.g2m_send = T.Segments(g2m.senders, ng)
        self.g2m_recv = T.Segments(g2m.receivers, nm)
        self.m2g_send = T.Segments(m2g.senders, nm)
        self.m2g_recv = T.Segments(m2g.receivers, ng)


def _scaled(features: np.ndarray) -> np.ndarray:
    # Edge geometry in units of the set's longest edge.
    m = features[:, 3].max() if len(features) else 1.0
    return features / (m if m > 0 else 1.0)


@dataclass
class LatentGraphState:
    grid: Tensor  # (B, N_grid, D)
    mesh: Tensor  # (N_mesh, D) before encoding, (B, N_mesh, D) after
    mesh_edges: Tensor
    g2m: Tensor
    m2g: Tensor


class PhysicsGuidedGraphNet:
    """Parameter container plus the forward pass.

    ``params`` maps dotted names to parameter tensors. Names are stable and
    used as checkpoint keys.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.gate_override: float | None = None
        rng = np.random.default_rng(seed)
        d = config.hidden
        self._mlp("embed.grid", [config.in_channels], d, rng)
        self._mlp("embed.mesh", [MESH_NODE_CHANNELS], d, rng)
        self._mlp("embed.mesh_edge", [GEOMETRY_CHANNELS], d, rng)
        self._mlp("embed.g2m", [GEOMETRY_CHANNELS], d, rng)
        self._mlp("embed.m2g", [GEOMETRY_CHANNELS], d, rng)
        self._mlp("enc.esmlp", [d, d, d], d, rng)
        self._mlp("enc.mesh", [d, d], d, rng)
        self._mlp("enc.grid", [d], d, rng)
        for k in range(config.blocks):
            p = f"block{k}"
            if config.pei:
                fused = [d, d, d, 1]
                self._mlp(f"{p}.fuse_s", fused, d, rng)
                self._mlp(f"{p}.fuse_r", fused, d, rng)
                self._linear(f"{p}.edge.we", [d], d, rng, bias=False)
                self._linear(f"{p}.edge.ws", [d], d, rng, bias=False)
                self._linear(f"{p}.edge.wr", [d], d, rng, bias=True)
                self._linear(f"{p}.edge.w", [d], d, rng, bias=True)
                self._norm(f"{p}.edge.norm", d)
            else:
                self._mlp(f"{p}.edge_mlp", [d, d, d], d, rng)
            # One MLP serves both branches, so equal aggregates give equal branch outputs.
            self._mlp(f"{p}.node_agg", [d, d], d, rng)
            self._head(f"{p}.gate", [d, d], d, d, rng)
            self._mlp(f"{p}.node", [d], d, rng)
        self._mlp("dec.esmlp", [d, d, d], d, rng)
        self._mlp("dec.grid", [d, d], d, rng)
        self._head("dec.out", [d], d, config.out_channels, rng, zero_out=config.zero_head)

    # ------------------------------------------------------------ parameter builders

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = T.parameter(value.astype(np.float32), name=name)

    def _linear(self, prefix, widths, out, rng, bias=True, zero=False):
        fan_in = sum(widths)
        limit = np.sqrt(6.0 / (fan_in + out))
        for i, w in enumerate(widths):
            value = np.zeros((w, out)) if zero else rng.uniform(-limit, limit, size=(w, out))
            self._add(f"{prefix}.w{i}", value)
        if bias:
            self._add(f"{prefix}.b", np.zeros(out))

    def _norm(self, prefix, d):
        self._add(f"{prefix}.gain", np.ones(d))
        self._add(f"{prefix}.bias", np.zeros(d))

    def _mlp(self, prefix, widths, out, rng):
        self._linear(f"{prefix}.lin", widths, out, rng)
        self._norm(f"{prefix}.norm", out)

    def _head(self, prefix, widths, hidden, out, rng, zero_out=False):
        self._linear(f"{prefix}.lin0", widths, hidden, rng)
        self._linear(f"{prefix}.lin1", [hidden], out, rng, zero=zero_out)

    # ------------------------------------------------------------ functional layers

    def linear(self, prefix: str, parts: list[Tensor]) -> Tensor:
        p = self.params
        out = None
        for i, x in enumerate(parts):
            y = T.matmul(x, p[f"{prefix}.w{i}"])
            out = y if out is None else T.add(out, y)
        b = p.get(f"{prefix}.b")
        return out if b is None else T.add(out, b)

    def norm(self, prefix: str, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.params[f"{prefix}.gain"], self.params[f"{prefix}.bias"])

    def mlp(self, prefix: str, parts: list[Tensor]) -> Tensor:
        return self.norm(f"{prefix}.norm", T.silu(self.linear(f"{prefix}.lin", parts)))

    def fuse(self, prefix: str, parts: list[Tensor]) -> Tensor:
        # Fusion order is Linear -> LayerNorm -> SiLU.
        return T.silu(self.norm(f"{prefix}.norm", self.linear(f"{prefix}.lin", parts)))

    def head(self, prefix: str, parts: list[Tensor]) -> Tensor:
        return self.linear(f"{prefix}.lin1", [T.silu(self.linear(f"{prefix}.lin0", parts))])

    # ------------------------------------------------------------ stages

    def embed(self, x: Tensor, gc: GraphConstants) -> LatentGraphState:
        c = self.config.in_channels
        if x.shape[-1] != c or x.shape[-2] != gc.n_grid:
            raise T.ShapeError(
                f"input has shape {x.shape}; expected (..., {gc.n_grid}, {c}) with channels laid out as "
                f"prognostic + forcing(t) + forcing(t+1), or prognostic only for a residual stage"
            )
        return LatentGraphState(
            grid=self.mlp("embed.grid", [x]),
            mesh=self.mlp("embed.mesh", [gc.mesh_nodes]),
            mesh_edges=self.mlp("embed.mesh_edge", [gc.mesh_edge_feat]),
            g2m=self.mlp("embed.g2m", [gc.g2m_feat]),
            m2g=self.mlp("embed.m2g", [gc.m2g_feat]),
        )

    def encode(self, s: LatentGraphState, gc: GraphConstants) -> LatentGraphState:
        vs = T.gather_rows(s.grid, gc.g2m_send)
        hr = T.gather_rows(s.mesh, gc.g2m_recv)
        e_new = self.mlp("enc.esmlp", [s.g2m, vs, hr])
        agg = T.segment_aggregate(e_new, gc.g2m_recv, gc.n_mesh, "sum")
        h_new = self.mlp("enc.mesh", [s.mesh, agg])
        v_new = self.mlp("enc.grid", [s.grid])
        return LatentGraphState(
            grid=T.add(s.grid, v_new),
            mesh=T.add(s.mesh, h_new),
            mesh_edges=s.mesh_edges,
            g2m=T.add(s.g2m, e_new),
            m2g=s.m2g,
        )

    def pei_message(self, k: int, hs: Tensor, hr: Tensor, e: Tensor) -> tuple[Tensor, Tensor]:
        """Edge update for block ``k``; returns (updated edges, message)."""
        p = f"block{k}"
        if not self.config.pei:
            msg = self.mlp(f"{p}.edge_mlp", [e, hs, hr])
            return T.add(e, msg), msg
        hd, hmp, hcos = interaction_features(hs, hr)
        fs = self.fuse(f"{p}.fuse_s", [hs, hd, hmp, hcos])
        fr = self.fuse(f"{p}.fuse_r", [hr, hd, hmp, hcos])
        pre = T.add(
            T.add(self.linear(f"{p}.edge.we", [e]), self.linear(f"{p}.edge.ws", [fs])),
            self.linear(f"{p}.edge.wr", [fr]),
        )
        msg = self.norm(f"{p}.edge.norm", self.linear(f"{p}.edge.w", [T.silu(pre)]))
        return T.add(e, msg), msg

    def aggregate(self, k: int, msg: Tensor, h: Tensor, gc: GraphConstants, mode: str | None = None) -> Tensor:
        """Gated sum/mean node update for block ``k``, residual included."""
        p = f"block{k}"
        mode = mode or self.config.aggregation
        n = gc.n_mesh
        h_sum = self.mlp(f"{p}.node_agg", [h, T.segment_aggregate(msg, gc.mesh_recv, n, "sum")])
        h_mean = self.mlp(f"{p}.node_agg", [h, T.segment_aggregate(msg, gc.mesh_recv, n, "mean")])
        if mode == "sum_only":
            mixed = h_sum
        elif mode == "mean_only":
            mixed = h_mean
        else:
            gamma = self.gate(k, h_sum, h_mean)
            # gamma * h_sum + (1 - gamma) * h_mean
            mixed = T.add(h_mean, T.mul(gamma, T.sub(h_sum, h_mean)))
        return T.add(h, self.mlp(f"{p}.node", [mixed]))

    def gate(self, k: int, h_sum: Tensor, h_mean: Tensor) -> Tensor:
        if self.gate_override is not None:
            return T.constant(np.full(h_sum.shape, self.gate_override))
        return T.logistic(self.head(f"block{k}.gate", [h_sum, h_mean]))

    def block(self, k: int, s: LatentGraphState, gc: GraphConstants) -> LatentGraphState:
        hs = T.gather_rows(s.mesh, gc.mesh_send)
        hr = T.gather_rows(s.mesh, gc.mesh_recv)
        edges, msg = self.pei_message(k, hs, hr, s.mesh_edges)
        mesh = self.aggregate(k, msg, s.mesh, gc)
        return LatentGraphState(s.grid, mesh, edges, s.g2m, s.m2g)

    def decode(self, s: LatentGraphState, gc: GraphConstants) -> Tensor:
        hs = T.gather_rows(s.mesh, gc.m2g_send)
        vr = T.gather_rows(s.grid, gc.m2g_recv)
        e_new = self.mlp("dec.esmlp", [s.m2g, hs, vr])
        agg = T.segment_aggregate(e_new, gc.m2g_recv, gc.n_grid, "sum")
        grid = T.add(s.grid, self.mlp("dec.grid", [s.grid, agg]))
        return self.head("dec.out", [grid])

    def forward(self, x: Tensor, gc: GraphConstants) -> Tensor:
        if not np.all(np.isfinite(x.data)):
            raise T.NonFiniteError("non-finite values in model input")
        s = self.encode(self.embed(x, gc), gc)
        for k in range(self.config.blocks):
            s = self.block(k, s, gc)
        out = self.decode(s, gc)
        if self.config.increment:
            out = T.add(T.slice_channels(x, 0, self.config.out_channels), out)
        return out

    __call__ = forward

    # ------------------------------------------------------------ bookkeeping

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"checkpoint mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise T.ShapeError(f"{k}: checkpoint shape {v.shape} != model shape {self.params[k].shape}")
            self.params[k] = T.parameter(v, name=k)

    def set_param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = T.parameter(np.asarray(value).reshape(self.params[name].shape), name=name)


def interaction_features(hs: Tensor, hr: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Difference, elementwise product and cosine similarity of node pairs."""
    return T.sub(hs, hr), T.mul(hs, hr), T.cosine_similarity(hs, hr)
