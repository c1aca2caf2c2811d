"""Graph message passing + GRU forecaster, its baselines and ablations.

All forward functions take a ``params`` mapping of name -> :class:`Tensor`
(constants for inference, taped leaves for training) and work on a batch of
disjoint copies of the city graph stacked along the node axis: node rows are
ordered ``b * N + i`` and edge rows ``b * M + k``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from . import numerics as nx
from .featurize import PBL_COL
from .numerics import Tensor

KINDS = ("pm25gnn", "mlp", "gru", "lstm", "nodesfc_gru")


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "pm25gnn"
    e_dim: int = 32
    z_dim: int = 32
    h_dim: int = 64
    psi_hidden: int = 32
    mlp_hidden: int = 32
    drop_pbl: bool = False
    no_export: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if (self.drop_pbl or self.no_export) and self.kind != "pm25gnn":
            raise ValueError("ablation flags drop_pbl/no_export apply only to kind='pm25gnn'")
        for name in ("e_dim", "z_dim", "h_dim", "psi_hidden", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def label(self) -> str:
        if self.drop_pbl:
            return "no_pbl"
        if self.no_export:
            return "no_export"
        return self.kind

    def with_seed(self, seed: int) -> ModelSpec:
        return replace(self, seed=seed)


class EdgeIndex(NamedTuple):
    src: np.ndarray
    dst: np.ndarray
    n_nodes: int


def batch_edges(topology, batch: int) -> EdgeIndex:
    """Edge index of ``batch`` disjoint copies of ``topology``."""
    n, m = topology.n_nodes, len(topology.src)
    offs = (np.arange(batch) * n).repeat(m)
    return EdgeIndex(np.tile(topology.src, batch) + offs, np.tile(topology.dst, batch) + offs, n * batch)


# -- parameters ------------------------------------------------------------------


def _gru_shapes(prefix: str, h: int, x: int) -> dict[str, tuple[int, ...]]:
    out = {}
    for gate in ("z", "r", "h"):
        out[f"{prefix}.W_{gate}"] = (h + x, h)
        out[f"{prefix}.b_{gate}"] = (h,)
    return out


def param_shapes(spec: ModelSpec, n_nodes: int, p: int, q: int) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes for one model kind."""
    xi = 1 + p
    shapes: dict[str, tuple[int, ...]] = {}
    if spec.kind == "pm25gnn":
        shapes["psi.W1"] = (2 * xi + q, spec.psi_hidden)
        shapes["psi.b1"] = (spec.psi_hidden,)
        shapes["psi.W2"] = (spec.psi_hidden, spec.e_dim)
        shapes["psi.b2"] = (spec.e_dim,)
        shapes["phi.W"] = (spec.e_dim, spec.z_dim)
        shapes["phi.b"] = (spec.z_dim,)
        shapes.update(_gru_shapes("gru", spec.h_dim, xi + spec.z_dim))
    elif spec.kind == "nodesfc_gru":
        shapes["fc.W"] = (n_nodes * xi, n_nodes * spec.z_dim)
        shapes["fc.b"] = (n_nodes * spec.z_dim,)
        shapes.update(_gru_shapes("gru", spec.h_dim, xi + spec.z_dim))
    elif spec.kind == "gru":
        shapes.update(_gru_shapes("gru", spec.h_dim, xi))
    elif spec.kind == "lstm":
        for gate in ("i", "f", "o", "c"):
            shapes[f"lstm.W_{gate}"] = (spec.h_dim + xi, spec.h_dim)
            shapes[f"lstm.b_{gate}"] = (spec.h_dim,)
    elif spec.kind == "mlp":
        shapes["mlp.W1"] = (xi, spec.mlp_hidden)
        shapes["mlp.b1"] = (spec.mlp_hidden,)
        shapes["mlp.W2"] = (spec.mlp_hidden, 1)
        shapes["mlp.b2"] = (1,)
        return shapes
    shapes["out.W"] = (spec.h_dim, 1)
    shapes["out.b"] = (1,)
    return shapes


def count_params(spec: ModelSpec, n_nodes: int, p: int, q: int) -> int:
    return int(sum(np.prod(s) for s in param_shapes(spec, n_nodes, p, q).values()))


def init_params(spec: ModelSpec, n_nodes: int, p: int, q: int, dtype=np.float64) -> dict[str, np.ndarray]:
    """Weights uniform in +-1/sqrt(fan_in), zero biases, drawn from ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    params = {}
    for name, shape in param_shapes(spec, n_nodes, p, q).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


def as_constants(params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in params.items()}


# -- building blocks ---------------------------------------------------------------


def node_repr(x_prev, p_t) -> Tensor:
    """Previous concentration joined with current node attributes: [N, 1+p]."""
    x_prev, p_t = nx.as_tensor(x_prev), nx.as_tensor(p_t)
    if x_prev.data.ndim != 2 or x_prev.shape[1] != 1 or x_prev.shape[0] != p_t.shape[0]:
        raise nx.ShapeError(f"node_repr: x_prev {x_prev.shape} does not pair with node attributes {p_t.shape}")
    return nx.concat([x_prev, p_t])


def edge_messages(xi: Tensor, q_t, graph, params) -> Tensor:
    """Psi([xi_src, xi_dst, Q]) for every directed edge: [M, e_dim]."""
    h = nx.concat([nx.gather(xi, graph.src), nx.gather(xi, graph.dst), q_t])
    h = nx.sigmoid(nx.linear(h, params["psi.W1"], params["psi.b1"]))
    return nx.linear(h, params["psi.W2"], params["psi.b2"])


def spatial_step(xi, q_t, graph, params, no_export: bool = False) -> Tensor:
    """Aggregate import minus export edge messages per node, then apply Phi.

    ``graph`` is anything with ``src``, ``dst`` and ``n_nodes`` (a
    :class:`GraphTopology` or a batched :class:`EdgeIndex`).
    """
    xi, q_t = nx.as_tensor(xi), nx.as_tensor(q_t)
    if q_t.shape[0] != len(graph.src):
        raise nx.ShapeError(f"spatial_step: {q_t.shape[0]} edge attribute rows for {len(graph.src)} edges")
    n = graph.n_nodes
    e_dim = params["psi.W2"].shape[1]
    if len(graph.src) == 0:
        agg = Tensor(np.zeros((n, e_dim), dtype=xi.data.dtype))
    else:
        e = edge_messages(xi, q_t, graph, params)
        agg = nx.scatter_add(e, graph.dst, n)
        if not no_export:
            agg = nx.sub(agg, nx.scatter_add(e, graph.src, n))
    return nx.linear(agg, params["phi.W"], params["phi.b"])


def gru_cell(x, h_prev, params, prefix: str = "gru") -> Tensor:
    x, h_prev = nx.as_tensor(x), nx.as_tensor(h_prev)
    hx = nx.concat([h_prev, x])
    z = nx.sigmoid(nx.linear(hx, params[f"{prefix}.W_z"], params[f"{prefix}.b_z"]))
    r = nx.sigmoid(nx.linear(hx, params[f"{prefix}.W_r"], params[f"{prefix}.b_r"]))
    cand = nx.tanh(nx.linear(nx.concat([nx.mul(r, h_prev), x]), params[f"{prefix}.W_h"], params[f"{prefix}.b_h"]))
    # (1 - z) * h_prev + z * cand
    return nx.add(h_prev, nx.mul(z, nx.sub(cand, h_prev)))


def lstm_cell(x, h_prev, c_prev, params, prefix: str = "lstm") -> tuple[Tensor, Tensor]:
    hx = nx.concat([h_prev, x])
    i = nx.sigmoid(nx.linear(hx, params[f"{prefix}.W_i"], params[f"{prefix}.b_i"]))
    f = nx.sigmoid(nx.linear(hx, params[f"{prefix}.W_f"], params[f"{prefix}.b_f"]))
    o = nx.sigmoid(nx.linear(hx, params[f"{prefix}.W_o"], params[f"{prefix}.b_o"]))
    g = nx.tanh(nx.linear(hx, params[f"{prefix}.W_c"], params[f"{prefix}.b_c"]))
    c = nx.add(nx.mul(f, c_prev), nx.mul(i, g))
    return nx.mul(o, nx.tanh(c)), c


def readout(h, params) -> Tensor:
    """Single affine layer to one standardized concentration per node."""
    return nx.linear(h, params["out.W"], params["out.b"])


def _fc_spatial(xi: Tensor, batch: int, n_nodes: int, params) -> Tensor:
    flat = nx.reshape(xi, (batch, -1))
    z = nx.linear(flat, params["fc.W"], params["fc.b"])
    return nx.reshape(z, (batch * n_nodes, -1))


# -- full forward ----------------------------------------------------------------


def forward(spec: ModelSpec, params, x0, P, Q, topology) -> Tensor:
    """Batched multi-step forecast in standardized space.

    x0: [B, N] observed start concentration; P: [B, T, N, p]; Q: [B, T, M, q].
    Returns a tensor of shape [B*N, T] with rows ordered ``b * N + i``.
    """
    x0, P = np.asarray(x0), np.asarray(P)
    if P.ndim != 4 or x0.shape != (P.shape[0], P.shape[2]):
        raise nx.ShapeError(f"forward: x0 {x0.shape} and P {P.shape} are not [B, N] and [B, T, N, p]")
    b, t_len, n, p = P.shape
    if n != topology.n_nodes:
        raise nx.ShapeError(f"forward: {n} nodes in P but topology has {topology.n_nodes}")
    if spec.drop_pbl:
        P = P.copy()
        P[..., PBL_COL] = 0.0
    p_steps = [P[:, t].reshape(b * n, p) for t in range(t_len)]
    x_obs = Tensor(x0.reshape(b * n, 1))

    if spec.kind == "mlp":
        outs = []
        for t in range(t_len):
            xi = node_repr(x_obs, p_steps[t])
            hid = nx.sigmoid(nx.linear(xi, params["mlp.W1"], params["mlp.b1"]))
            outs.append(nx.linear(hid, params["mlp.W2"], params["mlp.b2"]))
        return nx.concat(outs)

    if spec.kind == "pm25gnn":
        Q = np.asarray(Q)
        if Q.ndim != 4 or Q.shape[:2] != (b, t_len):
            raise nx.ShapeError(f"forward: Q {Q.shape} does not cover {t_len} steps for batch {b}")
        q_steps = [Q[:, t].reshape(b * Q.shape[2], Q.shape[3]) for t in range(t_len)]
        graph = batch_edges(topology, b)

    dtype = P.dtype if np.issubdtype(P.dtype, np.floating) else np.float64
    h = Tensor(np.zeros((b * n, spec.h_dim), dtype=dtype))
    c = Tensor(np.zeros((b * n, spec.h_dim), dtype=dtype)) if spec.kind == "lstm" else None
    x_prev = x_obs
    outs = []
    for t in range(t_len):
        xi = node_repr(x_prev, p_steps[t])
        if spec.kind == "pm25gnn":
            x_in = nx.concat([xi, spatial_step(xi, q_steps[t], graph, params, spec.no_export)])
        elif spec.kind == "nodesfc_gru":
            x_in = nx.concat([xi, _fc_spatial(xi, b, n, params)])
        else:
            x_in = xi
        if spec.kind == "lstm":
            h, c = lstm_cell(x_in, h, c, params)
        else:
            h = gru_cell(x_in, h, params)
        x_prev = readout(h, params)
        outs.append(x_prev)
    return nx.concat(outs)


def rollout(x0, P, Q, topology, params, spec: ModelSpec) -> Tensor:
    """Single-window forecast: x0 [N, 1], P [T, N, p], Q [T, M, q] -> [T, N, 1]."""
    P = np.asarray(P)
    Q = np.asarray(Q) if Q is not None else None
    if spec.kind == "pm25gnn" and (Q is None or Q.shape[0] != P.shape[0]):
        raise nx.ShapeError(f"rollout: P covers {P.shape[0]} steps but Q covers {None if Q is None else Q.shape[0]}")
    if P.shape[0] < 1:
        raise ValueError("rollout: need at least one step")
    x0 = np.asarray(x0).reshape(1, -1)
    out = forward(spec, params, x0, P[None], None if Q is None else Q[None], topology)  # [N, T]
    t_len, n = P.shape[0], P.shape[1]
    return nx.reshape(nx.transpose(out), (t_len, n, 1))


def baseline_forward(spec: ModelSpec, params, x0, P, topology) -> Tensor:
    """Forecast for a non-graph model kind; signature mirrors :func:`rollout`."""
    if spec.kind == "pm25gnn":
        raise ValueError("baseline_forward: pm25gnn is not a baseline; use rollout")
    return rollout(x0, P, None, topology, params, spec)


def predict(spec: ModelSpec, params: dict[str, np.ndarray], x0, P, Q, topology, batch_size: int = 64) -> np.ndarray:
    """Untaped batched forecast; returns [B, T, N] standardized predictions."""
    const = as_constants(params)
    x0, P = np.asarray(x0), np.asarray(P)
    b, t_len, n = P.shape[0], P.shape[1], P.shape[2]
    out = np.empty((b, t_len, n), dtype=P.dtype)
    for s in range(0, b, batch_size):
        e = min(b, s + batch_size)
        qb = None if Q is None else Q[s:e]
        y = forward(spec, const, x0[s:e], P[s:e], qb, topology).data  # [(e-s)*N, T]
        out[s:e] = y.reshape(e - s, n, t_len).transpose(0, 2, 1)
    return out
