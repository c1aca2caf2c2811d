"""Node and edge feature panels, plus train-range standardization."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .geograph import GraphTopology

log = logging.getLogger(__name__)

STEP_SECONDS = 10800
PM25_MIN, PM25_MAX = 0.0, 500.0

METEO_FEATURES = (
    "pbl_height",
    "k_index",
    "u_wind",
    "v_wind",
    "temp_2m",
    "rel_humidity",
    "precipitation",
    "surface_pressure",
)
TEMPORAL_FEATURES = ("sin_hour", "cos_hour", "sin_weekday", "cos_weekday")
NODE_FEATURES = METEO_FEATURES + TEMPORAL_FEATURES
EDGE_FEATURES = ("wind_speed_kmh", "dist_km", "wind_dir_deg", "edge_dir_deg", "advection_S")

PBL_COL = NODE_FEATURES.index("pbl_height")
U_COL = METEO_FEATURES.index("u_wind")
V_COL = METEO_FEATURES.index("v_wind")
PRECIP_COL = METEO_FEATURES.index("precipitation")

WIND_CONVENTIONS = ("toward", "from")


@dataclass(frozen=True)
class NodePanel:
    values: np.ndarray  # [T, N, p]
    timestamps: np.ndarray  # [T] epoch seconds
    feature_names: tuple[str, ...] = NODE_FEATURES

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[2] != len(self.feature_names):
            raise ValueError(f"node panel shape {self.values.shape} does not match {len(self.feature_names)} features")
        if len(self.timestamps) != self.values.shape[0]:
            raise ValueError("one timestamp per timestep required")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) != STEP_SECONDS):
            raise ValueError(f"timestamps must advance by exactly {STEP_SECONDS} s")


@dataclass(frozen=True)
class EdgePanel:
    values: np.ndarray  # [T, M, q], rows follow topology.edges
    feature_names: tuple[str, ...] = EDGE_FEATURES


def wind_direction_deg(u, v, convention: str = "toward") -> np.ndarray:
    """Compass direction of the wind vector (u east, v north).

    ``toward`` is the direction the air moves to; ``from`` is the
    meteorological direction it comes from.
    """
    if convention not in WIND_CONVENTIONS:
        raise ValueError(f"wind convention must be one of {WIND_CONVENTIONS}, got {convention!r}")
    u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    if convention == "from":
        u, v = -u, -v
    return np.mod(np.degrees(np.arctan2(u, v)), 360.0)


def advection_coefficient(u_ms, v_ms, dist_km, edge_bearing_deg, convention: str = "toward"):
    """Wind-driven transport strength from a source toward a sink.

    Returns ``(speed_kmh, wind_dir_deg, S)`` with
    ``S = max(0, speed_kmh / dist_km * cos(alpha))`` and alpha the angle
    between wind direction and edge bearing folded into [0, 180].

    >>> advection_coefficient(0.0, 10.0, 100.0, 0.0)[2]
    0.36
    """
    dist_km = np.asarray(dist_km, dtype=float)
    if np.any(dist_km <= 0):
        raise ValueError("advection_coefficient: distance must be positive")
    u_ms, v_ms = np.asarray(u_ms, dtype=float), np.asarray(v_ms, dtype=float)
    speed = 3.6 * np.hypot(u_ms, v_ms)
    beta = wind_direction_deg(u_ms, v_ms, convention)
    alpha = np.abs(np.asarray(edge_bearing_deg, dtype=float) - beta) % 360.0
    alpha = np.where(alpha > 180.0, 360.0 - alpha, alpha)
    s = np.maximum(0.0, speed / dist_km * np.cos(np.radians(alpha)))
    if s.ndim == 0:
        return float(speed), float(beta), float(s)
    return speed, beta, s


def temporal_encoding(timestamp) -> np.ndarray:
    """``[sin_h, cos_h, sin_d, cos_d]`` for hour-of-day and weekday (UTC, Monday = 0)."""
    ts = np.atleast_1d(np.asarray(timestamp, dtype=np.int64))
    out = np.empty((ts.size, 4))
    for k, t in enumerate(ts):
        dt = datetime.fromtimestamp(int(t), tz=timezone.utc)
        hour = dt.hour + dt.minute / 60.0 + dt.second / 3600.0
        out[k] = (
            np.sin(2 * np.pi * hour / 24),
            np.cos(2 * np.pi * hour / 24),
            np.sin(2 * np.pi * dt.weekday() / 7),
            np.cos(2 * np.pi * dt.weekday() / 7),
        )
    return out[0] if np.ndim(timestamp) == 0 else out


def build_node_panel(meteo: np.ndarray, timestamps) -> NodePanel:
    """Append temporal encodings to raw ``[T, N, 8]`` meteorology."""
    meteo = np.asarray(meteo, dtype=float)
    if meteo.ndim != 3 or meteo.shape[2] != len(METEO_FEATURES):
        raise ValueError(f"meteorology must be [T, N, {len(METEO_FEATURES)}], got {meteo.shape}")
    timestamps = np.asarray(timestamps, dtype=np.int64)
    enc = temporal_encoding(timestamps)  # [T, 4]
    enc = np.broadcast_to(enc[:, None, :], meteo.shape[:2] + (4,))
    return NodePanel(np.concatenate([meteo, enc], axis=2), timestamps)


def build_edge_panel(meteo: np.ndarray, topology: GraphTopology, convention: str = "toward") -> EdgePanel:
    """Table of per-edge attributes using each edge's source-node wind."""
    meteo = np.asarray(meteo, dtype=float)
    if meteo.ndim != 3 or meteo.shape[1] != topology.n_nodes:
        raise ValueError(
            f"build_edge_panel: panel has {meteo.shape[1] if meteo.ndim == 3 else '?'} nodes, "
            f"topology has {topology.n_nodes}"
        )
    n_t, m = meteo.shape[0], topology.n_edges
    u = meteo[:, topology.src, U_COL]
    v = meteo[:, topology.src, V_COL]
    dist = np.broadcast_to(topology.dist_km, (n_t, m))
    gamma = np.broadcast_to(topology.bearing_deg, (n_t, m))
    if m == 0:
        return EdgePanel(np.zeros((n_t, 0, len(EDGE_FEATURES))))
    speed, beta, s = advection_coefficient(u, v, dist, gamma, convention)
    return EdgePanel(np.stack([speed, dist, beta, gamma, s], axis=2))


@dataclass
class Standardizer:
    """Per-feature affine scaling fit on the training range only."""

    node_mean: np.ndarray | None = None
    node_std: np.ndarray | None = None
    edge_mean: np.ndarray | None = None
    edge_std: np.ndarray | None = None
    pm25_mean: float | None = None
    pm25_std: float | None = None
    zero_variance: list[str] = field(default_factory=list)

    @property
    def fitted(self) -> bool:
        return self.node_mean is not None

    def _require(self):
        if not self.fitted:
            raise RuntimeError("standardizer used before fit")

    def apply_nodes(self, values):
        self._require()
        return (np.asarray(values) - self.node_mean) / self.node_std

    def apply_edges(self, values):
        self._require()
        if np.asarray(values).shape[-2] == 0:
            return np.asarray(values, dtype=float)
        return (np.asarray(values) - self.edge_mean) / self.edge_std

    def apply_pm25(self, values):
        self._require()
        return (np.asarray(values) - self.pm25_mean) / self.pm25_std

    def invert_prediction(self, values):
        """Back to physical units, clamped to the reporting range."""
        self._require()
        return np.clip(np.asarray(values) * self.pm25_std + self.pm25_mean, PM25_MIN, PM25_MAX)

    def to_json(self) -> dict:
        self._require()
        return {
            "node_mean": self.node_mean.tolist(),
            "node_std": self.node_std.tolist(),
            "edge_mean": self.edge_mean.tolist(),
            "edge_std": self.edge_std.tolist(),
            "pm25_mean": self.pm25_mean,
            "pm25_std": self.pm25_std,
            "zero_variance": list(self.zero_variance),
        }

    @classmethod
    def from_json(cls, d: dict) -> Standardizer:
        return cls(
            np.asarray(d["node_mean"], dtype=float),
            np.asarray(d["node_std"], dtype=float),
            np.asarray(d["edge_mean"], dtype=float),
            np.asarray(d["edge_std"], dtype=float),
            float(d["pm25_mean"]),
            float(d["pm25_std"]),
            list(d.get("zero_variance", [])),
        )


def range_index(train_range) -> np.ndarray:
    """Timestep indices from a list of half-open ``(start, end)`` intervals."""
    if isinstance(train_range, np.ndarray):
        return train_range.astype(np.int64)
    if len(train_range) == 2 and all(np.isscalar(x) for x in train_range):
        train_range = [train_range]
    return np.concatenate([np.arange(a, b) for a, b in train_range]).astype(np.int64)


def _moments(x: np.ndarray, names, zero_var: list[str]):
    flat = x.reshape(-1, x.shape[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    for k, s in enumerate(std):
        if not s > 0:
            zero_var.append(names[k])
            log.warning("feature %s has zero variance on the training range; using std=1", names[k])
            std[k] = 1.0
    return mean, std


def fit_standardizer(node_panel, edge_panel, pm25, train_range) -> Standardizer:
    idx = range_index(train_range)
    nodes = node_panel.values if isinstance(node_panel, NodePanel) else np.asarray(node_panel)
    edges = edge_panel.values if isinstance(edge_panel, EdgePanel) else np.asarray(edge_panel)
    zero_var: list[str] = []
    nm, ns = _moments(nodes[idx], NODE_FEATURES if nodes.shape[-1] == len(NODE_FEATURES) else range(nodes.shape[-1]), zero_var)
    if edges.shape[1] == 0:
        em, es = np.zeros(edges.shape[-1]), np.ones(edges.shape[-1])
    else:
        em, es = _moments(edges[idx], EDGE_FEATURES if edges.shape[-1] == len(EDGE_FEATURES) else range(edges.shape[-1]), zero_var)
    pm = np.asarray(pm25, dtype=float)[idx]
    pm = pm[np.isfinite(pm)]
    pstd = float(pm.std())
    if not pstd > 0:
        zero_var.append("pm25")
        log.warning("pm25 has zero variance on the training range; using std=1")
        pstd = 1.0
    return Standardizer(nm, ns, em, es, float(pm.mean()), pstd, zero_var)
