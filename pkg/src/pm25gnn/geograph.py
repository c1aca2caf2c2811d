"""Directed city graph gated by distance and intervening terrain.

Two cities are linked (in both directions) when their great-circle distance is
below ``d_theta_km`` and the highest terrain on the straight segment between
them rises less than ``m_theta_m`` above the higher of the two cities.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EARTH_RADIUS_KM = 6371.0
D_THETA_KM = 300.0
M_THETA_M = 1200.0
RIDGE_SAMPLES = 32


class GridBoundsError(ValueError):
    """A queried point lies outside the elevation grid."""


@dataclass(frozen=True)
class City:
    id: int
    name: str
    lat: float
    lon: float
    altitude: float

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"city {self.id}: latitude {self.lat} out of range")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"city {self.id}: longitude {self.lon} out of range")


@dataclass(frozen=True)
class ElevationGrid:
    """Heights in meters at grid nodes ``(lat0 + r*dlat, lon0 + c*dlon)``."""

    lat0: float
    lon0: float
    dlat: float
    dlon: float
    heights: np.ndarray  # [nrows, ncols]

    def __post_init__(self):
        h = np.asarray(self.heights, dtype=float)
        if h.ndim != 2 or min(h.shape) < 2:
            raise ValueError(f"elevation heights must be 2-D with at least 2x2 nodes, got {h.shape}")
        if self.dlat <= 0 or self.dlon <= 0:
            raise ValueError("grid spacing must be positive")
        object.__setattr__(self, "heights", h)

    @property
    def nrows(self) -> int:
        return self.heights.shape[0]

    @property
    def ncols(self) -> int:
        return self.heights.shape[1]

    @property
    def lat_max(self) -> float:
        return self.lat0 + (self.nrows - 1) * self.dlat

    @property
    def lon_max(self) -> float:
        return self.lon0 + (self.ncols - 1) * self.dlon

    def height_at(self, lat, lon) -> np.ndarray:
        """Bilinear interpolation; accepts scalars or arrays."""
        lat = np.asarray(lat, dtype=float)
        lon = np.asarray(lon, dtype=float)
        fr = (lat - self.lat0) / self.dlat
        fc = (lon - self.lon0) / self.dlon
        tol = 1e-9
        if np.any(fr < -tol) or np.any(fr > self.nrows - 1 + tol) or np.any(fc < -tol) or np.any(fc > self.ncols - 1 + tol):
            raise GridBoundsError(
                f"point outside elevation grid [{self.lat0}, {self.lat_max}] x [{self.lon0}, {self.lon_max}]"
            )
        fr = np.clip(fr, 0.0, self.nrows - 1)
        fc = np.clip(fc, 0.0, self.ncols - 1)
        r0 = np.minimum(np.floor(fr).astype(int), self.nrows - 2)
        c0 = np.minimum(np.floor(fc).astype(int), self.ncols - 2)
        tr, tc = fr - r0, fc - c0
        h = self.heights
        return (
            h[r0, c0] * (1 - tr) * (1 - tc)
            + h[r0 + 1, c0] * tr * (1 - tc)
            + h[r0, c0 + 1] * (1 - tr) * tc
            + h[r0 + 1, c0 + 1] * tr * tc
        )


@dataclass(frozen=True)
class GraphTopology:
    """Immutable directed graph; ``edges[k] = (src, dst)``."""

    cities: tuple[City, ...]
    edges: np.ndarray  # [M, 2] int
    dist_km: np.ndarray  # [M]
    bearing_deg: np.ndarray  # [M], direction from src to dst
    d_theta_km: float = D_THETA_KM
    m_theta_m: float = M_THETA_M
    in_nbrs: tuple[tuple[int, ...], ...] = field(init=False, repr=False)
    out_nbrs: tuple[tuple[int, ...], ...] = field(init=False, repr=False)

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "dist_km", np.asarray(self.dist_km, dtype=float).reshape(-1))
        object.__setattr__(self, "bearing_deg", np.asarray(self.bearing_deg, dtype=float).reshape(-1))
        n = len(self.cities)
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise ValueError("edge endpoint out of range")
        if np.any(edges[:, 0] == edges[:, 1]):
            raise ValueError("self-loops are not allowed")
        ins = [[] for _ in range(n)]
        outs = [[] for _ in range(n)]
        for s, d in edges:
            outs[s].append(int(d))
            ins[d].append(int(s))
        object.__setattr__(self, "in_nbrs", tuple(tuple(x) for x in ins))
        object.__setattr__(self, "out_nbrs", tuple(tuple(x) for x in outs))

    @property
    def n_nodes(self) -> int:
        return len(self.cities)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def src(self) -> np.ndarray:
        return self.edges[:, 0]

    @property
    def dst(self) -> np.ndarray:
        return self.edges[:, 1]

    def degree_histogram(self) -> dict[int, int]:
        degs = np.bincount(self.dst, minlength=self.n_nodes) if self.n_edges else np.zeros(self.n_nodes, int)
        values, counts = np.unique(degs, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}

    def permuted(self, perm) -> GraphTopology:
        """Relabel node ``i`` as ``perm[i]``; edge order is kept."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        cities = tuple(
            City(int(k), self.cities[inv[k]].name, self.cities[inv[k]].lat, self.cities[inv[k]].lon, self.cities[inv[k]].altitude)
            for k in range(self.n_nodes)
        )
        return GraphTopology(cities, perm[self.edges], self.dist_km, self.bearing_deg, self.d_theta_km, self.m_theta_m)

    def to_json(self) -> dict:
        return {
            "d_theta_km": self.d_theta_km,
            "m_theta_m": self.m_theta_m,
            "edges": self.edges.tolist(),
            "dist_km": self.dist_km.tolist(),
        }

    @classmethod
    def from_json(cls, payload: dict, cities) -> GraphTopology:
        cities = tuple(cities)
        edges = np.asarray(payload["edges"], dtype=np.int64).reshape(-1, 2)
        bearings = [bearing_deg(cities[s], cities[d]) for s, d in edges]
        return cls(cities, edges, payload["dist_km"], bearings, payload["d_theta_km"], payload["m_theta_m"])


def haversine_km(a: City, b: City) -> float:
    """Great-circle distance in km on a sphere of radius 6371 km."""
    p1, p2 = math.radians(a.lat), math.radians(b.lat)
    dp = p2 - p1
    dl = math.radians(b.lon - a.lon)
    h = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def bearing_deg(a: City, b: City) -> float:
    """Initial great-circle bearing from ``a`` to ``b``, clockwise from north, in [0, 360)."""
    if a.lat == b.lat and a.lon == b.lon:
        raise ValueError(f"bearing undefined for coincident points ({a.lat}, {a.lon})")
    p1, p2 = math.radians(a.lat), math.radians(b.lat)
    dl = math.radians(b.lon - a.lon)
    x = math.sin(dl) * math.cos(p2)
    y = math.cos(p1) * math.sin(p2) - math.sin(p1) * math.cos(p2) * math.cos(dl)
    deg = math.degrees(math.atan2(x, y)) % 360.0
    return 0.0 if deg >= 360.0 else deg


def ridge_height(grid: ElevationGrid, a: City, b: City, n_samples: int = RIDGE_SAMPLES) -> float:
    """Highest interior terrain on the a-b segment minus the higher endpoint altitude.

    Samples ``lambda = k/(n_samples+1)`` for ``k = 1..n_samples`` along the
    straight line in (lat, lon). Negative results mean the path runs through a
    valley below both cities.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    lam = np.arange(1, n_samples + 1) / (n_samples + 1)
    lats = lam * a.lat + (1 - lam) * b.lat
    lons = lam * a.lon + (1 - lam) * b.lon
    return float(np.max(grid.height_at(lats, lons)) - max(a.altitude, b.altitude))


def build_adjacency(
    cities,
    grid: ElevationGrid,
    d_theta_km: float = D_THETA_KM,
    m_theta_m: float = M_THETA_M,
    n_samples: int = RIDGE_SAMPLES,
) -> GraphTopology:
    """Connect every pair with ``d < d_theta`` and ``ridge < m_theta`` in both directions.

    Edges come out sorted by (src, dst). The terrain is only sampled for pairs
    that already pass the distance gate.
    """
    cities = tuple(cities)
    if not cities:
        raise ValueError("build_adjacency: empty city list")
    if [c.id for c in cities] != list(range(len(cities))):
        raise ValueError("city ids must be dense 0..N-1 in order")
    linked = set()
    dist = {}
    for i in range(len(cities)):
        for j in range(i + 1, len(cities)):
            d = haversine_km(cities[i], cities[j])
            if not d_theta_km - d > 0:
                continue
            if not m_theta_m - ridge_height(grid, cities[i], cities[j], n_samples) > 0:
                continue
            linked.add((i, j))
            linked.add((j, i))
            dist[(i, j)] = dist[(j, i)] = d
    edges = sorted(linked)
    return GraphTopology(
        cities,
        np.asarray(edges, dtype=np.int64).reshape(-1, 2),
        [dist[e] for e in edges],
        [bearing_deg(cities[s], cities[t]) for s, t in edges],
        d_theta_km,
        m_theta_m,
    )


# -- file formats ----------------------------------------------------------------


def _write_text(path, text: str) -> None:
    """Whole-file replace via a temp file in the same directory."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_nodes_csv(path) -> list[City]:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["id", "name", "lat", "lon", "altitude"]
        if reader.fieldnames != expected:
            raise ValueError(f"{path}: header must be {','.join(expected)}, got {reader.fieldnames}")
        cities = [
            City(int(row["id"]), row["name"], float(row["lat"]), float(row["lon"]), float(row["altitude"]))
            for row in reader
        ]
    if sorted(c.id for c in cities) != list(range(len(cities))):
        raise ValueError(f"{path}: ids must be dense and unique 0..N-1")
    return sorted(cities, key=lambda c: c.id)


def write_nodes_csv(path, cities) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "name", "lat", "lon", "altitude"])
    for c in cities:
        w.writerow([c.id, c.name, repr(float(c.lat)), repr(float(c.lon)), repr(float(c.altitude))])
    _write_text(path, buf.getvalue())


def read_elevation_grid(path) -> ElevationGrid:
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty elevation file")
    head = lines[0].split()
    if len(head) != 6:
        raise ValueError(f"{path}: header must be 'lat0 lon0 dlat dlon nrows ncols'")
    lat0, lon0, dlat, dlon = map(float, head[:4])
    nrows, ncols = int(head[4]), int(head[5])
    rows = [list(map(float, ln.split())) for ln in lines[1:]]
    if len(rows) != nrows or any(len(r) != ncols for r in rows):
        raise ValueError(f"{path}: expected {nrows} rows of {ncols} heights")
    return ElevationGrid(lat0, lon0, dlat, dlon, np.array(rows))


def write_elevation_grid(path, grid: ElevationGrid) -> None:
    out = [f"{grid.lat0!r} {grid.lon0!r} {grid.dlat!r} {grid.dlon!r} {grid.nrows} {grid.ncols}"]
    out += [" ".join(repr(float(v)) for v in row) for row in grid.heights]
    _write_text(path, "\n".join(out) + "\n")


def write_graph_json(path, topo: GraphTopology) -> None:
    _write_text(path, json.dumps(topo.to_json(), indent=1))


def read_graph_json(path, cities) -> GraphTopology:
    return GraphTopology.from_json(json.loads(Path(path).read_text()), cities)
