"""Synthetic transport world and loop-based reference implementations.

The world is a handful of cities in a lat/lon box with Gaussian mountains.
Pollutant evolves by local retention, wind-driven exchange along graph edges
and diurnal emissions::

    X[t+1, i] = clip(decay[t, i] * X[t, i]
                     + kappa * sum_j (S[t, j->i] * X[t, j] - S[t, i->j] * X[t, i])
                     + E[t, i], 0, 500)

The brute-force functions at the bottom re-derive one message-passing step and
a full forecast with explicit Python loops; they share no code with
:mod:`pm25gnn.model` and serve as test oracles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .dataio import Dataset, DatasetManifest
from .featurize import METEO_FEATURES, PM25_MAX, PM25_MIN, STEP_SECONDS, advection_coefficient
from .geograph import D_THETA_KM, M_THETA_M, City, ElevationGrid, GraphTopology, build_adjacency, haversine_km

T0_DEFAULT = 1420070400  # 2015-01-01T00:00:00Z


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class Mountain:
    lat: float
    lon: float
    height_m: float
    radius_deg: float


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_cities: int = 12
    lat_min: float = 34.0
    lat_max: float = 38.0
    lon_min: float = 112.0
    lon_max: float = 116.0
    n_timesteps: int = 1440
    t0: int = T0_DEFAULT
    kappa: float = 0.15
    decay_base: float = 0.96
    dilution: bool = True
    emission_mean: float = 5.0
    emission_sigma: float = 0.8
    diurnal_amplitude: float = 0.4
    wind_u: float = 2.0
    wind_v: float = 1.0
    wind_noise: float = 4.0
    wind_phi: float = 0.8
    pbl_phi: float = 0.7
    city_wind_noise: float = 0.5
    pm25_noise: float = 1.0
    min_separation_km: float = 40.0
    base_elevation_m: float = 50.0
    mountains: tuple[Mountain, ...] = (Mountain(36.0, 114.0, 2500.0, 0.35),)
    grid_step_deg: float = 0.05
    d_theta_km: float = D_THETA_KM
    m_theta_m: float = M_THETA_M
    cities: tuple[City, ...] | None = None
    initial_pm25: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kappa < 0:
            raise SynthError("kappa must be >= 0")
        if not 0.0 <= self.decay_base <= 1.0:
            raise SynthError("decay_base must lie in [0, 1]")
        n = len(self.cities) if self.cities is not None else self.n_cities
        if n < 2:
            raise SynthError("need at least 2 cities")
        if self.n_timesteps < 2:
            raise SynthError("need at least 2 timesteps")
        if self.lat_max <= self.lat_min or self.lon_max <= self.lon_min:
            raise SynthError("empty bounding box")
        if not (0.0 <= self.wind_phi < 1.0 and 0.0 <= self.pbl_phi < 1.0):
            raise SynthError("wind_phi and pbl_phi must lie in [0, 1)")
        for name in ("emission_mean", "emission_sigma", "wind_noise", "city_wind_noise", "pm25_noise", "grid_step_deg"):
            if getattr(self, name) < 0:
                raise SynthError(f"{name} must be non-negative")
        object.__setattr__(self, "mountains", tuple(m if isinstance(m, Mountain) else Mountain(*m) for m in self.mountains))

    @classmethod
    def scalar_fields(cls) -> dict[str, object]:
        """Name -> default for every plain scalar option (used by config files)."""
        return {f.name: f.default for f in fields(cls) if f.name not in ("mountains", "cities", "initial_pm25")}


@dataclass
class SynthWorld:
    cities: list[City]
    grid: ElevationGrid
    topology: GraphTopology
    meteo: np.ndarray  # [T, N, 8] physical units
    pm25: np.ndarray  # [T, N]
    timestamps: np.ndarray
    emissions: np.ndarray = field(repr=False)  # [T, N]

    def __iter__(self):
        return iter((self.cities, self.grid, self.meteo, self.pm25))

    def to_dataset(self, name: str = "synth") -> Dataset:
        manifest = DatasetManifest(name, len(self.cities), len(self.timestamps), int(self.timestamps[0]))
        return Dataset(manifest, list(self.cities), self.grid, self.meteo, self.pm25)


def retention_factor(pbl_m, precip_m) -> np.ndarray:
    """Fraction of pollutant kept per step: more under a shallow boundary layer, less in rain."""
    pbl_m = np.asarray(pbl_m, dtype=float)
    precip_mm = 1000.0 * np.asarray(precip_m, dtype=float)
    shallow = 1.0 / (1.0 + np.exp(-(800.0 - pbl_m) / 200.0))
    return (0.9 + 0.1 * shallow) * (1.0 - 0.3 * np.minimum(precip_mm, 1.0))


def elevation_grid(cfg: SynthConfig, margin_deg: float = 0.5) -> ElevationGrid:
    lat0, lon0 = cfg.lat_min - margin_deg, cfg.lon_min - margin_deg
    nr = int(math.ceil((cfg.lat_max - cfg.lat_min + 2 * margin_deg) / cfg.grid_step_deg)) + 1
    nc = int(math.ceil((cfg.lon_max - cfg.lon_min + 2 * margin_deg) / cfg.grid_step_deg)) + 1
    lats = lat0 + cfg.grid_step_deg * np.arange(nr)
    lons = lon0 + cfg.grid_step_deg * np.arange(nc)
    la, lo = np.meshgrid(lats, lons, indexing="ij")
    h = np.full((nr, nc), cfg.base_elevation_m)
    for m in cfg.mountains:
        r2 = (la - m.lat) ** 2 + (lo - m.lon) ** 2
        h += m.height_m * np.exp(-r2 / (2.0 * m.radius_deg**2))
    return ElevationGrid(lat0, lon0, cfg.grid_step_deg, cfg.grid_step_deg, h)


def _place_cities(cfg: SynthConfig, grid: ElevationGrid, rng) -> list[City]:
    if cfg.cities is not None:
        return list(cfg.cities)
    cities: list[City] = []
    for _ in range(10000 * cfg.n_cities):
        lat = rng.uniform(cfg.lat_min, cfg.lat_max)
        lon = rng.uniform(cfg.lon_min, cfg.lon_max)
        alt = float(grid.height_at(lat, lon))
        cand = City(len(cities), f"city{len(cities):02d}", float(lat), float(lon), alt)
        if all(haversine_km(cand, c) >= cfg.min_separation_km for c in cities):
            cities.append(cand)
            if len(cities) == cfg.n_cities:
                return cities
    raise SynthError(f"could not place {cfg.n_cities} cities {cfg.min_separation_km} km apart; enlarge the box")


def _ar1(rng, n_t: int, shape, phi: float) -> np.ndarray:
    """Unit-variance AR(1) series along axis 0."""
    out = np.empty((n_t,) + tuple(shape))
    out[0] = rng.standard_normal(shape)
    scale = math.sqrt(1.0 - phi * phi)
    for t in range(1, n_t):
        out[t] = phi * out[t - 1] + scale * rng.standard_normal(shape)
    return out


def _meteorology(cfg: SynthConfig, n: int, timestamps: np.ndarray, rng) -> np.ndarray:
    n_t = len(timestamps)
    hour = (timestamps % 86400) / 3600.0
    day = np.clip(np.sin(2 * np.pi * (hour - 6.0) / 24.0), 0.0, None)[:, None]
    meteo = np.empty((n_t, n, len(METEO_FEATURES)))

    synoptic = _ar1(rng, n_t, (1,), cfg.pbl_phi)
    local = _ar1(rng, n_t, (n,), 0.8)
    meteo[:, :, 0] = np.maximum(50.0, (200.0 + 1300.0 * day) * np.exp(0.35 * synoptic + 0.1 * local))

    meteo[:, :, 1] = 20.0 + 8.0 * _ar1(rng, n_t, (1,), 0.9) + 3.0 * _ar1(rng, n_t, (n,), 0.9)

    regional = _ar1(rng, n_t, (2,), cfg.wind_phi)
    for k, (mean, col) in enumerate(((cfg.wind_u, 2), (cfg.wind_v, 3))):
        meteo[:, :, col] = mean + cfg.wind_noise * regional[:, k : k + 1] + cfg.city_wind_noise * _ar1(rng, n_t, (n,), 0.7)

    meteo[:, :, 4] = 280.0 + 6.0 * day + 5.0 * _ar1(rng, n_t, (1,), 0.9) + 1.0 * _ar1(rng, n_t, (n,), 0.9)
    meteo[:, :, 5] = np.clip(60.0 + 15.0 * _ar1(rng, n_t, (1,), 0.9) + 8.0 * _ar1(rng, n_t, (n,), 0.8), 5.0, 100.0)
    rain = 0.8 * _ar1(rng, n_t, (1,), 0.6) + 0.6 * _ar1(rng, n_t, (n,), 0.5)
    meteo[:, :, 6] = 0.001 * np.maximum(0.0, rain - 0.9)  # meters per step
    meteo[:, :, 7] = 101000.0 + 600.0 * _ar1(rng, n_t, (1,), 0.9) + 100.0 * _ar1(rng, n_t, (n,), 0.9)
    return meteo


def generate_world(cfg: SynthConfig) -> SynthWorld:
    rng = np.random.default_rng(cfg.seed)
    grid = elevation_grid(cfg)
    cities = _place_cities(cfg, grid, rng)
    n = len(cities)
    topo = build_adjacency(cities, grid, cfg.d_theta_km, cfg.m_theta_m)
    connected = np.unique(topo.edges) if topo.n_edges else np.zeros(0, int)
    if len(connected) < 2:
        raise SynthError(
            f"only {len(connected)} cities are connected after distance/terrain gating; "
            "use a smaller box or a larger d_theta"
        )
    timestamps = cfg.t0 + STEP_SECONDS * np.arange(cfg.n_timesteps, dtype=np.int64)
    meteo = _meteorology(cfg, n, timestamps, rng)

    base = cfg.emission_mean * np.exp(cfg.emission_sigma * rng.standard_normal(n) - 0.5 * cfg.emission_sigma**2)
    hour = (timestamps % 86400) / 3600.0
    phase = rng.uniform(-1.0, 1.0, n)
    emissions = base * (1.0 + cfg.diurnal_amplitude * np.sin(2 * np.pi * (hour[:, None] - 8.0 + phase) / 24.0))

    if cfg.dilution:
        decay = cfg.decay_base * retention_factor(meteo[:, :, 0], meteo[:, :, 6])
    else:
        decay = np.full((cfg.n_timesteps, n), cfg.decay_base)

    src, dst = topo.src, topo.dst
    if topo.n_edges:
        _, _, s = advection_coefficient(
            meteo[:, src, 2], meteo[:, src, 3], np.broadcast_to(topo.dist_km, (cfg.n_timesteps, topo.n_edges)), topo.bearing_deg
        )
    else:
        s = np.zeros((cfg.n_timesteps, 0))

    x = np.empty((cfg.n_timesteps, n))
    if cfg.initial_pm25 is not None:
        x[0] = np.asarray(cfg.initial_pm25, dtype=float)
    else:
        x[0] = base / max(1e-3, 1.0 - cfg.decay_base)
    x[0] = np.clip(x[0], PM25_MIN, PM25_MAX)
    noise = cfg.pm25_noise * rng.standard_normal((cfg.n_timesteps, n))
    for t in range(cfg.n_timesteps - 1):
        nxt = decay[t] * x[t]
        if cfg.kappa:
            inflow = np.bincount(dst, weights=s[t] * x[t, src], minlength=n)
            outflow = x[t] * np.bincount(src, weights=s[t], minlength=n)
            nxt = nxt + cfg.kappa * (inflow - outflow)
        nxt = nxt + emissions[t]
        if cfg.pm25_noise:
            nxt = nxt + noise[t]
        x[t + 1] = np.clip(nxt, PM25_MIN, PM25_MAX)
    return SynthWorld(cities, grid, topo, meteo, x, timestamps, emissions)


def transport_r2(world: SynthWorld) -> float:
    """R^2 of a least-squares fit of X[t+1] on (1, X[t], inflow[t], outflow[t]).

    Inflow and outflow are the advection-weighted neighbor and own
    concentrations. A high value says the series is predictable from
    local state plus wind transport.
    """
    topo, x = world.topology, world.pm25
    n_t, n = x.shape
    _, _, s = advection_coefficient(
        world.meteo[:, topo.src, 2], world.meteo[:, topo.src, 3], np.broadcast_to(topo.dist_km, (n_t, topo.n_edges)), topo.bearing_deg
    )
    inflow = np.stack([np.bincount(topo.dst, weights=s[t] * x[t, topo.src], minlength=n) for t in range(n_t)])
    outflow = x * np.stack([np.bincount(topo.src, weights=s[t], minlength=n) for t in range(n_t)])
    a = np.stack([np.ones((n_t - 1) * n), x[:-1].ravel(), inflow[:-1].ravel(), outflow[:-1].ravel()], axis=1)
    y = x[1:].ravel()
    coef, *_ = np.linalg.lstsq(a, y, rcond=None)
    resid = y - a @ coef
    return float(1.0 - resid @ resid / np.sum((y - y.mean()) ** 2))


# -- loop-based oracles --------------------------------------------------------------


def _sig(v: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-v))


def _affine(v: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.array(b, dtype=float, copy=True)
    for k in range(w.shape[1]):
        out[k] += sum(v[r] * w[r, k] for r in range(w.shape[0]))
    return out


def _psi(a: np.ndarray, params) -> np.ndarray:
    hid = _sig(_affine(a, params["psi.W1"], params["psi.b1"]))
    return _affine(hid, params["psi.W2"], params["psi.b2"])


def bruteforce_spatial(xi, Q, topology, params, no_export: bool = False) -> np.ndarray:
    """One message-passing step with nested loops over nodes and neighbors.

    xi: [N, d] node representations; Q: [M, q] edge attributes ordered like
    ``topology.edges``. Returns [N, z].
    """
    xi = np.asarray(xi, dtype=float)
    Q = np.asarray(Q, dtype=float)
    params = {k: np.asarray(getattr(v, "data", v), dtype=float) for k, v in params.items()}
    edge_row = {(int(s), int(d)): k for k, (s, d) in enumerate(topology.edges)}
    e_dim = params["psi.W2"].shape[1]
    zeta = []
    for i in range(topology.n_nodes):
        acc = np.zeros(e_dim)
        for j in topology.in_nbrs[i]:
            acc += _psi(np.concatenate([xi[j], xi[i], Q[edge_row[(j, i)]]]), params)
        if not no_export:
            for j in topology.out_nbrs[i]:
                acc -= _psi(np.concatenate([xi[i], xi[j], Q[edge_row[(i, j)]]]), params)
        zeta.append(_affine(acc, params["phi.W"], params["phi.b"]))
    return np.array(zeta)


def _gru_node(x: np.ndarray, h: np.ndarray, params) -> np.ndarray:
    hx = np.concatenate([h, x])
    z = _sig(_affine(hx, params["gru.W_z"], params["gru.b_z"]))
    r = _sig(_affine(hx, params["gru.W_r"], params["gru.b_r"]))
    cand = np.tanh(_affine(np.concatenate([r * h, x]), params["gru.W_h"], params["gru.b_h"]))
    return (1.0 - z) * h + z * cand


def bruteforce_rollout(x0, P, Q, topology, params, no_export: bool = False) -> np.ndarray:
    """Step-by-step forecast: message passing, per-node GRU, affine readout.

    x0: [N] or [N, 1]; P: [T, N, p]; Q: [T, M, q]. Returns [T, N, 1] in
    forecast order.
    """
    params = {k: np.asarray(getattr(v, "data", v), dtype=float) for k, v in params.items()}
    P = np.asarray(P, dtype=float)
    x_prev = np.asarray(x0, dtype=float).reshape(-1)
    n = topology.n_nodes
    h = [np.zeros(params["gru.b_z"].shape[0]) for _ in range(n)]
    output_list = []
    for t in range(P.shape[0]):
        xi = np.array([np.concatenate([[x_prev[i]], P[t, i]]) for i in range(n)])
        zeta = bruteforce_spatial(xi, Q[t], topology, params, no_export)
        x_hat = np.empty(n)
        for i in range(n):
            h[i] = _gru_node(np.concatenate([xi[i], zeta[i]]), h[i], params)
            x_hat[i] = _affine(h[i], params["out.W"], params["out.b"])[0]
        output_list.append(x_hat.copy())
        x_prev = x_hat
    return np.array(output_list)[:, :, None]
