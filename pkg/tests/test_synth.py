import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import random_topology
from pm25gnn import model
from pm25gnn.geograph import City
from pm25gnn.model import ModelSpec, as_constants, init_params
from pm25gnn.synth import (
    SynthConfig,
    SynthError,
    bruteforce_rollout,
    bruteforce_spatial,
    generate_world,
    retention_factor,
    transport_r2,
)

SHORT = dict(n_timesteps=120)
PAIR = (City(0, "a", 35.0, 113.0, 50.0), City(1, "b", 35.5, 113.0, 50.0))


def _quiet(**kw):
    base = dict(emission_mean=0.0, pm25_noise=0.0, wind_noise=0.0, city_wind_noise=0.0, mountains=())
    base.update(kw)
    return SynthConfig(**base)


def test_geometric_decay_is_exact():
    cfg = _quiet(kappa=0.0, decay_base=0.9, dilution=False, n_timesteps=50, n_cities=4, initial_pm25=(100.0, 50.0, 10.0, 1.0))
    x = generate_world(cfg).pm25
    ref = np.empty_like(x)
    ref[0] = cfg.initial_pm25
    for t in range(1, 50):
        ref[t] = 0.9 * ref[t - 1]
    np.testing.assert_array_equal(x, ref)
    np.testing.assert_allclose(x[20], 0.9**20 * x[0], rtol=1e-13)


def test_transport_carries_mass_downwind():
    # city 1 sits due north of city 0 and the wind blows steadily northward
    kw = dict(cities=PAIR, initial_pm25=(200.0, 0.0), wind_u=0.0, wind_v=5.0, n_timesteps=20, dilution=False, decay_base=0.9)
    moving = generate_world(_quiet(kappa=0.15, **kw)).pm25
    still = generate_world(_quiet(kappa=0.0, **kw)).pm25
    assert np.all(still[:, 1] == 0.0)
    assert moving[1, 1] > 0.0
    assert np.all(moving[1:, 1] > still[1:, 1])
    assert moving[1, 0] < still[1, 0]


def test_deterministic_per_seed():
    a, b = generate_world(SynthConfig(seed=5, **SHORT)), generate_world(SynthConfig(seed=5, **SHORT))
    for x, y in ((a.pm25, b.pm25), (a.meteo, b.meteo), (a.grid.heights, b.grid.heights)):
        assert x.tobytes() == y.tobytes()
    assert a.cities == b.cities
    c = generate_world(SynthConfig(seed=6, **SHORT))
    assert not np.array_equal(a.pm25, c.pm25)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000), kappa=st.floats(0.0, 2.0), decay=st.floats(0.5, 1.0))
def test_values_stay_clamped(seed, kappa, decay):
    w = generate_world(SynthConfig(seed=seed, kappa=kappa, decay_base=decay, emission_mean=40.0, pm25_noise=20.0, **SHORT))
    assert w.pm25.min() >= 0.0 and w.pm25.max() <= 500.0


def test_complete_graph_without_mountains():
    cfg = SynthConfig(n_cities=6, lat_min=35.0, lat_max=36.5, lon_min=113.0, lon_max=114.5, mountains=(), **SHORT)
    w = generate_world(cfg)
    assert w.topology.n_edges == 6 * 5


def test_disconnected_world_is_rejected():
    far = (City(0, "a", 30.0, 100.0, 0.0), City(1, "b", 40.0, 120.0, 0.0))
    with pytest.raises(SynthError, match="d_theta"):
        generate_world(SynthConfig(cities=far, lat_min=29, lat_max=41, lon_min=99, lon_max=121, grid_step_deg=0.5, **SHORT))


def test_config_validation():
    with pytest.raises(SynthError):
        SynthConfig(kappa=-0.1)
    with pytest.raises(SynthError):
        SynthConfig(decay_base=1.5)
    with pytest.raises(SynthError):
        SynthConfig(n_cities=1)


def test_retention_monotone():
    pbl = np.linspace(50, 3000, 50)
    assert np.all(np.diff(retention_factor(pbl, 0.0)) < 0)
    rain = np.linspace(0, 0.001, 50)
    assert np.all(np.diff(retention_factor(500.0, rain)) < 0)
    assert np.all((retention_factor(pbl, 0.002) > 0) & (retention_factor(pbl, 0.0) <= 1))


def test_default_world_is_learnable():
    w = generate_world(SynthConfig())
    assert w.pm25.shape == (1440, 12) and w.meteo.shape == (1440, 12, 8)
    assert transport_r2(w) > 0.9
    assert w.to_dataset().manifest.n_timesteps == 1440


def _oracle_case(seed, n, m, t):
    rng = np.random.default_rng(seed)
    topo = random_topology(rng, n, m)
    spec = ModelSpec(seed=seed, e_dim=6, z_dim=4, h_dim=8, psi_hidden=5)
    params = init_params(spec, n, 3, 2)
    for k in params:
        params[k] = params[k] + 0.1 * rng.normal(size=params[k].shape)
    return topo, spec, params, rng.normal(size=(n, 1)), rng.normal(size=(t, n, 3)), rng.normal(size=(t, m, 2))


def test_spatial_oracle_agrees_on_100_instances():
    worst = 0.0
    for seed in range(100):
        n = 2 + seed % 9
        topo, spec, params, x0, P, Q = _oracle_case(seed, n, (seed * 7) % (n * (n - 1) + 1), 1)
        xi = np.concatenate([x0, P[0]], 1)
        for no_export in (False, True):
            fast = model.spatial_step(xi, Q[0], topo, as_constants(params), no_export=no_export).data
            worst = max(worst, float(np.abs(fast - bruteforce_spatial(xi, Q[0], topo, params, no_export)).max()))
    assert worst <= 1e-12


def test_empty_and_symmetric_graphs_give_phi_of_zero():
    topo, spec, params, x0, P, Q = _oracle_case(1, 5, 0, 1)
    z = bruteforce_spatial(np.concatenate([x0, P[0]], 1), Q[0], topo, params)
    np.testing.assert_array_equal(z, np.tile(params["phi.b"], (5, 1)))
    topo, spec, params, x0, P, Q = _oracle_case(2, 5, 20, 1)  # complete digraph
    xi = np.tile([0.3, 1.0, -2.0, 0.5], (5, 1))
    q = np.tile([0.7, -0.1], (20, 1))
    phi0 = params["phi.b"]
    np.testing.assert_allclose(bruteforce_spatial(xi, q, topo, params), np.tile(phi0, (5, 1)), atol=1e-12)
    np.testing.assert_allclose(model.spatial_step(xi, q, topo, as_constants(params)).data, np.tile(phi0, (5, 1)), atol=1e-12)


def test_rollout_oracle_single_step():
    topo, spec, params, x0, P, Q = _oracle_case(3, 4, 7, 1)
    fast = model.rollout(x0, P, Q, topo, as_constants(params), spec).data
    np.testing.assert_allclose(fast, bruteforce_rollout(x0, P, Q, topo, params), rtol=0, atol=1e-12)


@pytest.mark.parametrize("no_export", [False, True])
def test_rollout_oracle_24_steps(no_export):
    topo, spec, params, x0, P, Q = _oracle_case(4, 5, 12, 24)
    spec = ModelSpec(seed=4, e_dim=6, z_dim=4, h_dim=8, psi_hidden=5, no_export=no_export)
    fast = model.rollout(x0, P, Q, topo, as_constants(params), spec).data
    slow = bruteforce_rollout(x0, P, Q, topo, params, no_export)
    assert slow.shape == (24, 5, 1)
    np.testing.assert_allclose(fast, slow, rtol=0, atol=1e-12)
    # each step feeds the next, so a truncated run is a prefix of the full one
    np.testing.assert_array_equal(bruteforce_rollout(x0, P[:5], Q[:5], topo, params, no_export), slow[:5])
