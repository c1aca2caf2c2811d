import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import KM_PER_DEG, flat_grid, pair_north, ridge_grid
from pm25gnn.geograph import (
    City,
    ElevationGrid,
    GraphTopology,
    GridBoundsError,
    bearing_deg,
    build_adjacency,
    haversine_km,
    read_elevation_grid,
    read_graph_json,
    read_nodes_csv,
    ridge_height,
    write_elevation_grid,
    write_graph_json,
    write_nodes_csv,
)

coords = st.tuples(st.floats(-80, 80), st.floats(-179, 179))


def test_haversine_identity_and_degree():
    a = City(0, "a", 0.0, 0.0, 0.0)
    assert haversine_km(a, a) == 0.0
    assert haversine_km(a, City(1, "b", 0.0, 1.0, 0.0)) == pytest.approx(KM_PER_DEG, rel=1e-12)
    assert KM_PER_DEG == pytest.approx(111.19, abs=0.01)


@given(coords, coords)
def test_haversine_symmetric_nonnegative(p, q):
    a, b = City(0, "a", *p, 0.0), City(1, "b", *q, 0.0)
    d = haversine_km(a, b)
    assert d >= 0
    assert d == pytest.approx(haversine_km(b, a), rel=1e-12, abs=1e-9)


def test_bearing_cardinal():
    o = City(0, "o", 0.0, 0.0, 0.0)
    assert bearing_deg(o, City(1, "n", 1.0, 0.0, 0.0)) == pytest.approx(0.0, abs=1e-12)
    assert bearing_deg(o, City(1, "e", 0.0, 1.0, 0.0)) == pytest.approx(90.0, abs=1e-12)
    assert bearing_deg(o, City(1, "s", -1.0, 0.0, 0.0)) == pytest.approx(180.0, abs=1e-12)
    with pytest.raises(ValueError):
        bearing_deg(o, o)


@pytest.mark.parametrize("a, b", [((0.0, 0.0), (0.3, 0.4)), ((0.1, 10.0), (-0.2, 10.5)), ((0.0, 0.0), (0.0, -1.0))])
def test_bearing_reverse_differs_by_180_near_equator(a, b):
    ca, cb = City(0, "a", *a, 0.0), City(1, "b", *b, 0.0)
    diff = (bearing_deg(ca, cb) - bearing_deg(cb, ca)) % 360.0
    assert diff == pytest.approx(180.0, abs=0.01)


def test_ridge_flat_is_zero():
    a, b = pair_north(100)
    assert ridge_height(flat_grid(), a, b) == 0.0


def test_ridge_single_cell_peak():
    # one 2000 m node at the segment midpoint; endpoints at 100 m and 300 m
    h = np.zeros((11, 11))
    h[5, 5] = 2000.0
    grid = ElevationGrid(0.0, 0.0, 0.1, 0.1, h)
    a, b = City(0, "a", 0.5, 0.05, 100.0), City(1, "b", 0.5, 0.95, 300.0)
    lam = 16 / 33  # closest sample to the midpoint
    lon = lam * 0.05 + (1 - lam) * 0.95
    expected = 2000.0 * (1 - abs(lon - 0.5) / 0.1) - 300.0
    got = ridge_height(grid, a, b, 32)
    assert got == pytest.approx(expected, abs=1e-9)
    assert got <= 1700.0
    # finer sampling hits the midpoint exactly
    assert ridge_height(grid, a, b, 33) == pytest.approx(1700.0, abs=1e-9)


def test_ridge_endpoints_on_summit_nonpositive():
    lats = np.linspace(0, 1, 21)
    h = np.repeat((1000 - 900 * lats)[:, None], 21, axis=1)  # monotone slope down to the north
    grid = ElevationGrid(0.0, 0.0, 0.05, 0.05, h)
    a = City(0, "top", 0.0, 0.5, 1000.0)
    b = City(1, "low", 1.0, 0.5, 100.0)
    assert ridge_height(grid, a, b) <= 0.0


def test_ridge_outside_grid():
    a, b = pair_north(100, lat=50.0)
    with pytest.raises(GridBoundsError):
        ridge_height(flat_grid(), a, b)


@pytest.mark.parametrize("peak", [1000.0, 1500.0, 2500.0])
def test_ridge_within_five_percent_of_designed_peak(peak):
    cities = pair_north(100)
    got = ridge_height(ridge_grid(cities, peak), *cities)
    assert abs(got - peak) <= 0.05 * peak


def test_gating_examples():
    assert build_adjacency(pair_north(350), flat_grid()).n_edges == 0
    topo = build_adjacency(pair_north(100), flat_grid())
    assert topo.edges.tolist() == [[0, 1], [1, 0]]
    c = pair_north(100)
    assert build_adjacency(c, ridge_grid(c, 1500.0)).n_edges == 0
    assert build_adjacency(c, ridge_grid(c, 1000.0)).n_edges == 2


def test_distance_gate_is_strict():
    c = pair_north(100)
    d = haversine_km(*c)
    assert build_adjacency(c, flat_grid(), d_theta_km=d).n_edges == 0
    assert build_adjacency(c, flat_grid(), d_theta_km=d + 1e-9).n_edges == 2


def test_empty_city_list():
    with pytest.raises(ValueError):
        build_adjacency([], flat_grid())


def _random_cities(rng, n):
    return [City(i, f"c{i}", 31 + rng.uniform(0, 5), 111 + rng.uniform(0, 5), rng.uniform(0, 400)) for i in range(n)]


def _bumpy_grid(rng):
    g = flat_grid(span=8.0, step=0.1)
    lat = g.lat0 + g.dlat * np.arange(g.nrows)[:, None]
    lon = g.lon0 + g.dlon * np.arange(g.ncols)[None, :]
    h = np.zeros_like(g.heights)
    for _ in range(4):
        cl, co = rng.uniform(31, 36), rng.uniform(111, 116)
        h += rng.uniform(500, 3000) * np.exp(-((lat - cl) ** 2 + (lon - co) ** 2) / (2 * 0.3**2))
    return ElevationGrid(g.lat0, g.lon0, g.dlat, g.dlon, h)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_adjacency_symmetric_and_gated(seed):
    rng = np.random.default_rng(seed)
    cities, grid = _random_cities(rng, 8), _bumpy_grid(rng)
    topo = build_adjacency(cities, grid)
    edges = {tuple(e) for e in topo.edges.tolist()}
    assert all((j, i) in edges for i, j in edges)
    assert all(i != j for i, j in edges)
    for (i, j), d in zip(topo.edges.tolist(), topo.dist_km):
        assert d < 300 and ridge_height(grid, cities[i], cities[j]) < 1200
    # brute-force pair check
    expect = {
        (i, j)
        for i in range(8)
        for j in range(8)
        if i != j and haversine_km(cities[i], cities[j]) < 300 and ridge_height(grid, cities[i], cities[j]) < 1200
    }
    assert edges == expect


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), d1=st.floats(50, 400), d2=st.floats(50, 400), m1=st.floats(0, 3000), m2=st.floats(0, 3000))
def test_threshold_monotonicity(seed, d1, d2, m1, m2):
    rng = np.random.default_rng(seed)
    cities, grid = _random_cities(rng, 7), _bumpy_grid(rng)
    lo = build_adjacency(cities, grid, min(d1, d2), min(m1, m2))
    hi = build_adjacency(cities, grid, max(d1, d2), max(m1, m2))
    assert {tuple(e) for e in lo.edges.tolist()} <= {tuple(e) for e in hi.edges.tolist()}


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 40))
def test_ridge_swap_invariant_and_refinement(seed, n):
    rng = np.random.default_rng(seed)
    a, b = _random_cities(rng, 2)
    grid = _bumpy_grid(rng)
    assert ridge_height(grid, a, b, n) == pytest.approx(ridge_height(grid, b, a, n), abs=1e-9)
    # 2n+1 samples contain the n-sample points, so the max cannot drop
    assert ridge_height(grid, a, b, 2 * n + 1) >= ridge_height(grid, a, b, n) - 1e-9


def test_file_round_trips(tmp_path):
    rng = np.random.default_rng(5)
    cities, grid = _random_cities(rng, 5), _bumpy_grid(rng)
    write_nodes_csv(tmp_path / "nodes.csv", cities)
    write_elevation_grid(tmp_path / "elevation.grid", grid)
    assert read_nodes_csv(tmp_path / "nodes.csv") == cities
    g2 = read_elevation_grid(tmp_path / "elevation.grid")
    assert np.array_equal(g2.heights, grid.heights) and (g2.lat0, g2.dlon) == (grid.lat0, grid.dlon)
    topo = build_adjacency(cities, grid)
    write_graph_json(tmp_path / "graph.json", topo)
    payload = json.loads((tmp_path / "graph.json").read_text())
    assert set(payload) == {"d_theta_km", "m_theta_m", "edges", "dist_km"}
    t2 = read_graph_json(tmp_path / "graph.json", cities)
    assert np.array_equal(t2.edges, topo.edges) and np.array_equal(t2.dist_km, topo.dist_km)


def test_bad_inputs(tmp_path):
    (tmp_path / "n.csv").write_text("id,name,lat\n0,a,1\n")
    with pytest.raises(ValueError):
        read_nodes_csv(tmp_path / "n.csv")
    (tmp_path / "e.grid").write_text("0 0 1 1 2 2\n1 2\n")
    with pytest.raises(ValueError):
        read_elevation_grid(tmp_path / "e.grid")
    with pytest.raises(ValueError):
        City(0, "x", 91.0, 0.0, 0.0)


def test_topology_rejects_self_loops():
    c = pair_north(10)
    with pytest.raises(ValueError):
        GraphTopology(tuple(c), [[0, 0]], [0.0], [0.0])


def test_degree_histogram():
    c = [City(0, "a", 35.0, 113.0, 0), City(1, "b", 35.5, 113.0, 0), City(2, "c", 39.0, 113.0, 0)]
    topo = build_adjacency(c, flat_grid())
    assert topo.degree_histogram() == {0: 1, 1: 2}
