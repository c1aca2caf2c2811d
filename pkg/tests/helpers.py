"""Shared fixtures-by-hand for the test modules."""

import numpy as np

from pm25gnn.geograph import City, ElevationGrid, GraphTopology, bearing_deg, haversine_km

KM_PER_DEG = 2 * np.pi * 6371.0 / 360.0


def flat_grid(lat0=30.0, lon0=110.0, span=8.0, step=0.1, height=0.0) -> ElevationGrid:
    n = int(round(span / step)) + 1
    return ElevationGrid(lat0, lon0, step, step, np.full((n, n), height))


def pair_north(dist_km: float, lat=35.0, lon=113.0, alt=0.0):
    """Two sea-level cities on one meridian ``dist_km`` apart."""
    return [City(0, "a", lat, lon, alt), City(1, "b", lat + dist_km / KM_PER_DEG, lon, alt)]


def ridge_grid(cities, peak_m: float, sigma_deg: float = 0.05, step: float = 0.005) -> ElevationGrid:
    """East-west Gaussian ridge crossing the midpoint of a north-south city pair."""
    mid = 0.5 * (cities[0].lat + cities[1].lat)
    lat0, lon0 = cities[0].lat - 0.5, cities[0].lon - 0.5
    nr = int(round((abs(cities[1].lat - cities[0].lat) + 1.0) / step)) + 1
    nc = int(round(1.0 / step)) + 1
    lats = lat0 + step * np.arange(nr)
    h = peak_m * np.exp(-((lats - mid) ** 2) / (2 * sigma_deg**2))
    return ElevationGrid(lat0, lon0, step, step, np.repeat(h[:, None], nc, axis=1))


def random_topology(rng, n: int, m: int) -> GraphTopology:
    """Random directed graph (not necessarily symmetric) with ``m`` distinct edges."""
    cities = [City(i, f"c{i}", 30 + rng.uniform(0, 2), 110 + rng.uniform(0, 2), 0.0) for i in range(n)]
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    pick = sorted(rng.choice(len(pairs), size=min(m, len(pairs)), replace=False)) if m else []
    edges = np.array([pairs[k] for k in pick], dtype=np.int64).reshape(-1, 2)
    dist = [haversine_km(cities[s], cities[d]) for s, d in edges]
    bear = [bearing_deg(cities[s], cities[d]) for s, d in edges]
    return GraphTopology(tuple(cities), edges, dist, bear)
