"""Synthetic road worlds with constant-speed trips, for desk-scale experiments.

``grid`` is a plain lattice. ``barrier`` cuts the lattice in two along a
horizontal wall crossable only at the bridge columns, and samples GPS points
sparsely, so straight-line hop distances badly understate the road distance
for trips that cross the wall.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from roadtte.geodesy import cumulative_distances
from roadtte.roadnet import RoadNetwork, shortest_path

KM_PER_DEG_LAT = 111.195


@dataclass(frozen=True)
class WorldConfig:
    kind: str = "grid"
    rows: int = 12
    cols: int = 12
    spacing_km: float = 0.3
    origin_lat: float = 41.15
    origin_lon: float = -8.61
    bridge_cols: tuple = (0,)
    n_trips: int = 300
    speed_kmh: float = 36.0
    interval_s: tuple = (15.0, 15.0)
    jitter_m: float = 8.0
    min_trip_km: float = 1.0
    crossing_fraction: float = 0.0
    n_drivers: int = 20
    min_points: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("grid", "barrier"):
            raise ValueError(f"unknown world kind {self.kind!r}")
        if self.rows < 2 or self.cols < 2:
            raise ValueError("world needs at least 2x2 nodes")


def preset(kind: str, **overrides) -> WorldConfig:
    if kind == "grid":
        cfg = WorldConfig()
    elif kind == "barrier":
        cfg = WorldConfig(kind="barrier", rows=14, cols=14, spacing_km=0.25, interval_s=(60.0, 180.0),
                          jitter_m=8.0, min_trip_km=2.0, crossing_fraction=0.6)
    else:
        raise ValueError(f"unknown world kind {kind!r}")
    return replace(cfg, **overrides)


def _node_id(r: int, c: int, cols: int) -> int:
    return 1000 + r * cols + c


def grid_network(cfg: WorldConfig) -> RoadNetwork:
    dlat = cfg.spacing_km / KM_PER_DEG_LAT
    dlon = cfg.spacing_km / (KM_PER_DEG_LAT * math.cos(math.radians(cfg.origin_lat)))
    ids, lats, lons = [], [], []
    for r in range(cfg.rows):
        for c in range(cfg.cols):
            ids.append(_node_id(r, c, cfg.cols))
            lats.append(cfg.origin_lat + r * dlat)
            lons.append(cfg.origin_lon + c * dlon)
    wall = cfg.rows // 2
    pairs = []
    for r in range(cfg.rows):
        for c in range(cfg.cols):
            i = r * cfg.cols + c
            if c + 1 < cfg.cols:
                pairs.append((i, i + 1, False))
            if r + 1 < cfg.rows:
                if cfg.kind == "barrier" and r + 1 == wall and c not in cfg.bridge_cols:
                    continue
                pairs.append((i, i + cfg.cols, False))
    meta = {"source": "synthetic", "world": cfg.kind, "rows": cfg.rows, "cols": cfg.cols,
            "spacing_km": cfg.spacing_km}
    return RoadNetwork.from_coordinates(ids, lats, lons, pairs, meta)


def _interp(path_lats, path_lons, cum, s):
    j = int(np.searchsorted(cum, s, side="right")) - 1
    j = min(max(j, 0), len(cum) - 2)
    seg = cum[j + 1] - cum[j]
    a = 0.0 if seg == 0 else (s - cum[j]) / seg
    a = min(max(a, 0.0), 1.0)
    return (path_lats[j] + a * (path_lats[j + 1] - path_lats[j]),
            path_lons[j] + a * (path_lons[j + 1] - path_lons[j]))


def _pick_pair(cfg: WorldConfig, rng: np.random.Generator) -> tuple[int, int]:
    wall = cfg.rows // 2
    if cfg.kind == "barrier" and rng.random() < cfg.crossing_fraction:
        r1 = int(rng.integers(0, wall))
        r2 = int(rng.integers(wall, cfg.rows))
        if rng.random() < 0.5:
            r1, r2 = r2, r1
    else:
        r1, r2 = int(rng.integers(cfg.rows)), int(rng.integers(cfg.rows))
    c1, c2 = int(rng.integers(cfg.cols)), int(rng.integers(cfg.cols))
    return _node_id(r1, c1, cfg.cols), _node_id(r2, c2, cfg.cols)


def synthetic_trips(net: RoadNetwork, cfg: WorldConfig) -> list[dict]:
    """Trip records in the line-delimited schema, driven along shortest paths.

    Points are sampled at random intervals from ``cfg.interval_s`` with GPS
    jitter; the last point is the arrival, so ``time`` is exactly the road
    length over the constant speed.
    """
    rng = np.random.default_rng([cfg.seed, 7])
    speed = cfg.speed_kmh / 3600.0  # km/s
    km_per_deg_lon = KM_PER_DEG_LAT * math.cos(math.radians(cfg.origin_lat))
    records = []
    attempts = 0
    while len(records) < cfg.n_trips:
        attempts += 1
        if attempts > 100 * cfg.n_trips:
            raise RuntimeError("could not draw enough trips; world too small for min_trip_km")
        src, dst = _pick_pair(cfg, rng)
        path = shortest_path(net, src, dst)
        if path is None or len(path) < 2:
            continue
        idx = [net.index_of(n) for n in path]
        plats, plons = net.lats[idx], net.lons[idx]
        cum = np.array(cumulative_distances(plats, plons))
        length = cum[-1]
        if length < cfg.min_trip_km:
            continue
        total_time = length / speed
        times = [0.0]
        lo, hi = cfg.interval_s
        while True:
            t = times[-1] + (lo if hi <= lo else float(rng.uniform(lo, hi)))
            if t >= total_time - 1e-9:
                break
            times.append(t)
        times.append(total_time)
        if len(times) < cfg.min_points:
            continue
        lats, lons = [], []
        for t in times:
            la, lo_ = _interp(plats, plons, cum, min(speed * t, length))
            la += rng.normal(0.0, cfg.jitter_m / 1000.0) / KM_PER_DEG_LAT
            lo_ += rng.normal(0.0, cfg.jitter_m / 1000.0) / km_per_deg_lon
            lats.append(la)
            lons.append(lo_)
        dist_gap = cumulative_distances(lats, lons)
        records.append({
            "tripID": f"syn{len(records):05d}",
            "driverID": int(rng.integers(cfg.n_drivers)),
            "dateID": int(rng.integers(1, 31)),
            "weekID": int(rng.integers(7)),
            "timeID": int(rng.integers(1440)),
            "dist": dist_gap[-1],
            "time": total_time,
            "lats": lats,
            "lngs": lons,
            "time_gap": times,
            "dist_gap": dist_gap,
            "route_km": float(length),
        })
    return records


def world_metadata(cfg: WorldConfig) -> dict:
    meta = asdict(cfg)
    meta["bridge_cols"] = list(cfg.bridge_cols)
    meta["interval_s"] = list(cfg.interval_s)
    return meta
