"""Nearest-road-node attribution of GPS points on a uniform lat/lon grid.

The grid only accelerates the search: results are the exact nearest node by
Vincenty distance, ties going to the smallest internal node index.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, fields

import numpy as np

from roadtte.geodesy import WGS84_A, WGS84_F, GeoPoint, GridSpec, cell_of, vincenty_distance
from roadtte.roadnet import RoadNetwork
from roadtte.trips import MappedTrip, Trip

# smallest radius of curvature on WGS-84 (meridional, at the equator), shrunk
# by 1% so ring-termination bounds stay below true geodesic distances
_E2 = WGS84_F * (2 - WGS84_F)
BOUND_RADIUS_KM = 0.99 * WGS84_A * (1 - _E2)


class MatcherConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GridIndex:
    spec: GridSpec
    buckets: dict  # (row, col) -> tuple of internal node indices, ascending
    overflow: tuple


@dataclass(frozen=True)
class AttributionResult:
    node_id: int
    index: int
    error_km: float


def build_index(net: RoadNetwork, cell_deg: float = 0.005, spec: GridSpec | None = None) -> GridIndex:
    if not (cell_deg > 0):
        raise MatcherConfigError(f"cell_deg must be > 0, got {cell_deg}")
    if net.n_nodes == 0:
        raise MatcherConfigError("cannot index an empty network")
    spec = spec or net.bbox(cell_deg)
    buckets: dict = defaultdict(list)
    overflow = []
    for i, (lat, lon) in enumerate(zip(net.lats.tolist(), net.lons.tolist())):
        cell = cell_of(GeoPoint(lat, lon), spec)
        if cell is None:
            overflow.append(i)
        else:
            buckets[cell].append(i)
    return GridIndex(spec, {k: tuple(v) for k, v in buckets.items()}, tuple(overflow))


def _lat_gap_bound(p: GeoPoint, lat: float) -> float:
    return BOUND_RADIUS_KM * abs(math.radians(lat - p.lat))


def _lon_gap_bound(p: GeoPoint, lon: float) -> float:
    dlon = min(abs(math.radians(lon - p.lon)), math.pi / 2)
    inner = math.cos(math.radians(p.lat)) * math.sin(dlon)
    return BOUND_RADIUS_KM * math.asin(min(1.0, inner))


def nearest_node(idx: GridIndex, net: RoadNetwork, p: GeoPoint) -> AttributionResult:
    """Exact nearest node to ``p``, searched in square rings of grid cells."""
    spec = idx.spec
    lats, lons = net.lats, net.lons
    best_d, best_i = math.inf, -1

    def consider(i: int):
        nonlocal best_d, best_i
        d = vincenty_distance(p, GeoPoint(float(lats[i]), float(lons[i])))
        if d < best_d or (d == best_d and i < best_i):
            best_d, best_i = d, i

    for i in idx.overflow:
        consider(i)

    # start from the cell nearest to p, even when p is outside the grid
    clamped = GeoPoint(
        min(max(p.lat, spec.min_corner.lat), spec.max_corner.lat),
        min(max(p.lon, spec.min_corner.lon), spec.max_corner.lon),
    )
    r0, c0 = cell_of(clamped, spec)
    buckets = idx.buckets
    ring = 0
    while True:
        row_lo, row_hi = r0 - ring, r0 + ring
        col_lo, col_hi = c0 - ring, c0 + ring
        for r in range(max(row_lo, 0), min(row_hi, spec.n_rows - 1) + 1):
            full_row = r in (row_lo, row_hi)
            step = 1 if full_row else max(col_hi - col_lo, 1)
            for c in range(col_lo, col_hi + 1, step):
                if 0 <= c < spec.n_cols:
                    for i in buckets.get((r, c), ()):
                        consider(i)

        # lower bound on the distance to any cell not yet visited
        bounds = []
        if row_lo > 0:
            lo = spec.row_bounds(row_lo)[0]
            bounds.append(0.0 if p.lat <= lo else _lat_gap_bound(p, lo))
        if row_hi < spec.n_rows - 1:
            hi = spec.row_bounds(row_hi)[1]
            bounds.append(0.0 if p.lat >= hi else _lat_gap_bound(p, hi))
        if col_lo > 0:
            lo = spec.col_bounds(col_lo)[0]
            bounds.append(0.0 if p.lon <= lo else _lon_gap_bound(p, lo))
        if col_hi < spec.n_cols - 1:
            hi = spec.col_bounds(col_hi)[1]
            bounds.append(0.0 if p.lon >= hi else _lon_gap_bound(p, hi))
        if not bounds or best_d < min(bounds):
            break
        ring += 1
    return AttributionResult(int(net.node_ids[best_i]), best_i, best_d)


def linear_scan_nearest(net: RoadNetwork, p: GeoPoint) -> AttributionResult:
    """Reference exhaustive search with the same tie-break."""
    best_d, best_i = math.inf, -1
    for i, (lat, lon) in enumerate(zip(net.lats.tolist(), net.lons.tolist())):
        d = vincenty_distance(p, GeoPoint(lat, lon))
        if d < best_d:
            best_d, best_i = d, i
    return AttributionResult(int(net.node_ids[best_i]), best_i, best_d)


def attribute_points(idx: GridIndex, net: RoadNetwork, lats, lons) -> list[AttributionResult]:
    return [nearest_node(idx, net, GeoPoint(float(a), float(b))) for a, b in zip(lats, lons)]


def attribution_histogram(errors_km, bucket_km: float) -> list[tuple[float, float, int]]:
    """Counts of attribution errors in ``[i*bucket_km, (i+1)*bucket_km)`` buckets.

    Buckets run from 0 up to the one holding the largest error.
    """
    if not bucket_km > 0:
        raise MatcherConfigError(f"bucket_km must be > 0, got {bucket_km}")
    errors = np.asarray(list(errors_km), dtype=np.float64)
    if errors.size == 0:
        return []
    slots = np.floor(errors / bucket_km).astype(np.int64)
    counts = np.bincount(slots)
    return [(i * bucket_km, (i + 1) * bucket_km, int(n)) for i, n in enumerate(counts.tolist())]


def format_histogram_csv(rows) -> str:
    lines = ["bucket_lo_km,bucket_hi_km,count"]
    lines += [f"{lo:.6f},{hi:.6f},{n}" for lo, hi, n in rows]
    return "\n".join(lines) + "\n"


def attribute_trip(idx: GridIndex, net: RoadNetwork, trip: Trip) -> MappedTrip:
    """Attribute every point of ``trip`` to its nearest road node."""
    results = attribute_points(idx, net, trip.lats, trip.lons)
    nodes = np.array([r.index for r in results], dtype=np.int64)
    base = {f.name: getattr(trip, f.name) for f in fields(Trip)}
    return MappedTrip(
        **base,
        node_ids=net.node_ids[nodes].copy(),
        node_lats=net.lats[nodes].copy(),
        node_lons=net.lons[nodes].copy(),
        attribution_errors=np.array([r.error_km for r in results]),
        raw_dist_gap=np.asarray(trip.dist_gap, dtype=np.float64).copy(),
    )
