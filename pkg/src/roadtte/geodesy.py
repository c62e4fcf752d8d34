"""Geodesic distances on the WGS-84 ellipsoid and lat/lon grid bucketing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

# WGS-84
WGS84_A = 6378.137  # km
WGS84_F = 1 / 298.257223563
WGS84_B = (1 - WGS84_F) * WGS84_A
MEAN_RADIUS_KM = 6371.0088

VINCENTY_MAX_ITER = 200
VINCENTY_TOL = 1e-12


@dataclass(frozen=True, order=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValueError(f"non-finite coordinate: ({self.lat}, {self.lon})")
        if not (-90.0 <= self.lat <= 90.0 and -180.0 <= self.lon <= 180.0):
            raise ValueError(f"coordinate out of range: ({self.lat}, {self.lon})")


def haversine_distance(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in km on the mean-radius sphere."""
    if b < a:
        a, b = b, a
    phi1, phi2 = math.radians(a.lat), math.radians(b.lat)
    dphi = phi2 - phi1
    dlmb = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlmb / 2) ** 2
    return 2 * MEAN_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def _vincenty_inverse(lat1, lon1, lat2, lon2):
    """Return the ellipsoidal distance in km, or None when the iteration fails."""
    a, b, f = WGS84_A, WGS84_B, WGS84_F
    L = math.radians(lon2 - lon1)
    U1 = math.atan((1 - f) * math.tan(math.radians(lat1)))
    U2 = math.atan((1 - f) * math.tan(math.radians(lat2)))
    sinU1, cosU1 = math.sin(U1), math.cos(U1)
    sinU2, cosU2 = math.sin(U2), math.cos(U2)

    lam = L
    for _ in range(VINCENTY_MAX_ITER):
        sin_lam, cos_lam = math.sin(lam), math.cos(lam)
        sin_sigma = math.hypot(cosU2 * sin_lam, cosU1 * sinU2 - sinU1 * cosU2 * cos_lam)
        if sin_sigma == 0.0:
            return 0.0  # coincident points
        cos_sigma = sinU1 * sinU2 + cosU1 * cosU2 * cos_lam
        sigma = math.atan2(sin_sigma, cos_sigma)
        sin_alpha = cosU1 * cosU2 * sin_lam / sin_sigma
        cos2_alpha = 1 - sin_alpha**2
        # equatorial line: cos2_alpha == 0
        cos_2sigma_m = cos_sigma - 2 * sinU1 * sinU2 / cos2_alpha if cos2_alpha != 0.0 else 0.0
        C = f / 16 * cos2_alpha * (4 + f * (4 - 3 * cos2_alpha))
        lam_prev = lam
        lam = L + (1 - C) * f * sin_alpha * (
            sigma + C * sin_sigma * (cos_2sigma_m + C * cos_sigma * (-1 + 2 * cos_2sigma_m**2))
        )
        if abs(lam - lam_prev) < VINCENTY_TOL:
            break
    else:
        return None
    if abs(lam) > math.pi:
        return None

    u2 = cos2_alpha * (a**2 - b**2) / b**2
    A = 1 + u2 / 16384 * (4096 + u2 * (-768 + u2 * (320 - 175 * u2)))
    B = u2 / 1024 * (256 + u2 * (-128 + u2 * (74 - 47 * u2)))
    delta_sigma = (
        B
        * sin_sigma
        * (
            cos_2sigma_m
            + B
            / 4
            * (
                cos_sigma * (-1 + 2 * cos_2sigma_m**2)
                - B / 6 * cos_2sigma_m * (-3 + 4 * sin_sigma**2) * (-3 + 4 * cos_2sigma_m**2)
            )
        )
    )
    return b * A * (sigma - delta_sigma)


def vincenty_distance(a: GeoPoint, b: GeoPoint) -> float:
    """Distance in km between two points by Vincenty's inverse formula.

    Arguments are put in a canonical order first so the result is symmetric
    bit-for-bit. Falls back to the haversine distance when the iteration does
    not converge (near-antipodal pairs).
    """
    if a == b:
        return 0.0
    if b < a:
        a, b = b, a
    d = _vincenty_inverse(a.lat, a.lon, b.lat, b.lon)
    if d is None:
        return haversine_distance(a, b)
    return d


def distance_latlon(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    return vincenty_distance(GeoPoint(lat1, lon1), GeoPoint(lat2, lon2))


def cumulative_distances(lats, lons) -> list[float]:
    """Running sum of hop distances along a polyline; element 0 is 0."""
    out = [0.0]
    for i in range(1, len(lats)):
        out.append(out[-1] + distance_latlon(lats[i - 1], lons[i - 1], lats[i], lons[i]))
    return out


@dataclass(frozen=True)
class GridSpec:
    """Regular lat/lon grid over a bounding box.

    Cells are closed at the top: a point lying exactly on a boundary is
    assigned to the lower-index cell, and ``min_corner`` itself to cell 0.
    """

    min_corner: GeoPoint
    max_corner: GeoPoint
    cell_deg: float = 0.005
    n_rows: int = field(init=False)
    n_cols: int = field(init=False)

    def __post_init__(self):
        if not (self.cell_deg > 0 and math.isfinite(self.cell_deg)):
            raise ValueError(f"cell_deg must be positive, got {self.cell_deg}")
        if not (self.min_corner.lat < self.max_corner.lat and self.min_corner.lon < self.max_corner.lon):
            raise ValueError("min_corner must be strictly south-west of max_corner")
        n_rows = math.ceil((self.max_corner.lat - self.min_corner.lat) / self.cell_deg)
        n_cols = math.ceil((self.max_corner.lon - self.min_corner.lon) / self.cell_deg)
        object.__setattr__(self, "n_rows", max(1, n_rows))
        object.__setattr__(self, "n_cols", max(1, n_cols))

    def contains(self, p: GeoPoint) -> bool:
        return (
            self.min_corner.lat <= p.lat <= self.max_corner.lat
            and self.min_corner.lon <= p.lon <= self.max_corner.lon
        )

    def row_bounds(self, row: int) -> tuple[float, float]:
        lo = self.min_corner.lat + row * self.cell_deg
        return lo, min(lo + self.cell_deg, self.max_corner.lat)

    def col_bounds(self, col: int) -> tuple[float, float]:
        lo = self.min_corner.lon + col * self.cell_deg
        return lo, min(lo + self.cell_deg, self.max_corner.lon)


def _axis_index(value: float, lo: float, cell: float, n: int) -> int:
    idx = math.ceil((value - lo) / cell) - 1
    return min(max(idx, 0), n - 1)


def cell_of(p: GeoPoint, g: GridSpec) -> tuple[int, int] | None:
    """(row, col) of the cell holding ``p``, or None when ``p`` is out of bounds."""
    if not g.contains(p):
        return None
    return (
        _axis_index(p.lat, g.min_corner.lat, g.cell_deg, g.n_rows),
        _axis_index(p.lon, g.min_corner.lon, g.cell_deg, g.n_cols),
    )
