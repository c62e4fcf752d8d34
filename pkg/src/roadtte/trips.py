"""Trip records: parsing, validation, region selection, splitting and distance series."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, fields
from datetime import datetime, timezone
from typing import Iterable, Iterator, Sequence

import numpy as np

from roadtte.geodesy import GeoPoint, cumulative_distances
from roadtte.roadnet import RoadNetwork, trip_map_distances

logger = logging.getLogger(__name__)

TRIP_FORMAT_VERSION = 1
SLOTS_PER_DAY = 1440
PORTO_INTERVAL_S = 15.0
MAX_POINTS = 2000
DISTANCE_MODES = ("coordinate", "map", "both")


class TripError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class Trip:
    trip_id: str
    driver_id: int
    date_id: int
    week_id: int
    time_id: int
    lats: np.ndarray
    lons: np.ndarray
    time_gap: np.ndarray
    dist_gap: np.ndarray
    total_time: float
    total_dist: float

    @property
    def n_points(self) -> int:
        return len(self.lats)


@dataclass
class MappedTrip(Trip):
    """A trip whose points are attributed to road nodes.

    ``coord_gap`` and ``map_gap`` are the two cumulative distance series;
    ``dist_gap``/``total_dist`` are populated from the one selected by
    ``distance_mode`` (the coordinate series for ``both``), and the raw-point
    series is kept in ``raw_dist_gap``.
    """

    node_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    node_lats: np.ndarray = field(default_factory=lambda: np.zeros(0))
    node_lons: np.ndarray = field(default_factory=lambda: np.zeros(0))
    attribution_errors: np.ndarray = field(default_factory=lambda: np.zeros(0))
    raw_dist_gap: np.ndarray | None = None
    coord_gap: np.ndarray | None = None
    map_gap: np.ndarray | None = None
    map_fallbacks: int = 0
    distance_mode: str = "coordinate"

    def distance_series(self, mode: str | None = None) -> list[np.ndarray]:
        mode = mode or self.distance_mode
        if self.coord_gap is None or self.map_gap is None:
            raise TripError(f"trip {self.trip_id}: distances not attached")
        return {"coordinate": [self.coord_gap], "map": [self.map_gap],
                "both": [self.coord_gap, self.map_gap]}[mode]


# ---------------------------------------------------------------------------
# validation


def gap_violations(gaps: np.ndarray, n: int, total: float | None = None, name: str = "gap") -> list[str]:
    out = []
    if len(gaps) != n:
        out.append(f"{name}: length {len(gaps)} != {n} points")
        return out
    if n == 0:
        return out
    if not np.all(np.isfinite(gaps)):
        out.append(f"{name}: non-finite values")
    if gaps[0] != 0:
        out.append(f"{name}[0] = {gaps[0]} != 0")
    if np.any(np.diff(gaps) < 0):
        out.append(f"{name}: not nondecreasing")
    if total is not None and gaps[-1] != total:
        out.append(f"{name}[last] = {gaps[-1]} != total {total}")
    return out


def trip_violations(trip: Trip, min_points: int = 2) -> list[str]:
    n = trip.n_points
    out = []
    if n < min_points:
        out.append(f"only {n} points")
    if len(trip.lons) != n:
        out.append("lats/lons length mismatch")
    if not 0 <= trip.time_id < SLOTS_PER_DAY:
        out.append(f"time_id {trip.time_id} outside [0, {SLOTS_PER_DAY - 1}]")
    out += gap_violations(trip.time_gap, n, trip.total_time, "time_gap")
    out += gap_violations(trip.dist_gap, n, trip.total_dist, "dist_gap")
    if isinstance(trip, MappedTrip):
        if len(trip.node_ids) != n:
            out.append("node_ids length mismatch")
        if trip.coord_gap is not None:
            out += gap_violations(trip.coord_gap, n, None, "coord_gap")
        if trip.map_gap is not None:
            out += gap_violations(trip.map_gap, n, None, "map_gap")
    return out


def validate_trips(trips: Iterable[Trip], min_points: int = 2) -> None:
    """Raise on the first trip that breaks the gap-sequence invariants."""
    for t in trips:
        problems = trip_violations(t, min_points)
        if problems:
            raise TripError(f"trip {t.trip_id}: " + "; ".join(problems))


# ---------------------------------------------------------------------------
# parsing


@dataclass
class ParseStats:
    rows_in: int = 0
    accepted: int = 0
    rejects: Counter = field(default_factory=Counter)

    def as_dict(self) -> dict:
        return {"rows_in": self.rows_in, "accepted": self.accepted, "rejects": dict(sorted(self.rejects.items()))}


class Reject(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class DenseIndex:
    """First-appearance dense re-indexing of external ids."""

    def __init__(self, mapping: dict | None = None):
        self.mapping: dict[str, int] = dict(mapping or {})

    def __call__(self, key) -> int:
        key = str(key)
        if key not in self.mapping:
            self.mapping[key] = len(self.mapping)
        return self.mapping[key]


def _points_ok(lats: Sequence[float], lons: Sequence[float], max_points: int):
    n = len(lats)
    if n < 2:
        raise Reject("too-short")
    if n > max_points:
        raise Reject("too-long")
    for a, b in zip(lats, lons):
        if not (math.isfinite(a) and math.isfinite(b)):
            raise Reject("non-finite")
        if not (-90 <= a <= 90 and -180 <= b <= 180):
            raise Reject("out-of-range")


def parse_porto_row(row: dict, drivers: DenseIndex, max_points: int = MAX_POINTS) -> Trip:
    """One Porto taxi CSV row to a Trip. Raises ``Reject`` with a reason code."""
    try:
        poly = json.loads(row["POLYLINE"])
        pairs = [(float(p[1]), float(p[0])) for p in poly]
        ts = int(row["TIMESTAMP"])
        taxi = row["TAXI_ID"]
    except (KeyError, TypeError, ValueError, IndexError):
        raise Reject("malformed") from None
    lats = [p[0] for p in pairs]
    lons = [p[1] for p in pairs]
    _points_ok(lats, lons, max_points)
    n = len(lats)
    start = datetime.fromtimestamp(ts, tz=timezone.utc)
    dist = np.array(cumulative_distances(lats, lons))
    time_gap = PORTO_INTERVAL_S * np.arange(n, dtype=np.float64)
    return Trip(
        trip_id=str(row.get("TRIP_ID", "")),
        driver_id=drivers(taxi),
        date_id=start.day,
        week_id=start.weekday(),
        time_id=start.hour * 60 + start.minute,
        lats=np.array(lats),
        lons=np.array(lons),
        time_gap=time_gap,
        dist_gap=dist,
        total_time=float(time_gap[-1]),
        total_dist=float(dist[-1]),
    )


def read_porto_csv(lines: Iterable[str], max_points: int = MAX_POINTS,
                   drivers: DenseIndex | None = None) -> tuple[list[Trip], ParseStats, DenseIndex]:
    drivers = drivers or DenseIndex()
    stats = ParseStats()
    trips = []
    for row in csv.DictReader(lines):
        stats.rows_in += 1
        try:
            trips.append(parse_porto_row(row, drivers, max_points))
            stats.accepted += 1
        except Reject as r:
            stats.rejects[r.reason] += 1
    return trips, stats, drivers


def parse_beijing_record(rec: dict, trip_id: str, max_points: int = MAX_POINTS) -> Trip:
    """A record already laid out in the trip schema (driverID, ..., lats, lngs, ...)."""
    try:
        lats = [float(x) for x in rec["lats"]]
        lons = [float(x) for x in rec["lngs"]]
        time_gap = np.array([float(x) for x in rec["time_gap"]])
        dist_gap = np.array([float(x) for x in rec["dist_gap"]])
        trip = Trip(
            trip_id=str(rec.get("tripID", trip_id)),
            driver_id=int(rec["driverID"]),
            date_id=int(rec["dateID"]),
            week_id=int(rec["weekID"]),
            time_id=int(rec["timeID"]),
            lats=np.array(lats),
            lons=np.array(lons),
            time_gap=time_gap,
            dist_gap=dist_gap,
            total_time=float(rec["time"]),
            total_dist=float(rec["dist"]),
        )
    except (KeyError, TypeError, ValueError):
        raise Reject("malformed") from None
    _points_ok(lats, lons, max_points)
    # totals are rounded independently of the gap series in these files
    if len(time_gap) and abs(time_gap[-1] - trip.total_time) <= 1e-6:
        trip.total_time = float(time_gap[-1])
    if len(dist_gap) and abs(dist_gap[-1] - trip.total_dist) <= 1e-6:
        trip.total_dist = float(dist_gap[-1])
    if trip_violations(trip):
        raise Reject("inconsistent")
    return trip


def read_beijing_records(lines: Iterable[str], max_points: int = MAX_POINTS) -> tuple[list[Trip], ParseStats]:
    stats = ParseStats()
    trips = []
    for lineno, line in enumerate(lines):
        if not line.strip() or line.startswith("#"):
            continue
        stats.rows_in += 1
        try:
            rec = json.loads(line)
            trips.append(parse_beijing_record(rec, f"r{lineno}", max_points))
            stats.accepted += 1
        except json.JSONDecodeError:
            stats.rejects["malformed"] += 1
        except Reject as r:
            stats.rejects[r.reason] += 1
    return trips, stats


# ---------------------------------------------------------------------------
# region selection and splitting


def _trip_extent(t: Trip) -> tuple[float, float, float, float]:
    return float(t.lats.min()), float(t.lats.max()), float(t.lons.min()), float(t.lons.max())


def select_dense_region(trips: Sequence[Trip], width_deg: float = 0.55,
                        stride_deg: float | None = None) -> tuple[GeoPoint, GeoPoint]:
    """Square window of side ``width_deg`` containing the most whole trips.

    Candidate windows have their south-west corner on a ``stride_deg`` lattice
    anchored at the south-west corner of all trip points; the first window in
    (lat, lon) order wins ties.
    """
    if not trips:
        raise ConfigError("select_dense_region needs at least one trip")
    if not width_deg > 0:
        raise ConfigError(f"width_deg must be > 0, got {width_deg}")
    stride = stride_deg if stride_deg is not None else width_deg / 10
    if not stride > 0:
        raise ConfigError(f"stride_deg must be > 0, got {stride}")
    ext = np.array([_trip_extent(t) for t in trips])
    lat0, lon0 = ext[:, 0].min(), ext[:, 2].min()
    n_i = int(math.floor((ext[:, 1].max() - lat0) / stride + 1e-9)) + 1
    n_j = int(math.floor((ext[:, 3].max() - lon0) / stride + 1e-9)) + 1

    eps = 1e-9
    i_lo = np.maximum(np.ceil((ext[:, 1] - width_deg - lat0) / stride - eps), 0).astype(np.int64)
    i_hi = np.minimum(np.floor((ext[:, 0] - lat0) / stride + eps), n_i - 1).astype(np.int64)
    j_lo = np.maximum(np.ceil((ext[:, 3] - width_deg - lon0) / stride - eps), 0).astype(np.int64)
    j_hi = np.minimum(np.floor((ext[:, 2] - lon0) / stride + eps), n_j - 1).astype(np.int64)
    fits = (i_lo <= i_hi) & (j_lo <= j_hi)
    if not fits.any():
        raise ConfigError(f"no {width_deg} degree window contains a whole trip")
    diff = np.zeros((n_i + 1, n_j + 1), dtype=np.int64)
    for a, b, c, d in zip(i_lo[fits], i_hi[fits], j_lo[fits], j_hi[fits]):
        diff[a, c] += 1
        diff[b + 1, c] -= 1
        diff[a, d + 1] -= 1
        diff[b + 1, d + 1] += 1
    counts = diff.cumsum(0).cumsum(1)[:n_i, :n_j]
    i, j = np.unravel_index(int(np.argmax(counts)), counts.shape)
    sw_lat, sw_lon = lat0 + i * stride, lon0 + j * stride
    return GeoPoint(float(sw_lat), float(sw_lon)), GeoPoint(float(sw_lat + width_deg), float(sw_lon + width_deg))


def filter_trips_bbox(trips: Iterable[Trip], bbox: tuple[GeoPoint, GeoPoint]) -> tuple[list[Trip], int]:
    """Keep trips lying entirely inside ``bbox`` (boundaries inclusive)."""
    sw, ne = bbox
    kept, dropped = [], 0
    for t in trips:
        inside = (
            np.all((t.lats >= sw.lat) & (t.lats <= ne.lat))
            and np.all((t.lons >= sw.lon) & (t.lons <= ne.lon))
        )
        if inside:
            kept.append(t)
        else:
            dropped += 1
    return kept, dropped


def split_sizes(n: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    if len(fractions) != 3 or any(not (f > 0) for f in fractions):
        raise ConfigError(f"split fractions must be three positive numbers, got {tuple(fractions)}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {sum(fractions)}")
    n_val = int(math.floor(n * fractions[1] + 1e-9))
    n_test = int(math.floor(n * fractions[2] + 1e-9))
    return n - n_val - n_test, n_val, n_test


def split_dataset(trips: Sequence, fractions=(0.79, 0.09, 0.12), seed: int = 0):
    """Seeded shuffle into disjoint (train, val, test) lists."""
    n_train, n_val, _ = split_sizes(len(trips), fractions)
    order = np.random.default_rng(seed).permutation(len(trips))
    items = [trips[i] for i in order]
    return items[:n_train], items[n_train:n_train + n_val], items[n_train + n_val:]


# ---------------------------------------------------------------------------
# distance series


def attach_distances(trips: Iterable[MappedTrip], net: RoadNetwork, mode: str = "coordinate",
                     cache: dict | None = None) -> list[MappedTrip]:
    """Fill both distance series from the attributed node sequence.

    The coordinate series is the cumulative Vincenty length between
    consecutive attributed nodes, the map series the cumulative shortest-path
    length; both are therefore measured between the same points.
    """
    if mode not in DISTANCE_MODES:
        raise ConfigError(f"unknown distance mode {mode!r}")
    cache = {} if cache is None else cache
    out = []
    for t in trips:
        node_ids = [int(x) for x in t.node_ids]
        coord = np.array(cumulative_distances(t.node_lats, t.node_lons))
        md = trip_map_distances(net, node_ids, cache)
        t.coord_gap = coord
        t.map_gap = np.array(md.gaps)
        t.map_fallbacks = md.fallbacks
        set_distance_mode(t, mode)
        out.append(t)
    return out


def set_distance_mode(t: MappedTrip, mode: str) -> MappedTrip:
    if mode not in DISTANCE_MODES:
        raise ConfigError(f"unknown distance mode {mode!r}")
    series = t.map_gap if mode == "map" else t.coord_gap
    t.distance_mode = mode
    t.dist_gap = series
    t.total_dist = float(series[-1])
    return t


# ---------------------------------------------------------------------------
# line-delimited records

RECORD_FIELDS = (
    "trip_id", "driver_id", "date_id", "week_id", "time_id", "total_time", "total_dist",
    "distance_mode", "map_fallbacks", "lats", "lons", "time_gap", "dist_gap", "raw_dist_gap",
    "node_ids", "node_lats", "node_lons", "attribution_errors", "coord_gap", "map_gap",
)
_ARRAY_INT = {"node_ids"}


def _fmt(x):
    if isinstance(x, np.ndarray):
        if x.dtype.kind in "iu":
            return [int(v) for v in x.tolist()]
        return [round(v, 9) for v in x.tolist()]
    if isinstance(x, (float, np.floating)):
        return round(float(x), 9)
    if isinstance(x, np.integer):
        return int(x)
    return x


def trip_to_record(t: Trip) -> str:
    names = [f.name for f in fields(t)]
    rec = {k: _fmt(getattr(t, k)) for k in RECORD_FIELDS if k in names}
    return json.dumps(rec, separators=(",", ":"))


def trip_from_record(line: str) -> Trip:
    rec = json.loads(line)
    kwargs = {}
    for k, v in rec.items():
        if isinstance(v, list):
            v = np.array(v, dtype=np.int64 if k in _ARRAY_INT else np.float64)
        kwargs[k] = v
    cls = MappedTrip if "node_ids" in rec else Trip
    return cls(**kwargs)


def write_trip_records(path, trips: Iterable[Trip], header: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header is not None:
            fh.write("# " + json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for t in trips:
            fh.write(trip_to_record(t) + "\n")


def iter_trip_records(path) -> Iterator[Trip]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip() and not line.startswith("#"):
                yield trip_from_record(line)


def read_trip_records(path) -> list[Trip]:
    return list(iter_trip_records(path))
