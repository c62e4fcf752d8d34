"""MAPE and bucketed error analyses over evaluation records, emitted as CSV."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

EVAL_FORMAT_VERSION = 1
MAPE_FORMULA = "mape = mean(|pred - true| / true) * 100"
BUCKET_KEYS = ("coordinate", "map", "difference")
DISTANCE_EDGES = tuple(float(x) for x in range(0, 21, 2))
DIFFERENCE_EDGES = tuple(0.5 * i for i in range(11))

EVAL_COLUMNS = ("trip_id", "true_s", "pred_s", "coordinate_km", "map_km", "variant", "distance_mode")


class EvalError(ValueError):
    pass


class BucketConfigError(EvalError):
    pass


@dataclass(frozen=True)
class EvalRecord:
    trip_id: str
    true_time: float
    pred_time: float
    coordinate_km: float
    map_km: float
    variant: str
    distance_mode: str

    def __post_init__(self):
        if not (self.true_time > 0 and math.isfinite(self.true_time)):
            raise EvalError(f"trip {self.trip_id}: true time must be > 0, got {self.true_time}")
        if not (self.pred_time > 0 and math.isfinite(self.pred_time)):
            raise EvalError(f"trip {self.trip_id}: predicted time must be > 0, got {self.pred_time}")

    @property
    def relative_error(self) -> float:
        return abs(self.pred_time - self.true_time) / self.true_time

    def key_value(self, key: str) -> float:
        if key == "coordinate":
            return self.coordinate_km
        if key == "map":
            return self.map_km
        if key == "difference":
            return self.map_km - self.coordinate_km
        raise BucketConfigError(f"bucket key must be one of {BUCKET_KEYS}, got {key!r}")


def mape(records: Sequence[EvalRecord]) -> float:
    """Mean absolute percentage error of the records, in percent."""
    if len(records) == 0:
        raise EvalError("MAPE of an empty record set is undefined")
    return float(np.mean([r.relative_error for r in records]) * 100.0)


@dataclass
class Bucket:
    lo: float
    hi: float
    count: int
    mape: float  # nan for empty buckets


@dataclass
class BucketReport:
    key: str
    edges: tuple
    buckets: list = field(default_factory=list)
    variant: str = ""

    @property
    def total(self) -> int:
        return sum(b.count for b in self.buckets)


def _check_edges(edges) -> tuple:
    edges = tuple(float(e) for e in edges)
    if len(edges) < 2:
        raise BucketConfigError("need at least two bucket edges")
    if not all(math.isfinite(e) for e in edges):
        raise BucketConfigError("bucket edges must be finite")
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise BucketConfigError(f"bucket edges must be strictly increasing: {edges}")
    return edges


def bucket_by(records: Sequence[EvalRecord], key: str, edges: Iterable[float] | None = None) -> BucketReport:
    """Group records into half-open ``[lo, hi)`` buckets of the chosen distance key.

    Values at or above the last edge land in a final ``[last, inf)`` bucket.
    Values below the first edge get a ``(-inf, first)`` bucket, emitted only
    when it is non-empty (negative map-minus-coordinate differences can occur
    when map and coordinate totals come from different point sets).
    """
    if key not in BUCKET_KEYS:
        raise BucketConfigError(f"bucket key must be one of {BUCKET_KEYS}, got {key!r}")
    if edges is None:
        edges = DIFFERENCE_EDGES if key == "difference" else DISTANCE_EDGES
    edges = _check_edges(edges)
    bounds = [(-math.inf, edges[0])] + list(zip(edges, edges[1:])) + [(edges[-1], math.inf)]
    groups: list[list[EvalRecord]] = [[] for _ in bounds]
    for r in records:
        v = r.key_value(key)
        # bisect_right gives the half-open convention: v == edge goes up
        slot = int(np.searchsorted(edges, v, side="right"))
        groups[slot].append(r)
    buckets = []
    for slot, ((lo, hi), grp) in enumerate(zip(bounds, groups)):
        if slot == 0 and not grp:
            continue
        buckets.append(Bucket(lo, hi, len(grp), mape(grp) if grp else math.nan))
    variants = sorted({r.variant for r in records})
    return BucketReport(key, edges, buckets, variants[0] if len(variants) == 1 else ",".join(variants))


def recombined_mape(report: BucketReport) -> float:
    """Count-weighted mean of bucket MAPEs; equals the global MAPE."""
    filled = [b for b in report.buckets if b.count]
    return sum(b.count * b.mape for b in filled) / sum(b.count for b in filled)


# ---------------------------------------------------------------------------
# CSV


def _fmt(x: float) -> str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if math.isnan(x):
        return ""
    return f"{x:.6f}"


def format_eval_csv(records: Sequence[EvalRecord], header_lines: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVAL_COLUMNS)
    for r in records:
        w.writerow([r.trip_id, repr(r.true_time), repr(r.pred_time), repr(r.coordinate_km), repr(r.map_km),
                    r.variant, r.distance_mode])
    return buf.getvalue()


def parse_eval_csv(text: str) -> list[EvalRecord]:
    lines = [l for l in text.splitlines() if l and not l.startswith("#")]
    if not lines:
        raise EvalError("evaluation CSV has no header row")
    reader = csv.DictReader(lines)
    if tuple(reader.fieldnames or ()) != EVAL_COLUMNS:
        raise EvalError(f"evaluation CSV columns {reader.fieldnames} differ from {list(EVAL_COLUMNS)}")
    out = []
    for row_no, row in enumerate(reader, start=2):
        try:
            out.append(EvalRecord(row["trip_id"], float(row["true_s"]), float(row["pred_s"]),
                                  float(row["coordinate_km"]), float(row["map_km"]),
                                  row["variant"], row["distance_mode"]))
        except (TypeError, ValueError) as exc:
            raise EvalError(f"row {row_no}: {exc}") from None
    return out


def format_buckets_csv(reports: Sequence[BucketReport], header_lines: Sequence[str] = ()) -> str:
    lines = [f"# {l}" for l in header_lines]
    lines.append("key,bucket_lo,bucket_hi,count,mape,variant")
    for rep in reports:
        for b in rep.buckets:
            lines.append(f"{rep.key},{_fmt(b.lo)},{_fmt(b.hi)},{b.count},{_fmt(b.mape)},{rep.variant}")
    return "\n".join(lines) + "\n"


@dataclass
class Comparison:
    table: list  # (variant, distance_mode, mape)
    buckets: list  # BucketReports, per variant/mode then key


def _run_label(records: Sequence[EvalRecord]) -> tuple[str, str]:
    pairs = sorted({(r.variant, r.distance_mode) for r in records})
    if len(pairs) != 1:
        raise EvalError(f"an evaluation run must hold one variant/mode pair, found {pairs}")
    return pairs[0]


def compare_variants(runs: Sequence[Sequence[EvalRecord]], distance_edges=None,
                     difference_edges=None) -> Comparison:
    """Variant x distance-mode MAPE table plus per-run bucket reports.

    Every run must cover the same trip ids.
    """
    if not runs:
        raise EvalError("no evaluation runs to compare")
    ref = {r.trip_id for r in runs[0]}
    for run in runs[1:]:
        ids = {r.trip_id for r in run}
        if ids != ref:
            raise EvalError(f"evaluation runs cover different trips: symmetric difference of {len(ids ^ ref)} ids")
    labelled = sorted(((_run_label(run), run) for run in runs), key=lambda x: x[0])
    seen = set()
    table, buckets = [], []
    for (variant, mode), run in labelled:
        if (variant, mode) in seen:
            raise EvalError(f"duplicate evaluation run for {variant}/{mode}")
        seen.add((variant, mode))
        table.append((variant, mode, mape(run)))
        for key in BUCKET_KEYS:
            edges = difference_edges if key == "difference" else distance_edges
            rep = bucket_by(run, key, edges)
            rep.variant = f"{variant}/{mode}"
            buckets.append(rep)
    return Comparison(table, buckets)


def format_table_csv(table, header_lines: Sequence[str] = ()) -> str:
    lines = [f"# {l}" for l in header_lines]
    lines.append("variant,distance_mode,mape")
    lines += [f"{v},{m},{x:.6f}" for v, m, x in table]
    return "\n".join(lines) + "\n"
