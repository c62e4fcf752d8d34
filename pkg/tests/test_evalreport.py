import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roadtte import evalreport as ev


def rec(i, true, pred, coord=1.0, mp=1.0, variant="L-GC", mode="coordinate"):
    return ev.EvalRecord(f"t{i}", true, pred, coord, mp, variant, mode)


def test_mape_examples():
    assert ev.mape([rec(0, 50.0, 50.0), rec(1, 70.0, 70.0)]) == 0.0
    assert ev.mape([rec(0, 100.0, 110.0)]) == pytest.approx(10.0, abs=1e-12)
    assert ev.mape([rec(0, 100.0, 110.0), rec(1, 200.0, 180.0)]) == pytest.approx(10.0, abs=1e-12)
    with pytest.raises(ev.EvalError):
        ev.mape([])


def test_record_validation():
    with pytest.raises(ev.EvalError, match="true time"):
        rec(0, 0.0, 1.0)
    with pytest.raises(ev.EvalError, match="predicted"):
        rec(0, 1.0, -1.0)


def test_one_record_per_bucket():
    recs = [rec(i, 100.0, 100.0 + 5 * (i + 1), coord=2 * i + 1) for i in range(3)]
    rep = ev.bucket_by(recs, "coordinate", [0, 2, 4, 6])
    assert [b.count for b in rep.buckets] == [1, 1, 1, 0]
    assert [b.mape for b in rep.buckets[:3]] == pytest.approx([5.0, 10.0, 15.0])
    assert math.isnan(rep.buckets[3].mape)


def test_edge_value_goes_to_upper_bucket():
    r = rec(0, 100.0, 90.0, coord=1.0, mp=1.5)
    rep = ev.bucket_by([r], "difference", [0.0, 0.5, 1.0])
    assert [(b.lo, b.hi, b.count) for b in rep.buckets] == [(0.0, 0.5, 0), (0.5, 1.0, 1), (1.0, math.inf, 0)]


def test_overflow_and_underflow_buckets():
    recs = [rec(0, 10.0, 11.0, coord=25.0, mp=26.0), rec(1, 10.0, 12.0, coord=1.0, mp=0.8)]
    rep = ev.bucket_by(recs, "coordinate")
    assert rep.buckets[-1].lo == 20.0 and rep.buckets[-1].count == 1
    assert rep.buckets[0].lo == 0.0  # no underflow bucket when nothing is below the first edge
    diff = ev.bucket_by(recs, "difference")
    assert diff.buckets[0].lo == -math.inf and diff.buckets[0].count == 1
    assert diff.total == 2


def test_single_bucket_equals_global():
    recs = [rec(i, 100.0 + i, 90.0 + 3 * i, coord=3.0) for i in range(5)]
    rep = ev.bucket_by(recs, "coordinate", [0, 10])
    assert rep.buckets[0].mape == ev.mape(recs)


@pytest.mark.parametrize("edges", [[0], [0, 0], [2, 1], [0, math.inf], [0, float("nan")]])
def test_bad_edges(edges):
    with pytest.raises(ev.BucketConfigError):
        ev.bucket_by([rec(0, 1.0, 1.0)], "map", edges)


def test_bad_key():
    with pytest.raises(ev.BucketConfigError):
        ev.bucket_by([rec(0, 1.0, 1.0)], "speed")


records = st.lists(
    st.tuples(st.floats(1.0, 5000.0), st.floats(1.0, 5000.0), st.floats(0.0, 30.0), st.floats(-1.0, 8.0)),
    min_size=1, max_size=60)


@settings(max_examples=200, deadline=None)
@given(records, st.sampled_from(ev.BUCKET_KEYS))
def test_bucket_recombination_equals_global_mape(rows, key):
    recs = [rec(i, t, p, c, max(c + d, 0.0)) for i, (t, p, c, d) in enumerate(rows)]
    rep = ev.bucket_by(recs, key)
    assert rep.total == len(recs)
    assert abs(ev.recombined_mape(rep) - ev.mape(recs)) <= 1e-9


@settings(max_examples=200, deadline=None)
@given(records, st.sampled_from([2.0, 0.5, 4.0, 0.25, 1024.0]))
def test_mape_is_scale_invariant(rows, scale):
    # power-of-two scales keep every ratio bit-identical
    a = [rec(i, t, p) for i, (t, p, _, _) in enumerate(rows)]
    b = [rec(i, t * scale, p * scale) for i, (t, p, _, _) in enumerate(rows)]
    assert ev.mape(a) == ev.mape(b)


def test_eval_csv_round_trip():
    recs = [rec(0, 100.5, 99.25, 1.234567891, 1.5), rec(1, 2000.0, 2100.0, 12.0, 13.25, "EL-GC", "map")]
    text = ev.format_eval_csv(recs, ["seed=0"])
    assert text.startswith("# seed=0\ntrip_id,true_s,pred_s,coordinate_km,map_km,variant,distance_mode\n")
    assert ev.parse_eval_csv(text) == recs


def test_eval_csv_errors():
    with pytest.raises(ev.EvalError, match="columns"):
        ev.parse_eval_csv("a,b\n1,2\n")
    head = ",".join(ev.EVAL_COLUMNS)
    with pytest.raises(ev.EvalError, match="row 3"):
        ev.parse_eval_csv(f"{head}\nt0,1,1,1,1,L-GC,map\nt1,x,1,1,1,L-GC,map\n")


def _run(variant, mode, scale):
    return [rec(i, 100.0 + i, (100.0 + i) * scale, coord=2.0 * i, mp=2.5 * i, variant=variant, mode=mode)
            for i in range(6)]


def test_compare_variants_table_and_buckets():
    runs = [_run(v, m, 1.0 + 0.01 * (j + 1)) for j, (v, m) in enumerate(
        [(v, m) for v in ("L-GC", "E-GC", "EL-GC") for m in ("coordinate", "map", "both")])]
    cmp = ev.compare_variants(runs)
    assert len(cmp.table) == 9
    assert [(v, m) for v, m, _ in cmp.table] == sorted((v, m) for v, m, _ in cmp.table)
    assert len(cmp.buckets) == 27
    mapes = {(v, m): x for v, m, x in cmp.table}
    assert mapes[("L-GC", "coordinate")] == pytest.approx(1.0)
    csv = ev.format_table_csv(cmp.table)
    assert csv.splitlines()[0] == "variant,distance_mode,mape"
    assert "EL-GC,both,9.000000" in csv
    b = ev.format_buckets_csv(cmp.buckets).splitlines()
    assert b[0] == "key,bucket_lo,bucket_hi,count,mape,variant"
    assert b[1].endswith("E-GC/both")


def test_identical_predictions_give_identical_mape():
    runs = [_run("L-GC", "map", 1.1), _run("EL-GC", "map", 1.1)]
    table = ev.compare_variants(runs).table
    assert table[0][2] == table[1][2]


def test_compare_rejects_mismatched_trip_sets():
    a, b = _run("L-GC", "map", 1.1), _run("EL-GC", "map", 1.1)[:-1]
    with pytest.raises(ev.EvalError, match="symmetric difference of 1 ids"):
        ev.compare_variants([a, b])
    with pytest.raises(ev.EvalError, match="duplicate"):
        ev.compare_variants([a, _run("L-GC", "map", 1.2)])
    with pytest.raises(ev.EvalError, match="one variant/mode"):
        ev.compare_variants([a[:3] + _run("E-GC", "map", 1.0)[3:]])


def test_single_trip_comparison():
    cmp = ev.compare_variants([[rec(0, 10.0, 12.0)]])
    assert cmp.table == [("L-GC", "coordinate", pytest.approx(20.0))]
