"""Evaluation tests: extraction, classification, metric oracle, reporting."""

import numpy as np
import pytest

from balltrack.evalkit import (ConfusionCounts, Detection, EvalConfig,
                               FrameClass, classify_frame, compute_metrics,
                               extract_coordinate, format_report, report_rows,
                               write_report_csv)

# Published confusion rows used as the metric oracle: two benchmark tables
# of three models each, plus the two single-module ablation rows.
PUBLISHED_ROWS = [
    # name, tp, fp1, fp2, tn, fn, acc, precision, recall, f1
    ("bench1-v2", 15988, 108, 23, 626, 937, 0.9396, 0.9919, 0.9446, 0.9677),
    ("bench1-v4", 15669, 47, 8, 641, 1317, 0.9224, 0.9965, 0.9225, 0.9581),
    ("bench1-v5", 16573, 116, 13, 636, 344, 0.9733, 0.9923, 0.9797, 0.9859),
    ("bench2-v2", 10615, 54, 3, 180, 461, 0.9542, 0.9947, 0.9584, 0.9762),
    ("bench2-v4", 10555, 52, 9, 174, 523, 0.9484, 0.9943, 0.9528, 0.9731),
    ("bench2-v5", 10864, 80, 2, 181, 186, 0.9763, 0.9925, 0.9832, 0.9878),
    ("abl-mdd", 16047, 125, 25, 624, 861, 0.9428, 0.9907, 0.9491, 0.9695),
    ("abl-rstr", 16607, 169, 25, 624, 257, 0.9745, 0.9885, 0.9848, 0.9866),
]

BENCH_TOTALS = {"bench1": 17682, "bench2": 11313}


def cfg(**kw):
    return EvalConfig(**kw)


# ---------------------------------------------------------------------------
# coordinate extraction


def blob(h, w, cx, cy, radius=2, value=0.9):
    m = np.zeros((h, w))
    ys, xs = np.mgrid[0:h, 0:w]
    m[(xs - cx) ** 2 + (ys - cy) ** 2 <= radius ** 2] = value
    return m


def test_extract_single_blob_center():
    det = extract_coordinate(blob(32, 32, 10, 20), cfg())
    assert det.present
    assert det.x == pytest.approx(10.0, abs=1e-9)
    assert det.y == pytest.approx(20.0, abs=1e-9)


def test_extract_all_below_threshold():
    det = extract_coordinate(np.full((16, 16), 0.49), cfg())
    assert not det.present


def test_extract_exact_threshold_not_detected():
    det = extract_coordinate(np.full((8, 8), 0.5), cfg())
    assert not det.present  # strictly above threshold only


def test_extract_prefers_larger_component():
    m = np.zeros((24, 40))
    m[10:13, 5:8] = 0.7     # 9 pixels
    m[10:12, 30:32] = 0.99  # 4 pixels
    det = extract_coordinate(m, cfg())
    assert det.x == pytest.approx(6.0) and det.y == pytest.approx(11.0)


def test_extract_equal_area_ties_break_on_peak():
    m = np.zeros((10, 20))
    m[2:4, 2:4] = 0.6
    m[6:8, 12:14] = 0.8
    det = extract_coordinate(m, cfg())
    assert det.x == pytest.approx(12.5) and det.confidence == pytest.approx(0.8)


def test_extract_weighted_centroid():
    m = np.zeros((8, 8))
    m[4, 4] = 0.9
    m[4, 5] = 0.6
    det = extract_coordinate(m, cfg())
    assert det.x == pytest.approx((4 * 0.9 + 5 * 0.6) / 1.5)
    assert det.y == pytest.approx(4.0)


def test_extract_scales_to_original_resolution():
    det = extract_coordinate(blob(24, 32, 8, 6), cfg(scale_x=8.0, scale_y=6.0))
    assert det.x == pytest.approx(64.0) and det.y == pytest.approx(36.0)


def test_scale_equivalence_property():
    # evaluating scaled coordinates equals scaling after extraction
    rng = np.random.default_rng(0)
    for _ in range(10):
        m = blob(24, 32, rng.integers(4, 28), rng.integers(4, 20))
        at_model = extract_coordinate(m, cfg())
        at_orig = extract_coordinate(m, cfg(scale_x=8.0, scale_y=6.0))
        assert at_orig.x == pytest.approx(at_model.x * 8.0, abs=1e-12)
        assert at_orig.y == pytest.approx(at_model.y * 6.0, abs=1e-12)


# ---------------------------------------------------------------------------
# classification


def det(x, y):
    return Detection(0, True, x, y, 0.9)


def test_classify_within_tolerance():
    assert classify_frame(det(10, 10), True, 13, 10, cfg()) is FrameClass.TP  # 3 px


def test_classify_exactly_at_tolerance():
    assert classify_frame(det(10, 10), True, 14, 10, cfg()) is FrameClass.TP  # 4 px


def test_classify_beyond_tolerance():
    assert classify_frame(det(10, 10), True, 15, 10, cfg()) is FrameClass.FP1  # 5 px


def test_classify_no_ball_cases():
    assert classify_frame(det(5, 5), False, 0, 0, cfg()) is FrameClass.FP2
    assert classify_frame(Detection.none(), False, 0, 0, cfg()) is FrameClass.TN


def test_classify_missed_ball():
    assert classify_frame(Detection.none(), True, 5, 5, cfg()) is FrameClass.FN


def test_partition_totality_random():
    rng = np.random.default_rng(1)
    counts = ConfusionCounts()
    n = 500
    for _ in range(n):
        visible = rng.random() < 0.7
        present = rng.random() < 0.7
        pred = det(rng.uniform(0, 64), rng.uniform(0, 48)) if present else Detection.none()
        counts.add(classify_frame(pred, visible, rng.uniform(0, 64), rng.uniform(0, 48), cfg()))
    assert counts.total == n


# ---------------------------------------------------------------------------
# metrics


@pytest.mark.parametrize("row", PUBLISHED_ROWS, ids=[r[0] for r in PUBLISHED_ROWS])
def test_metric_oracle_published_rows(row):
    name, tp, fp1, fp2, tn, fn, acc, prec, rec, f1 = row
    c = ConfusionCounts(tp, fp1, fp2, tn, fn)
    bench = name.split("-")[0]
    if bench in BENCH_TOTALS:
        assert c.total == BENCH_TOTALS[bench]
    m = compute_metrics(c)
    assert abs(m.precision - prec) < 5e-5
    assert abs(m.recall - rec) < 5e-5
    assert abs(m.f1 - f1) < 5e-5
    if name == "bench1-v5":
        # The source table's accuracy cell is a known one-frame slip:
        # (16573 + 636) / 17682 = 0.97324963, which sits 5.04e-5 from the
        # printed 0.9733 (the printed metrics match TN=637/FN=343 instead).
        # Assert the exact arithmetic here; the published-value check at the
        # stated tolerance lives in the acceptance suite.
        assert m.accuracy == pytest.approx(0.9732496323945256, abs=1e-12)
    else:
        assert abs(m.accuracy - acc) < 5e-5


def test_metrics_all_tn_degenerate():
    m = compute_metrics(ConfusionCounts(tn=50))
    assert m.accuracy == 1.0
    assert m.precision == 0.0 and "precision" in m.undefined
    assert m.recall == 0.0 and "recall" in m.undefined


def test_metrics_monotone_under_fn_to_tp():
    c = ConfusionCounts(tp=80, fp1=5, fp2=3, tn=10, fn=20)
    before = compute_metrics(c)
    after = compute_metrics(ConfusionCounts(tp=81, fp1=5, fp2=3, tn=10, fn=19))
    assert after.recall >= before.recall
    assert after.f1 >= before.f1
    assert after.accuracy >= before.accuracy


def test_counts_sum_and_fp():
    c = ConfusionCounts(1, 2, 3, 4, 5)
    assert c.total == 15 and c.fp == 5


# ---------------------------------------------------------------------------
# reporting


def test_report_contains_columns_and_values(tmp_path):
    c = ConfusionCounts(16573, 116, 13, 636, 344)
    rows = report_rows([("v5", c)])
    text = format_report(rows)
    assert "Model" in text and "FP2" in text
    assert "0.9859" in text and "17682" in text
    path = tmp_path / "report.csv"
    write_report_csv(rows, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "model,acc,precision,recall,f1,total,tp,fp1,fp2,fp,tn,fn"
    assert lines[1].startswith("v5,0.973250,")
