"""Metric oracles: AUC, PRF, confusion, cross-family mass, CI aggregation."""

import json
import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hierpath import metrics as MX
from hierpath.hierarchy import gi_tract_hierarchy


H = gi_tract_hierarchy()


def _bundle_from_preds(fine_true, fine_pred, conf=0.9):
    """Bundle whose fine argmax equals fine_pred, with lifted coarse probs."""
    fine_true = np.asarray(fine_true)
    fine_pred = np.asarray(fine_pred)
    n = fine_true.size
    probs = np.full((n, 7), (1 - conf) / 6)
    probs[np.arange(n), fine_pred] = conf
    coarse_probs = H.lift_probs(probs)
    return MX.PredictionBundle(probs, coarse_probs,
                               fine_true, H.lift_indices(fine_true))


def _pairwise_auc(scores, positives):
    """Quadratic counting oracle: concordant pairs, ties at half weight."""
    pos = [s for s, p in zip(scores, positives) if p]
    neg = [s for s, p in zip(scores, positives) if not p]
    total = 0.0
    for a in pos:
        for b in neg:
            if a > b:
                total += 1.0
            elif a == b:
                total += 0.5
    return total / (len(pos) * len(neg))


# ---------------------------------------------------------------------------
# AUC

def test_auc_perfect_separation():
    assert MX.auc_ovr(np.array([0.9, 0.8, 0.2, 0.1]),
                      np.array([True, True, False, False])) == 1.0
    assert MX.auc_ovr(np.array([0.1, 0.9]), np.array([True, False])) == 0.0


def test_auc_all_tied_is_half():
    assert MX.auc_ovr(np.zeros(6), np.array([1, 0, 1, 0, 0, 1], bool)) == 0.5


def test_auc_single_class_is_none():
    assert MX.auc_ovr(np.array([0.3, 0.4]), np.array([True, True])) is None
    assert MX.auc_ovr(np.array([0.3, 0.4]), np.array([False, False])) is None


def test_auc_equals_pairwise_oracle_exactly():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 30))
        # coarse grid forces plenty of ties
        scores = rng.integers(0, 5, size=n).astype(np.float64) / 4.0
        positives = rng.integers(0, 2, size=n).astype(bool)
        if positives.all() or not positives.any():
            continue
        assert MX.auc_ovr(scores, positives) == _pairwise_auc(scores, positives)


def test_auc_invariant_under_monotone_transform():
    rng = np.random.default_rng(1)
    scores = rng.normal(size=40)
    positives = rng.integers(0, 2, size=40).astype(bool)
    base = MX.auc_ovr(scores, positives)
    assert MX.auc_ovr(3.0 * scores + 7.0, positives) == base
    assert MX.auc_ovr(np.tanh(scores), positives) == pytest.approx(base, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.booleans()), min_size=2, max_size=25))
def test_auc_pairwise_property(pairs):
    scores = np.array([float(s) for s, _ in pairs])
    positives = np.array([p for _, p in pairs])
    if positives.all() or not positives.any():
        return
    assert MX.auc_ovr(scores, positives) == _pairwise_auc(scores, positives)


# ---------------------------------------------------------------------------
# accuracy / PRF

def test_per_class_accuracy_enumeration():
    bundle = _bundle_from_preds([0, 0, 1, 2], [0, 1, 1, 1])
    # class 0: pred0 vs true0 agree on examples 0 (TP), 2, 3 (TN); miss 1
    assert MX.per_class_accuracy(bundle, 0) == 0.75
    # class 1: (pred==1) = [F,T,T,T], (true==1) = [F,F,T,F] -> agree on 0,2
    assert MX.per_class_accuracy(bundle, 1) == 0.5


def test_per_class_accuracy_all_correct():
    bundle = _bundle_from_preds([0, 3, 6], [0, 3, 6])
    for c in range(7):
        assert MX.per_class_accuracy(bundle, c) == 1.0


def test_prf_hand_example():
    # class 0: tp=3, fp=1, fn=2 -> precision .75, recall .6, f1 = 2/3
    true = [0, 0, 0, 0, 0, 1, 1, 1]
    pred = [0, 0, 0, 1, 1, 0, 1, 1]
    prf = MX.precision_recall_f1(_bundle_from_preds(true, pred), 0)
    assert prf.precision == 0.75
    assert prf.recall == 0.6
    assert abs(prf.f1 - 2 / 3) < 1e-12
    assert prf.zero_division == ()


def test_prf_zero_division_flags():
    # class 5 never predicted and never true
    prf = MX.precision_recall_f1(_bundle_from_preds([0, 1], [0, 1]), 5)
    assert prf.precision == 0.0 and prf.recall == 0.0 and prf.f1 == 0.0
    assert prf.zero_division == ("precision", "recall", "f1")
    # class present in truth but never predicted: precision flagged, recall 0
    prf = MX.precision_recall_f1(_bundle_from_preds([5, 1], [1, 1]), 5)
    assert prf.zero_division == ("precision", "f1")


# ---------------------------------------------------------------------------
# confusion

def test_confusion_counts_and_normalization():
    bundle = _bundle_from_preds([0, 0, 0, 1], [0, 0, 1, 1])
    conf = MX.confusion(bundle)
    assert conf.counts[0, 0] == 2 and conf.counts[0, 1] == 1
    assert conf.counts[1, 1] == 1
    assert conf.counts.sum() == 4
    present = conf.normalized.sum(axis=1)
    assert np.allclose(present[[0, 1]], 1.0)
    assert set(conf.zero_rows) == {2, 3, 4, 5, 6}
    assert np.all(conf.normalized[list(conf.zero_rows)] == 0.0)


def test_confusion_diagonal_equals_recall():
    rng = np.random.default_rng(5)
    true = rng.integers(0, 7, size=200)
    pred = rng.integers(0, 7, size=200)
    bundle = _bundle_from_preds(true, pred)
    conf = MX.confusion(bundle)
    for c in range(7):
        prf = MX.precision_recall_f1(bundle, c)
        assert conf.normalized[c, c] == pytest.approx(prf.recall, abs=1e-12)


# ---------------------------------------------------------------------------
# cross-family confusion mass

def test_cross_coarse_mass_uniform_matrix():
    uniform = np.full((7, 7), 1 / 7)
    # foreign cells: 49 - (3^2 + 2^2 + 2^2) = 32
    assert MX.cross_coarse_mass(uniform, H) == pytest.approx(32 / 49, abs=1e-12)


def test_cross_coarse_mass_identity_and_block_diagonal():
    assert MX.cross_coarse_mass(np.eye(7), H) == 0.0
    block = np.zeros((7, 7))
    for ci in range(3):
        kids = H.children(ci)
        for i in kids:
            block[i, kids] = 1 / len(kids)
    assert MX.cross_coarse_mass(block, H) == 0.0


def test_cross_coarse_mass_complement_of_within():
    rng = np.random.default_rng(3)
    raw = rng.uniform(size=(7, 7))
    norm = raw / raw.sum(axis=1, keepdims=True)
    cross = MX.cross_coarse_mass(norm, H)
    parent = np.asarray(H.parent)
    within = (norm * (parent[None, :] == parent[:, None])).sum(axis=1).mean()
    assert cross + within == pytest.approx(1.0, abs=1e-12)


def test_cross_coarse_mass_shape_check():
    with pytest.raises(ValueError, match="7x7"):
        MX.cross_coarse_mass(np.eye(3), H)


# ---------------------------------------------------------------------------
# CI aggregation

def test_aggregate_ci_identical_values():
    ci = MX.aggregate_ci([0.4, 0.4, 0.4, 0.4])
    assert ci.mean == 0.4 and ci.half_width == 0.0 and not ci.degenerate


def test_aggregate_ci_zero_one_pair():
    ci = MX.aggregate_ci([0.0, 1.0])
    assert ci.mean == 0.5
    # sd(ddof=1) of {0,1} is sqrt(1/2); 1.96 * sqrt(.5) / sqrt(2) = 0.98
    assert ci.half_width == pytest.approx(0.98, abs=1e-12)


def test_aggregate_ci_mean_and_permutation_invariance():
    vals = [0.5, 0.6, 0.55, 0.65, 0.45]
    a = MX.aggregate_ci(vals)
    b = MX.aggregate_ci(list(reversed(vals)))
    assert a.mean == pytest.approx(0.55, abs=1e-12)
    assert a.mean == b.mean and a.half_width == pytest.approx(b.half_width, abs=1e-15)


def test_aggregate_ci_single_value_degenerate():
    ci = MX.aggregate_ci([0.7])
    assert ci == MX.CiValue(0.7, 0.0, 1, True)


def test_aggregate_ci_student_t_wider_than_normal():
    vals = [0.2, 0.5, 0.9, 0.4]
    normal = MX.aggregate_ci(vals, "normal")
    student = MX.aggregate_ci(vals, "student-t")
    assert student.half_width > normal.half_width
    # t_{0.975, 3} = 3.1824 vs 1.96
    assert student.half_width / normal.half_width == pytest.approx(3.1824 / 1.96, abs=1e-3)


def test_aggregate_ci_rejects_unknown_method():
    with pytest.raises(ValueError, match="unknown CI method"):
        MX.aggregate_ci([0.1, 0.2], "bootstrap")


def test_format_cell():
    assert MX.format_cell(MX.CiValue(0.8571, 0.0123, 10, False)) == "0.857 ± 0.012"
    assert MX.format_cell(None) == "n/a"


# ---------------------------------------------------------------------------
# report rendering

def _report(rng, runs=3):
    per_run = {"flat": [], "hier": []}
    for family in per_run:
        for _ in range(runs):
            true = rng.integers(0, 7, size=60)
            pred = np.where(rng.uniform(size=60) < 0.7, true, rng.integers(0, 7, size=60))
            per_run[family].append(
                MX.compute_per_run_metrics(_bundle_from_preds(true, pred), H))
    return MX.MetricsReport(H, per_run)


def test_render_report_layout(tmp_path, rng):
    report = _report(rng)
    mcsv = tmp_path / "metrics.csv"
    mjson = tmp_path / "metrics.json"
    conf = {"flat": tmp_path / "confusion_flat.csv",
            "hier": tmp_path / "confusion_hier.csv"}
    MX.render_report(report, mcsv, mjson, conf, config_hash="abc123def456")

    lines = mcsv.read_text().splitlines()
    assert lines[0] == "# config_hash=abc123def456"
    assert lines[1].split(",")[:2] == ["metric", "model"]
    assert lines[1].split(",")[2:] == list(H.fine_names)
    data = lines[2:]
    assert len(data) == 10  # 5 metrics x 2 models
    cell_re = re.compile(r"^\d\.\d{3} ± \d+\.\d{3}$")
    for line, (metric, label) in zip(data, [(m, l) for m in MX.METRIC_NAMES
                                            for l in ("flat", "hierarchical")]):
        fields = next(iter([line.split(",")]))
        assert fields[0] == metric and fields[1] == label
        assert len(fields) == 9
        for cell in fields[2:]:
            assert cell_re.match(cell) or cell == "n/a", cell

    payload = json.loads(mjson.read_text())
    assert payload["config_hash"] == "abc123def456"
    assert payload["classes"] == list(H.fine_names)
    assert set(payload["metrics"]) == set(MX.METRIC_NAMES)
    assert payload["runs"] == {"flat": 3, "hier": 3}
    for family in ("flat", "hier"):
        conf_lines = conf[family].read_text().splitlines()
        assert conf_lines[0] == "# config_hash=abc123def456"
        assert conf_lines[1] == "true\\predicted," + ",".join(H.fine_names)
        assert len(conf_lines) == 9  # hash + header + 7 true-class rows
        first = conf_lines[2].split(",")
        assert first[0] == H.fine_names[0] and len(first) == 8


def test_report_cell_matches_direct_aggregation(rng):
    report = _report(rng, runs=4)
    runs = report.per_run["hier"]
    direct = MX.aggregate_ci([r["per_class"]["Celiac"]["Accuracy"] for r in runs])
    assert report.cell("Accuracy", "hier", "Celiac") == direct


def test_bundle_rejects_bad_probability_rows():
    probs = np.full((2, 7), 1 / 7)
    bad = probs.copy()
    bad[0, 0] += 0.1
    with pytest.raises(ValueError, match="deviate from 1"):
        MX.PredictionBundle(bad, np.full((2, 3), 1 / 3),
                            np.array([0, 1]), np.array([0, 0]))
