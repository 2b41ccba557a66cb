"""Per-class evaluation, confusion analysis, and run aggregation.

All functions are pure over PredictionBundles.  AUC uses the Mann-Whitney
midrank formulation, which is float-for-float identical to counting
concordant pairs (ties at half weight).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .hierarchy import ClassHierarchy

METRIC_NAMES = ("Accuracy", "AUC", "Precision", "Recall", "F1")
MODEL_LABELS = {"flat": "flat", "hier": "hierarchical"}


@dataclass
class PredictionBundle:
    """Per-example probabilities and truths at both levels for one run."""

    fine_probs: np.ndarray  # [N, n_fine]
    coarse_probs: np.ndarray  # [N, n_coarse]
    fine_true: np.ndarray  # [N]
    coarse_true: np.ndarray  # [N]

    def __post_init__(self):
        n = self.fine_probs.shape[0]
        if n == 0:
            raise ValueError("empty prediction bundle")
        for name, probs in (("fine", self.fine_probs), ("coarse", self.coarse_probs)):
            if probs.shape[0] != n:
                raise ValueError(f"{name} probability rows do not match example count")
            sums = probs.sum(axis=1)
            if np.any(np.abs(sums - 1.0) > 1e-6):
                worst = float(np.max(np.abs(sums - 1.0)))
                raise ValueError(f"{name} probability rows deviate from 1 by {worst}")
        if self.fine_true.shape != (n,) or self.coarse_true.shape != (n,):
            raise ValueError("truth arrays must match example count")

    @property
    def n(self) -> int:
        return self.fine_probs.shape[0]

    @property
    def fine_pred(self) -> np.ndarray:
        return self.fine_probs.argmax(axis=1)

    @property
    def coarse_pred(self) -> np.ndarray:
        return self.coarse_probs.argmax(axis=1)


def per_class_accuracy(bundle: PredictionBundle, c: int, level: str = "fine") -> float:
    """One-vs-rest accuracy of the binarized decision for class c."""
    pred, true = _level_arrays(bundle, level)
    return float(np.mean((pred == c) == (true == c)))


def _level_arrays(bundle, level):
    if level == "fine":
        return bundle.fine_pred, bundle.fine_true
    if level == "coarse":
        return bundle.coarse_pred, bundle.coarse_true
    raise ValueError(f"unknown level {level!r}")


def auc_ovr(scores: np.ndarray, positives: np.ndarray) -> Optional[float]:
    """Mann-Whitney AUC of scores for the positive class, None if degenerate.

    Equals (#(pos > neg) + 0.5 * #(pos == neg)) / (n_pos * n_neg), computed
    through midranks so it costs O(n log n).
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size, dtype=np.float64)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        # midrank: average of the 1-based ranks i+1 .. j+1
        ranks[order[i:j + 1]] = (i + j + 2) / 2.0
        i = j + 1
    rank_sum = ranks[positives].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass(frozen=True)
class ClassPRF:
    precision: float
    recall: float
    f1: float
    zero_division: tuple  # names of quantities whose denominator was zero


def precision_recall_f1(bundle: PredictionBundle, c: int, level: str = "fine") -> ClassPRF:
    pred, true = _level_arrays(bundle, level)
    tp = int(np.sum((pred == c) & (true == c)))
    fp = int(np.sum((pred == c) & (true != c)))
    fn = int(np.sum((pred != c) & (true == c)))
    flags = []
    if tp + fp == 0:
        precision = 0.0
        flags.append("precision")
    else:
        precision = tp / (tp + fp)
    if tp + fn == 0:
        recall = 0.0
        flags.append("recall")
    else:
        recall = tp / (tp + fn)
    if precision + recall == 0.0:
        f1 = 0.0
        flags.append("f1")
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return ClassPRF(precision, recall, f1, tuple(flags))


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [K,K] ints, rows = true class
    normalized: np.ndarray  # rows sum to 1, or all-zero when flagged
    zero_rows: tuple  # class indices with no true examples


def confusion(bundle: PredictionBundle, level: str = "fine") -> ConfusionMatrix:
    pred, true = _level_arrays(bundle, level)
    k = bundle.fine_probs.shape[1] if level == "fine" else bundle.coarse_probs.shape[1]
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    row_sums = counts.sum(axis=1)
    normalized = np.zeros((k, k), dtype=np.float64)
    nonzero = row_sums > 0
    normalized[nonzero] = counts[nonzero] / row_sums[nonzero, None]
    return ConfusionMatrix(counts, normalized,
                           tuple(int(i) for i in np.flatnonzero(~nonzero)))


def cross_coarse_mass(matrix, hierarchy: ClassHierarchy) -> float:
    """Mean over rows of normalized mass landing in a different coarse family.

    For a uniform matrix over the default 3/2/2 hierarchy the foreign cell
    count is 49 - (9+4+4) = 32, so the value is 32/49.
    """
    normalized = matrix.normalized if isinstance(matrix, ConfusionMatrix) else np.asarray(matrix)
    k = hierarchy.n_fine
    if normalized.shape != (k, k):
        raise ValueError(f"expected a {k}x{k} matrix, got {normalized.shape}")
    parent = np.asarray(hierarchy.parent)
    foreign = parent[None, :] != parent[:, None]
    return float((normalized * foreign).sum(axis=1).mean())


@dataclass(frozen=True)
class CiValue:
    mean: float
    half_width: float
    n: int
    degenerate: bool  # n == 1, half-width trivially 0


def aggregate_ci(values: Sequence[float], method: str = "normal") -> CiValue:
    """Mean with 95% half-width over repeated runs.

    method 'normal' uses 1.96 * sd / sqrt(n) with the sample standard
    deviation; 'student-t' swaps 1.96 for the t quantile (needs scipy).
    """
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size < 1:
        raise ValueError("aggregate_ci needs at least one value")
    mean = float(arr.mean())
    if arr.size == 1:
        return CiValue(mean, 0.0, 1, True)
    if np.all(arr == arr[0]):
        # literally identical runs: width is exactly 0, not std-of-roundoff
        return CiValue(float(arr[0]), 0.0, arr.size, False)
    sd = float(arr.std(ddof=1))
    if method == "normal":
        factor = 1.96
    elif method == "student-t":
        from scipy import stats

        factor = float(stats.t.ppf(0.975, arr.size - 1))
    else:
        raise ValueError(f"unknown CI method {method!r}")
    return CiValue(mean, factor * sd / np.sqrt(arr.size), arr.size, False)


# ---------------------------------------------------------------------------
# report rendering

def format_cell(ci: Optional[CiValue]) -> str:
    if ci is None:
        return "n/a"
    return f"{ci.mean:.3f} ± {ci.half_width:.3f}"


def compute_per_run_metrics(bundle: PredictionBundle, hierarchy: ClassHierarchy) -> dict:
    """All per-class metrics plus confusion for one run's bundle."""
    per_class = {}
    for c, name in enumerate(hierarchy.fine_names):
        prf = precision_recall_f1(bundle, c)
        scores = bundle.fine_probs[:, c]
        per_class[name] = {
            "Accuracy": per_class_accuracy(bundle, c),
            "AUC": auc_ovr(scores, bundle.fine_true == c),
            "Precision": prf.precision,
            "Recall": prf.recall,
            "F1": prf.f1,
            "zero_division": list(prf.zero_division),
        }
    conf = confusion(bundle)
    coarse_acc = float(np.mean(bundle.coarse_pred == bundle.coarse_true))
    fine_acc = float(np.mean(bundle.fine_pred == bundle.fine_true))
    return {
        "per_class": per_class,
        "confusion_normalized": conf.normalized,
        "confusion_zero_rows": conf.zero_rows,
        "cross_coarse_mass": cross_coarse_mass(conf, hierarchy),
        "coarse_accuracy": coarse_acc,
        "fine_accuracy": fine_acc,
    }


def _aggregate_metric(per_run: list, cls: str, metric: str, ci_method: str) -> Optional[CiValue]:
    values = [run["per_class"][cls][metric] for run in per_run]
    kept = [v for v in values if v is not None]
    if not kept:
        return None
    return aggregate_ci(kept, ci_method)


@dataclass
class MetricsReport:
    """Aggregated metric table and confusion grids for both model families."""

    hierarchy: ClassHierarchy
    per_run: dict  # family -> list of compute_per_run_metrics dicts
    ci_method: str = "normal"

    def cell(self, metric: str, family: str, cls: str) -> Optional[CiValue]:
        return _aggregate_metric(self.per_run[family], cls, metric, self.ci_method)

    def cross_coarse(self, family: str) -> CiValue:
        return aggregate_ci([r["cross_coarse_mass"] for r in self.per_run[family]],
                            self.ci_method)

    def level_accuracy(self, family: str, level: str) -> CiValue:
        key = "coarse_accuracy" if level == "coarse" else "fine_accuracy"
        return aggregate_ci([r[key] for r in self.per_run[family]], self.ci_method)

    def confusion_cells(self, family: str):
        """[K,K] grid of CiValue over runs of the normalized confusion."""
        runs = self.per_run[family]
        k = self.hierarchy.n_fine
        grid = []
        for i in range(k):
            row = []
            for j in range(k):
                row.append(aggregate_ci([r["confusion_normalized"][i, j] for r in runs],
                                        self.ci_method))
            grid.append(row)
        return grid

    def to_json_dict(self, config_hash: str = "") -> dict:
        classes = list(self.hierarchy.fine_names)
        metrics = {}
        for metric in METRIC_NAMES:
            metrics[metric] = {}
            for family in ("flat", "hier"):
                metrics[metric][family] = {}
                for cls in classes:
                    ci = self.cell(metric, family, cls)
                    metrics[metric][family][cls] = (
                        None if ci is None else
                        {"mean": ci.mean, "half_width": ci.half_width, "n": ci.n})
        ccm = {family: self.cross_coarse(family) for family in ("flat", "hier")}
        return {
            "config_hash": config_hash,
            "classes": classes,
            "coarse_classes": list(self.hierarchy.coarse_names),
            "models": ["flat", "hier"],
            "runs": {family: len(self.per_run[family]) for family in ("flat", "hier")},
            "ci_method": self.ci_method,
            "metrics": metrics,
            "level_accuracy": {
                family: {
                    level: {"mean": self.level_accuracy(family, level).mean,
                            "half_width": self.level_accuracy(family, level).half_width}
                    for level in ("coarse", "fine")}
                for family in ("flat", "hier")},
            "cross_coarse_mass": {
                "flat": {"mean": ccm["flat"].mean, "half_width": ccm["flat"].half_width},
                "hier": {"mean": ccm["hier"].mean, "half_width": ccm["hier"].half_width},
                "difference_hier_minus_flat": ccm["hier"].mean - ccm["flat"].mean,
            },
        }


def render_report(report: MetricsReport, metrics_csv, metrics_json,
                  confusion_csv_by_family: dict, config_hash: str = "") -> None:
    """Write the metric table (CSV + JSON) and one confusion CSV per family.

    CSV layout mirrors the reporting tables: metric x model rows, one
    column per fine class, cells "mean ± half-width" at 3 decimals.
    """
    classes = list(report.hierarchy.fine_names)
    with open(metrics_csv, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(["metric", "model"] + classes)
        for metric in METRIC_NAMES:
            for family in ("flat", "hier"):
                cells = [format_cell(report.cell(metric, family, cls)) for cls in classes]
                writer.writerow([metric, MODEL_LABELS[family]] + cells)
    payload = report.to_json_dict(config_hash)
    with open(metrics_json, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for family, path in confusion_csv_by_family.items():
        grid = report.confusion_cells(family)
        with open(path, "w", newline="") as fh:
            fh.write(f"# config_hash={config_hash}\n")
            writer = csv.writer(fh)
            writer.writerow(["true\\predicted"] + classes)
            for i, cls in enumerate(classes):
                writer.writerow([cls] + [format_cell(ci) for ci in grid[i]])
