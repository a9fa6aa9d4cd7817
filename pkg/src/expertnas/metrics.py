"""Accuracy, tone-group fairness (adjusted SPD), robustness to light and overfitting."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .data import N_GROUPS, Dataset, DatasetError, Split, poorly_lit_subset

DEFAULT_BETA = 0.2
SPD_MODES = ("sum", "mean")
REPORT_COLUMNS = ("model_id", "encoding", "val_acc", "test_acc", "fairness", "spd", "spd_mode",
                  "beta", "robustness", "overfitting", "param_count")


class UndefinedMetricError(ValueError):
    """A metric was requested over an empty set of samples."""


@dataclass
class GroupAccuracies:
    acc: np.ndarray  # (10,), index g-1 holds group g
    counts: np.ndarray  # (10,)
    minority_index: int  # 1..10

    @property
    def minority_accuracy(self) -> float:
        return float(self.acc[self.minority_index - 1])


def minority_group(counts) -> int:
    """1-based group with the fewest samples; ties go to the higher group index."""
    counts = np.asarray(counts)
    return int(np.flatnonzero(counts == counts.min())[-1]) + 1


def make_group_accuracies(acc, counts) -> GroupAccuracies:
    acc = np.asarray(acc, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.int64)
    if acc.shape != (N_GROUPS,) or counts.shape != (N_GROUPS,):
        raise ValueError(f"need {N_GROUPS} group accuracies and counts")
    return GroupAccuracies(acc, counts, minority_group(counts))


def _predictions(model_or_preds, split: Split) -> np.ndarray:
    if isinstance(model_or_preds, np.ndarray):
        return model_or_preds
    preds, _ = model_or_preds.predict(split.images)
    return preds


def accuracy(model_or_preds, split: Split) -> float:
    """Fraction of correct argmax predictions; accepts a model or precomputed predictions."""
    if len(split) == 0:
        raise UndefinedMetricError(f"accuracy undefined on empty split {split.name!r}")
    preds = _predictions(model_or_preds, split)
    return float(np.mean(preds == split.labels))


def group_accuracies(model_or_preds, split: Split) -> GroupAccuracies:
    preds = _predictions(model_or_preds, split)
    acc = np.zeros(N_GROUPS)
    counts = np.zeros(N_GROUPS, dtype=np.int64)
    for g in range(1, N_GROUPS + 1):
        sel = split.groups == g
        counts[g - 1] = int(sel.sum())
        if counts[g - 1] == 0:
            raise UndefinedMetricError(f"group {g} has no samples in split {split.name!r}")
        acc[g - 1] = float(np.mean(preds[sel] == split.labels[sel]))
    return make_group_accuracies(acc, counts)


def spd(groups: GroupAccuracies, mode: str = "sum") -> float:
    """Sum (or mean) over groups of |acc_g - acc_minority|."""
    if mode not in SPD_MODES:
        raise ValueError(f"spd mode must be one of {SPD_MODES}, got {mode!r}")
    for g, n in enumerate(groups.counts, start=1):
        if n < 1:
            raise UndefinedMetricError(f"group {g} is empty; SPD undefined")
    total = float(np.sum(np.abs(groups.acc - groups.minority_accuracy)))
    return total if mode == "sum" else total / N_GROUPS


def fairness(spd_value: float, beta: float = DEFAULT_BETA) -> float:
    """(beta - SPD) / beta. Negative when SPD exceeds beta; never clamped."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    return (beta - spd_value) / beta


def robustness(model_or_preds, test_split: Split, light_threshold: float = 0.5) -> float:
    """Accuracy restricted to test samples with lighting below the threshold.

    When predictions are passed they must cover the full ``test_split``.
    """
    try:
        sub = poorly_lit_subset(test_split, light_threshold)
    except DatasetError as exc:
        raise UndefinedMetricError(str(exc)) from exc
    if isinstance(model_or_preds, np.ndarray):
        return float(np.mean(model_or_preds[test_split.lighting < light_threshold] == sub.labels))
    return accuracy(model_or_preds, sub)


def overfitting(val_acc: float, test_acc: float) -> float:
    return val_acc - test_acc


@dataclass
class MetricReport:
    val_accuracy: float
    test_accuracy: float
    fairness_score: float
    spd: float
    robustness: float
    overfitting: float
    beta: float = DEFAULT_BETA
    spd_mode: str = "sum"
    group: GroupAccuracies | None = None

    @classmethod
    def build(cls, val_acc: float, test_acc: float, groups: GroupAccuracies, robust: float,
              beta: float = DEFAULT_BETA, spd_mode: str = "sum") -> "MetricReport":
        s = spd(groups, spd_mode)
        return cls(val_acc, test_acc, fairness(s, beta), s, robust, overfitting(val_acc, test_acc),
                   beta, spd_mode, groups)

    def row(self, model_id: str, encoding, param_count: int) -> dict:
        return {
            "model_id": model_id,
            "encoding": str(encoding),
            "val_acc": repr(float(self.val_accuracy)),
            "test_acc": repr(float(self.test_accuracy)),
            "fairness": repr(float(self.fairness_score)),
            "spd": repr(float(self.spd)),
            "spd_mode": self.spd_mode,
            "beta": repr(float(self.beta)),
            "robustness": repr(float(self.robustness)),
            "overfitting": repr(float(self.overfitting)),
            "param_count": str(int(param_count)),
        }


def evaluate_model(model, dataset: Dataset, beta: float = DEFAULT_BETA, spd_mode: str = "sum",
                   light_threshold: float = 0.5) -> MetricReport:
    """Compute every metric from one prediction pass over val and test."""
    val_preds, _ = model.predict(dataset.val.images)
    test_preds, _ = model.predict(dataset.test.images)
    return report_from_predictions(val_preds, test_preds, dataset, beta, spd_mode, light_threshold)


def report_from_predictions(val_preds, test_preds, dataset: Dataset, beta: float = DEFAULT_BETA,
                            spd_mode: str = "sum", light_threshold: float = 0.5) -> MetricReport:
    val_acc = accuracy(val_preds, dataset.val)
    test_acc = accuracy(test_preds, dataset.test)
    groups = group_accuracies(test_preds, dataset.test)
    robust = robustness(test_preds, dataset.test, light_threshold)
    return MetricReport.build(val_acc, test_acc, groups, robust, beta, spd_mode)


def write_report_csv(rows: list[dict], path=None) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def group_accuracy_rows(groups: GroupAccuracies) -> list[dict]:
    return [{"group": g, "count": int(groups.counts[g - 1]), "accuracy": repr(float(groups.acc[g - 1])),
             "is_minority": int(g == groups.minority_index)} for g in range(1, N_GROUPS + 1)]
