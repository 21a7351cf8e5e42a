# Copyright (c) 2025 Michael Litvin
# Licensed under AGPL-3.0-or-later - see LICENSE file for details
"""Evaluation quantities for the classification and Tc-regression branches.

Pure functions over finished prediction lists. Positive class = superconductor.
A ratio with a zero denominator is None (null in JSON), never NaN, 0 or 1.
"""
import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from sklearn.metrics import confusion_matrix

from shared.errors import DataError

logger = logging.getLogger(__name__)

REPORT_FIELDS = ('accuracy', 'precision', 'recall', 'f1', 'reg_mae_kelvin', 'class_accuracy',
                 'mean_tc_kelvin')


class LengthMismatch(DataError):
    category = 'length_mismatch'


class EmptyEvaluation(DataError):
    category = 'empty'


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class ClassificationMetrics:
    accuracy: float
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    reg_mae_kelvin: float
    mean_tc_kelvin: float
    n_records: int

    @property
    def class_accuracy(self) -> float:
        return self.accuracy

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['class_accuracy'] = self.class_accuracy
        return data


@dataclass(frozen=True)
class MajorityBaseline:
    predicted_class: int
    accuracy: float
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _check_pair(a: Sequence, b: Sequence, what: str) -> None:
    if len(a) != len(b):
        raise LengthMismatch(f"{what}: {len(a)} predictions vs {len(b)} targets")
    if len(a) == 0:
        raise EmptyEvaluation(f"{what}: nothing to evaluate")


def _ratio(num: float, den: float) -> Optional[float]:
    return num / den if den else None


def confusion(preds: Sequence[int], labels: Sequence[int]) -> ConfusionCounts:
    _check_pair(preds, labels, "confusion")
    tn, fp, fn, tp = confusion_matrix(np.asarray(labels, dtype=int), np.asarray(preds, dtype=int),
                                      labels=[0, 1]).ravel()
    return ConfusionCounts(tp=int(tp), fp=int(fp), tn=int(tn), fn=int(fn))


def f1_score(precision: Optional[float], recall: Optional[float]) -> Optional[float]:
    """Harmonic mean; undefined when either side is undefined or both are 0"""
    if precision is None or recall is None or precision + recall == 0:
        return None
    return 2.0 * precision * recall / (precision + recall)


def classification_metrics(counts: ConfusionCounts) -> ClassificationMetrics:
    if counts.total == 0:
        raise EmptyEvaluation("classification_metrics: no counts")
    precision = _ratio(counts.tp, counts.tp + counts.fp)
    recall = _ratio(counts.tp, counts.tp + counts.fn)
    return ClassificationMetrics(
        accuracy=(counts.tp + counts.tn) / counts.total,
        precision=precision,
        recall=recall,
        f1=f1_score(precision, recall),
    )


def regression_mae(tc_pred: Sequence[float], tc_true: Sequence[float]) -> float:
    """Mean |pred - true| in kelvin over the whole evaluated set"""
    _check_pair(tc_pred, tc_true, "regression_mae")
    return float(np.mean(np.abs(np.asarray(tc_pred, dtype=np.float64) - np.asarray(tc_true, dtype=np.float64))))


def majority_baseline(labels: Sequence[int]) -> MajorityBaseline:
    """Constant predictor of the more frequent class (ties -> superconductor)."""
    if len(labels) == 0:
        raise EmptyEvaluation("majority_baseline: no labels")
    positives = int(np.sum(np.asarray(labels, dtype=int) == 1))
    predicted = 1 if positives * 2 >= len(labels) else 0
    metrics = classification_metrics(confusion([predicted] * len(labels), labels))
    return MajorityBaseline(predicted, metrics.accuracy, metrics.precision, metrics.recall, metrics.f1)


def metrics_report(tc_pred: Sequence[float], sc_pred: Sequence[int],
                   tc_true: Sequence[float], labels: Sequence[int]) -> MetricsReport:
    cls = classification_metrics(confusion(sc_pred, labels))
    if cls.precision is None or cls.recall is None:
        logger.warning(f"Precision/recall undefined on {len(labels)} records")
    return MetricsReport(
        accuracy=cls.accuracy,
        precision=cls.precision,
        recall=cls.recall,
        f1=cls.f1,
        reg_mae_kelvin=regression_mae(tc_pred, tc_true),
        mean_tc_kelvin=float(np.mean(tc_true)),
        n_records=len(labels),
    )


def aggregate(per_split: Sequence[MetricsReport]) -> Dict[str, Dict[str, Optional[float]]]:
    """Per field: mean and sample sd (n-1) over the splits where it is defined.

    sd is None with fewer than two defined values.
    """
    if not per_split:
        raise EmptyEvaluation("aggregate: no reports")
    out: Dict[str, Dict[str, Optional[float]]] = {}
    for name in REPORT_FIELDS:
        values = [getattr(r, name) for r in per_split]
        values = np.array([v for v in values if v is not None], dtype=np.float64)
        out[name] = {
            'mean': float(values.mean()) if values.size else None,
            'sd': float(values.std(ddof=1)) if values.size >= 2 else None,
            'n': int(values.size),
        }
    return out


def format_mean_sd(mean: Optional[float], sd: Optional[float], digits: int = 3) -> str:
    """'4.497 ± 0.328'; the sd part is dropped when undefined"""
    if mean is None:
        return 'NA'
    if sd is None:
        return f"{mean:.{digits}f}"
    return f"{mean:.{digits}f} ± {sd:.{digits}f}"


def format_percent(mean: Optional[float], sd: Optional[float]) -> str:
    """Fractions as '83.04 ± 0.6%'"""
    if mean is None:
        return 'NA'
    if sd is None:
        return f"{mean * 100:.2f}%"
    return f"{mean * 100:.2f} ± {sd * 100:.1f}%"


def format_table(summary: Dict[str, Dict[str, Optional[float]]]) -> Dict[str, str]:
    """Published-table rendering of an aggregate() result"""
    mae, tc = summary['reg_mae_kelvin'], summary['mean_tc_kelvin']
    avg_tc = f"{tc['mean']:.4f}" if tc['mean'] is not None else 'NA'
    return {
        'avg_pred_diff': f"{format_mean_sd(mae['mean'], mae['sd'])} / {avg_tc}",
        'classification': format_percent(summary['accuracy']['mean'], summary['accuracy']['sd']),
        'precision': format_percent(summary['precision']['mean'], summary['precision']['sd']),
        'recall': format_percent(summary['recall']['mean'], summary['recall']['sd']),
        'f1': format_percent(summary['f1']['mean'], summary['f1']['sd']),
    }


def summarize_splits(reports: List[MetricsReport]) -> Dict[str, Any]:
    summary = aggregate(reports)
    return {'fields': summary, 'formatted': format_table(summary)}
