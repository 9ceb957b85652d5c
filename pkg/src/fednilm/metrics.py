"""MAE, confusion counts, F1 and the federated-vs-baseline indicators."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DimensionError, ZeroDenominatorError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class MetricReport:
    mae: float  # watts; NaN when not computed (classification without status MAE)
    f1: float
    precision: float
    recall: float
    counts: ConfusionCounts
    n_points: int
    f1_degenerate: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mae"] = None if math.isnan(self.mae) else self.mae
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        d = dict(d)
        d["counts"] = ConfusionCounts(**d["counts"])
        d["mae"] = float("nan") if d.get("mae") is None else float(d["mae"])
        return cls(**d)


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"arrays must be 1-D and equal length, got {a.shape} and {b.shape}")
    if a.size == 0:
        raise DimensionError("empty arrays")
    return a, b


def mae(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(p - t)))


def confusion(pred_on, true_on) -> ConfusionCounts:
    p = np.asarray(pred_on).astype(bool)
    t = np.asarray(true_on).astype(bool)
    if p.shape != t.shape:
        raise DimensionError(f"length mismatch: {p.shape} vs {t.shape}")
    tp = int(np.count_nonzero(p & t))
    tn = int(np.count_nonzero(~p & ~t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, tn, fp, fn)


def f1(counts: ConfusionCounts) -> tuple[float, bool]:
    """``2tp / (2tp + fn + fp)`` and a flag set when that denominator is zero."""
    denom = 2 * counts.tp + counts.fn + counts.fp
    if denom == 0:
        return 0.0, True
    return 2 * counts.tp / denom, False


def precision_recall(counts: ConfusionCounts) -> tuple[float, float]:
    p_den = counts.tp + counts.fp
    r_den = counts.tp + counts.fn
    return (counts.tp / p_den if p_den else 0.0, counts.tp / r_den if r_den else 0.0)


def report_from(pred_on, true_on, mae_value: float) -> MetricReport:
    counts = confusion(pred_on, true_on)
    f, degenerate = f1(counts)
    prec, rec = precision_recall(counts)
    return MetricReport(mae_value, f, prec, rec, counts, counts.total, degenerate)


def _pct_change(num: float, den: float, what: str) -> float:
    if den == 0:
        raise ZeroDenominatorError(f"{what} is zero")
    return 100.0 * num / den


def improvement(avg_mae_loc: float, mae_fed: float, avg_f_loc: float, f_fed: float) -> tuple[float, float]:
    """Percent improvement of the federated model over the mean local model.

    Positive MAE improvement means lower federated MAE; positive F1
    improvement means higher federated F1.
    """
    imp_mae = _pct_change(avg_mae_loc - mae_fed, avg_mae_loc, "average local MAE")
    imp_f = _pct_change(f_fed - avg_f_loc, avg_f_loc, "average local F1")
    return imp_mae, imp_f


def gap(mae_cent: float, mae_fed: float, f_cent: float, f_fed: float) -> tuple[float, float]:
    """Percent gap to the centrally trained model.

    Negative values mean the federated model is worse (higher MAE, lower F1).
    """
    gap_mae = _pct_change(mae_cent - mae_fed, mae_cent, "centralized MAE")
    gap_f = _pct_change(f_fed - f_cent, f_cent, "centralized F1")
    return gap_mae, gap_f


@dataclass(frozen=True)
class ComparisonReport:
    imp_mae_pct: float
    imp_f_pct: float
    gap_mae_pct: float
    gap_f_pct: float
    avg_mae_loc: float
    mae_fed: float
    mae_cent: float
    avg_f_loc: float
    f_fed: float
    f_cent: float

    def to_dict(self) -> dict:
        return asdict(self)


def _maybe(fn, *args):
    try:
        return fn(*args)
    except ZeroDenominatorError:
        return float("nan")


def compare(
    avg_mae_loc: float, mae_fed: float, mae_cent: float, avg_f_loc: float, f_fed: float, f_cent: float,
    strict: bool = True,
) -> ComparisonReport:
    """All four indicators at once.

    With ``strict=False`` an indicator whose denominator is zero becomes NaN
    instead of raising.
    """
    if strict:
        imp_mae, imp_f = improvement(avg_mae_loc, mae_fed, avg_f_loc, f_fed)
        gap_mae, gap_f = gap(mae_cent, mae_fed, f_cent, f_fed)
    else:
        imp_mae = _maybe(lambda: improvement(avg_mae_loc, mae_fed, 1.0, 1.0)[0])
        imp_f = _maybe(lambda: improvement(1.0, 1.0, avg_f_loc, f_fed)[1])
        gap_mae = _maybe(lambda: gap(mae_cent, mae_fed, 1.0, 1.0)[0])
        gap_f = _maybe(lambda: gap(1.0, 1.0, f_cent, f_fed)[1])
    return ComparisonReport(imp_mae, imp_f, gap_mae, gap_f, avg_mae_loc, mae_fed, mae_cent, avg_f_loc, f_fed, f_cent)


def evaluate_model(spec, params, test_set, threshold, mode: str | None = None, status_mae: bool = False) -> MetricReport:
    """Score a model on a windowed test set.

    Regression predictions are mapped back to watts, clamped at zero and
    thresholded for on/off.  Classification uses probability > 0.5; its MAE is
    over 0/1 status values and only computed when ``status_mae`` is set.
    """
    from .model import CLASSIFICATION, predict

    mode = mode or spec.head_mode
    if test_set.N == 0:
        raise DimensionError("empty test set")
    out = predict(spec, params, test_set.inputs)
    watts_thr = threshold.watts if hasattr(threshold, "watts") else float(threshold)
    if mode == CLASSIFICATION:
        pred_on = out > 0.5
        value = mae(pred_on.astype(np.float64), test_set.target_on) if status_mae else float("nan")
        return report_from(pred_on, test_set.target_on, value)
    watts = np.maximum(test_set.target_stats.invert(out), 0.0)
    return report_from(watts > watts_thr, test_set.target_on, mae(watts, test_set.target_power))
