"""Forecast verification: RMSE/MAE and thresholded CSI/POD/FAR."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

POLLUTION_THRESHOLD = 75.0
LEADTIMES_H = (3, 12, 24, 36, 48, 60, 72)
STEP_HOURS = 3


@dataclass(frozen=True)
class ConfusionCounts:
    hits: int = 0
    misses: int = 0
    false_alarms: int = 0
    correct_negatives: int = 0

    def __post_init__(self):
        for name in ("hits", "misses", "false_alarms", "correct_negatives"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def total(self) -> int:
        return self.hits + self.misses + self.false_alarms + self.correct_negatives

    def __add__(self, other: ConfusionCounts) -> ConfusionCounts:
        return ConfusionCounts(
            self.hits + other.hits,
            self.misses + other.misses,
            self.false_alarms + other.false_alarms,
            self.correct_negatives + other.correct_negatives,
        )


@dataclass
class MetricsReport:
    rmse: float
    mae: float
    csi: float
    pod: float
    far: float
    per_leadtime: dict[int, dict[str, float]] = field(default_factory=dict)
    categorical: str = "pooled"
    degenerate: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "mae": self.mae,
            "csi": self.csi,
            "pod": self.pod,
            "far": self.far,
            "per_leadtime": {str(k): v for k, v in self.per_leadtime.items()},
            "categorical": self.categorical,
            "degenerate": list(self.degenerate),
        }


def rmse_mae(pred, truth) -> tuple[float, float]:
    pred, truth = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"rmse_mae: shape mismatch {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ValueError("rmse_mae: empty input")
    r = truth - pred
    return float(np.sqrt(np.mean(r * r))), float(np.mean(np.abs(r)))


def binarize_and_count(pred, truth, threshold: float = POLLUTION_THRESHOLD) -> ConfusionCounts:
    """Confusion counts with "polluted" meaning strictly above ``threshold``."""
    p = np.asarray(pred) > threshold
    t = np.asarray(truth) > threshold
    return ConfusionCounts(
        int(np.sum(p & t)),
        int(np.sum(~p & t)),
        int(np.sum(p & ~t)),
        int(np.sum(~p & ~t)),
    )


def csi_pod_far(c: ConfusionCounts) -> tuple[float, float, float]:
    """Critical success index, probability of detection, false alarm ratio.

    Empty denominators resolve to the no-error value: POD = 1 with no
    observed events, FAR = 0 with no forecast events, CSI = 1 with neither.
    """
    d_csi = c.hits + c.misses + c.false_alarms
    d_pod = c.hits + c.misses
    d_far = c.hits + c.false_alarms
    csi = c.hits / d_csi if d_csi else 1.0
    pod = c.hits / d_pod if d_pod else 1.0
    far = c.false_alarms / d_far if d_far else 0.0
    return csi, pod, far


def degenerate_notes(c: ConfusionCounts) -> list[str]:
    notes = []
    if c.hits + c.misses == 0:
        notes.append("POD: no observed events, set to 1.0")
    if c.hits + c.false_alarms == 0:
        notes.append("FAR: no forecast events, set to 0.0")
    if c.hits + c.misses + c.false_alarms == 0:
        notes.append("CSI: no events at all, set to 1.0")
    return notes


def _score(pred: np.ndarray, truth: np.ndarray, threshold: float, per_cell: bool):
    """pred/truth: [S, T, N]. Returns (rmse, mae, csi, pod, far, notes)."""
    r = truth - pred
    cell_rmse = np.sqrt(np.mean(r * r, axis=0))  # [T, N]
    cell_mae = np.mean(np.abs(r), axis=0)
    if per_cell:
        scores, notes = [], set()
        for t in range(pred.shape[1]):
            for i in range(pred.shape[2]):
                c = binarize_and_count(pred[:, t, i], truth[:, t, i], threshold)
                scores.append(csi_pod_far(c))
                notes.update(degenerate_notes(c))
        csi, pod, far = (float(v) for v in np.mean(scores, axis=0))
        notes = sorted(notes)
    else:
        c = binarize_and_count(pred, truth, threshold)
        csi, pod, far = csi_pod_far(c)
        notes = degenerate_notes(c)
    return float(cell_rmse.mean()), float(cell_mae.mean()), csi, pod, far, notes


def aggregate_report(
    pred,
    truth,
    threshold: float = POLLUTION_THRESHOLD,
    per_cell_categorical: bool = False,
    leadtimes_h=LEADTIMES_H,
    step_hours: int = STEP_HOURS,
) -> MetricsReport:
    """Score forecasts shaped [windows, leadtime steps, cities] in physical units.

    RMSE and MAE are computed per (leadtime, city) cell over forecast windows and
    averaged uniformly over cells. Categorical counts are pooled over every
    forecast unless ``per_cell_categorical``.
    """
    pred, truth = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    if pred.ndim == 2:
        pred, truth = pred[None], truth[None]
    if pred.ndim != 3 or truth.ndim != 3:
        raise ValueError("aggregate_report: expected [windows, steps, cities] arrays")
    if pred.shape[2] != truth.shape[2]:
        raise ValueError(f"aggregate_report: {pred.shape[2]} predicted cities vs {truth.shape[2]} observed")
    if pred.shape != truth.shape:
        raise ValueError(f"aggregate_report: shape mismatch {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ValueError("aggregate_report: empty input")
    rmse, mae, csi, pod, far, notes = _score(pred, truth, threshold, per_cell_categorical)
    per_lt = {}
    for tau in leadtimes_h:
        step = tau // step_hours - 1
        if tau % step_hours or not 0 <= step < pred.shape[1]:
            continue
        lr, lm, lc, lp, lf, _ = _score(pred[:, step : step + 1], truth[:, step : step + 1], threshold, per_cell_categorical)
        per_lt[tau] = {"rmse": lr, "mae": lm, "csi": lc, "pod": lp, "far": lf}
    return MetricsReport(
        rmse, mae, csi, pod, far, per_lt, "per_cell" if per_cell_categorical else "pooled", notes
    )
