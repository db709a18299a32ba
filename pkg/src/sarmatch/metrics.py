"""Matching accuracy metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

REPORT_VERSION = 1


@dataclass
class EvalReport:
    rmse_all: float
    cmr_1: float
    cmr_5: float
    rmse_5: float | None
    fmr_5: float
    mean_ms_per_pair: float | None
    median_ms_per_pair: float | None
    n_pairs: int
    metric_mode: str = "mean"

    def as_dict(self) -> dict:
        return {
            "version": REPORT_VERSION,
            "n_pairs": self.n_pairs,
            "metric_mode": self.metric_mode,
            "rmse_all": _round(self.rmse_all),
            "cmr@1": _round(self.cmr_1),
            "cmr@5": _round(self.cmr_5),
            "rmse@5": _round(self.rmse_5),
            "fmr@5": _round(self.fmr_5),
            "mean_ms_per_pair": _round(self.mean_ms_per_pair),
            "median_ms_per_pair": _round(self.median_ms_per_pair),
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2) + "\n"


def _round(v):
    return None if v is None else round(float(v), 10)


def distances(predictions) -> np.ndarray:
    """Euclidean pixel distance for each ``(P, P_gt)``."""
    arr = np.asarray([(p[0], p[1], g[0], g[1]) for p, g in predictions], dtype=np.float64).reshape(-1, 4)
    return np.hypot(arr[:, 0] - arr[:, 2], arr[:, 1] - arr[:, 3])


def _error(d: np.ndarray, mode: str) -> float:
    # "mean": average Euclidean distance; "rms": root of the mean squared distance
    # fsum keeps the result independent of pair order
    if mode == "rms":
        return math.sqrt(math.fsum(d * d) / d.size)
    return math.fsum(d) / d.size


def cmr(d: np.ndarray, threshold: float) -> float:
    return float(np.mean(d <= threshold))


def compute_metrics(predictions, times_ms=None, metric_mode: str = "mean") -> EvalReport:
    """RMSE over all pairs, CMR at T=1 and T=5, RMSE over the T=5 subset, FMR(5) = 1 - CMR(5)."""
    predictions = list(predictions)
    if not predictions:
        raise ValueError("compute_metrics needs at least one prediction")
    if metric_mode not in ("mean", "rms"):
        raise ValueError(f"metric_mode must be 'mean' or 'rms', got {metric_mode!r}")
    d = distances(predictions)
    within = d[d <= 5]
    cmr5 = cmr(d, 5)
    mean_ms = median_ms = None
    if times_ms is not None and len(times_ms):
        mean_ms = math.fsum(times_ms) / len(times_ms)
        median_ms = float(np.median(times_ms))
    return EvalReport(
        rmse_all=_error(d, metric_mode),
        cmr_1=cmr(d, 1),
        cmr_5=cmr5,
        rmse_5=_error(within, metric_mode) if within.size else None,
        fmr_5=1.0 - cmr5,
        mean_ms_per_pair=mean_ms,
        median_ms_per_pair=median_ms,
        n_pairs=len(predictions),
        metric_mode=metric_mode,
    )
