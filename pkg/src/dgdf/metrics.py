"""Evaluation metrics: AUC, NLL, relative improvement, sliding-window
series alignment, and pipeline freshness/accuracy statistics."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import NumericError
from .pipeline import DeliveredSample, Label, Route, routing

PROB_FLOOR = 1e-7


@dataclass(frozen=True)
class EvalRecord:
    score: float
    true_label: int
    eval_time: float = 0.0


def auc(records: Sequence[EvalRecord]) -> float:
    """Mann-Whitney AUC: (concordant + 0.5 * ties) / (positives * negatives)."""
    scores = np.array([r.score for r in records], dtype=np.float64)
    labels = np.array([r.true_label for r in records], dtype=np.int64)
    if not np.isfinite(scores).all():
        raise NumericError("auc: non-finite score")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise NumericError(f"auc undefined: {n_pos} positives, {n_neg} negatives")
    # average ranks handle ties exactly
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum_pos = ranks[labels == 1].sum()
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def nll(records: Sequence[EvalRecord]) -> float:
    """Mean negative log-likelihood with scores clamped away from {0, 1}."""
    if not records:
        raise NumericError("nll undefined on empty input")
    scores = np.clip([r.score for r in records], PROB_FLOOR, 1.0 - PROB_FLOOR)
    labels = np.array([r.true_label for r in records], dtype=np.float64)
    return float(-np.mean(labels * np.log(scores) + (1.0 - labels) * np.log(1.0 - scores)))


def improv(metric_model: float, metric_pretrain: float, metric_nodelay: float) -> float:
    """Relative improvement over the frozen-pretrain floor, as a percentage of
    the no-delay ceiling's improvement."""
    denom = metric_nodelay - metric_pretrain
    if denom == 0:
        raise NumericError("improv undefined: no-delay equals pretrain baseline")
    return (metric_model - metric_pretrain) / denom * 100.0


def pearson_r(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson correlation; NaN sentinel when either side is (numerically)
    constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    # averaging identical values leaves 1e-16-scale jitter; treat it as constant
    if x.std() <= 1e-12 * max(1.0, float(np.abs(x).max(initial=0.0))):
        return math.nan
    if y.std() <= 1e-12 * max(1.0, float(np.abs(y).max(initial=0.0))):
        return math.nan
    return float(np.corrcoef(x, y)[0, 1])


@dataclass
class SlidingWindowResult:
    grid: np.ndarray  # hourly grid timestamps (seconds)
    series_a: np.ndarray  # centered moving average of the first event stream
    series_b: np.ndarray
    r: float  # Pearson correlation over shared support (NaN if degenerate)


def sliding_window_series(
    events_a: Sequence[tuple[float, float]],
    events_b: Sequence[tuple[float, float]],
    window_len: float,
) -> SlidingWindowResult:
    """Centered moving averages of two event streams on a shared hourly grid.

    Grid points with no events in a stream's window are NaN and excluded
    from the correlation; fewer than 3 shared points is an error.
    """
    if window_len <= 0:
        raise NumericError(f"window_len must be positive, got {window_len}")
    if not events_a or not events_b:
        raise NumericError("sliding_window_series: empty event stream")
    hour = 3600.0
    t_lo = max(min(t for t, _ in events_a), min(t for t, _ in events_b))
    t_hi = min(max(t for t, _ in events_a), max(t for t, _ in events_b))
    start = math.ceil(t_lo / hour) * hour
    grid = np.arange(start, t_hi + 1e-9, hour)
    if len(grid) < 3:
        raise NumericError(
            f"sliding_window_series: only {len(grid)} grid points in the overlap"
        )

    def smooth(events):
        times = np.array([t for t, _ in events])
        vals = np.array([v for _, v in events])
        order = np.argsort(times, kind="mergesort")
        times, vals = times[order], vals[order]
        out = np.full(len(grid), np.nan)
        half = window_len / 2.0
        for gi, g in enumerate(grid):
            lo = np.searchsorted(times, g - half, side="left")
            hi = np.searchsorted(times, g + half, side="right")
            if hi > lo:
                out[gi] = vals[lo:hi].mean()
        return out

    series_a = smooth(events_a)
    series_b = smooth(events_b)
    mask = np.isfinite(series_a) & np.isfinite(series_b)
    if mask.sum() < 3:
        raise NumericError("sliding_window_series: fewer than 3 shared points")
    return SlidingWindowResult(grid, series_a, series_b, pearson_r(series_a[mask], series_b[mask]))


@dataclass
class PipelineStats:
    label_accuracy: float
    mean_delivery_lag: float
    n_trainer_deliveries: int


def pipeline_stats(
    deliveries: Iterable[DeliveredSample], attribution_len: float
) -> PipelineStats:
    """Label accuracy and freshness of the trainer-bound delivery stream.

    Accuracy compares each delivered label against the sample's final ground
    truth (converted within the attribution window); lag is delivery minus
    click time.
    """
    n = 0
    correct = 0
    lag_sum = 0.0
    for d in deliveries:
        if Route.TO_TRAINER not in routing(d):
            continue
        n += 1
        truth = 1 if d.sample.delay <= attribution_len else 0
        correct += int(int(d.label) == truth)
        lag_sum += d.delivery_time - d.sample.click_time
    if n == 0:
        return PipelineStats(math.nan, math.nan, 0)
    return PipelineStats(correct / n, lag_sum / n, n)
