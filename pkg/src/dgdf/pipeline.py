"""Delivery pipeline: turns a click/conversion log into a time-ordered
stream of labeled deliveries.

The engine's own policy delivers every click three ways: instantly and
unlabeled (graph freshness), labeled at the end of a short wait window, and
once more as a calibrated positive if the conversion lands after the window
but inside the attribution window. Competitor policies (FNW-style instant
negatives, window-end-only, ground-truth oracle, frozen pretrain) share the
same delivery record type so downstream stages are policy-agnostic.
"""
from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Iterable, Iterator

from .errors import ConfigError, DataError


class Label(IntEnum):
    UNLABELED = -1
    NEGATIVE = 0
    POSITIVE = 1


class DeliveryKind(IntEnum):
    # numeric order doubles as the same-timestamp tie-break
    INSTANT = 0
    WINDOW_END = 1
    CALIBRATION = 2


class SampleClass(Enum):
    POSITIVE = "positive"
    FAKE_NEGATIVE = "fake_negative"
    REAL_NEGATIVE = "real_negative"


class Policy(str, Enum):
    DGDFEM = "DGDFEM"
    FNW = "FNW"
    ESDFM = "ESDFM"
    ORACLE = "ORACLE"
    PRETRAIN_STATIC = "PRETRAIN_STATIC"


class Route(Enum):
    TO_GRAPH = "to_graph"
    TO_TRAINER = "to_trainer"


@dataclass(frozen=True)
class ClickSample:
    """One user-item click, with the conversion outcome if any.

    Feature vectors are stored as plain tuples so samples compare by value
    (CSV round-trips and golden tests rely on that).
    """

    sample_id: int
    user_id: int
    item_id: int
    click_time: float
    conversion_time: float | None = None
    user_dense: tuple[float, ...] = ()
    user_cats: tuple[int, ...] = ()
    item_dense: tuple[float, ...] = ()
    item_cats: tuple[int, ...] = ()

    def __post_init__(self):
        if self.conversion_time is not None and self.conversion_time < self.click_time:
            raise DataError(
                f"sample {self.sample_id}: conversion_time {self.conversion_time} "
                f"precedes click_time {self.click_time}"
            )

    @property
    def delay(self) -> float:
        """Conversion delay in seconds; +inf when no conversion was logged."""
        if self.conversion_time is None:
            return math.inf
        return self.conversion_time - self.click_time


@dataclass(frozen=True)
class PipelineConfig:
    window_len: float  # seconds
    attribution_len: float  # seconds
    policy: Policy = Policy.DGDFEM

    def __post_init__(self):
        if not (0 < self.window_len <= self.attribution_len):
            raise ConfigError(
                f"need 0 < window_len <= attribution_len, got "
                f"{self.window_len} / {self.attribution_len}"
            )


@dataclass(frozen=True)
class DeliveredSample:
    sample: ClickSample
    label: Label
    delivery_time: float
    kind: DeliveryKind

    @property
    def sort_key(self) -> tuple[float, int, int]:
        return (self.delivery_time, int(self.kind), self.sample.sample_id)


def classify(sample: ClickSample, cfg: PipelineConfig) -> SampleClass:
    """Ground-truth class of a sample under the configured windows."""
    t_d = sample.delay
    if t_d < cfg.window_len:
        return SampleClass.POSITIVE
    if t_d <= cfg.attribution_len:
        return SampleClass.FAKE_NEGATIVE
    return SampleClass.REAL_NEGATIVE


def schedule(sample: ClickSample, cfg: PipelineConfig) -> list[DeliveredSample]:
    """All deliveries a single sample produces under the configured policy."""
    cls = classify(sample, cfg)
    t_click = sample.click_time
    t_window = t_click + cfg.window_len
    policy = cfg.policy

    if policy is Policy.DGDFEM:
        out = [DeliveredSample(sample, Label.UNLABELED, t_click, DeliveryKind.INSTANT)]
        window_label = Label.POSITIVE if cls is SampleClass.POSITIVE else Label.NEGATIVE
        out.append(DeliveredSample(sample, window_label, t_window, DeliveryKind.WINDOW_END))
        if cls is SampleClass.FAKE_NEGATIVE:
            out.append(
                DeliveredSample(sample, Label.POSITIVE, sample.conversion_time, DeliveryKind.CALIBRATION)
            )
        return out

    if policy is Policy.FNW:
        out = [DeliveredSample(sample, Label.NEGATIVE, t_click, DeliveryKind.WINDOW_END)]
        if sample.delay <= cfg.attribution_len:
            out.append(
                DeliveredSample(sample, Label.POSITIVE, sample.conversion_time, DeliveryKind.CALIBRATION)
            )
        return out

    if policy is Policy.ESDFM:
        window_label = Label.POSITIVE if cls is SampleClass.POSITIVE else Label.NEGATIVE
        out = [DeliveredSample(sample, window_label, t_window, DeliveryKind.WINDOW_END)]
        if cls is SampleClass.FAKE_NEGATIVE:
            out.append(
                DeliveredSample(sample, Label.POSITIVE, sample.conversion_time, DeliveryKind.CALIBRATION)
            )
        return out

    if policy is Policy.ORACLE:
        # ground truth at click time; the instant unlabeled record keeps the
        # oracle's graph at least as informed as the engine's own pipeline
        label = Label.POSITIVE if sample.delay <= cfg.attribution_len else Label.NEGATIVE
        return [
            DeliveredSample(sample, Label.UNLABELED, t_click, DeliveryKind.INSTANT),
            DeliveredSample(sample, label, t_click, DeliveryKind.WINDOW_END),
        ]

    if policy is Policy.PRETRAIN_STATIC:
        return []

    raise ConfigError(f"unknown policy {policy!r}")


def replay(stream: Iterable[ClickSample], cfg: PipelineConfig) -> Iterator[DeliveredSample]:
    """Merge per-sample schedules into one stream ordered by delivery time.

    Ties break by (delivery_time, kind, sample_id). The input must be sorted
    by click_time; the first out-of-order record is named in the error.
    """
    heap: list[tuple[tuple[float, int, int], DeliveredSample]] = []
    prev_click = -math.inf
    prev_id = None
    for sample in stream:
        if sample.click_time < prev_click:
            raise DataError(
                f"input not sorted by click_time: sample {sample.sample_id} at "
                f"{sample.click_time} follows sample {prev_id} at {prev_click}"
            )
        prev_click, prev_id = sample.click_time, sample.sample_id
        # everything strictly below any event the remaining input can emit
        bound = (sample.click_time, 0, -1)
        while heap and heap[0][0] < bound:
            yield heapq.heappop(heap)[1]
        for d in schedule(sample, cfg):
            heapq.heappush(heap, (d.sort_key, d))
    while heap:
        yield heapq.heappop(heap)[1]


def routing(d: DeliveredSample) -> frozenset[Route]:
    """Where a delivery goes: unlabeled feed the graph, negatives feed the
    trainer, positives feed both."""
    if d.label is Label.UNLABELED:
        return frozenset({Route.TO_GRAPH})
    if d.label is Label.NEGATIVE:
        return frozenset({Route.TO_TRAINER})
    return frozenset({Route.TO_GRAPH, Route.TO_TRAINER})


# ---------------------------------------------------------------------------
# delivery log CSV

DELIVERY_LOG_HEADER = ["delivery_ts", "sample_id", "label", "kind"]


def write_delivery_log(path, deliveries: Iterable[DeliveredSample]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(DELIVERY_LOG_HEADER)
        for d in deliveries:
            writer.writerow([repr(d.delivery_time), d.sample.sample_id, int(d.label), d.kind.name])


def read_delivery_log(path) -> list[dict]:
    """Rows of the delivery log as dicts (samples are referenced by id only)."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != DELIVERY_LOG_HEADER:
            raise DataError(f"{path}: bad delivery log header {header}")
        for lineno, row in enumerate(reader, start=2):
            try:
                out.append(
                    {
                        "delivery_ts": float(row[0]),
                        "sample_id": int(row[1]),
                        "label": Label(int(row[2])),
                        "kind": DeliveryKind[row[3]],
                    }
                )
            except (ValueError, KeyError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: malformed delivery row: {exc}") from None
    return out
