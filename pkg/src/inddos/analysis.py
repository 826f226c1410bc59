"""Exact per-destination cardinalities, detection metrics and error-bound formulas."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

if TYPE_CHECKING:
    from .workload import Trace, TraceInterval


@dataclass
class GroundTruth:
    """Exact distinct-source count per destination key for one interval."""

    cardinalities: dict[int, int]
    n: int

    def victims(self, threshold: int) -> set[int]:
        return {dst for dst, e in self.cardinalities.items() if e > threshold}

    def max_cardinality(self) -> int:
        return max(self.cardinalities.values(), default=0)


def exact_cardinalities(trace: "Trace | TraceInterval", key_src: str = "ip", key_dst: str = "ip") -> GroundTruth:
    trace = getattr(trace, "trace", trace)
    if len(trace) == 0:
        return GroundTruth({}, 0)
    src = trace.src_keys(key_src)
    dst = trace.dst_keys(key_dst)
    # keys are at most 48 bits wide, so a pair fits a structured record
    pairs = np.unique(np.rec.fromarrays([dst, src], names="dst,src"))
    dsts, counts = np.unique(pairs["dst"], return_counts=True)
    return GroundTruth(dict(zip(dsts.tolist(), counts.tolist())), int(np.unique(src).size))


@dataclass(frozen=True)
class MetricsReport:
    """Recall, precision and F1 of one detection run.

    Degenerate cases: with no true victims recall is 1.0; with no detections
    precision is 1.0 (nothing was wrongly accused).  F1 is 0.0 whenever
    either of the two is 0.
    """

    recall: float
    precision: float
    f1: float
    tp: int
    fp: int
    fn: int

    def as_dict(self) -> dict:
        return asdict(self)


def score_sets(detected: Iterable[int], actual: Iterable[int]) -> MetricsReport:
    detected, actual = set(detected), set(actual)
    tp = len(detected & actual)
    fp = len(detected - actual)
    fn = len(actual - detected)
    recall = tp / (tp + fn) if tp + fn else 1.0
    precision = tp / (tp + fp) if tp + fp else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return MetricsReport(recall, precision, f1, tp, fp, fn)


def score(detected: Iterable[int], truth: GroundTruth, threshold: int) -> MetricsReport:
    return score_sets(detected, truth.victims(threshold))


def mean_metrics(reports: Sequence[MetricsReport]) -> dict[str, float]:
    """Arithmetic mean of per-interval recall, precision and F1."""
    if not reports:
        return {"recall": 0.0, "precision": 0.0, "f1": 0.0}
    return {
        name: sum(getattr(r, name) for r in reports) / len(reports)
        for name in ("recall", "precision", "f1")
    }


def lower_gap(n: float, m: float) -> float:
    """Underestimation allowance ``2(n - m(1 - e^(-n/m)))``."""
    return 2.0 * (n + m * math.expm1(-n / m))


def upper_gap(n: float, m: float, w: float) -> float:
    """Overestimation allowance ``2m(1 - e^(-n/(mw)))``."""
    return -2.0 * m * math.expm1(-n / (m * w))


def overflow_bound(n: float, w: float) -> float:
    """Foreign-source overflow bound ``2n/w``."""
    return 2.0 * n / w


def failure_probability(d: int) -> float:
    return 0.5**d


def three_sigma(p: float, trials: int) -> float:
    return 3.0 * math.sqrt(p * (1.0 - p) / trials)
