"""Interval-based victim identification on top of the BACON sketch.

Every packet updates the sketch and reads back the estimate for its
destination.  A digest naming the destination is emitted the first time the
estimate rises above the absolute threshold ``floor(theta * n)`` within the
interval; at the interval boundary the sketch is cleared.

Two trigger rules are available.  ``"equality"`` fires only when the
observed estimate equals ``threshold + 1``, as a switch does to avoid keeping
per-destination state.  ``"crossing"`` (the default) fires on the first
observation above the threshold.  They differ only when a destination's
estimate is pushed past ``threshold + 1`` by other destinations' packets
between two of its own, a case the equality rule never reports.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from decimal import Decimal
from typing import Iterable, Iterator

import numpy as np

from .errors import ConfigError, InvariantError
from .hashing import key_width
from .sketch import BaconSketch, SketchParams
from .workload import Trace, TraceRecord, check_order, int_to_ip, split_intervals

log = logging.getLogger(__name__)

TRIGGERS = ("crossing", "equality")


@dataclass(frozen=True)
class DetectionConfig:
    theta: float = 0.005
    n: int = 60_000
    interval_us: int = 5_000_000
    params: SketchParams = field(default_factory=SketchParams)
    key_src: str = "ip"
    key_dst: str = "ip"
    trigger: str = "crossing"
    sort: bool = False
    ts_tolerance_us: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.theta < 1:
            raise ConfigError(f"theta must lie in (0, 1), got {self.theta}")
        if self.n < 1 or self.theta * self.n < 1:
            raise ConfigError(f"theta * n must be at least 1 (theta={self.theta}, n={self.n})")
        if self.interval_us <= 0:
            raise ConfigError(f"interval length must be positive, got {self.interval_us}")
        if self.trigger not in TRIGGERS:
            raise ConfigError(f"trigger must be one of {TRIGGERS}, got {self.trigger!r}")
        if self.ts_tolerance_us < 0:
            raise ConfigError("timestamp tolerance must be non-negative")
        widths = (key_width(self.key_src), key_width(self.key_dst))
        if (self.params.src_key_width, self.params.dst_key_width) != widths:
            object.__setattr__(
                self, "params", replace(self.params, src_key_width=widths[0], dst_key_width=widths[1])
            )
        if self.params.w < 4 / self.theta:
            log.warning(
                "w=%d is below 4/theta=%.0f; the false-positive bound does not apply",
                self.params.w,
                4 / self.theta,
            )

    @property
    def threshold(self) -> int:
        """``floor(theta * n)``, computed in decimal to dodge float artefacts."""
        return math.floor(Decimal(repr(self.theta)) * self.n)

    @property
    def digest_size(self) -> int:
        return self.params.dst_key_width


def format_key(key: int, kind: str = "ip") -> str:
    if kind == "ip":
        return int_to_ip(key)
    return f"{int_to_ip(key >> 16)}:{key & 0xFFFF}"


@dataclass(frozen=True)
class Digest:
    victim: int
    interval_index: int
    detection_timestamp: int
    estimate_at_detection: int

    def to_json(self, key_kind: str = "ip") -> dict:
        return {
            "victim": format_key(self.victim, key_kind),
            "interval": self.interval_index,
            "ts_us": self.detection_timestamp,
            "estimate": self.estimate_at_detection,
        }


@dataclass
class IntervalSummary:
    interval_index: int
    start_us: int
    end_us: int
    packets: int
    digests: list[Digest]
    digest_bytes: int

    @property
    def victims(self) -> set[int]:
        return {d.victim for d in self.digests}


class IntervalDetector:
    """Per-interval detection state driven one packet at a time."""

    def __init__(self, cfg: DetectionConfig, start_us: int = 0, interval_index: int = 0) -> None:
        self.cfg = cfg
        self.sketch = BaconSketch(cfg.params)
        self.interval_index = interval_index
        self.start_us = start_us
        self.flagged: set[int] = set()
        self.digests: list[Digest] = []
        self.digest_bytes = 0
        self.packets = 0

    @property
    def end_us(self) -> int:
        return self.start_us + self.cfg.interval_us

    def _fires(self, estimate: int, dst: int) -> bool:
        if dst in self.flagged:
            return False
        t = self.cfg.threshold
        return estimate == t + 1 if self.cfg.trigger == "equality" else estimate > t

    def process_packet(self, rec: TraceRecord) -> Digest | None:
        if not self.start_us <= rec.ts_us < self.end_us:
            raise ValueError(
                f"timestamp {rec.ts_us} outside interval {self.interval_index} [{self.start_us}, {self.end_us})"
            )
        dst = rec.dst_key(self.cfg.key_dst)
        outcome = self.sketch.update(rec.src_key(self.cfg.key_src), dst)
        self.packets += 1
        estimate = outcome.estimate
        if not self._fires(estimate, dst):
            return None
        digest = Digest(dst, self.interval_index, rec.ts_us, estimate)
        self.flagged.add(dst)
        self.digests.append(digest)
        self.digest_bytes += self.cfg.digest_size
        return digest

    def summary(self) -> IntervalSummary:
        return IntervalSummary(
            self.interval_index, self.start_us, self.end_us, self.packets, list(self.digests), self.digest_bytes
        )

    def advance_interval(self, now: int) -> IntervalSummary:
        """Close the current interval and start the next one."""
        if now < self.end_us:
            raise ValueError(f"interval {self.interval_index} runs until {self.end_us}, cannot close at {now}")
        out = self.summary()
        self.sketch.reset()
        self.flagged.clear()
        self.digests = []
        self.digest_bytes = 0
        self.packets = 0
        self.start_us = self.end_us
        self.interval_index += 1
        return out


def detect_interval(
    trace: Trace, cfg: DetectionConfig, index: int, start_us: int, sketch: BaconSketch | None = None
) -> IntervalSummary:
    """Vectorized equivalent of feeding one interval through
    :meth:`IntervalDetector.process_packet`.  ``sketch`` is reset first."""
    sketch = sketch if sketch is not None else BaconSketch(cfg.params)
    sketch.reset()
    dst = trace.dst_keys(cfg.key_dst)
    est = sketch.update_many(trace.src_keys(cfg.key_src), dst, return_estimates=True)
    t = cfg.threshold
    hits = np.nonzero(est == t + 1 if cfg.trigger == "equality" else est > t)[0]
    _, first = np.unique(dst[hits], return_index=True)
    pos = np.sort(hits[first])
    digests = [
        Digest(int(dst[p]), index, int(trace.ts_us[p]), int(est[p])) for p in pos
    ]
    return IntervalSummary(
        index, start_us, start_us + cfg.interval_us, len(trace), digests, len(digests) * cfg.digest_size
    )


def _prepare(trace: Trace, cfg: DetectionConfig) -> Trace:
    if cfg.sort:
        return trace[np.argsort(trace.ts_us, kind="stable")]
    check_order(trace.ts_us, cfg.ts_tolerance_us)
    if cfg.ts_tolerance_us and len(trace) > 1 and (np.diff(trace.ts_us) < 0).any():
        return trace[np.argsort(trace.ts_us, kind="stable")]
    return trace


def run_detection(trace: Trace, cfg: DetectionConfig, *, engine: str = "batch") -> list[IntervalSummary]:
    """One summary per interval from time 0 through the last packet.

    ``engine="sequential"`` replays packets one at a time through
    :class:`IntervalDetector`; ``"batch"`` produces identical output much
    faster.
    """
    trace = _prepare(trace, cfg)
    if engine == "batch":
        sketch = BaconSketch(cfg.params)
        out = [
            detect_interval(iv.trace, cfg, iv.index, iv.start_us, sketch)
            for iv in split_intervals(trace, cfg.interval_us)
        ]
    elif engine == "sequential":
        out = list(_run_sequential(trace.records(), cfg))
    else:
        raise ConfigError(f"unknown engine {engine!r}")
    for s in out:
        check_summary(s, cfg)
    return out


def _run_sequential(records: Iterable[TraceRecord], cfg: DetectionConfig) -> Iterator[IntervalSummary]:
    det = IntervalDetector(cfg)
    seen = False
    for rec in records:
        while rec.ts_us >= det.end_us:
            yield det.advance_interval(det.end_us)
        det.process_packet(rec)
        seen = True
    if seen:
        yield det.summary()


def check_summary(s: IntervalSummary, cfg: DetectionConfig) -> None:
    victims = [d.victim for d in s.digests]
    if len(set(victims)) != len(victims):
        raise InvariantError(f"interval {s.interval_index}: more than one digest for a destination")
    if s.digest_bytes != cfg.digest_size * len(s.digests):
        raise InvariantError(f"interval {s.interval_index}: digest byte count {s.digest_bytes} is off")


def write_digests(summaries: Iterable[IntervalSummary], path, key_kind: str = "ip") -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in summaries:
            for d in s.digests:
                fh.write(json.dumps(d.to_json(key_kind), sort_keys=True) + "\n")
