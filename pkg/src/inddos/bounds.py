"""Monte Carlo checks of the BACON error bounds and the detection guarantees.

Each trial builds a fresh random trace around one planted destination with a
known number of distinct sources, salts the hash inputs with four random
bytes and measures how far the sketch estimate lands from the truth.  Trials
are seeded from one ``SeedSequence`` so results do not depend on how many
worker threads run them.

CRC is affine, so the salt alone only relabels segments; the fresh random
addresses drawn in every trial are what decorrelates the trials.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .analysis import failure_probability, lower_gap, overflow_bound, three_sigma, upper_gap
from .detector import DetectionConfig, detect_interval
from .errors import ConfigError
from .sketch import BaconSketch, SketchParams
from .workload import Trace

log = logging.getLogger(__name__)

MIN_TRIALS = 100


@dataclass
class RateCheck:
    """Empirical event rate against a probability bound with 3-sigma slack."""

    name: str
    events: int
    trials: int
    bound: float
    kind: str  # "at_most" or "at_least"

    @property
    def rate(self) -> float:
        return self.events / self.trials

    @property
    def slack(self) -> float:
        p = self.bound if self.kind == "at_most" else 1.0 - self.bound
        return three_sigma(p, self.trials)

    @property
    def limit(self) -> float:
        return self.bound + self.slack if self.kind == "at_most" else self.bound - self.slack

    @property
    def passed(self) -> bool:
        return self.rate <= self.limit if self.kind == "at_most" else self.rate >= self.limit

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "events": self.events,
            "trials": self.trials,
            "rate": self.rate,
            "bound": self.bound,
            "kind": self.kind,
            "limit": self.limit,
            "passed": self.passed,
        }


@dataclass
class PlantedTrial:
    src: np.ndarray
    dst: np.ndarray
    victim: int
    foreign_dst: np.ndarray  # destination of each foreign source, one entry per source
    params: SketchParams


def _distinct_addresses(rng: np.random.Generator, k: int) -> np.ndarray:
    out = np.zeros(0, dtype=np.uint32)
    while out.size < k:
        draw = rng.integers(0, 1 << 32, size=int(k * 1.05) + 16, dtype=np.uint64).astype(np.uint32)
        out = np.unique(np.concatenate([out, draw]))
    return rng.permutation(out)[:k]


def planted_trial(params: SketchParams, n: int, e_dst: int, rng: np.random.Generator) -> PlantedTrial:
    """``n`` distinct sources: ``e_dst`` contact the victim, the others each
    contact one of ``(n - e_dst) // 4`` background destinations."""
    if not 0 <= e_dst <= n:
        raise ConfigError(f"planted cardinality {e_dst} must lie in [0, n={n}]")
    salt = rng.bytes(4)
    sources = _distinct_addresses(rng, n)
    n_bg = max(1, (n - e_dst) // 4)
    dests = _distinct_addresses(rng, n_bg + 1)
    victim, background = int(dests[0]), dests[1:]
    foreign_dst = background[rng.integers(0, n_bg, size=n - e_dst)]
    dst = np.concatenate([np.full(e_dst, victim, dtype=np.uint32), foreign_dst])
    order = rng.permutation(n)
    return PlantedTrial(sources[order], dst[order], victim, foreign_dst, replace(params, salt=salt))


def foreign_overflow(sketch: BaconSketch, victim: int, foreign_dst: np.ndarray) -> int:
    """Fewest foreign sources sharing the victim's segment over all rows.

    Each foreign source contacts exactly one destination, so counting
    destinations entries counts distinct sources.
    """
    if foreign_dst.size == 0:
        return 0
    own = np.array(sketch.segments(victim))[:, None]
    return int((sketch.segments_array(foreign_dst) == own).sum(axis=1).min())


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _check_trials(trials: int) -> None:
    if trials < MIN_TRIALS:
        raise ConfigError(f"need at least {MIN_TRIALS} trials for a 3-sigma check, got {trials}")


@dataclass
class BoundReport:
    params: dict
    n: int
    e_dst: int
    trials: int
    seed: int
    lower_gap: float
    upper_gap: float
    overflow_bound: float
    checks: list[RateCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def as_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "checks"}
        out["checks"] = [c.as_dict() for c in self.checks]
        out["passed"] = self.passed
        return out


def _params_dict(params: SketchParams) -> dict:
    return {"d": params.d, "w": params.w, "m": params.m, "hardware_mode": params.hardware_mode}


def bound_violation_experiment(
    params: SketchParams,
    trials: int,
    seed: int,
    *,
    n: int = 4096,
    e_dst: int | None = None,
    workers: int = 1,
) -> BoundReport:
    """Rates of the three bound violations over salted random trials:
    ``E - Ê >= lower_gap``, ``Ê - E >= upper_gap`` and ``R >= 2n/w``."""
    _check_trials(trials)
    e_dst = n // 8 if e_dst is None else e_dst
    lo, hi, ov = lower_gap(n, params.m), upper_gap(n, params.m, params.w), overflow_bound(n, params.w)

    def one(ss: np.random.SeedSequence) -> tuple[bool, bool, bool]:
        t = planted_trial(params, n, e_dst, np.random.default_rng(ss))
        sk = BaconSketch(t.params)
        sk.update_many(t.src, t.dst)
        est = sk.query(t.victim)
        r = foreign_overflow(sk, t.victim, t.foreign_dst)
        return e_dst - est >= lo, est - e_dst >= hi, r >= ov

    results = np.array(_map(one, np.random.SeedSequence(seed).spawn(trials), workers), dtype=bool)
    p = failure_probability(params.d)
    report = BoundReport(_params_dict(params), n, e_dst, trials, seed, lo, hi, ov)
    for col, name in enumerate(("underestimate", "overestimate", "overflow")):
        report.checks.append(RateCheck(name, int(results[:, col].sum()), trials, p, "at_most"))
    return report


@dataclass
class DetectionArm:
    name: str
    status: str  # "ran", "infeasible" or "skipped"
    e_dst: int | None = None
    reason: str = ""
    checks: list[RateCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "status": self.status,
            "e_dst": self.e_dst,
            "reason": self.reason,
            "checks": [c.as_dict() for c in self.checks],
            "passed": self.passed,
        }


@dataclass
class DetectionBoundReport:
    params: dict
    theta: float
    n: int
    trials: int
    seed: int
    arms: list[DetectionArm]

    @property
    def passed(self) -> bool:
        return all(a.passed for a in self.arms)

    def as_dict(self) -> dict:
        return {
            "params": self.params,
            "theta": self.theta,
            "n": self.n,
            "trials": self.trials,
            "seed": self.seed,
            "arms": [a.as_dict() for a in self.arms],
            "passed": self.passed,
        }


def _detection_rates(params, theta, n, e_dst, trials, seed, workers, at_least: bool) -> tuple[int, int]:
    """Count trials where the final estimate passes theta*n and where a digest
    named the planted destination."""

    def one(ss: np.random.SeedSequence) -> tuple[bool, bool]:
        t = planted_trial(params, n, e_dst, np.random.default_rng(ss))
        cfg = DetectionConfig(theta=theta, n=n, interval_us=1, params=t.params)
        sk = BaconSketch(t.params)
        summary = detect_interval(Trace(np.zeros(len(t.src), np.int64), t.src, t.dst), cfg, 0, 0, sk)
        est = sk.query(t.victim)
        over = est >= theta * n if at_least else est > theta * n
        return bool(over), t.victim in summary.victims

    res = np.array(_map(one, np.random.SeedSequence(seed).spawn(trials), workers), dtype=bool).reshape(-1, 2)
    return int(res[:, 0].sum()), int(res[:, 1].sum())


def detection_bound_check(
    params: SketchParams,
    theta: float,
    trials: int,
    seed: int,
    *,
    n: int = 4096,
    workers: int = 1,
) -> DetectionBoundReport:
    """Detection rate of a destination far above the threshold, and
    false-flag rate of one at or below ``2n/w`` when ``theta >= 4/w``."""
    _check_trials(trials)
    p = failure_probability(params.d)
    arms = []

    e_hi = math.ceil(theta * n + lower_gap(n, params.m))
    if e_hi > n:
        arms.append(DetectionArm("false_negative", "infeasible", e_hi, f"needs {e_hi} sources but n={n}"))
    else:
        over, digests = _detection_rates(params, theta, n, e_hi, trials, seed, workers, at_least=False)
        arms.append(
            DetectionArm(
                "false_negative",
                "ran",
                e_hi,
                checks=[
                    RateCheck("estimate_exceeds", over, trials, 1.0 - p, "at_least"),
                    RateCheck("digest_emitted", digests, trials, 1.0 - p, "at_least"),
                ],
            )
        )

    if theta < 4 / params.w:
        log.warning("theta=%g is below 4/w=%g; skipping the false-positive check", theta, 4 / params.w)
        arms.append(DetectionArm("false_positive", "skipped", None, f"theta < 4/w = {4 / params.w:g}"))
    else:
        e_lo = math.floor(overflow_bound(n, params.w))
        over, digests = _detection_rates(params, theta, n, e_lo, trials, seed + 1, workers, at_least=True)
        arms.append(
            DetectionArm(
                "false_positive",
                "ran",
                e_lo,
                checks=[
                    RateCheck("estimate_exceeds", over, trials, p, "at_most"),
                    RateCheck("digest_emitted", digests, trials, p, "at_most"),
                ],
            )
        )
    return DetectionBoundReport(_params_dict(params), theta, n, trials, seed, arms)
