"""Packet traces: CSV ingestion, interval splitting and synthetic generation.

CSV schema (UTF-8, LF line endings)::

    ts_us,src_ip,dst_ip[,src_port,dst_port,proto]

``ts_us`` is decimal microseconds since the start of the trace and addresses
are dotted quads.  The three trailing columns come as a group.
"""

from __future__ import annotations

import csv
import logging
import socket
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .analysis import GroundTruth
from .errors import ConfigError, InputError
from .hashing import make_keys

log = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("ts_us", "src_ip", "dst_ip")
OPTIONAL_COLUMNS = ("src_port", "dst_port", "proto")

# Address plans for generated traces; the ranges are pairwise disjoint.
LEGIT_SRC_NET = (10 << 24, 1 << 24)  # 10.0.0.0/8
LEGIT_DST_NET = ((172 << 24) | (16 << 16), 1 << 20)  # 172.16.0.0/12
BOT_NET = ((100 << 24) | (64 << 16), 1 << 22)  # 100.64.0.0/10
VICTIM_NET = ((198 << 24) | (18 << 16), 1 << 17)  # 198.18.0.0/15


class TraceFormatError(InputError):
    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class TraceOrderError(InputError):
    def __init__(self, index: int, ts: int, previous: int) -> None:
        self.index = index
        super().__init__(f"record {index}: timestamp {ts} goes back before {previous}")


def ip_to_int(text: str) -> int:
    try:
        return int.from_bytes(socket.inet_pton(socket.AF_INET, text.strip()), "big")
    except OSError:
        raise ValueError(f"invalid IPv4 address {text!r}") from None


def int_to_ip(value: int) -> str:
    return socket.inet_ntoa(int(value).to_bytes(4, "big"))


@dataclass(frozen=True)
class TraceRecord:
    ts_us: int
    src: int
    dst: int
    src_port: int | None = None
    dst_port: int | None = None
    proto: int | None = None

    def __post_init__(self) -> None:
        if self.ts_us < 0:
            raise ValueError(f"negative timestamp {self.ts_us}")
        if not (0 <= self.src < 1 << 32 and 0 <= self.dst < 1 << 32):
            raise ValueError("addresses must be 32-bit")

    def src_key(self, kind: str = "ip") -> int:
        return self.src if kind == "ip" else (self.src << 16) | _port(self.src_port, "src_port")

    def dst_key(self, kind: str = "ip") -> int:
        return self.dst if kind == "ip" else (self.dst << 16) | _port(self.dst_port, "dst_port")


def _port(value: int | None, name: str) -> int:
    if value is None:
        raise ConfigError(f"ip+port keys need {name} on every record")
    return value


@dataclass
class Trace:
    """Columnar packet trace; port/proto columns are ``None`` when absent."""

    ts_us: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    src_port: np.ndarray | None = None
    dst_port: np.ndarray | None = None
    proto: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.ts_us = np.asarray(self.ts_us, dtype=np.int64)
        self.src = np.asarray(self.src, dtype=np.uint32)
        self.dst = np.asarray(self.dst, dtype=np.uint32)
        for name in OPTIONAL_COLUMNS:
            col = getattr(self, name)
            if col is not None:
                setattr(self, name, np.asarray(col, dtype=np.int32))
        if not (len(self.ts_us) == len(self.src) == len(self.dst)):
            raise ValueError("trace columns differ in length")

    @classmethod
    def empty(cls) -> "Trace":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.uint32), np.zeros(0, np.uint32))

    @classmethod
    def from_records(cls, records: Iterable[TraceRecord]) -> "Trace":
        records = list(records)
        if not records:
            return cls.empty()
        has_ports = records[0].src_port is not None
        cols = dict(
            ts_us=[r.ts_us for r in records],
            src=[r.src for r in records],
            dst=[r.dst for r in records],
        )
        if has_ports:
            for name in OPTIONAL_COLUMNS:
                cols[name] = [-1 if getattr(r, name) is None else getattr(r, name) for r in records]
        return cls(**cols)

    @property
    def has_ports(self) -> bool:
        return self.src_port is not None

    def __len__(self) -> int:
        return len(self.ts_us)

    def __getitem__(self, sl) -> "Trace":
        opt = {n: None if getattr(self, n) is None else getattr(self, n)[sl] for n in OPTIONAL_COLUMNS}
        return Trace(self.ts_us[sl], self.src[sl], self.dst[sl], **opt)

    def records(self) -> Iterator[TraceRecord]:
        for i in range(len(self)):
            opt = {}
            if self.has_ports:
                opt = {n: (None if int(getattr(self, n)[i]) < 0 else int(getattr(self, n)[i])) for n in OPTIONAL_COLUMNS}
            yield TraceRecord(int(self.ts_us[i]), int(self.src[i]), int(self.dst[i]), **opt)

    def _keys(self, ips: np.ndarray, ports: np.ndarray | None, kind: str) -> np.ndarray:
        if kind == "ip":
            return ips.astype(np.uint64)
        if ports is None or (ports < 0).any():
            raise ConfigError("ip+port keys need port columns on every record")
        return make_keys(ips, ports)

    def src_keys(self, kind: str = "ip") -> np.ndarray:
        return self._keys(self.src, self.src_port, kind)

    def dst_keys(self, kind: str = "ip") -> np.ndarray:
        return self._keys(self.dst, self.dst_port, kind)

    def equals(self, other: "Trace") -> bool:
        if len(self) != len(other) or self.has_ports != other.has_ports:
            return False
        names = ("ts_us", "src", "dst") + (OPTIONAL_COLUMNS if self.has_ports else ())
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in names)


@dataclass
class TraceInterval:
    index: int
    start_us: int
    end_us: int
    trace: Trace


# -- CSV ----------------------------------------------------------------------


def parse_trace(path: str | Path, *, on_error: str = "abort") -> Iterator[TraceRecord]:
    """Yield records in file order.

    ``on_error="skip"`` logs and drops malformed rows instead of raising
    :class:`TraceFormatError`.
    """
    if on_error not in ("abort", "skip"):
        raise ConfigError(f"on_error must be 'abort' or 'skip', got {on_error!r}")
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot open trace {path}: {exc.strerror}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise TraceFormatError("missing header row", 1)
        header = [h.strip() for h in header]
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise TraceFormatError(f"missing required column(s): {', '.join(missing)}", 1)
        pos = {c: header.index(c) for c in REQUIRED_COLUMNS + OPTIONAL_COLUMNS if c in header}
        has_opt = [c in pos for c in OPTIONAL_COLUMNS]
        if any(has_opt) and not all(has_opt):
            raise TraceFormatError("src_port, dst_port and proto must appear together", 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                opt = {}
                if all(has_opt):
                    opt = {c: _opt_int(row[pos[c]], c) for c in OPTIONAL_COLUMNS}
                yield TraceRecord(
                    int(row[pos["ts_us"]]),
                    ip_to_int(row[pos["src_ip"]]),
                    ip_to_int(row[pos["dst_ip"]]),
                    **opt,
                )
            except (ValueError, IndexError) as exc:
                if on_error == "abort":
                    raise TraceFormatError(str(exc) or "malformed row", lineno) from None
                log.warning("skipping line %d: %s", lineno, exc)


def _opt_int(text: str, name: str) -> int | None:
    text = text.strip()
    if not text:
        return None
    value = int(text)
    limit = 0xFF if name == "proto" else 0xFFFF
    if not 0 <= value <= limit:
        raise ValueError(f"{name} {value} out of range")
    return value


def read_trace(path: str | Path, *, on_error: str = "abort") -> Trace:
    return Trace.from_records(parse_trace(path, on_error=on_error))


def write_trace(trace: Trace, path: str | Path) -> None:
    uniq = np.unique(np.concatenate([trace.src, trace.dst]))
    text = {int(a): int_to_ip(a) for a in uniq}
    cols = ["ts_us", "src_ip", "dst_ip"] + (list(OPTIONAL_COLUMNS) if trace.has_ports else [])
    lines = [",".join(cols)]
    ts = trace.ts_us.tolist()
    src = trace.src.tolist()
    dst = trace.dst.tolist()
    if trace.has_ports:
        extra = [
            ["" if v < 0 else str(v) for v in getattr(trace, c).tolist()] for c in OPTIONAL_COLUMNS
        ]
        for i in range(len(ts)):
            lines.append(f"{ts[i]},{text[src[i]]},{text[dst[i]]},{extra[0][i]},{extra[1][i]},{extra[2][i]}")
    else:
        lines.extend(f"{t},{text[s]},{text[d]}" for t, s, d in zip(ts, src, dst))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")


# -- intervals ----------------------------------------------------------------


def check_order(ts_us: np.ndarray, tolerance_us: int = 0) -> None:
    """Raise :class:`TraceOrderError` at the first record that goes back in
    time by more than ``tolerance_us``."""
    if len(ts_us) < 2:
        return
    running = np.maximum.accumulate(ts_us)
    bad = np.nonzero(ts_us[1:] < running[:-1] - tolerance_us)[0]
    if bad.size:
        i = int(bad[0]) + 1
        raise TraceOrderError(i, int(ts_us[i]), int(running[i - 1]))


def split_intervals(trace: Trace, interval_us: int, *, sort: bool = False) -> list[TraceInterval]:
    """Half-open windows ``[k*len, (k+1)*len)`` from time 0 to the last record.

    Windows without packets in between are kept so indexes stay aligned with
    wall-clock time.
    """
    if interval_us <= 0:
        raise ConfigError(f"interval length must be positive, got {interval_us}")
    if len(trace) == 0:
        return []
    if sort:
        trace = trace[np.argsort(trace.ts_us, kind="stable")]
    else:
        check_order(trace.ts_us)
    win = trace.ts_us // interval_us
    count = int(win[-1]) + 1
    bounds = np.searchsorted(win, np.arange(count + 1))
    return [
        TraceInterval(k, k * interval_us, (k + 1) * interval_us, trace[bounds[k] : bounds[k + 1]])
        for k in range(count)
    ]


# -- generation ---------------------------------------------------------------

# Attack source counts and packet rates of the Booter DNS amplification traces.
BOOTER_TRACES = {
    "booter6": (7379, 90_000),
    "booter7": (6075, 41_000),
    "booter1": (4486, 96_000),
    "booter4": (2970, 80_000),
}


@dataclass
class AttackSpec:
    bot_count: int
    start_interval: int
    end_interval: int
    packets_per_second: int = 90_000
    victim: str | None = None

    def __post_init__(self) -> None:
        if self.bot_count < 1:
            raise ConfigError(f"bot_count must be >= 1, got {self.bot_count}")
        if self.bot_count > BOT_NET[1]:
            raise ConfigError(f"bot_count {self.bot_count} exceeds the {BOT_NET[1]} bot addresses available")
        if not 0 <= self.start_interval <= self.end_interval:
            raise ConfigError("attack needs 0 <= start_interval <= end_interval")
        if self.packets_per_second < 0:
            raise ConfigError("packets_per_second must be non-negative")


@dataclass
class TraceSpec:
    """Generator configuration.

    Background destinations get Zipf-shaped source counts: the rank-``r``
    destination draws about ``max_cardinality * r**-legit_cardinality_skew``
    sources from a pool of ``legit_sources`` addresses.  When the Zipf slots
    outnumber the pool every pool address appears in every interval;
    otherwise each slot gets its own pool address.
    """

    legit_sources: int = 60_000
    legit_dest_count: int = 40_000
    legit_cardinality_skew: float = 0.55
    max_cardinality: int = 500
    packets_per_interval: int = 300_000
    intervals: int = 10
    interval_us: int = 5_000_000
    attacks: list[AttackSpec] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.attacks = [a if isinstance(a, AttackSpec) else AttackSpec(**a) for a in self.attacks]
        if self.legit_sources < 0 or self.legit_dest_count < 0:
            raise ConfigError("source and destination counts must be non-negative")
        if self.legit_sources > LEGIT_SRC_NET[1] or self.legit_dest_count > LEGIT_DST_NET[1]:
            raise ConfigError("background address pools exceed their prefixes")
        if self.legit_dest_count and not 1 <= self.max_cardinality <= self.legit_sources:
            raise ConfigError("max_cardinality must be between 1 and legit_sources")
        if self.intervals < 1 or self.interval_us < 1:
            raise ConfigError("need at least one interval of positive length")
        if sum(a.bot_count for a in self.attacks) > BOT_NET[1]:
            raise ConfigError("attacks need more distinct bot addresses than the bot prefix holds")
        named = [a.victim for a in self.attacks if a.victim is not None]
        for v in named:
            try:
                addr = ip_to_int(v)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
            if LEGIT_DST_NET[0] <= addr < LEGIT_DST_NET[0] + LEGIT_DST_NET[1]:
                raise ConfigError(f"victim {v} lies in the background destination prefix")

    @classmethod
    def from_dict(cls, data: dict) -> "TraceSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown trace spec keys: {', '.join(sorted(unknown))}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GeneratedTrace:
    trace: Trace
    truth: list[GroundTruth]
    victims: dict[int, list[int]]  # victim address -> intervals under attack


def booter_spec(name: str, *, attack_interval: int = 9, **background) -> TraceSpec:
    bots, pps = BOOTER_TRACES[name]
    return TraceSpec(attacks=[AttackSpec(bots, attack_interval, attack_interval, pps)], **background)


def mixed_spec(*, attack_interval: int = 9, **background) -> TraceSpec:
    """All four Booter attacks at once in a single interval."""
    attacks = [AttackSpec(bots, attack_interval, attack_interval, pps) for bots, pps in BOOTER_TRACES.values()]
    return TraceSpec(attacks=attacks, **background)


def _sample_addresses(rng: np.random.Generator, net: tuple[int, int], k: int) -> np.ndarray:
    base, size = net
    return (base + rng.choice(size, size=k, replace=False)).astype(np.uint32)


def zipf_cardinalities(count: int, max_card: int, skew: float) -> np.ndarray:
    ranks = np.arange(1, count + 1, dtype=np.float64)
    return np.maximum(1, np.floor(max_card * ranks**-skew)).astype(np.int64)


def generate(spec: TraceSpec, seed: int = 0) -> GeneratedTrace:
    """Synthetic trace plus its exact per-interval ground truth."""
    rng = np.random.default_rng(seed)
    sources = _sample_addresses(rng, LEGIT_SRC_NET, spec.legit_sources)
    dests = _sample_addresses(rng, LEGIT_DST_NET, spec.legit_dest_count)
    bot_pool = _sample_addresses(rng, BOT_NET, sum(a.bot_count for a in spec.attacks))
    bots, victims = [], []
    offset = 0
    for k, atk in enumerate(spec.attacks):
        bots.append(bot_pool[offset : offset + atk.bot_count])
        offset += atk.bot_count
        victims.append(ip_to_int(atk.victim) if atk.victim else VICTIM_NET[0] + 1 + k)
    cards = zipf_cardinalities(spec.legit_dest_count, spec.max_cardinality, spec.legit_cardinality_skew)
    seconds = spec.interval_us / 1e6

    parts, truth = [], []
    for k in range(spec.intervals):
        start = k * spec.interval_us
        pair_src, pair_dst = _background_pairs(rng, sources, dests, cards)
        flows_src, flows_dst = [pair_src], [pair_dst]
        weights = [rng.pareto(1.2, size=len(pair_src)) + 1.0]
        extra = max(0, spec.packets_per_interval - len(pair_src))
        budgets = [extra]
        for atk, bot, victim in zip(spec.attacks, bots, victims):
            if atk.start_interval <= k <= atk.end_interval:
                flows_src.append(bot)
                flows_dst.append(np.full(len(bot), victim, dtype=np.uint32))
                weights.append(np.ones(len(bot)))
                budgets.append(max(0, int(atk.packets_per_second * seconds) - len(bot)))
        pkt_src, pkt_dst = [], []
        for fs, fd, wt, budget in zip(flows_src, flows_dst, weights, budgets):
            if not len(fs):
                continue
            # one packet per flow, the remainder spread by weight
            idx = np.concatenate([np.arange(len(fs)), rng.choice(len(fs), size=budget, p=wt / wt.sum())])
            pkt_src.append(fs[idx])
            pkt_dst.append(fd[idx])
        src = np.concatenate(pkt_src) if pkt_src else np.zeros(0, np.uint32)
        dst = np.concatenate(pkt_dst) if pkt_dst else np.zeros(0, np.uint32)
        ts = start + rng.integers(0, spec.interval_us, size=len(src))
        order = np.argsort(ts, kind="stable")
        parts.append(Trace(ts[order], src[order], dst[order]))
        truth.append(_pairs_truth(np.concatenate(flows_src), np.concatenate(flows_dst)))

    trace = Trace(
        np.concatenate([p.ts_us for p in parts]),
        np.concatenate([p.src for p in parts]),
        np.concatenate([p.dst for p in parts]),
    )
    planted = {}
    for atk, victim in zip(spec.attacks, victims):
        last = min(atk.end_interval, spec.intervals - 1)
        planted.setdefault(int(victim), []).extend(range(atk.start_interval, last + 1))
    return GeneratedTrace(trace, truth, planted)


def _background_pairs(rng, sources, dests, cards) -> tuple[np.ndarray, np.ndarray]:
    if len(dests) == 0 or len(sources) == 0:
        return np.zeros(0, np.uint32), np.zeros(0, np.uint32)
    order = rng.permutation(len(dests))
    slot_dst = np.repeat(dests[order], cards)
    slots = len(slot_dst)
    if slots >= len(sources):
        slot_src = np.concatenate([rng.permutation(sources), rng.choice(sources, size=slots - len(sources))])
        slot_src = slot_src[rng.permutation(slots)]
    else:
        slot_src = rng.choice(sources, size=slots, replace=False)
    pairs = np.unique((slot_dst.astype(np.uint64) << np.uint64(32)) | slot_src.astype(np.uint64))
    return (pairs & np.uint64(0xFFFFFFFF)).astype(np.uint32), (pairs >> np.uint64(32)).astype(np.uint32)


def _pairs_truth(src: np.ndarray, dst: np.ndarray) -> GroundTruth:
    pairs = np.unique((dst.astype(np.uint64) << np.uint64(32)) | src.astype(np.uint64))
    dsts, counts = np.unique(pairs >> np.uint64(32), return_counts=True)
    return GroundTruth(dict(zip(dsts.tolist(), counts.tolist())), int(np.unique(src).size))
