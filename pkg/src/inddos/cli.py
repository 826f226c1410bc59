"""Command-line entry point: ``inddos {generate,detect,sweep,bounds}``.

Reports are line-delimited JSON with a ``schema`` field on every record.  A
short human-readable summary is rendered from the same rounded numbers.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .analysis import MetricsReport, exact_cardinalities, mean_metrics, score
from .bounds import bound_violation_experiment, detection_bound_check
from .detector import TRIGGERS, DetectionConfig, IntervalSummary, format_key, run_detection, write_digests
from .errors import ConfigError, InputError, InvariantError
from .hashing import KEY_WIDTHS
from .sketch import SketchParams
from .workload import (
    BOOTER_TRACES,
    Trace,
    TraceSpec,
    booter_spec,
    generate,
    mixed_spec,
    read_trace,
    split_intervals,
    write_trace,
)

log = logging.getLogger("inddos")

SCHEMA = 1
DIGITS = 6
PRESETS = ("caida", "mixed", *BOOTER_TRACES)

# config keys accepted in a JSON config file; flags of the same name override them
CONFIG_KEYS = {
    "d": int,
    "w": int,
    "m": int,
    "theta": float,
    "n": int,
    "interval_us": int,
    "hardware_mode": bool,
    "seed": int,
    "key_src": str,
    "key_dst": str,
    "trigger": str,
}
DEFAULTS = {
    "d": 3,
    "w": 1024,
    "m": 1024,
    "theta": 0.005,
    "n": 60_000,
    "interval_us": 5_000_000,
    "hardware_mode": False,
    "seed": None,
    "key_src": "ip",
    "key_dst": "ip",
    "trigger": "crossing",
}


def _round(x: float) -> float:
    return round(float(x), DIGITS)


def load_config(path: str | None, overrides: dict) -> dict:
    cfg = dict(DEFAULTS)
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise InputError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        unknown = set(data) - set(CONFIG_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        for key, value in data.items():
            _check_type(key, value)
            cfg[key] = value
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return cfg


def _check_type(key: str, value) -> None:
    kind = CONFIG_KEYS[key]
    if value is None and key == "seed":
        return
    if kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, kind) and not (kind is int and isinstance(value, bool))
    if not ok:
        raise ConfigError(f"config key {key!r} must be {kind.__name__}, got {value!r}")


def salt_for(seed: int | None) -> bytes:
    """Four hash-salt bytes derived from ``seed``; no salt without a seed."""
    if seed is None:
        return b""
    return np.random.default_rng(seed).bytes(4)


def detection_config(cfg: dict) -> DetectionConfig:
    params = SketchParams(
        d=cfg["d"], w=cfg["w"], m=cfg["m"], hardware_mode=cfg["hardware_mode"], salt=salt_for(cfg["seed"])
    )
    return DetectionConfig(
        theta=cfg["theta"],
        n=cfg["n"],
        interval_us=cfg["interval_us"],
        params=params,
        key_src=cfg["key_src"],
        key_dst=cfg["key_dst"],
        trigger=cfg["trigger"],
    )


@dataclass
class IntervalReport:
    index: int
    start_us: int
    packets: int
    detected: list[int]
    actual: list[int]
    metrics: MetricsReport
    digest_bytes: int

    def record(self, key_kind: str) -> dict:
        return {
            "schema": SCHEMA,
            "type": "interval",
            "interval": self.index,
            "start_us": self.start_us,
            "packets": self.packets,
            "detected": [format_key(v, key_kind) for v in self.detected],
            "actual": [format_key(v, key_kind) for v in self.actual],
            "recall": _round(self.metrics.recall),
            "precision": _round(self.metrics.precision),
            "f1": _round(self.metrics.f1),
            "tp": self.metrics.tp,
            "fp": self.metrics.fp,
            "fn": self.metrics.fn,
            "digest_bytes": self.digest_bytes,
        }


@dataclass
class RunReport:
    config: dict
    intervals: list[IntervalReport]
    packets: int
    seconds: float
    summaries: list[IntervalSummary] = field(default_factory=list, repr=False)

    @property
    def aggregate(self) -> dict:
        means = mean_metrics([iv.metrics for iv in self.intervals])
        return {k: _round(v) for k, v in means.items()}

    @property
    def throughput(self) -> float:
        return self.packets / self.seconds if self.seconds > 0 else float("inf")

    def records(self, timing: bool = False) -> list[dict]:
        kind = self.config["key_dst"]
        out = [{"schema": SCHEMA, "type": "config", **self.config}]
        out += [iv.record(kind) for iv in self.intervals]
        agg = {
            "schema": SCHEMA,
            "type": "aggregate",
            "intervals": len(self.intervals),
            "packets": self.packets,
            "detections": sum(len(iv.detected) for iv in self.intervals),
            "digest_bytes": sum(iv.digest_bytes for iv in self.intervals),
            **self.aggregate,
        }
        if timing:
            agg["seconds"] = _round(self.seconds)
            agg["packets_per_second"] = _round(self.throughput)
        out.append(agg)
        return out

    def summary(self) -> str:
        agg = self.aggregate
        lines = [
            f"d={self.config['d']} w={self.config['w']} m={self.config['m']} "
            f"theta={self.config['theta']} n={self.config['n']}",
        ]
        for iv in self.intervals:
            m = iv.metrics
            lines.append(
                f"interval {iv.index}: packets={iv.packets} detected={len(iv.detected)} actual={len(iv.actual)} "
                f"recall={_round(m.recall)} precision={_round(m.precision)} f1={_round(m.f1)} "
                f"digest_bytes={iv.digest_bytes}"
            )
        lines.append(f"mean: recall={agg['recall']} precision={agg['precision']} f1={agg['f1']}")
        lines.append(f"throughput: {_round(self.throughput)} packets/s over {self.packets} packets")
        return "\n".join(lines)


def run_report(trace: Trace, cfg: dict) -> RunReport:
    """Detect on ``trace`` and score every interval against exact counts."""
    det = detection_config(cfg)
    start = time.perf_counter()
    summaries = run_detection(trace, det)
    seconds = time.perf_counter() - start
    intervals = []
    for s, iv in zip(summaries, split_intervals(trace, det.interval_us)):
        truth = exact_cardinalities(iv, det.key_src, det.key_dst)
        actual = truth.victims(det.threshold)
        detected = [d.victim for d in s.digests]
        intervals.append(
            IntervalReport(
                s.interval_index,
                s.start_us,
                s.packets,
                sorted(detected),
                sorted(actual),
                score(detected, truth, det.threshold),
                s.digest_bytes,
            )
        )
    echo = {k: cfg[k] for k in CONFIG_KEYS}
    echo["threshold"] = det.threshold
    return RunReport(echo, intervals, len(trace), seconds, summaries)


def write_jsonl(records: list[dict], path: str | None) -> None:
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8", newline="\n")


def _emit_summary(text: str, report_path: str | None) -> None:
    # keep stdout clean when it carries the JSONL report
    stream = sys.stderr if report_path in (None, "-") else sys.stdout
    print(text, file=stream)


def _load_trace(path: str) -> Trace:
    try:
        return read_trace(path)
    except OSError as exc:
        raise InputError(f"cannot read trace {path}: {exc.strerror or exc}") from None


def _sketch_overrides(args: argparse.Namespace) -> dict:
    return {k: getattr(args, k, None) for k in CONFIG_KEYS}


def cmd_generate(args: argparse.Namespace) -> int:
    if args.spec:
        try:
            data = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        except OSError as exc:
            raise InputError(f"cannot read spec {args.spec}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"spec {args.spec} is not valid JSON: {exc}") from None
        spec = TraceSpec.from_dict(data)
    elif args.preset == "caida":
        spec = TraceSpec()
    elif args.preset == "mixed":
        spec = mixed_spec()
    else:
        spec = booter_spec(args.preset)
    if args.intervals is not None:
        spec = replace(spec, intervals=args.intervals)
    gen = generate(spec, args.seed)
    write_trace(gen.trace, args.out)
    victims = ", ".join(f"{format_key(v)}@{ivs}" for v, ivs in sorted(gen.victims.items())) or "none"
    print(f"wrote {len(gen.trace)} packets in {spec.intervals} intervals to {args.out}; victims: {victims}")
    return 0


def cmd_detect(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, _sketch_overrides(args))
    trace = _load_trace(args.trace)
    report = run_report(trace, cfg)
    write_jsonl(report.records(args.timing), args.report)
    if args.digests:
        write_digests(report.summaries, args.digests, cfg["key_dst"])
    _emit_summary(report.summary(), args.report)
    return 0


def sweep(trace: Trace, cfg: dict, axis: str, values: list[int], workers: int = 1) -> list[dict]:
    """One detection run per value of ``axis``; infeasible values are skipped."""

    def one(value: int) -> dict | None:
        try:
            rep = run_report(trace, {**cfg, axis: value})
        except ConfigError as exc:
            log.warning("skipping %s=%s: %s", axis, value, exc)
            return None
        return {
            "schema": SCHEMA,
            "type": "sweep",
            "axis": axis,
            "value": value,
            "detections": sum(len(iv.detected) for iv in rep.intervals),
            **rep.aggregate,
        }

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        rows = list(pool.map(one, values))
    return [r for r in rows if r is not None]


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, _sketch_overrides(args))
    trace = _load_trace(args.trace)
    rows = sweep(trace, cfg, args.axis, args.values, args.workers)
    config = {"schema": SCHEMA, "type": "config", **cfg, "axis": args.axis, "values": args.values}
    write_jsonl([config, *rows], args.report)
    lines = [f"{args.axis:>6} {'recall':>9} {'precision':>9} {'f1':>9} {'detections':>10}"]
    for r in rows:
        lines.append(f"{r['value']:>6} {r['recall']:>9} {r['precision']:>9} {r['f1']:>9} {r['detections']:>10}")
    _emit_summary("\n".join(lines), args.report)
    return 0


def cmd_bounds(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, _sketch_overrides(args))
    params = SketchParams(d=cfg["d"], w=cfg["w"], m=cfg["m"], hardware_mode=cfg["hardware_mode"])
    seed = 0 if cfg["seed"] is None else cfg["seed"]
    viol = bound_violation_experiment(params, args.trials, seed, n=args.sources, e_dst=args.e_dst, workers=args.workers)
    det = detection_bound_check(params, cfg["theta"], args.trials, seed, n=args.sources, workers=args.workers)
    records = [
        {"schema": SCHEMA, "type": "config", **cfg, "trials": args.trials, "sources": args.sources},
        {"schema": SCHEMA, "type": "bounds", **viol.as_dict()},
        {"schema": SCHEMA, "type": "detection_bounds", **det.as_dict()},
    ]
    write_jsonl(records, args.report)
    lines = [f"gaps: lower={viol.lower_gap:.6g} upper={viol.upper_gap:.6g} overflow={viol.overflow_bound:.6g}"]
    for c in viol.checks:
        lines.append(f"{c.name}: rate={c.rate} limit={c.limit:.6g} {'ok' if c.passed else 'VIOLATED'}")
    for arm in det.arms:
        if arm.status != "ran":
            lines.append(f"{arm.name}: {arm.status} ({arm.reason})")
        for c in arm.checks:
            lines.append(
                f"{arm.name}/{c.name}: E={arm.e_dst} rate={c.rate} limit={c.limit:.6g} "
                f"{'ok' if c.passed else 'VIOLATED'}"
            )
    _emit_summary("\n".join(lines), args.report)
    return 0


def _add_sketch_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--d", type=int, help="sketch rows (default 3)")
    p.add_argument("--w", type=int, help="segments per row (default 1024)")
    p.add_argument("--m", type=int, help="bits per segment (default 1024)")
    p.add_argument("--theta", type=float, help="threshold fraction (default 0.005)")
    p.add_argument("--n", type=int, help="expected distinct sources per interval (default 60000)")
    p.add_argument("--interval-us", dest="interval_us", type=int, help="interval length in microseconds")
    p.add_argument("--hardware-mode", dest="hardware_mode", action="store_true", default=None)
    p.add_argument("--seed", type=int, help="seed for hash salting or trial generation")
    p.add_argument("--key-src", dest="key_src", choices=sorted(KEY_WIDTHS))
    p.add_argument("--key-dst", dest="key_dst", choices=sorted(KEY_WIDTHS))
    p.add_argument("--trigger", choices=TRIGGERS)
    p.add_argument("--report", help="JSONL report path (default: stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inddos", description="Sketch-based DDoS victim detection")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic trace CSV")
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--spec", help="JSON trace spec")
    src.add_argument("--preset", choices=PRESETS)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--intervals", type=int)
    g.set_defaults(func=cmd_generate)

    d = sub.add_parser("detect", help="run detection on a trace and score it")
    d.add_argument("trace")
    _add_sketch_flags(d)
    d.add_argument("--digests", help="write emitted digests as JSONL")
    d.add_argument("--timing", action="store_true", help="include wall-clock throughput in the JSONL")
    d.set_defaults(func=cmd_detect)

    s = sub.add_parser("sweep", help="vary one sketch parameter")
    s.add_argument("trace")
    s.add_argument("--axis", required=True, choices=("d", "w", "m"))
    s.add_argument("--values", required=True, type=int, nargs="+")
    s.add_argument("--workers", type=int, default=1)
    _add_sketch_flags(s)
    s.set_defaults(func=cmd_sweep)

    b = sub.add_parser("bounds", help="Monte Carlo check of the error bounds")
    _add_sketch_flags(b)
    b.add_argument("--trials", type=int, default=400)
    b.add_argument("--sources", type=int, default=4096, help="distinct sources per trial")
    b.add_argument("--e-dst", dest="e_dst", type=int, help="planted cardinality (default sources/8)")
    b.add_argument("--workers", type=int, default=1)
    b.set_defaults(func=cmd_bounds)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except InvariantError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 3
    except (InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
