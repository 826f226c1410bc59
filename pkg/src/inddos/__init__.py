"""Sketch-based per-destination flow cardinality estimation for DDoS victim detection."""

from .analysis import GroundTruth, MetricsReport, exact_cardinalities, score, score_sets
from .bounds import bound_violation_experiment, detection_bound_check
from .detector import DetectionConfig, Digest, IntervalDetector, IntervalSummary, run_detection
from .errors import ConfigError, InputError, InvariantError
from .hashing import REGISTRY, Crc32Spec, crc32, hash_family
from .sketch import BaconSketch, CountMinSketch, DirectBitmap, SketchParams, concat_index
from .workload import Trace, TraceRecord, TraceSpec, generate, read_trace, split_intervals, write_trace

__all__ = [
    "BaconSketch",
    "ConfigError",
    "CountMinSketch",
    "Crc32Spec",
    "DetectionConfig",
    "Digest",
    "DirectBitmap",
    "GroundTruth",
    "InputError",
    "IntervalDetector",
    "IntervalSummary",
    "InvariantError",
    "MetricsReport",
    "REGISTRY",
    "SketchParams",
    "Trace",
    "TraceRecord",
    "TraceSpec",
    "bound_violation_experiment",
    "concat_index",
    "crc32",
    "detection_bound_check",
    "exact_cardinalities",
    "generate",
    "hash_family",
    "read_trace",
    "run_detection",
    "score",
    "score_sets",
    "split_intervals",
    "write_trace",
]
