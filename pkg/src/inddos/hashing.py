"""CRC-32 hash family used by the sketches.

Parameters follow the crcmod convention: ``poly`` carries the leading x^32
term and ``init`` is the value the CRC of an empty message would have, i.e.
the shift register starts at ``init ^ xor_out``.  Under that convention the
five predefined functions reproduce the usual catalogue check values
(CRC32 of ``b"123456789"`` is 0xCBF43926).

Flow keys are serialized big-endian (network order) before hashing.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError

MASK32 = 0xFFFFFFFF


class HashConfigError(ConfigError):
    """Raised when a hash family cannot be built for the requested geometry."""


@dataclass(frozen=True)
class Crc32Spec:
    name: str
    poly: int
    reflected: bool
    init: int
    xor_out: int

    def __post_init__(self) -> None:
        if self.poly >> 32 != 1:
            raise HashConfigError(f"{self.name}: poly {self.poly:#x} must have bit 32 set and no higher bits")
        if not (0 <= self.init <= MASK32 and 0 <= self.xor_out <= MASK32):
            raise HashConfigError(f"{self.name}: init and xor_out must be 32-bit values")

    @property
    def register_init(self) -> int:
        return self.init ^ self.xor_out

    def __call__(self, data: bytes) -> int:
        return crc32(self, data)


def _reflect(value: int, width: int) -> int:
    out = 0
    for _ in range(width):
        out = (out << 1) | (value & 1)
        value >>= 1
    return out


@lru_cache(maxsize=None)
def _table(poly: int, reflected: bool) -> tuple[int, ...]:
    p = poly & MASK32
    table = []
    if reflected:
        rp = _reflect(p, 32)
        for byte in range(256):
            crc = byte
            for _ in range(8):
                crc = (crc >> 1) ^ rp if crc & 1 else crc >> 1
            table.append(crc)
    else:
        for byte in range(256):
            crc = byte << 24
            for _ in range(8):
                crc = ((crc << 1) ^ p) & MASK32 if crc & 0x80000000 else (crc << 1) & MASK32
            table.append(crc)
    return tuple(table)


@lru_cache(maxsize=None)
def _np_table(poly: int, reflected: bool) -> np.ndarray:
    return np.array(_table(poly, reflected), dtype=np.uint32)


def crc32(spec: Crc32Spec, data: bytes) -> int:
    """CRC of ``data`` under ``spec`` as an unsigned 32-bit integer."""
    table = _table(spec.poly, spec.reflected)
    crc = spec.register_init
    if spec.reflected:
        for b in data:
            crc = table[(crc ^ b) & 0xFF] ^ (crc >> 8)
    else:
        for b in data:
            crc = table[((crc >> 24) ^ b) & 0xFF] ^ ((crc << 8) & MASK32)
    return crc ^ spec.xor_out


def crc32_array(spec: Crc32Spec, keys: np.ndarray) -> np.ndarray:
    """Vectorized CRC over the rows of a ``(N, L)`` uint8 matrix."""
    keys = np.asarray(keys, dtype=np.uint8)
    if keys.ndim != 2:
        raise ValueError("keys must be a 2-D (N, L) byte matrix")
    table = _np_table(spec.poly, spec.reflected)
    crc = np.full(keys.shape[0], spec.register_init, dtype=np.uint32)
    if spec.reflected:
        for col in range(keys.shape[1]):
            crc = table[(crc ^ keys[:, col]) & 0xFF] ^ (crc >> 8)
    else:
        for col in range(keys.shape[1]):
            crc = table[((crc >> 24) ^ keys[:, col]) & 0xFF] ^ (crc << 8)
    return crc ^ np.uint32(spec.xor_out)


# Table order matters: hash_family assigns functions in this order.
REGISTRY: dict[str, Crc32Spec] = {
    s.name: s
    for s in (
        Crc32Spec("crc32", 0x104C11DB7, True, 0, 0xFFFFFFFF),
        Crc32Spec("crc32c", 0x11EDC6F41, True, 0, 0xFFFFFFFF),
        Crc32Spec("crc32d", 0x1A833982B, True, 0, 0xFFFFFFFF),
        Crc32Spec("crc32q", 0x1814141AB, False, 0, 0),
        Crc32Spec("crc32mpeg", 0x104C11DB7, False, 0xFFFFFFFF, 0),
    )
}

# Other published CRC-32 polynomials, used before falling back to derived ones.
_EXTRA_SPECS = (
    Crc32Spec("crc32k", 0x1741B8CD7, True, 0, 0xFFFFFFFF),
    Crc32Spec("crc32autosar", 0x1F4ACFB13, True, 0, 0xFFFFFFFF),
    Crc32Spec("crc32xfer", 0x1000000AF, False, 0, 0),
    Crc32Spec("crc32cdrom", 0x18001801B, True, 0, 0),
)


def get_spec(name: str) -> Crc32Spec:
    try:
        return REGISTRY[name.lower()]
    except KeyError:
        raise HashConfigError(f"unknown hash function {name!r}; known: {', '.join(REGISTRY)}") from None


def perturbed_spec(index: int) -> Crc32Spec:
    """Extra family member number ``index`` (0-based), deterministic.

    Only the polynomial is varied.  Changing init/xor alone would XOR every
    fixed-length key's hash with the same constant, which keeps the collision
    pattern of a power-of-two table unchanged.
    """
    if index < len(_EXTRA_SPECS):
        return _EXTRA_SPECS[index]
    rng = np.random.default_rng(0xBAC0 + index)
    low = int(rng.integers(0, 1 << 32, dtype=np.uint64)) | 1
    return Crc32Spec(f"crc32p{index}", (1 << 32) | low, bool(index % 2), 0, MASK32 if index % 2 else 0)


@dataclass(frozen=True)
class HashFamily:
    bitmap: Crc32Spec
    rows: tuple[Crc32Spec, ...]


def hash_family(d: int, *, allow_perturbation: bool = False) -> HashFamily:
    """CRC32 for the bitmap bucket, then the remaining registry entries per row."""
    if d < 1:
        raise HashConfigError(f"d must be >= 1, got {d}")
    specs = list(REGISTRY.values())
    rows = specs[1 : 1 + d]
    if len(rows) < d:
        if not allow_perturbation:
            raise HashConfigError(
                f"d={d} needs more than {len(specs) - 1} row hashes; enable perturbation for larger d"
            )
        rows += [perturbed_spec(k) for k in range(d - len(rows))]
    return HashFamily(bitmap=specs[0], rows=tuple(rows))


# -- flow-key serialization -------------------------------------------------

KEY_WIDTHS = {"ip": 4, "ip+port": 6}


def key_width(kind: str) -> int:
    try:
        return KEY_WIDTHS[kind]
    except KeyError:
        raise HashConfigError(f"unknown key kind {kind!r}; expected one of {sorted(KEY_WIDTHS)}") from None


def make_keys(ips: np.ndarray, ports: np.ndarray | None = None) -> np.ndarray:
    """Integer flow keys: the IP alone, or ``ip << 16 | port``."""
    ips = np.asarray(ips, dtype=np.uint64)
    if ports is None:
        return ips
    return (ips << np.uint64(16)) | np.asarray(ports, dtype=np.uint64)


def key_bytes(key: int, width: int = 4) -> bytes:
    return int(key).to_bytes(width, "big")


def key_matrix(keys: np.ndarray, width: int = 4, salt: bytes = b"") -> np.ndarray:
    """Big-endian ``(N, width + len(salt))`` byte matrix for integer keys."""
    keys = np.asarray(keys, dtype=np.uint64)
    shifts = np.arange(width - 1, -1, -1, dtype=np.uint64) * np.uint64(8)
    mat = ((keys[:, None] >> shifts[None, :]) & np.uint64(0xFF)).astype(np.uint8)
    if salt:
        tail = np.broadcast_to(np.frombuffer(salt, dtype=np.uint8), (len(keys), len(salt)))
        mat = np.concatenate([mat, tail], axis=1)
    return mat


def hash_keys(spec: Crc32Spec, keys: np.ndarray, width: int = 4, salt: bytes = b"") -> np.ndarray:
    """Hash integer keys, computing each distinct key once."""
    keys = np.asarray(keys, dtype=np.uint64)
    if keys.size == 0:
        return np.zeros(0, dtype=np.uint32)
    uniq, inverse = np.unique(keys, return_inverse=True)
    return crc32_array(spec, key_matrix(uniq, width, salt))[inverse.reshape(-1)]
