"""Direct Bitmap, Count-min Sketch and the BACON sketch.

BACON replaces every Count-min counter with an ``m``-bit bitmap: the source
key picks a bit (``bucket``), the destination key picks one bitmap per row
(``segment``).  Row ``i`` is a flat bit array of ``w * m`` cells addressed as
``segment * m + bucket``.  A ``d x w`` auxiliary counter grid mirrors the
popcount of every segment so a query never scans bits.

In hardware mode ``w`` and ``m`` must be powers of two, the cell index is
formed by bit concatenation and rows wider than 2**17 bits are split over
labelled registers, as a Tofino pipeline would have to do.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np

from .errors import ConfigError
from .hashing import (
    REGISTRY,
    Crc32Spec,
    HashFamily,
    crc32,
    get_spec,
    hash_family,
    hash_keys,
    key_bytes,
)

REGISTER_BITS_LOG2 = 17
REGISTER_BITS = 1 << REGISTER_BITS_LOG2

_DUMP_MAGIC = b"BACN"
_DUMP_HEADER = struct.Struct("<4sIII")


class SketchConfigError(ConfigError):
    pass


def _is_pow2(x: int) -> bool:
    return x > 0 and x & (x - 1) == 0


@dataclass(frozen=True)
class SketchParams:
    """Geometry and hashing of a BACON sketch.

    ``salt`` is appended to every hashed key; experiments use it to draw a
    fresh hash function per trial without touching the CRC parameters.
    """

    d: int = 3
    w: int = 1024
    m: int = 1024
    hardware_mode: bool = False
    row_hashes: tuple[str, ...] | None = None
    bitmap_hash: str = "crc32"
    allow_perturbation: bool = False
    salt: bytes = b""
    src_key_width: int = 4
    dst_key_width: int = 4

    def __post_init__(self) -> None:
        if self.d < 1 or self.w < 1 or self.m < 2:
            raise SketchConfigError(f"need d >= 1, w >= 1, m >= 2; got d={self.d} w={self.w} m={self.m}")
        if self.hardware_mode and not (_is_pow2(self.w) and _is_pow2(self.m)):
            raise SketchConfigError(f"hardware mode needs power-of-two w and m; got w={self.w} m={self.m}")
        if self.row_hashes is not None and len(self.row_hashes) != self.d:
            raise SketchConfigError(f"row_hashes lists {len(self.row_hashes)} functions for d={self.d}")
        self.family  # fail early on bad hash names

    @cached_property
    def family(self) -> HashFamily:
        if self.row_hashes is None:
            fam = hash_family(self.d, allow_perturbation=self.allow_perturbation)
            return HashFamily(bitmap=get_spec(self.bitmap_hash), rows=fam.rows)
        return HashFamily(bitmap=get_spec(self.bitmap_hash), rows=tuple(get_spec(n) for n in self.row_hashes))

    @property
    def log2_m(self) -> int:
        return self.m.bit_length() - 1

    @property
    def log2_w(self) -> int:
        return self.w.bit_length() - 1

    @property
    def row_bits(self) -> int:
        return self.w * self.m

    @property
    def register_layout(self) -> tuple[int, int]:
        """``(labels, bits per register)`` of one row in hardware mode."""
        total = self.log2_m + self.log2_w
        if total <= REGISTER_BITS_LOG2:
            return 1, 1 << total
        return 1 << (total - REGISTER_BITS_LOG2), REGISTER_BITS


def concat_index(bucket: int, seg: int, params: SketchParams) -> tuple[int, int]:
    """Register label and offset of a cell, built by bit concatenation."""
    if not (_is_pow2(params.m) and _is_pow2(params.w)):
        raise SketchConfigError("concatenated indexing needs power-of-two w and m")
    if not (0 <= bucket < params.m and 0 <= seg < params.w):
        raise ValueError(f"bucket {bucket} or segment {seg} out of range")
    full = (seg << params.log2_m) | bucket
    if params.log2_m + params.log2_w <= REGISTER_BITS_LOG2:
        return 0, full
    return full >> REGISTER_BITS_LOG2, full & (REGISTER_BITS - 1)


class DirectBitmap:
    """``m``-bit bitmap; the estimate is the raw number of set bits."""

    def __init__(self, m: int, spec: Crc32Spec = REGISTRY["crc32"], key_width: int = 4) -> None:
        if m < 1:
            raise SketchConfigError(f"m must be positive, got {m}")
        self.m = m
        self.spec = spec
        self.key_width = key_width
        self.bits = np.zeros(m, dtype=bool)

    def index(self, key: int) -> int:
        return crc32(self.spec, key_bytes(key, self.key_width)) % self.m

    def update(self, key: int) -> None:
        self.bits[self.index(key)] = True

    def update_many(self, keys) -> None:
        h = hash_keys(self.spec, np.asarray(keys), self.key_width)
        self.bits[h % np.uint32(self.m)] = True

    def estimate(self) -> int:
        return int(np.count_nonzero(self.bits))


class CountMinSketch:
    """Plain ``d x w`` Count-min counters over the registry row hashes."""

    def __init__(self, d: int, w: int, key_width: int = 4, *, allow_perturbation: bool = False) -> None:
        if w < 1:
            raise SketchConfigError(f"w must be positive, got {w}")
        self.d = d
        self.w = w
        self.key_width = key_width
        self.specs = hash_family(d, allow_perturbation=allow_perturbation).rows
        self.counters = np.zeros((d, w), dtype=np.int64)

    def _cols(self, key: int) -> list[int]:
        data = key_bytes(key, self.key_width)
        return [crc32(s, data) % self.w for s in self.specs]

    def update(self, key: int, count: int = 1) -> None:
        for i, j in enumerate(self._cols(key)):
            self.counters[i, j] += count

    def update_many(self, keys) -> None:
        keys = np.asarray(keys)
        for i, spec in enumerate(self.specs):
            cols = hash_keys(spec, keys, self.key_width) % np.uint32(self.w)
            np.add.at(self.counters[i], cols.astype(np.intp), 1)

    def query(self, key: int) -> int:
        return int(min(self.counters[i, j] for i, j in enumerate(self._cols(key))))


class UpdateOutcome(NamedTuple):
    """Per-row result of one BACON update.

    ``flipped[i]`` tells whether the packet set a new bit in row ``i`` and
    ``counts[i]`` is that row's segment popcount after the update, so
    ``estimate`` is the query result without a second pass.
    """

    flipped: tuple[bool, ...]
    counts: tuple[int, ...]

    @property
    def estimate(self) -> int:
        return min(self.counts)


@dataclass
class BaconSketch:
    params: SketchParams = field(default_factory=SketchParams)

    def __post_init__(self) -> None:
        p = self.params
        if p.hardware_mode:
            labels, size = p.register_layout
            self.registers = np.zeros((p.d, labels, size), dtype=np.uint8)
        else:
            self.registers = np.zeros((p.d, p.row_bits), dtype=np.uint8)
        self.aux = np.zeros((p.d, p.w), dtype=np.int64)
        self._bm = p.family.bitmap
        self._rows = p.family.rows

    # -- addressing --------------------------------------------------------

    def bucket(self, key_src: int) -> int:
        h = crc32(self._bm, key_bytes(key_src, self.params.src_key_width) + self.params.salt)
        return h & (self.params.m - 1) if self.params.hardware_mode else h % self.params.m

    def segments(self, key_dst: int) -> list[int]:
        data = key_bytes(key_dst, self.params.dst_key_width) + self.params.salt
        w = self.params.w
        if self.params.hardware_mode:
            return [crc32(s, data) & (w - 1) for s in self._rows]
        return [crc32(s, data) % w for s in self._rows]

    def buckets_array(self, src_keys) -> np.ndarray:
        h = hash_keys(self._bm, np.asarray(src_keys), self.params.src_key_width, self.params.salt)
        return (h & np.uint32(self.params.m - 1)) if self.params.hardware_mode else h % np.uint32(self.params.m)

    def segments_array(self, dst_keys) -> np.ndarray:
        """``(d, N)`` segment indexes for an array of destination keys."""
        dst_keys = np.asarray(dst_keys)
        out = np.empty((self.params.d, dst_keys.size), dtype=np.int64)
        for i, spec in enumerate(self._rows):
            h = hash_keys(spec, dst_keys, self.params.dst_key_width, self.params.salt)
            out[i] = (h & np.uint32(self.params.w - 1)) if self.params.hardware_mode else h % np.uint32(self.params.w)
        return out

    # -- single packet -----------------------------------------------------

    def _get_bit(self, row: int, bucket: int, seg: int) -> int:
        if self.params.hardware_mode:
            label, offset = concat_index(bucket, seg, self.params)
            return int(self.registers[row, label, offset])
        return int(self.registers[row, seg * self.params.m + bucket])

    def _set_bit(self, row: int, bucket: int, seg: int) -> None:
        if self.params.hardware_mode:
            label, offset = concat_index(bucket, seg, self.params)
            self.registers[row, label, offset] = 1
        else:
            self.registers[row, seg * self.params.m + bucket] = 1

    def update(self, key_src: int, key_dst: int) -> UpdateOutcome:
        bucket = self.bucket(key_src)
        flipped = []
        counts = []
        for i, seg in enumerate(self.segments(key_dst)):
            flip = not self._get_bit(i, bucket, seg)
            if flip:
                self._set_bit(i, bucket, seg)
                self.aux[i, seg] += 1
            flipped.append(flip)
            counts.append(int(self.aux[i, seg]))
        return UpdateOutcome(tuple(flipped), tuple(counts))

    def query(self, key_dst: int) -> int:
        return int(min(self.aux[i, seg] for i, seg in enumerate(self.segments(key_dst))))

    # -- batches -----------------------------------------------------------

    def update_many(self, src_keys, dst_keys, *, return_estimates: bool = False) -> np.ndarray | None:
        """Apply a packet sequence in order.

        With ``return_estimates`` the result holds, for every packet, the
        query value for its destination right after that packet was applied,
        i.e. exactly what a per-packet ``update`` followed by ``query`` would
        observe.
        """
        src_keys = np.asarray(src_keys)
        dst_keys = np.asarray(dst_keys)
        if src_keys.shape != dst_keys.shape:
            raise ValueError("src and dst key arrays differ in length")
        npk = src_keys.size
        if npk == 0:
            return np.zeros(0, dtype=np.int64) if return_estimates else None
        p = self.params
        buckets = self.buckets_array(src_keys).astype(np.int64)
        segs = self.segments_array(dst_keys)
        estimates = np.full(npk, np.iinfo(np.int64).max, dtype=np.int64) if return_estimates else None
        # small integer keys let numpy use a radix sort
        seg_dtype = np.uint16 if p.w <= 1 << 16 else np.int64
        for i in range(p.d):
            seg = segs[i]
            if p.hardware_mode:
                flat = (seg << p.log2_m) | buckets
            else:
                flat = seg * p.m + buckets
            cells, first = np.unique(flat, return_index=True)
            plane = self.registers[i].reshape(-1)
            fresh = plane[cells] == 0
            new_cells = cells[fresh]
            new_times = first[fresh]
            new_segs = (new_cells >> p.log2_m) if p.hardware_mode else new_cells // p.m
            if return_estimates:
                # popcount of the packet's segment after it = previous aux value
                # plus new cells of that segment first seen at or before it.
                # A packet adds at most one cell per row, in its own segment, so
                # this is a running count of new-cell packets grouped by segment.
                is_new = np.zeros(npk, dtype=np.int64)
                is_new[new_times] = 1
                order = np.argsort(seg.astype(seg_dtype), kind="stable")
                sseg = seg[order]
                before = np.concatenate(([0], np.cumsum(np.bincount(new_segs, minlength=p.w))[:-1]))
                seen = np.cumsum(is_new[order]) - before[sseg]
                est = np.empty(npk, dtype=np.int64)
                est[order] = self.aux[i, sseg] + seen
                np.minimum(estimates, est, out=estimates)
            if p.hardware_mode:
                labels, size = p.register_layout
                shift = size.bit_length() - 1
                self.registers[i, new_cells >> shift, new_cells & (size - 1)] = 1
            else:
                plane[new_cells] = 1
            self.aux[i] += np.bincount(new_segs, minlength=p.w)
        return estimates

    def query_many(self, dst_keys) -> np.ndarray:
        segs = self.segments_array(dst_keys)
        return np.min(self.aux[np.arange(self.params.d)[:, None], segs], axis=0)

    # -- state -------------------------------------------------------------

    def bit_planes(self) -> np.ndarray:
        """``(d, w * m)`` view of the rows in logical cell order."""
        return self.registers.reshape(self.params.d, -1)

    def reset(self) -> None:
        self.registers.fill(0)
        self.aux.fill(0)

    def to_bytes(self) -> bytes:
        p = self.params
        header = _DUMP_HEADER.pack(_DUMP_MAGIC, p.d, p.w, p.m)
        bits = np.packbits(self.bit_planes().astype(bool), axis=1, bitorder="little")
        return header + bits.tobytes() + self.aux.astype("<u4").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, params: SketchParams) -> "BaconSketch":
        magic, d, w, m = _DUMP_HEADER.unpack_from(data)
        if magic != _DUMP_MAGIC or (d, w, m) != (params.d, params.w, params.m):
            raise SketchConfigError("dump does not match the given sketch parameters")
        sk = cls(params)
        row_bytes = (w * m + 7) // 8
        off = _DUMP_HEADER.size
        packed = np.frombuffer(data, dtype=np.uint8, count=d * row_bytes, offset=off).reshape(d, row_bytes)
        sk.bit_planes()[:] = np.unpackbits(packed, axis=1, count=w * m, bitorder="little")
        off += d * row_bytes
        sk.aux[:] = np.frombuffer(data, dtype="<u4", count=d * w, offset=off).reshape(d, w)
        return sk
