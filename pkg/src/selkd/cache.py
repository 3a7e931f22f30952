"""Offline sparse-teacher cache: 24-bit records and storage accounting.

Record layout (little-endian, 3 bytes): ``count << 17 | class_index``. The
7-bit field holds the raw draw count, so ``p~ = count / U`` is recovered
exactly. Unused slots hold the sentinel ``(index = 2**17 - 1, count = 0)``.

File layout::

    "SKDC" | version u8 | flags u8 | V u32 | U u16 | sample_count u64
    per sample: sample_id u64 | position_count u32 | position_count * U records
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from selkd.classes import MAX_DRAWS, SparseTarget
from selkd.errors import CacheCapacityError, CacheCorruptionError

INDEX_BITS = 17
COUNT_BITS = 7
INDEX_MASK = (1 << INDEX_BITS) - 1
SENTINEL_INDEX = INDEX_MASK
MAX_CLASS_INDEX = SENTINEL_INDEX - 1
RECORD_BYTES = 3

MAGIC = b"SKDC"
VERSION = 1
_HEADER = struct.Struct("<4sBBIHQ")
_SAMPLE_PREFIX = struct.Struct("<QI")
HEADER_BYTES = _HEADER.size
SAMPLE_PREFIX_BYTES = _SAMPLE_PREFIX.size

SENTINEL_BYTES = (SENTINEL_INDEX).to_bytes(RECORD_BYTES, "little")


def pack_record(class_index: int, count: int) -> bytes:
    if not 0 <= class_index <= MAX_CLASS_INDEX:
        raise CacheCapacityError(f"class index {class_index} does not fit in {INDEX_BITS} bits")
    if not 1 <= count <= MAX_DRAWS:
        raise CacheCapacityError(f"count {count} does not fit in {COUNT_BITS} bits")
    return ((count << INDEX_BITS) | class_index).to_bytes(RECORD_BYTES, "little")


def unpack_record(raw: bytes) -> tuple[int, int]:
    value = int.from_bytes(raw, "little")
    return value & INDEX_MASK, value >> INDEX_BITS


def encode_position(target: SparseTarget, U: int) -> bytes:
    """``U`` records sorted by class index, sentinel-padded."""
    if target.draw_count != U:
        raise ValueError(f"target was drawn with U={target.draw_count}, cache slots U={U}")
    if U > MAX_DRAWS:
        raise CacheCapacityError(f"U={U} exceeds {MAX_DRAWS}")
    if target.support.size > U:
        raise ValueError("support larger than slot count")
    order = np.argsort(target.support, kind="stable")
    out = bytearray()
    for v, c in zip(target.support[order], target.counts[order]):
        out += pack_record(int(v), int(c))
    out += SENTINEL_BYTES * (U - target.support.size)
    return bytes(out)


def _unpack_block(block: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # block: (..., 3) uint8
    values = (
        block[..., 0].astype(np.int64)
        | (block[..., 1].astype(np.int64) << 8)
        | (block[..., 2].astype(np.int64) << 16)
    )
    return values & INDEX_MASK, values >> INDEX_BITS


def decode_position(records: bytes, U: int) -> SparseTarget:
    """Inverse of :func:`encode_position`; validates the block."""
    if len(records) != U * RECORD_BYTES:
        raise CacheCorruptionError(f"expected {U * RECORD_BYTES} bytes, got {len(records)}")
    block = np.frombuffer(records, dtype=np.uint8).reshape(U, RECORD_BYTES)
    index, count = _unpack_block(block)
    return _target_from_fields(index, count, U)


def _target_from_fields(index: np.ndarray, count: np.ndarray, U: int) -> SparseTarget:
    sentinel = (index == SENTINEL_INDEX) & (count == 0)
    if np.any((count == 0) & ~sentinel):
        raise CacheCorruptionError("zero count on a non-sentinel record")
    live_index, live_count = index[~sentinel], count[~sentinel]
    if live_index.size == 0:
        raise CacheCorruptionError("position has no mass (all sentinel)")
    if np.unique(live_index).size != live_index.size:
        raise CacheCorruptionError("duplicate class index in position block")
    if live_count.sum() != U:
        raise CacheCorruptionError(f"counts sum to {live_count.sum()}, expected {U}")
    return SparseTarget(live_index, live_count, U)


@dataclass(frozen=True)
class CacheHeader:
    vocab_size: int
    draws: int
    sample_count: int
    version: int = VERSION
    flags: int = 0


def expected_file_size(position_counts: Sequence[int], U: int) -> int:
    """Exact byte length of a cache holding samples with these ``L_i - 1`` counts."""
    return (
        HEADER_BYTES
        + SAMPLE_PREFIX_BYTES * len(position_counts)
        + RECORD_BYTES * U * int(sum(position_counts))
    )


class CacheWriter:
    """Append-only single-owner writer. The sample count is patched on close."""

    def __init__(self, path: str | Path, vocab_size: int, draws: int) -> None:
        if not 1 <= vocab_size <= MAX_CLASS_INDEX + 1:
            raise CacheCapacityError(f"vocabulary of {vocab_size} exceeds {INDEX_BITS}-bit index")
        if not 1 <= draws <= MAX_DRAWS:
            raise CacheCapacityError(f"U={draws} exceeds {MAX_DRAWS}")
        self.path = Path(path)
        self.vocab_size = vocab_size
        self.draws = draws
        self.sample_count = 0
        self._fh = open(self.path, "wb")
        self._fh.write(_HEADER.pack(MAGIC, VERSION, 0, vocab_size, draws, 0))

    def add_sample(self, sample_id: int, targets: Sequence[SparseTarget]) -> None:
        body = bytearray()
        for t in targets:
            if t.support.size and t.support.max() >= self.vocab_size:
                raise CacheCapacityError("class index beyond declared vocabulary")
            body += encode_position(t, self.draws)
        self._fh.write(_SAMPLE_PREFIX.pack(sample_id, len(targets)))
        self._fh.write(body)
        self.sample_count += 1

    def close(self) -> None:
        if self._fh.closed:
            return
        self._fh.seek(0)
        self._fh.write(_HEADER.pack(MAGIC, VERSION, 0, self.vocab_size, self.draws, self.sample_count))
        self._fh.close()

    def __enter__(self) -> "CacheWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class CacheReader:
    """Random-access reader; builds a sample-id index on open."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._data = self.path.read_bytes()
        if len(self._data) < HEADER_BYTES:
            raise CacheCorruptionError(f"{path}: truncated header")
        magic, version, flags, V, U, n = _HEADER.unpack_from(self._data, 0)
        if magic != MAGIC:
            raise CacheCorruptionError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise CacheCorruptionError(f"{path}: unsupported version {version}")
        self.header = CacheHeader(V, U, n, version, flags)
        self._offsets: dict[int, tuple[int, int]] = {}
        off = HEADER_BYTES
        for _ in range(n):
            if off + SAMPLE_PREFIX_BYTES > len(self._data):
                raise CacheCorruptionError(f"{path}: truncated sample prefix")
            sid, count = _SAMPLE_PREFIX.unpack_from(self._data, off)
            off += SAMPLE_PREFIX_BYTES
            if sid in self._offsets:
                raise CacheCorruptionError(f"{path}: duplicate sample id {sid}")
            self._offsets[sid] = (off, count)
            off += count * U * RECORD_BYTES
        if off != len(self._data):
            raise CacheCorruptionError(f"{path}: {len(self._data) - off} trailing or missing bytes")

    @property
    def sample_ids(self) -> list[int]:
        return list(self._offsets)

    def __contains__(self, sample_id: int) -> bool:
        return sample_id in self._offsets

    def __len__(self) -> int:
        return len(self._offsets)

    def position_count(self, sample_id: int) -> int:
        return self._offsets[sample_id][1]

    def read_position(self, sample_id: int, t: int) -> SparseTarget:
        start, count = self._offsets[sample_id]
        if not 0 <= t < count:
            raise IndexError(f"position {t} outside sample {sample_id} ({count} positions)")
        width = self.header.draws * RECORD_BYTES
        return decode_position(self._data[start + t * width:start + (t + 1) * width], self.header.draws)

    def read_sample(self, sample_id: int, positions: Iterable[int] | None = None) -> list[SparseTarget]:
        if sample_id not in self._offsets:
            raise KeyError(f"sample {sample_id} not in cache {self.path}")
        _, count = self._offsets[sample_id]
        ts = range(count) if positions is None else positions
        return [self.read_position(sample_id, int(t)) for t in ts]

    def iter_samples(self) -> Iterator[tuple[int, list[SparseTarget]]]:
        for sid in self._offsets:
            yield sid, self.read_sample(sid)

    def summary(self) -> dict:
        positions = sum(c for _, c in self._offsets.values())
        h = self.header
        return {
            "path": str(self.path),
            "version": h.version,
            "vocab_size": h.vocab_size,
            "draws_U": h.draws,
            "samples": h.sample_count,
            "positions": positions,
            "bytes": len(self._data),
            "bytes_per_position": h.draws * RECORD_BYTES,
            "expected_bytes": expected_file_size([c for _, c in self._offsets.values()], h.draws),
        }


# ---- storage accounting ----

STORAGE_METHODS = ("full_kd", "rs_kd", "se_kd_3x", "vanilla_ce")
FLOAT16_BYTES = 2
TB = 10**12

# The commonly quoted Full KD figure at V = 100k, N = 1e11. It is half of
# what the float16 arithmetic gives, so it is flagged, not reproduced.
FULL_KD_TABLE_TB = 10_000.0


@dataclass(frozen=True)
class StorageEstimate:
    method: str
    bytes_per_position: float
    total_terabytes: float
    note: str | None = None


def estimate_storage(
    method: str,
    N: float = 100e9,
    V: int = 100_000,
    U: int = 64,
    l: float = 0.2,
) -> StorageEstimate:
    """Offline cache footprint for ``N`` tokens in decimal terabytes.

    Computed in exact rational arithmetic, so e.g. ``0.2 * 3 * 64 * 1e11 / 1e12``
    comes out as the float nearest 3.84 rather than 3.8400000000000003.
    """
    if method not in STORAGE_METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {STORAGE_METHODS}")
    if N <= 0 or V <= 0 or U <= 0:
        raise ValueError("N, V and U must be positive")
    tokens = Fraction(N)
    note = None
    if method == "full_kd":
        per_pos = Fraction(FLOAT16_BYTES * V)
        tb = per_pos * tokens / TB
        if V == 100_000 and tokens == Fraction(100 * 10**9) and float(tb) != FULL_KD_TABLE_TB:
            note = (
                f"formula gives {float(tb):g} TB; the quoted figure is "
                f"{FULL_KD_TABLE_TB:g} TB (inconsistent cell)"
            )
    elif method == "rs_kd":
        per_pos = Fraction(RECORD_BYTES * U)
    elif method == "se_kd_3x":
        per_pos = Fraction(repr(float(l))) * RECORD_BYTES * U
    else:
        per_pos = Fraction(RECORD_BYTES)
    return StorageEstimate(method, float(per_pos), float(per_pos * tokens / TB), note)


def storage_table(N: float = 100e9, V: int = 100_000, draws: Sequence[int] = (12, 64), l: float = 0.2) -> str:
    """Text table of every method at each ``U``."""
    lines = ["method\t" + "\t".join(f"TB(U={u})" for u in draws) + "\tnote"]
    for m in STORAGE_METHODS:
        ests = [estimate_storage(m, N, V, u, l) for u in draws]
        note = next((e.note for e in ests if e.note), "")
        lines.append(m + "\t" + "\t".join(f"{e.total_terabytes:g}" for e in ests) + f"\t{note}")
    return "\n".join(lines)
