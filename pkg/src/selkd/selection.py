"""Turning position scores into supervision masks, and ranking samples.

A mask covers the ``L-1`` supervised positions of one sequence. The loss for
that sequence is ``sum(weights * losses) / normalizer``: for the deterministic
policies the weights are the bits and the normalizer is their count, while
the stochastic Pos RS-KD masks carry pre-normalised weights (normalizer 1).
"""
from __future__ import annotations

import math
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from selkd.errors import ConfigError, ContractError

GLS_DEFAULT_CAPACITY = 30_000
GLS_MIN_FILL = 100
CURRICULUM_DEFAULT_STEPS = 4000

MANIFEST_MAGIC = b"SKDM"
MANIFEST_VERSION = 1


def ceil_fraction(fraction: float, n: int) -> int:
    """``ceil(fraction * n)`` without float noise (0.07 * 100 is 7, not 8)."""
    return math.ceil(round(fraction * n, 9))


def budget(n_positions: int, k: float) -> int:
    """Number of positions a fixed-budget policy supervises: ``ceil(k (L-1))``."""
    _check_k(k)
    return min(n_positions, ceil_fraction(k, n_positions))


def _check_k(k: float) -> None:
    if not 0 < k <= 1:
        raise ConfigError(f"budget must lie in (0, 1], got {k}", field="k")


def _as_scores(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("need a non-empty 1-D score sequence")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    return s


@dataclass
class SelectionMask:
    bits: np.ndarray
    weights: np.ndarray
    budget_k: float = 1.0
    normalizer: float | None = None

    def __post_init__(self) -> None:
        self.bits = np.asarray(self.bits, dtype=bool)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.bits.shape != self.weights.shape:
            raise ValueError("bits and weights must have the same shape")
        if np.any(self.weights[~self.bits] != 0):
            raise ValueError("weights must be zero where bits are zero")
        if self.normalizer is None:
            self.normalizer = float(self.weights.sum())

    @classmethod
    def from_bits(cls, bits, budget_k: float = 1.0) -> "SelectionMask":
        bits = np.asarray(bits, dtype=bool)
        return cls(bits, bits.astype(np.float64), budget_k)

    @classmethod
    def full(cls, n_positions: int) -> "SelectionMask":
        return cls.from_bits(np.ones(n_positions, dtype=bool), 1.0)

    @property
    def positions(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    def __len__(self) -> int:
        return self.bits.size


def _descending_order(scores: np.ndarray) -> np.ndarray:
    # stable: among equal scores the lower position comes first
    return np.argsort(-scores, kind="stable")


def select_topk(scores, k: float) -> SelectionMask:
    s = _as_scores(scores)
    n_sel = budget(s.size, k)
    bits = np.zeros(s.size, dtype=bool)
    bits[_descending_order(s)[:n_sel]] = True
    return SelectionMask.from_bits(bits, k)


def select_random(length: int, k: float, rng: np.random.Generator) -> SelectionMask:
    """Uniformly random subset of ``ceil(k * length)`` positions."""
    if length < 1:
        raise ValueError("need at least one position")
    n_sel = budget(length, k)
    bits = np.zeros(length, dtype=bool)
    bits[rng.choice(length, size=n_sel, replace=False)] = True
    return SelectionMask.from_bits(bits, k)


def weighted_mask(scores) -> SelectionMask:
    """Every position supervised, weighted by its score (weighted KD).

    Falls back to uniform weights when all scores are zero.
    """
    s = _as_scores(scores)
    if np.any(s < 0):
        raise ValueError("weights must be non-negative")
    if s.sum() <= 0:
        s = np.ones_like(s)
    return SelectionMask(np.ones(s.size, dtype=bool), s, 1.0)


@dataclass
class GlsState:
    """Bounded FIFO of recently seen scores backing a global threshold."""

    budget_k: float
    capacity: int = GLS_DEFAULT_CAPACITY
    min_fill: int = GLS_MIN_FILL
    queue: deque = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        _check_k(self.budget_k)
        if self.capacity < 1:
            raise ConfigError("queue capacity must be positive", field="gls_capacity")
        if self.queue is None:
            self.queue = deque(maxlen=self.capacity)
        elif self.queue.maxlen != self.capacity:
            self.queue = deque(self.queue, maxlen=self.capacity)

    def threshold(self) -> float:
        """Nearest-rank cutoff with ``ceil(k n)`` queued values at or above it."""
        if not self.queue:
            raise ContractError("threshold of an empty queue")
        ordered = np.sort(np.fromiter(self.queue, dtype=np.float64))
        n = ordered.size
        return float(ordered[n - ceil_fraction(self.budget_k, n)])

    def push(self, scores: Iterable[float]) -> None:
        self.queue.extend(float(x) for x in scores)


def select_gls(scores, state: GlsState) -> tuple[SelectionMask, GlsState]:
    """Threshold against the queue, then push this sequence's scores.

    Until the queue holds ``state.min_fill`` scores the sequence falls back to
    per-sequence top-k. The per-sequence count is not fixed and may be zero.
    """
    s = _as_scores(scores)
    if len(state.queue) < state.min_fill:
        mask = select_topk(s, state.budget_k)
    else:
        tau = state.threshold()
        mask = SelectionMask.from_bits(s >= tau, state.budget_k)
    state.push(s)
    return mask, state


@dataclass(frozen=True)
class CurriculumSchedule:
    budget_k: float
    total_steps: int = CURRICULUM_DEFAULT_STEPS

    def __post_init__(self) -> None:
        _check_k(self.budget_k)
        if self.total_steps < 1:
            raise ConfigError("total_steps must be positive", field="curriculum_steps")

    def window_start(self, step: int) -> float:
        """Lower quantile of the window: rises linearly from 0 to ``1 - k``."""
        return min(1.0, step / self.total_steps) * (1.0 - self.budget_k)


def select_curriculum(scores, step: int, sched: CurriculumSchedule) -> SelectionMask:
    """Fixed-budget window over ascending within-sequence score ranks.

    At step 0 this picks the lowest-scoring positions; from ``total_steps`` on
    it coincides with :func:`select_topk` (ties included).
    """
    if step < 0:
        raise ValueError("step must be non-negative")
    s = _as_scores(scores)
    n = s.size
    n_sel = budget(n, sched.budget_k)
    ascending = _descending_order(s)[::-1]
    start = math.floor(round(sched.window_start(step) * n, 9))
    start = min(start, n - n_sel)
    bits = np.zeros(n, dtype=bool)
    bits[ascending[start:start + n_sel]] = True
    return SelectionMask.from_bits(bits, sched.budget_k)


def sampling_distribution(scores, smoothing_T: float = 1.0) -> np.ndarray:
    """``q(t) ∝ score(t) ** (1/T)``; uniform when every score is zero."""
    s = _as_scores(scores)
    if np.any(s < 0):
        raise ValueError("scores must be non-negative")
    if not smoothing_T > 0:
        raise ConfigError("smoothing temperature must be positive", field="pos_rs_temperature")
    w = s if smoothing_T == 1.0 else s ** (1.0 / smoothing_T)
    total = w.sum()
    if total <= 0:
        return np.full(s.size, 1.0 / s.size)
    return w / total


def inverse_cdf_draws(probs: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` i.i.d. indices drawn from ``probs`` by inverting the cumulative sum.

    Zero-probability indices are never returned.
    """
    cdf = np.cumsum(probs)
    cdf /= cdf[-1]
    return np.searchsorted(cdf, rng.random(n), side="right")


def sample_positions_rs(
    scores,
    count: int | None,
    rng: np.random.Generator,
    smoothing_T: float = 1.0,
    k: float = 0.2,
) -> tuple[np.ndarray, np.ndarray]:
    """Pos RS-KD draws: ``count`` positions with replacement from ``q(t)``.

    ``count`` defaults to the fixed-budget size ``ceil(k (L-1))``. Returns the
    drawn positions (with multiplicity) and the sampling distribution ``q``.
    """
    q = sampling_distribution(scores, smoothing_T)
    if count is None:
        count = budget(q.size, k)
    if count < 1:
        raise ValueError("need at least one draw")
    return inverse_cdf_draws(q, count, rng), q


def importance_correction_weights(draws, q, K: int, N: int) -> np.ndarray:
    """Per-position weights ``sum over draws of 1 / (K N q(t_k))``.

    ``sum(weights * losses)`` is then an unbiased estimate of ``mean(losses)``.
    """
    draws = np.asarray(draws, dtype=np.intp)
    q = np.asarray(q, dtype=np.float64)
    if np.any(q[draws] <= 0):
        raise ContractError("drawn position has zero sampling probability")
    w = np.zeros(N, dtype=np.float64)
    np.add.at(w, draws, 1.0 / (K * N * q[draws]))
    return w


def pos_rs_mask(
    scores,
    k: float,
    rng: np.random.Generator,
    corrected: bool = False,
    smoothing_T: float = 1.0,
) -> SelectionMask:
    """Pos RS-KD (``corrected=False``) or its importance-corrected variant.

    Uncorrected weights are draw frequencies ``c_t / K`` and estimate the
    score-weighted KD loss; corrected weights estimate the plain Full KD mean.
    """
    draws, q = sample_positions_rs(scores, None, rng, smoothing_T, k)
    K, N = draws.size, q.size
    if corrected:
        w = importance_correction_weights(draws, q, K, N)
    else:
        w = np.bincount(draws, minlength=N) / K
    return SelectionMask(w > 0, w, k, normalizer=1.0)


@dataclass(frozen=True)
class SampleScore:
    sample_id: int
    avg_entropy: float


def rank_samples(scores: Sequence[SampleScore], l: float) -> set[int]:
    """Ids of the ``ceil(l N)`` samples with the highest average entropy."""
    if not scores:
        raise ValueError("no samples to rank")
    if not 0 < l <= 1:
        raise ConfigError(f"sample budget must lie in (0, 1], got {l}", field="sample_l")
    ordered = sorted(scores, key=lambda s: (-s.avg_entropy, s.sample_id))
    n_keep = ceil_fraction(l, len(ordered))
    return {s.sample_id for s in ordered[:n_keep]}


def write_manifest(path: str | Path, sample_ids: Iterable[int]) -> None:
    """Write selected sample ids: ``SKDM``, version byte, u64 count, u64 ids (LE, ascending)."""
    ids = sorted(int(i) for i in sample_ids)
    with open(path, "wb") as fh:
        fh.write(MANIFEST_MAGIC + struct.pack("<BQ", MANIFEST_VERSION, len(ids)))
        fh.write(np.asarray(ids, dtype="<u8").tobytes())


def read_manifest(path: str | Path) -> list[int]:
    data = Path(path).read_bytes()
    if data[:4] != MANIFEST_MAGIC:
        raise ValueError(f"{path}: not a sample manifest")
    version, count = struct.unpack_from("<BQ", data, 4)
    if version != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version {version}")
    body = data[13:]
    if len(body) != 8 * count:
        raise ValueError(f"{path}: expected {count} ids, found {len(body) / 8:g}")
    return np.frombuffer(body, dtype="<u8").astype(np.int64).tolist()
