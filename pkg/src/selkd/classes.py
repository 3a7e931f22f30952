"""RS-KD class sampling and the sparse KL objective on the sampled support."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from selkd.errors import ConfigError
from selkd.metrics import EPS, softmax
from selkd.selection import inverse_cdf_draws

MAX_DRAWS = 127
DEFAULT_DRAWS = 64


@dataclass(frozen=True, eq=False)
class SparseTarget:
    """Count-based teacher target on the unique sampled classes.

    ``weights`` are exact ratios ``counts / draw_count`` and sum to one.
    """

    support: np.ndarray
    counts: np.ndarray
    draw_count: int

    def __post_init__(self) -> None:
        support = np.asarray(self.support, dtype=np.int64)
        counts = np.asarray(self.counts, dtype=np.int64)
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "counts", counts)
        if support.shape != counts.shape or support.ndim != 1:
            raise ValueError("support and counts must be aligned 1-D arrays")
        if np.unique(support).size != support.size:
            raise ValueError("support indices must be distinct")
        if np.any(counts < 1) or counts.sum() != self.draw_count:
            raise ValueError("counts must be positive and sum to draw_count")

    @property
    def weights(self) -> np.ndarray:
        return self.counts / self.draw_count

    def dense(self, vocab_size: int) -> np.ndarray:
        p = np.zeros(vocab_size)
        p[self.support] = self.weights
        return p

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SparseTarget):
            return NotImplemented
        return (
            self.draw_count == other.draw_count
            and np.array_equal(self.support, other.support)
            and np.array_equal(self.counts, other.counts)
        )

    def __repr__(self) -> str:
        pairs = ", ".join(f"{v}:{c}" for v, c in zip(self.support, self.counts))
        return f"SparseTarget({{{pairs}}}/{self.draw_count})"


def sample_classes(
    p, U: int, rng: np.random.Generator, max_draws: int | None = MAX_DRAWS
) -> SparseTarget:
    """Draw ``U`` classes with replacement from ``p``; weight each by its count.

    ``U`` is capped by the 7-bit cache count field unless ``max_draws=None``.
    """
    if U < 1 or (max_draws is not None and U > max_draws):
        raise ConfigError(f"draw count must be in [1, {max_draws}], got {U}", field="class_U")
    draws = inverse_cdf_draws(np.asarray(p, dtype=np.float64), U, rng)
    support, counts = np.unique(draws, return_counts=True)
    return SparseTarget(support, counts, U)


def _check_support(target: SparseTarget, V: int) -> None:
    if target.support.size and (target.support.max() >= V or target.support.min() < 0):
        raise ValueError(f"support index out of range for vocabulary of size {V}")


def sparse_kl(target: SparseTarget, q) -> float:
    """``sum_{v in C} p~(v) ln(p~(v) / q(v))``, with ``q`` not renormalised on ``C``."""
    q = np.asarray(q, dtype=np.float64)
    _check_support(target, q.shape[-1])
    w = target.weights
    return float(np.sum(w * (np.log(w) - np.log(np.maximum(q[target.support], EPS)))))


def sparse_kl_gradient(target: SparseTarget, student_logits, temperature: float = 1.0) -> np.ndarray:
    """Gradient of :func:`sparse_kl` w.r.t. the logits of ``q = softmax(z / T)``."""
    z = np.asarray(student_logits, dtype=np.float64)
    _check_support(target, z.shape[-1])
    q = softmax(z, temperature)
    w = target.weights
    g = q * w.sum()
    g[target.support] -= w
    return g / temperature
