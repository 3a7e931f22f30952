"""Probability-vector primitives and position-importance metrics.

Every function works on the last axis, so a single distribution of shape
``(V,)`` and a stack of per-position distributions of shape ``(T, V)`` are
handled the same way. Natural logarithms throughout.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from selkd.errors import ConfigError

EPS = 1e-12

# metric name -> whether it needs the teacher distribution
METRICS = {
    "student_entropy": False,
    "teacher_entropy": True,
    "student_ce": False,
    "teacher_ce": True,
    "kl": True,
    "reverse_kl": True,
    "kl_plus_student_entropy": True,
    "ce_ratio": True,
    "ce_ratio_plus_student_entropy": True,
}

STUDENT_ONLY_METRICS = frozenset(m for m, needs in METRICS.items() if not needs)


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax over the last axis, stabilised by max-subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = z / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def entropy(p) -> np.ndarray | float:
    """Shannon entropy ``-sum p ln p`` with ``0 ln 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    safe = np.where(p > 0, p, 1.0)
    h = -np.sum(np.where(p > 0, p * np.log(safe), 0.0), axis=-1)
    return float(h) if h.ndim == 0 else h


def cross_entropy(label, p) -> np.ndarray | float:
    """``-ln p[label]`` with the probability floored at ``EPS``.

    ``label`` may be an int (with ``p`` of shape ``(V,)``) or an integer array
    matching the leading axes of ``p``.
    """
    p = np.asarray(p, dtype=np.float64)
    label = np.asarray(label)
    V = p.shape[-1]
    if np.any(label < 0) or np.any(label >= V):
        raise ValueError(f"label out of range for vocabulary of size {V}")
    picked = np.take_along_axis(p, label[..., None].astype(np.intp), axis=-1)[..., 0]
    ce = -np.log(np.maximum(picked, EPS))
    return float(ce) if ce.ndim == 0 else ce


def kl(p, q) -> np.ndarray | float:
    """``KL(p || q)``; terms with ``p_v = 0`` vanish and ``q`` is floored at ``EPS``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    safe_p = np.where(p > 0, p, 1.0)
    terms = np.where(p > 0, p * (np.log(safe_p) - np.log(np.maximum(q, EPS))), 0.0)
    # rounding can leave -1e-17 when p ~= q
    d = np.maximum(terms.sum(axis=-1), 0.0)
    return float(d) if d.ndim == 0 else d


def reverse_kl(p, q) -> np.ndarray | float:
    """``KL(q || p)``: the student-weighted divergence used on-policy."""
    return kl(q, p)


def score_positions(
    metric: str,
    teacher: Optional[np.ndarray],
    student: np.ndarray,
    labels,
) -> np.ndarray:
    """Position-importance scores ``u(t)`` for one sequence.

    ``teacher`` and ``student`` are ``(L-1, V)`` probability arrays aligned with
    ``labels`` (the next token at each position). Returns a float array of
    shape ``(L-1,)``. Combined metrics are plain sums of their addends.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; expected one of {sorted(METRICS)}")
    if METRICS[metric] and teacher is None:
        raise ConfigError(f"metric {metric!r} needs teacher distributions", field="metric")
    student = np.atleast_2d(np.asarray(student, dtype=np.float64))
    labels = np.asarray(labels)
    if teacher is not None:
        teacher = np.atleast_2d(np.asarray(teacher, dtype=np.float64))

    if metric == "student_entropy":
        return np.asarray(entropy(student))
    if metric == "teacher_entropy":
        return np.asarray(entropy(teacher))
    if metric == "student_ce":
        return np.asarray(cross_entropy(labels, student))
    if metric == "teacher_ce":
        return np.asarray(cross_entropy(labels, teacher))
    if metric == "kl":
        return np.asarray(kl(teacher, student))
    if metric == "reverse_kl":
        return np.asarray(kl(student, teacher))
    if metric == "kl_plus_student_entropy":
        return np.asarray(kl(teacher, student)) + np.asarray(entropy(student))

    ratio = np.asarray(cross_entropy(labels, student)) / np.maximum(
        np.asarray(cross_entropy(labels, teacher)), EPS
    )
    if metric == "ce_ratio":
        return ratio
    return ratio + np.asarray(entropy(student))
