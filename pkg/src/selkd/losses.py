"""Selective distillation objective with analytic logit gradients.

Per position: ``lam * D(p_t, q_t) + (1 - lam) * CE(y_t, q_t)`` where ``D`` is
forward KL, forward KL on a sparse RS-KD support, or reverse KL. Per
sequence: the mask-weighted sum divided by the mask normalizer. Per batch:
mean over the selected samples.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from selkd.classes import SparseTarget
from selkd.errors import ConfigError, ContractError
from selkd.metrics import EPS, log_softmax
from selkd.selection import SelectionMask

ALIGNMENTS = ("forward_kl", "reverse_kl", "weighted_kl")


def dense_targets(teacher_rows, vocab_size: int) -> tuple[np.ndarray, bool]:
    """Teacher rows as an ``(n, V)`` array, plus whether they came from sparse targets."""
    if isinstance(teacher_rows, np.ndarray):
        return np.asarray(teacher_rows, dtype=np.float64), False
    rows = list(teacher_rows)
    if rows and isinstance(rows[0], SparseTarget):
        out = np.zeros((len(rows), vocab_size))
        for i, t in enumerate(rows):
            if t.support.max() >= vocab_size:
                raise ValueError("sparse support index out of range")
            out[i, t.support] = t.weights
        return out, True
    return np.asarray(rows, dtype=np.float64).reshape(-1, vocab_size), False


def position_losses(
    teacher_rows,
    logits: np.ndarray,
    labels,
    lam: float = 1.0,
    temperature: float = 1.0,
    alignment: str = "forward_kl",
) -> tuple[np.ndarray, np.ndarray]:
    """Per-position loss values ``(n,)`` and gradients w.r.t. logits ``(n, V)``.

    ``teacher_rows`` holds tempered teacher distributions or :class:`SparseTarget`
    objects (forward KL only). No ``T**2`` rescaling is applied.
    """
    if alignment not in ALIGNMENTS:
        raise ConfigError(f"unknown alignment {alignment!r}", field="alignment")
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    n, V = z.shape
    p, sparse = dense_targets(teacher_rows, V)
    if p.shape != z.shape:
        raise ValueError(f"teacher rows {p.shape} do not match logits {z.shape}")
    log_q = log_softmax(z, temperature)
    q = np.exp(log_q)
    loss = np.zeros(n)
    grad = np.zeros_like(z)

    if lam != 0:
        if alignment == "reverse_kl":
            if sparse:
                raise ConfigError("reverse KL needs dense teacher distributions", field="alignment")
            a = log_q - np.log(np.maximum(p, EPS))
            div = np.sum(q * a, axis=1)
            g_div = q * (a - div[:, None])
        else:
            safe_p = np.where(p > 0, p, 1.0)
            div = np.sum(np.where(p > 0, p * (np.log(safe_p) - log_q), 0.0), axis=1)
            g_div = q * p.sum(axis=1, keepdims=True) - p
        loss += lam * div
        grad += lam * g_div

    if lam != 1:
        y = np.asarray(labels, dtype=np.intp).reshape(n)
        if np.any(y < 0) or np.any(y >= V):
            raise ValueError("label out of range")
        rows = np.arange(n)
        loss += (1 - lam) * -log_q[rows, y]
        g_ce = q.copy()
        g_ce[rows, y] -= 1.0
        grad += (1 - lam) * g_ce

    return loss, grad / temperature


def selective_kd_loss(
    teacher: Sequence,
    student_logits: Sequence[np.ndarray],
    labels: Sequence,
    masks: Sequence[SelectionMask],
    lam: float = 1.0,
    temperature: float = 1.0,
    alignment: str = "forward_kl",
    sample_mask: Optional[Sequence[float]] = None,
) -> tuple[float, list]:
    """Batch loss and per-sequence logit gradients at the selected positions.

    Every per-sequence argument is compact: ``teacher[i]``, ``student_logits[i]``
    and ``labels[i]`` have one row per selected position of ``masks[i]``, in
    ascending position order. Unselected positions never enter the
    computation. ``sample_mask`` (``s_i``) drops whole sequences.
    """
    B = len(masks)
    if not (len(teacher) == len(student_logits) == len(labels) == B):
        raise ValueError("teacher, logits, labels and masks must have one entry per sequence")
    s = np.ones(B) if sample_mask is None else np.asarray(sample_mask, dtype=np.float64)
    active = s.sum()
    if active <= 0:
        raise ContractError("no sample selected in batch")

    total = 0.0
    grads = []
    for i in range(B):
        z = np.asarray(student_logits[i], dtype=np.float64)
        if s[i] == 0:
            grads.append(np.zeros_like(z))
            continue
        mask = masks[i]
        if mask.count == 0 or mask.normalizer <= 0:
            raise ContractError(f"sequence {i} has an empty supervision mask")
        if z.shape[0] != mask.count:
            raise ValueError(f"sequence {i}: {z.shape[0]} logit rows for {mask.count} selected positions")
        w = mask.weights[mask.bits]
        losses, g = position_losses(teacher[i], z, labels[i], lam, temperature, alignment)
        scale = s[i] / active
        total += scale * float(np.dot(w, losses)) / mask.normalizer
        grads.append(g * (scale * w / mask.normalizer)[:, None])
    return total, grads
