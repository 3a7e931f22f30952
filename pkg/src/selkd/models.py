"""Toy autoregressive teacher/student pair with closed-form gradients.

The teacher is an n-gram logit table; the student is a rank-``d`` bigram
model (``logits = A[x_t] @ B``) whose capacity gap against the teacher is set
by ``d``. Position ``t`` of a sequence of length ``L`` (``t = 0 .. L-2``)
predicts token ``t + 1``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from selkd.metrics import entropy, softmax
from selkd.selection import SelectionMask

CHECKPOINT_MAGIC = b"SKDS"
_CKPT_HEADER = struct.Struct("<4sII")


@dataclass
class Counters:
    """Per-run instrumentation. Only the run owner updates it."""

    lm_head_positions: int = 0  # student logits computed with gradients
    scored_positions: int = 0  # no-grad entropy/scoring passes
    teacher_queries: int = 0
    supervised_positions: int = 0
    peak_live_logits: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class SequenceBatch:
    sequences: list
    source: str = "corpus"
    sample_ids: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.sequences = [np.asarray(s, dtype=np.int64) for s in self.sequences]
        for s in self.sequences:
            if s.ndim != 1 or s.size < 2:
                raise ValueError("every sequence needs at least two tokens")
        if self.sample_ids is None:
            self.sample_ids = np.arange(len(self.sequences))
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        if self.sample_ids.size != len(self.sequences):
            raise ValueError("one sample id per sequence")

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def lengths(self) -> np.ndarray:
        return np.array([s.size for s in self.sequences], dtype=np.int64)

    @property
    def token_count(self) -> int:
        return int(self.lengths.sum())

    def subset(self, index: Sequence[int]) -> "SequenceBatch":
        return SequenceBatch([self.sequences[i] for i in index], self.source, self.sample_ids[list(index)])

    def labels(self) -> list:
        return [s[1:] for s in self.sequences]

    def check_vocab(self, vocab_size: int) -> None:
        for s in self.sequences:
            if s.min() < 0 or s.max() >= vocab_size:
                raise ValueError(f"token id outside vocabulary of size {vocab_size}")


class TabularTeacher:
    """n-gram teacher: ``logit_table[context]`` is the next-token logit row."""

    def __init__(self, logit_table: np.ndarray, order: int = 1) -> None:
        if order not in (1, 2):
            raise ValueError("teacher order must be 1 or 2")
        table = np.asarray(logit_table, dtype=np.float64)
        V = table.shape[-1]
        if table.shape != (V,) * (order + 1):
            raise ValueError(f"order-{order} table must have shape {(V,) * (order + 1)}")
        if not np.all(np.isfinite(table)):
            raise ValueError("logit table must be finite")
        self.logit_table = table
        self.order = order
        self.vocab_size = V

    @classmethod
    def random(cls, vocab_size: int, order: int = 1, sigma: float = 2.0, seed: int = 0) -> "TabularTeacher":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, sigma, size=(vocab_size,) * (order + 1)), order)

    def contexts(self, tokens: np.ndarray) -> tuple:
        """Index tuple into the table for every position of one sequence."""
        cur = tokens[:-1]
        if self.order == 1:
            return (cur,)
        # first position has a single token of history; it is repeated
        prev = np.concatenate([tokens[:1], tokens[:-2]])
        return (prev, cur)

    def sequence_logits(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens)
        return self.logit_table[self.contexts(tokens)]

    def next_logits(self, histories: np.ndarray) -> np.ndarray:
        """Logits for the token following each row of ``histories`` ``(n, >=1)``."""
        h = np.asarray(histories)
        if self.order == 1:
            return self.logit_table[h[:, -1]]
        prev = h[:, -2] if h.shape[1] > 1 else h[:, -1]
        return self.logit_table[prev, h[:, -1]]

    def conditional(self, temperature: float = 1.0) -> np.ndarray:
        return softmax(self.logit_table, temperature)


class FactorizedStudent:
    """Rank-``d`` bigram student: ``logits(x_t) = A[x_t] @ B``."""

    def __init__(self, A: np.ndarray, B: np.ndarray) -> None:
        A = np.array(A, dtype=np.float64)
        B = np.array(B, dtype=np.float64)
        if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0] or A.shape[0] != B.shape[1]:
            raise ValueError(f"incompatible factor shapes {A.shape} and {B.shape}")
        self.A = A
        self.B = B

    @classmethod
    def init(cls, vocab_size: int, rank: int, seed: int = 0, scale: float = 0.1) -> "FactorizedStudent":
        rng = np.random.default_rng(seed)
        return cls(
            rng.normal(0.0, scale, size=(vocab_size, rank)),
            rng.normal(0.0, scale, size=(rank, vocab_size)),
        )

    @property
    def vocab_size(self) -> int:
        return self.A.shape[0]

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    def logits_for(self, context_tokens: np.ndarray) -> np.ndarray:
        # Accumulate over the rank in a fixed order instead of calling matmul:
        # BLAS rounding depends on the batch shape, and a row must come out
        # bit-identical whether it is computed alone or with the full sequence.
        a = self.A[np.asarray(context_tokens)]
        out = a[..., :1] * self.B[0]
        for j in range(1, self.rank):
            out += a[..., j:j + 1] * self.B[j]
        return out

    def sequence_logits(self, tokens) -> np.ndarray:
        return self.logits_for(np.asarray(tokens)[:-1])

    def next_logits(self, histories: np.ndarray) -> np.ndarray:
        return self.logits_for(np.asarray(histories)[:, -1])

    def logit_gradient_step(self, contexts: np.ndarray, grad_logits: np.ndarray, lr: float) -> None:
        """SGD step given ``dLoss/dlogits`` rows for the given context tokens."""
        if lr == 0:
            return
        gA_rows = grad_logits @ self.B.T
        gB = self.A[contexts].T @ grad_logits
        gA = np.zeros_like(self.A)
        np.add.at(gA, contexts, gA_rows)
        self.A -= lr * gA
        self.B -= lr * gB

    def copy(self) -> "FactorizedStudent":
        return FactorizedStudent(self.A.copy(), self.B.copy())

    def state_bytes(self) -> bytes:
        return self.A.astype("<f8").tobytes() + self.B.astype("<f8").tobytes()


def _positions(mask: Optional[SelectionMask], n: int) -> np.ndarray:
    if mask is None:
        return np.arange(n)
    if len(mask) != n:
        raise ValueError(f"mask covers {len(mask)} positions, sequence has {n}")
    return mask.positions


def teacher_forward(
    teacher: TabularTeacher,
    batch: SequenceBatch,
    masks: Optional[Sequence[Optional[SelectionMask]]] = None,
    temperature: float = 1.0,
    counters: Optional[Counters] = None,
) -> list:
    """Teacher next-token distributions, only at masked positions when masks are given."""
    batch.check_vocab(teacher.vocab_size)
    out = []
    for i, seq in enumerate(batch.sequences):
        pos = _positions(None if masks is None else masks[i], seq.size - 1)
        ctx = teacher.contexts(seq)
        rows = teacher.logit_table[tuple(c[pos] for c in ctx)]
        out.append(softmax(rows, temperature))
        if counters is not None:
            counters.teacher_queries += pos.size
    return out


def student_forward(
    student: FactorizedStudent,
    batch: SequenceBatch,
    masks: Optional[Sequence[Optional[SelectionMask]]] = None,
    counters: Optional[Counters] = None,
) -> list:
    """Student logits; with masks, rows exist only for selected positions.

    This is the selective LM head: the counter grows by the number of
    selected positions, not by the full ``sum(L_i - 1)``.
    """
    batch.check_vocab(student.vocab_size)
    out = []
    for i, seq in enumerate(batch.sequences):
        pos = _positions(None if masks is None else masks[i], seq.size - 1)
        out.append(student.logits_for(seq[:-1][pos]))
        if counters is not None:
            counters.lm_head_positions += pos.size
    return out


def chunked_entropy(
    student: FactorizedStudent,
    batch: SequenceBatch,
    chunk_size: int,
    counters: Optional[Counters] = None,
    temperature: float = 1.0,
) -> list:
    """Per-position student entropies, at most ``chunk_size`` logit rows live at once."""
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    batch.check_vocab(student.vocab_size)
    contexts = np.concatenate([s[:-1] for s in batch.sequences])
    ent = np.empty(contexts.size)
    V = student.vocab_size
    for lo in range(0, contexts.size, chunk_size):
        logits = student.logits_for(contexts[lo:lo + chunk_size])
        if counters is not None:
            counters.peak_live_logits = max(counters.peak_live_logits, logits.size)
            counters.scored_positions += logits.shape[0]
        ent[lo:lo + chunk_size] = entropy(softmax(logits, temperature))
        del logits
    assert counters is None or counters.peak_live_logits <= chunk_size * V
    return np.split(ent, np.cumsum(batch.lengths - 1)[:-1])


def generate(
    model,
    prompts: Sequence,
    lengths: int | Sequence[int],
    rng: np.random.Generator,
    temperature: float = 1.0,
) -> SequenceBatch:
    """Ancestral sampling of continuations; ``lengths`` are total sequence lengths.

    ``model`` is anything with ``next_logits(histories)`` (student or teacher).
    """
    prompts = [np.asarray(p, dtype=np.int64) for p in prompts]
    if not prompts or any(p.size == 0 for p in prompts):
        raise ValueError("prompts must be non-empty")
    if np.isscalar(lengths):
        lengths = [int(lengths)] * len(prompts)
    lengths = [int(n) for n in lengths]
    P = prompts[0].size
    if any(p.size != P for p in prompts):
        raise ValueError("prompts must share a length")
    total = max(max(lengths), P)
    tokens = np.zeros((len(prompts), total), dtype=np.int64)
    tokens[:, :P] = np.stack(prompts)
    for t in range(P, total):
        probs = softmax(model.next_logits(tokens[:, :t]), temperature)
        u = rng.random(len(prompts))
        cdf = np.cumsum(probs, axis=1)
        cdf /= cdf[:, -1:]
        tokens[:, t] = (cdf <= u[:, None]).sum(axis=1)
    return SequenceBatch([tokens[i, :n] for i, n in enumerate(lengths)], source="student_generated")


def synthesize_corpus(
    teacher: TabularTeacher,
    n_tokens: int,
    max_seq_len: int,
    rng: np.random.Generator,
    min_seq_len: int | None = None,
) -> SequenceBatch:
    """Sample sequences from the teacher until ``n_tokens`` tokens are produced.

    Lengths are uniform on ``[min_seq_len, max_seq_len]``; first tokens uniform.
    """
    if min_seq_len is None:
        min_seq_len = max(2, max_seq_len // 2)
    if not 2 <= min_seq_len <= max_seq_len:
        raise ValueError("need 2 <= min_seq_len <= max_seq_len")
    lengths = []
    while sum(lengths) < n_tokens:
        lengths.append(int(rng.integers(min_seq_len, max_seq_len + 1)))
    starts = rng.integers(0, teacher.vocab_size, size=(len(lengths), 1))
    batch = generate(teacher, list(starts), lengths, rng)
    batch.source = "corpus"
    return batch


def write_token_file(path: str | Path, batch: SequenceBatch) -> None:
    """Concatenated token ids as u16 little-endian (sequence boundaries are not stored)."""
    flat = np.concatenate(batch.sequences)
    if flat.max() > 0xFFFF:
        raise ValueError("token ids do not fit in u16")
    Path(path).write_bytes(flat.astype("<u2").tobytes())


def read_token_file(path: str | Path, max_seq_len: int) -> SequenceBatch:
    """Split a u16 token stream into consecutive sequences of ``max_seq_len``.

    A trailing remainder shorter than two tokens is dropped.
    """
    flat = np.frombuffer(Path(path).read_bytes(), dtype="<u2").astype(np.int64)
    seqs = [flat[i:i + max_seq_len] for i in range(0, flat.size, max_seq_len)]
    return SequenceBatch([s for s in seqs if s.size >= 2])


def save_checkpoint(path: str | Path, student: FactorizedStudent) -> None:
    """``SKDS`` | V u32 | d u32 | A (V x d) f64 LE | B (d x V) f64 LE, row-major."""
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, student.vocab_size, student.rank))
        fh.write(student.state_bytes())


def load_checkpoint(path: str | Path) -> FactorizedStudent:
    data = Path(path).read_bytes()
    magic, V, d = _CKPT_HEADER.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a student checkpoint")
    body = np.frombuffer(data, dtype="<f8", offset=_CKPT_HEADER.size)
    if body.size != 2 * V * d:
        raise ValueError(f"{path}: expected {2 * V * d} parameters, found {body.size}")
    return FactorizedStudent(body[:V * d].reshape(V, d), body[V * d:].reshape(d, V))
