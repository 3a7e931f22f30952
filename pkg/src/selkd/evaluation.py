"""Held-out perplexity, next-token top-1 accuracy and expected calibration error."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from selkd.metrics import log_softmax
from selkd.models import SequenceBatch

DEFAULT_BINS = 10


@dataclass(frozen=True)
class EvalReport:
    perplexity: float
    top1_accuracy: float
    ece: float
    token_count: int

    def lines(self) -> list[str]:
        d = asdict(self)
        return [
            f"perplexity={d['perplexity']!r}",
            f"top1_accuracy={d['top1_accuracy']!r}",
            f"ece={d['ece']!r}",
            "ece_units=fraction",
            f"token_count={d['token_count']}",
        ]


def ece_of(confidences, correct, bins: int = DEFAULT_BINS) -> float:
    """Equal-width binned ``sum_b (n_b / N) |acc_b - conf_b|``; empty bins add nothing.

    Bin ``b`` holds confidences in ``[b/B, (b+1)/B)``, the last bin also takes 1.0.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    conf = np.asarray(confidences, dtype=np.float64)
    hit = np.asarray(correct, dtype=np.float64)
    if conf.shape != hit.shape:
        raise ValueError("confidences and correctness flags must align")
    if conf.size == 0:
        return 0.0
    if np.any(conf < 0) or np.any(conf > 1):
        raise ValueError("confidences must lie in [0, 1]")
    idx = np.minimum((conf * bins).astype(np.int64), bins - 1)
    n = conf.size
    gap = 0.0
    for b in np.unique(idx):
        sel = idx == b
        n_b = int(sel.sum())
        acc_b = math.fsum(hit[sel]) / n_b
        conf_b = math.fsum(conf[sel]) / n_b
        gap += n_b / n * abs(acc_b - conf_b)
    return float(min(max(gap, 0.0), 1.0))


def _batches(heldout) -> Iterable[SequenceBatch]:
    if isinstance(heldout, SequenceBatch):
        return [heldout]
    return heldout


def evaluate(model, heldout, bins: int = DEFAULT_BINS) -> EvalReport:
    """Score ``model`` (anything with ``sequence_logits``) on held-out sequences.

    Reads parameters only. Sums use ``math.fsum`` so the result does not depend
    on the order of sequences.
    """
    ce_terms, conf, hit = [], [], []
    for batch in _batches(heldout):
        for seq in batch.sequences:
            log_q = log_softmax(model.sequence_logits(seq))
            y = seq[1:]
            rows = np.arange(y.size)
            ce_terms.append(-log_q[rows, y])
            conf.append(np.exp(log_q.max(axis=1)))
            hit.append(log_q.argmax(axis=1) == y)
    if not ce_terms:
        raise ValueError("held-out stream is empty")
    ce = np.concatenate(ce_terms)
    conf_all = np.minimum(np.concatenate(conf), 1.0)
    hit_all = np.concatenate(hit)
    n = ce.size
    return EvalReport(
        perplexity=math.exp(math.fsum(ce) / n),
        top1_accuracy=float(hit_all.sum()) / n,
        ece=ece_of(conf_all, hit_all, bins),
        token_count=n,
    )


def write_report(path: str | Path, report: EvalReport, echo: bool = True) -> None:
    text = "\n".join(report.lines()) + "\n"
    Path(path).write_text(text)
    if echo:
        print(text, end="")


def read_report(path: str | Path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        key, _, value = line.partition("=")
        out[key] = value
    return out
