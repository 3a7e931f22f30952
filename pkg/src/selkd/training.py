"""Distillation runs: configuration, the training loop, sweeps and estimator checks."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from selkd.cache import CacheReader, CacheWriter
from selkd.classes import MAX_DRAWS, SparseTarget, sample_classes
from selkd.errors import ConfigError
from selkd.evaluation import EvalReport, evaluate, write_report
from selkd.losses import ALIGNMENTS, selective_kd_loss
from selkd.metrics import METRICS, STUDENT_ONLY_METRICS, score_positions, softmax
from selkd.models import (
    Counters,
    FactorizedStudent,
    SequenceBatch,
    TabularTeacher,
    chunked_entropy,
    generate,
    read_token_file,
    save_checkpoint,
    student_forward,
    synthesize_corpus,
    teacher_forward,
)
from selkd.selection import (
    CurriculumSchedule,
    GlsState,
    SampleScore,
    SelectionMask,
    importance_correction_weights,
    pos_rs_mask,
    rank_samples,
    sample_positions_rs,
    select_curriculum,
    select_gls,
    select_random,
    select_topk,
    weighted_mask,
    write_manifest,
)

log = logging.getLogger(__name__)

POLICIES = ("topk", "random", "gls", "curriculum", "pos_rs", "pos_rs_corrected", "full")
SCORED_POLICIES = frozenset({"topk", "gls", "curriculum", "pos_rs", "pos_rs_corrected"})
DEFAULT_SEEDS = (1337, 1338, 1339)

# config-file key -> field name, where they differ
_KEY_ALIASES = {"lambda": "lam"}
_OPTIONAL_TYPES = {
    "sample_l": float,
    "class_U": int,
    "cache_path": str,
    "corpus_path": str,
    "min_seq_len": int,
}


@dataclass
class DistillRun:
    seed: int = 1337
    metric: str = "student_entropy"
    policy: str = "topk"
    k: float = 0.2
    sample_l: Optional[float] = None
    class_U: Optional[int] = None
    lam: float = 1.0
    temperature: float = 1.0
    alignment: str = "forward_kl"
    on_policy: bool = False
    steps: int = 2000
    lr: float = 0.1
    batch_size: int = 16
    max_seq_len: int = 64
    min_seq_len: Optional[int] = None
    cache_path: Optional[str] = None
    corpus_path: Optional[str] = None
    # toy world
    vocab_size: int = 64
    rank: int = 8
    teacher_order: int = 1
    teacher_sigma: float = 2.0
    teacher_seed: int = 0
    train_tokens: int = 50_000
    heldout_tokens: int = 20_000
    # policy knobs
    gls_capacity: int = 30_000
    curriculum_steps: int = 4000
    pos_rs_temperature: float = 1.0
    sampling_seed: int = 0
    chunk_size: int = 256
    ece_bins: int = 10

    def validated(self) -> "DistillRun":
        """Checked copy; ``policy=full`` pins ``k`` to 1."""
        c = dataclasses.replace(self)
        if c.policy not in POLICIES:
            raise ConfigError(f"unknown policy {c.policy!r}; expected one of {POLICIES}", "policy")
        if c.metric not in METRICS:
            raise ConfigError(f"unknown metric {c.metric!r}", "metric")
        if c.alignment not in ALIGNMENTS:
            raise ConfigError(f"unknown alignment {c.alignment!r}", "alignment")
        if c.policy == "full":
            c.k = 1.0
        if not 0 < c.k <= 1:
            raise ConfigError(f"must lie in (0, 1], got {c.k}", "k")
        if c.sample_l is not None and not 0 < c.sample_l <= 1:
            raise ConfigError(f"must lie in (0, 1], got {c.sample_l}", "sample_l")
        if c.class_U is not None and not 1 <= c.class_U <= MAX_DRAWS:
            raise ConfigError(f"must lie in [1, {MAX_DRAWS}], got {c.class_U}", "class_U")
        if not 0 <= c.lam <= 1:
            raise ConfigError(f"must lie in [0, 1], got {c.lam}", "lambda")
        if not c.temperature > 0:
            raise ConfigError("must be positive", "temperature")
        if c.on_policy and c.cache_path:
            raise ConfigError("an offline teacher cache cannot supervise student-generated text", "cache_path")
        if c.cache_path and c.class_U is None:
            raise ConfigError("cache replay needs class_U", "class_U")
        if c.alignment == "reverse_kl" and c.class_U is not None:
            raise ConfigError("reverse KL needs dense teacher distributions", "alignment")
        if c.alignment == "weighted_kl" and c.policy != "full":
            raise ConfigError("weighted_kl weights every position; use policy=full", "alignment")
        if c.teacher_order not in (1, 2):
            raise ConfigError("must be 1 or 2", "teacher_order")
        if c.rank < 1 or c.vocab_size < 2:
            raise ConfigError("need vocab_size >= 2 and rank >= 1", "rank")
        if c.steps < 0 or c.batch_size < 1 or c.max_seq_len < 2:
            raise ConfigError("need steps >= 0, batch_size >= 1, max_seq_len >= 2", "steps")
        if c.chunk_size < 1:
            raise ConfigError("must be >= 1", "chunk_size")
        return c

    def to_lines(self) -> list[str]:
        out = []
        for f in dataclasses.fields(self):
            key = "lambda" if f.name == "lam" else f.name
            value = getattr(self, f.name)
            out.append(f"{key}={'' if value is None else value!r}".replace("'", ""))
        return out

    @classmethod
    def from_mapping(cls, values: dict, base: Optional["DistillRun"] = None) -> "DistillRun":
        base = base or cls()
        kinds = {f.name: type(f.default) for f in dataclasses.fields(cls)}
        kinds.update(_OPTIONAL_TYPES)
        updates = {}
        for key, raw in values.items():
            name = _KEY_ALIASES.get(key, key.replace("-", "_"))
            if name not in kinds:
                raise ConfigError(f"unknown setting {key!r}", key)
            updates[name] = _coerce(raw, kinds[name], key)
        return dataclasses.replace(base, **updates)

    @classmethod
    def from_file(cls, path: str | Path, base: Optional["DistillRun"] = None) -> "DistillRun":
        values = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            values[key.strip()] = value.strip()
        return cls.from_mapping(values, base)


def _coerce(raw, kind, key: str):
    if not isinstance(raw, str):
        return raw
    if raw == "" or raw.lower() == "none":
        return None
    try:
        if kind is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {kind.__name__}", key) from None


def build_world(config: DistillRun) -> tuple[TabularTeacher, SequenceBatch, SequenceBatch]:
    """Seeded teacher plus train/held-out corpora (synthesised or read from disk)."""
    teacher = TabularTeacher.random(
        config.vocab_size, config.teacher_order, config.teacher_sigma, config.teacher_seed
    )
    if config.corpus_path:
        corpus = read_token_file(config.corpus_path, config.max_seq_len)
        corpus.check_vocab(config.vocab_size)
        n_held = max(1, len(corpus) // 10)
        n_train = len(corpus) - n_held
        return teacher, corpus.subset(range(n_train)), corpus.subset(range(n_train, len(corpus)))
    train = synthesize_corpus(
        teacher, config.train_tokens, config.max_seq_len,
        np.random.default_rng([config.teacher_seed, 1]), config.min_seq_len,
    )
    heldout = synthesize_corpus(
        teacher, config.heldout_tokens, config.max_seq_len,
        np.random.default_rng([config.teacher_seed, 2]), config.min_seq_len,
    )
    return teacher, train, heldout


def draw_sparse_targets(
    teacher_rows: np.ndarray,
    sample_id: int,
    positions: Sequence[int],
    U: int,
    sampling_seed: int,
    extra_key: Sequence[int] = (),
) -> list[SparseTarget]:
    """RS-KD targets keyed by ``(seed, sample, position)``.

    Keying each draw by its position makes an online run and a replay from a
    cache built with the same seed see identical targets.
    """
    return [
        sample_classes(row, U, np.random.default_rng([sampling_seed, int(sample_id), int(t), *extra_key]))
        for row, t in zip(teacher_rows, positions)
    ]


def average_entropy_scores(student: FactorizedStudent, corpus: SequenceBatch, chunk_size: int,
                           counters: Optional[Counters] = None) -> list[SampleScore]:
    ents = chunked_entropy(student, corpus, chunk_size, counters)
    return [SampleScore(int(sid), float(e.mean())) for sid, e in zip(corpus.sample_ids, ents)]


def build_cache(
    path: str | Path,
    teacher: TabularTeacher,
    corpus: SequenceBatch,
    U: int,
    sampling_seed: int = 0,
    temperature: float = 1.0,
) -> int:
    """Write RS-KD targets for every position of every sample; returns bytes written."""
    with CacheWriter(path, teacher.vocab_size, U) as writer:
        for sid, probs in zip(corpus.sample_ids, teacher_forward(teacher, corpus, temperature=temperature)):
            targets = draw_sparse_targets(probs, int(sid), range(probs.shape[0]), U, sampling_seed)
            writer.add_sample(int(sid), targets)
    return Path(path).stat().st_size


class Distiller:
    """Owns one run: student parameters, random streams, GLS queue and counters."""

    def __init__(
        self,
        config: DistillRun,
        teacher: TabularTeacher,
        corpus: SequenceBatch,
        student: Optional[FactorizedStudent] = None,
    ) -> None:
        self.config = c = config.validated()
        self.teacher = teacher
        init_ss, data_ss, sel_ss, gen_ss = np.random.SeedSequence(c.seed).spawn(4)
        self.student = student if student is not None else FactorizedStudent.init(c.vocab_size, c.rank, init_ss)
        self.data_rng = np.random.default_rng(data_ss)
        self.select_rng = np.random.default_rng(sel_ss)
        self.gen_rng = np.random.default_rng(gen_ss)
        self.counters = Counters()
        self.step = 0
        self.losses: list[float] = []
        self.gls = GlsState(c.k, c.gls_capacity) if c.policy == "gls" else None
        self.curriculum = CurriculumSchedule(c.k, c.curriculum_steps) if c.policy == "curriculum" else None
        self.cache = CacheReader(c.cache_path) if c.cache_path else None
        if self.cache is not None:
            h = self.cache.header
            if h.vocab_size != teacher.vocab_size or h.draws != c.class_U:
                raise ConfigError(
                    f"cache has V={h.vocab_size}, U={h.draws}; run expects "
                    f"V={teacher.vocab_size}, U={c.class_U}", "cache_path")

        self.selected_ids: Optional[set[int]] = None
        if c.sample_l is not None:
            # frozen-student preprocessing pass over the whole corpus
            scores = average_entropy_scores(self.student, corpus, c.chunk_size, self.counters)
            self.selected_ids = rank_samples(scores, c.sample_l)
            keep = [i for i, sid in enumerate(corpus.sample_ids) if int(sid) in self.selected_ids]
            corpus = corpus.subset(keep)
        self.corpus = corpus
        self._order = np.empty(0, dtype=np.int64)
        self._cursor = 0

    def next_batch(self) -> SequenceBatch:
        idx = []
        while len(idx) < self.config.batch_size:
            if self._cursor >= self._order.size:
                self._order = self.data_rng.permutation(len(self.corpus))
                self._cursor = 0
            take = self._order[self._cursor:self._cursor + self.config.batch_size - len(idx)]
            self._cursor += take.size
            idx.extend(take.tolist())
        return self.corpus.subset(idx)

    def _scores(self, batch: SequenceBatch) -> tuple[list, Optional[list]]:
        """Per-sequence position scores and, when computed, full teacher rows."""
        c = self.config
        if c.metric == "student_entropy":
            return chunked_entropy(self.student, batch, c.chunk_size, self.counters, c.temperature), None
        student_probs = [softmax(z, c.temperature) for z in student_forward(self.student, batch)]
        self.counters.scored_positions += sum(p.shape[0] for p in student_probs)
        teacher_rows = None
        if c.metric not in STUDENT_ONLY_METRICS:
            teacher_rows = teacher_forward(self.teacher, batch, temperature=c.temperature, counters=self.counters)
        scores = [
            score_positions(c.metric, None if teacher_rows is None else teacher_rows[i], student_probs[i], y)
            for i, y in enumerate(batch.labels())
        ]
        return scores, teacher_rows

    def _masks(self, batch: SequenceBatch, scores: Optional[list]) -> list[SelectionMask]:
        c = self.config
        n_pos = batch.lengths - 1
        if c.alignment == "weighted_kl":
            return [weighted_mask(s) for s in scores]
        if c.policy == "full":
            return [SelectionMask.full(int(n)) for n in n_pos]
        if c.policy == "random":
            return [select_random(int(n), c.k, self.select_rng) for n in n_pos]
        if c.policy == "topk":
            return [select_topk(s, c.k) for s in scores]
        if c.policy == "curriculum":
            return [select_curriculum(s, self.step, self.curriculum) for s in scores]
        if c.policy == "gls":
            return [select_gls(s, self.gls)[0] for s in scores]
        corrected = c.policy == "pos_rs_corrected"
        return [pos_rs_mask(s, c.k, self.select_rng, corrected, c.pos_rs_temperature) for s in scores]

    def _supervision(self, batch: SequenceBatch, masks: list[SelectionMask], teacher_rows: Optional[list]) -> list:
        c = self.config
        if self.cache is not None:
            return [self.cache.read_sample(int(sid), m.positions) for sid, m in zip(batch.sample_ids, masks)]
        if teacher_rows is not None:
            dense = [rows[m.bits] for rows, m in zip(teacher_rows, masks)]
        else:
            dense = teacher_forward(self.teacher, batch, masks, c.temperature, self.counters)
        if c.class_U is None:
            return dense
        extra = (self.step,) if c.on_policy else ()
        return [
            draw_sparse_targets(rows, int(sid), m.positions, c.class_U, c.sampling_seed, extra)
            for rows, sid, m in zip(dense, batch.sample_ids, masks)
        ]

    def train_step(self, batch: Optional[SequenceBatch] = None) -> dict:
        """Score, select, fetch supervision, compute the loss and take one SGD step."""
        c = self.config
        if batch is None:
            batch = self.next_batch()
        if c.on_policy:
            prompts = [s[:1] for s in batch.sequences]
            generated = generate(self.student, prompts, batch.lengths, self.gen_rng)
            batch = SequenceBatch(generated.sequences, "student_generated", batch.sample_ids)

        needs_scores = c.policy in SCORED_POLICIES or c.alignment == "weighted_kl"
        scores, teacher_rows = self._scores(batch) if needs_scores else (None, None)
        masks = self._masks(batch, scores)
        sample_mask = np.array([1.0 if m.count > 0 else 0.0 for m in masks])
        if sample_mask.sum() == 0:
            self.step += 1
            self.losses.append(float("nan"))
            return {"step": self.step, "loss": float("nan"), "supervised": 0}

        targets = self._supervision(batch, masks, teacher_rows)
        logits = student_forward(self.student, batch, masks, self.counters)
        labels = [s[1:][m.bits] for s, m in zip(batch.sequences, masks)]
        loss, grads = selective_kd_loss(
            targets, logits, labels, masks, c.lam, c.temperature, c.alignment, sample_mask
        )
        contexts = np.concatenate([s[:-1][m.bits] for s, m in zip(batch.sequences, masks)])
        self.student.logit_gradient_step(contexts, np.concatenate(grads), c.lr)

        supervised = int(sum(m.count for m, s in zip(masks, sample_mask) if s))
        self.counters.supervised_positions += supervised
        self.step += 1
        self.losses.append(loss)
        return {"step": self.step, "loss": loss, "supervised": supervised}

    def train(self, steps: Optional[int] = None) -> list[float]:
        for _ in range(self.config.steps if steps is None else steps):
            self.train_step()
        return self.losses


@dataclass
class RunResult:
    config: DistillRun
    report: EvalReport
    counters: Counters
    losses: list
    student: FactorizedStudent
    selected_ids: Optional[set] = None
    run_dir: Optional[Path] = None


def run_experiment(
    config: DistillRun,
    out_dir: str | Path | None = None,
    world: Optional[tuple[TabularTeacher, SequenceBatch, SequenceBatch]] = None,
) -> RunResult:
    """Train for ``config.steps``, evaluate on the held-out split, optionally write artifacts.

    The run directory gets ``config.txt``, ``report.txt``, ``counters.txt``,
    ``losses.tsv`` and ``student.ckpt``; the config plus its seeds are enough
    to reproduce the run bit for bit.
    """
    config = config.validated()
    teacher, train, heldout = world if world is not None else build_world(config)
    distiller = Distiller(config, teacher, train)
    distiller.train()
    report = evaluate(distiller.student, heldout, config.ece_bins)
    result = RunResult(config, report, distiller.counters, distiller.losses, distiller.student,
                       distiller.selected_ids)
    if out_dir is not None:
        result.run_dir = write_run(out_dir, result)
    return result


def write_run(out_dir: str | Path, result: RunResult) -> Path:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.txt").write_text("\n".join(result.config.to_lines()) + "\n")
    write_report(d / "report.txt", result.report, echo=False)
    (d / "counters.txt").write_text("".join(f"{k}={v}\n" for k, v in result.counters.as_dict().items()))
    (d / "losses.tsv").write_text("step\tloss\n" + "".join(f"{i + 1}\t{x!r}\n" for i, x in enumerate(result.losses)))
    save_checkpoint(d / "student.ckpt", result.student)
    if result.selected_ids is not None:
        write_manifest(d / "samples.skdm", result.selected_ids)
    return d


@dataclass
class SweepRow:
    budget: float
    accuracy_mean: float
    accuracy_std: float
    perplexity_mean: float
    perplexity_std: float
    seeds: tuple


def sweep(
    axis: str,
    grid: Sequence[float],
    base: DistillRun,
    seeds: Sequence[int] = DEFAULT_SEEDS,
    out_dir: str | Path | None = None,
) -> list[SweepRow]:
    """One run per ``(budget, seed)`` along ``k`` or ``l``; rows ascending by budget."""
    if axis not in ("k", "l"):
        raise ConfigError("sweep axis must be 'k' or 'l'", "axis")
    if not grid:
        raise ConfigError("empty grid", "grid")
    if not seeds:
        raise ConfigError("need at least one seed", "seeds")
    world = build_world(base.validated())
    rows = []
    for b in sorted(set(float(x) for x in grid)):
        acc, ppl = [], []
        for seed in seeds:
            field_name = "k" if axis == "k" else "sample_l"
            cfg = dataclasses.replace(base, seed=int(seed), **{field_name: b})
            run_dir = None if out_dir is None else Path(out_dir) / f"{axis}={b:g}" / f"seed={seed}"
            res = run_experiment(cfg, run_dir, world)
            acc.append(res.report.top1_accuracy)
            ppl.append(res.report.perplexity)
            log.info("%s=%g seed=%d acc=%.4f ppl=%.4f", axis, b, seed, acc[-1], ppl[-1])
        rows.append(SweepRow(b, float(np.mean(acc)), _std(acc), float(np.mean(ppl)), _std(ppl), tuple(seeds)))
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "sweep.tsv").write_text(sweep_tsv(rows, axis))
    return rows


def _std(xs: Sequence[float]) -> float:
    return float(np.std(xs, ddof=1)) if len(xs) > 1 else 0.0


def sweep_tsv(rows: Sequence[SweepRow], axis: str) -> str:
    out = [f"{axis}\tacc_mean\tacc_std\tppl_mean\tppl_std\tn_seeds"]
    for r in rows:
        out.append(f"{r.budget:g}\t{r.accuracy_mean:.6f}\t{r.accuracy_std:.6f}\t"
                   f"{r.perplexity_mean:.6f}\t{r.perplexity_std:.6f}\t{len(r.seeds)}")
    return "\n".join(out) + "\n"


def sweep_table(rows: Sequence[SweepRow], axis: str) -> str:
    out = [f"{axis:>8}  {'acc':>8}  {'±':>7}  {'ppl':>9}  {'±':>7}"]
    for r in rows:
        out.append(f"{r.budget:>8g}  {r.accuracy_mean:8.4f}  {r.accuracy_std:7.4f}  "
                   f"{r.perplexity_mean:9.4f}  {r.perplexity_std:7.4f}")
    return "\n".join(out)


# ---- Monte Carlo checks of the position and class estimators ----

VERIFY_LOSSES = (0.5, 1.5, 2.0, 4.0, 3.0, 0.25)
VERIFY_WEIGHTS = (2.0, 0.5, 1.0, 3.0, 0.2, 1.3)
REL_TOL = 0.005
ABS_TOL_TARGET = 0.01


@dataclass
class Check:
    name: str
    measured: float
    target: float
    error: float
    threshold: float
    kind: str = "relative"

    @property
    def passed(self) -> bool:
        return self.error < self.threshold

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict}  {self.name}: measured={self.measured:.6f} target={self.target:.6f} "
                f"{self.kind}_error={self.error:.2e} threshold={self.threshold:g}")


@dataclass
class VerificationReport:
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def text(self) -> str:
        return "\n".join(c.line() for c in self.checks)


def verify_position_estimators(
    losses: Sequence[float] = VERIFY_LOSSES,
    weights: Sequence[float] = VERIFY_WEIGHTS,
    trials: int = 100_000,
    seed: int = 0,
    K: Optional[int] = None,
    k: float = 0.2,
) -> tuple[Check, Check]:
    """Pos RS-KD mean vs. the weighted-KD target, and the corrected mean vs. plain mean."""
    L = np.asarray(losses, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    N = L.size
    rng = np.random.default_rng(seed)
    plain = np.empty(trials)
    corrected = np.empty(trials)
    for i in range(trials):
        draws, q = sample_positions_rs(w, K, rng, k=k)
        plain[i] = L[draws].mean()
        corrected[i] = importance_correction_weights(draws, q, draws.size, N) @ L
    weighted_target = float(w @ L / w.sum())
    full_target = float(L.mean())
    m1, m2 = math.fsum(plain) / trials, math.fsum(corrected) / trials
    return (
        Check("pos_rs_vs_weighted_kd", m1, weighted_target, abs(m1 - weighted_target) / weighted_target, REL_TOL),
        Check("pos_rs_corrected_vs_full_kd", m2, full_target, abs(m2 - full_target) / full_target, REL_TOL),
    )


def verify_class_targets(
    U: int,
    trials: int = 100_000,
    seed: int = 0,
    vocab_size: int = 32,
) -> Check:
    """Largest per-class gap between the mean RS-KD target and the teacher distribution."""
    rng = np.random.default_rng([seed, U])
    p = rng.dirichlet(np.full(vocab_size, 0.5))
    acc = np.zeros(vocab_size)
    for _ in range(trials):
        t = sample_classes(p, U, rng)
        acc[t.support] += t.counts
    mean = acc / (trials * U)
    gap = np.abs(mean - p)
    worst = int(np.argmax(gap))
    return Check(f"rs_kd_target_U{U}", float(mean[worst]), float(p[worst]), float(gap[worst]),
                 ABS_TOL_TARGET, kind="absolute")


def verify_estimators(trials: int = 100_000, seed: int = 0) -> VerificationReport:
    if trials < 10_000:
        raise ConfigError("need at least 10^4 trials", "trials")
    report = VerificationReport()
    report.checks.extend(verify_position_estimators(trials=trials, seed=seed))
    for U in (12, 64):
        report.checks.append(verify_class_targets(U, trials, seed))
    return report
