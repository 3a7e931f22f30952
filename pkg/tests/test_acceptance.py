"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` or as a script:
``python3 tests/test_acceptance.py``.
"""
import dataclasses
import math
import sys
import time

import numpy as np
import pytest

from selkd.cache import decode_position, encode_position, estimate_storage
from selkd.classes import SparseTarget, sample_classes, sparse_kl, sparse_kl_gradient
from selkd.losses import position_losses, selective_kd_loss
from selkd.metrics import entropy, kl, softmax
from selkd.models import (
    Counters,
    FactorizedStudent,
    SequenceBatch,
    chunked_entropy,
    student_forward,
)
from selkd.selection import (
    CurriculumSchedule,
    GlsState,
    budget,
    select_curriculum,
    select_gls,
    select_random,
    select_topk,
)
from selkd.training import (
    DEFAULT_SEEDS,
    Distiller,
    DistillRun,
    build_cache,
    build_world,
    run_experiment,
    verify_class_targets,
    verify_position_estimators,
)


def verdict(request, number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {detail}"
    # print past pytest's capture so the line shows up in every run
    capman = request.config.pluginmanager.getplugin("capturemanager")
    with capman.global_and_fixture_disabled():
        print("\n" + line)
    assert ok, line


def central_difference(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


# 1 ---------------------------------------------------------------------------

def test_criterion_1_storage_table(request):
    t0 = time.perf_counter()
    cells = {
        ("rs_kd", 64): 19.2, ("rs_kd", 12): 3.6,
        ("se_kd_3x", 64): 3.84, ("se_kd_3x", 12): 0.72,
        ("vanilla_ce", 64): 0.3,
    }
    got = {key: estimate_storage(key[0], 100e9, 100_000, key[1], 0.2).total_terabytes for key in cells}
    full = estimate_storage("full_kd", 100e9, 100_000, 64, 0.2)
    elapsed = time.perf_counter() - t0
    exact = all(got[key] == want for key, want in cells.items())
    flagged = full.note is not None
    verdict(request, 1, exact and flagged and elapsed < 1.0,
            f"cells={ {f'{m}@U{u}': float(v) for (m, u), v in got.items()} } exact={exact}; "
            f"full_kd={float(full.total_terabytes):g} TB flagged={flagged}; {elapsed * 1e3:.1f} ms")


# 2 ---------------------------------------------------------------------------

def test_criterion_2_position_estimators(request):
    t0 = time.perf_counter()
    plain, corrected = verify_position_estimators(trials=100_000, seed=2024)
    elapsed = time.perf_counter() - t0
    ok = plain.error < 0.005 and corrected.error < 0.005 and elapsed < 30
    verdict(request, 2, ok,
            f"pos_rs rel_err={plain.error:.2e}, corrected rel_err={corrected.error:.2e} "
            f"(< 5e-3) over 1e5 trials; {elapsed:.1f} s")


# 3 ---------------------------------------------------------------------------

def test_criterion_3_class_targets(request):
    t0 = time.perf_counter()
    checks = [verify_class_targets(U, trials=100_000, seed=7, vocab_size=64) for U in (12, 64)]
    elapsed = time.perf_counter() - t0
    ok = all(c.error < 0.01 for c in checks) and elapsed < 60
    verdict(request, 3, ok,
            ", ".join(f"U={U} max|E[p~]-p|={c.error:.2e}" for U, c in zip((12, 64), checks))
            + f" (< 1e-2, V=64, 1e5 trials); {elapsed:.1f} s")


# 4 ---------------------------------------------------------------------------

def test_criterion_4_gradients(request):
    rng = np.random.default_rng(4)
    worst = {}
    n = 150
    for kind in ("forward_kl", "reverse_kl", "sparse_kl", "ce"):
        err = 0.0
        for _ in range(n):
            V = int(rng.integers(2, 17))
            z = rng.normal(0, 2, size=V)
            p = rng.dirichlet(np.full(V, 0.6))
            y = int(rng.integers(V))
            T = float(rng.choice([0.5, 1.0, 2.0]))
            if kind == "sparse_kl":
                t = sample_classes(p, int(rng.integers(1, 128)), rng)
                num = central_difference(lambda x: sparse_kl(t, softmax(x, T)), z)
                ana = sparse_kl_gradient(t, z, T)
            else:
                lam = 0.0 if kind == "ce" else 1.0
                align = "reverse_kl" if kind == "reverse_kl" else "forward_kl"

                def f(x):
                    return float(position_losses(p[None], x[None], [y], lam, T, align)[0][0])

                num = central_difference(f, z)
                ana = position_losses(p[None], z[None], [y], lam, T, align)[1][0]
            err = max(err, float(np.max(np.abs(num - ana))))
        worst[kind] = err
    ok = all(e < 1e-6 for e in worst.values())
    verdict(request, 4, ok,
            "max |analytic - FD| " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
            + f" (< 1e-6, {n} instances each, V<=16)")


# 5 ---------------------------------------------------------------------------

def _dense_reference(teacher, logits, masks):
    per_seq, grads = [], []
    for p, z, m in zip(teacher, logits, masks):
        q = softmax(z)
        per_seq.append(float(np.sum(kl(p, q)[m.bits])) / m.count)
        grads.append((q - p) * (m.bits / m.count)[:, None] / len(masks))
    return float(np.mean(per_seq)), grads


def test_criterion_5_selective_compute(request):
    rng = np.random.default_rng(5)
    V = 32
    student = FactorizedStudent.init(V, 6, seed=1, scale=1.0)
    lengths = rng.integers(2, 80, size=24)
    batch = SequenceBatch([rng.integers(0, V, size=L) for L in lengths])
    teacher = [rng.dirichlet(np.ones(V), size=L - 1) for L in lengths]

    # selective head + loss vs. dense computation masked afterwards
    full_logits = student_forward(student, batch)
    masks = [select_topk(rng.random(L - 1), 0.2) for L in lengths]
    c = Counters()
    sel_logits = student_forward(student, batch, masks, c)
    loss, grads = selective_kd_loss([p[m.bits] for p, m in zip(teacher, masks)], sel_logits,
                                    [None] * len(masks), masks)
    ref_loss, ref_grads = _dense_reference(teacher, full_logits, masks)
    loss_err = abs(loss - ref_loss)
    grad_err = max(float(np.max(np.abs(g - rg[m.bits]))) for g, rg, m in zip(grads, ref_grads, masks))
    logit_err = max(float(np.max(np.abs(a[m.bits] - b))) for a, b, m in zip(full_logits, sel_logits, masks))
    n_select = sum(budget(int(L - 1), 0.2) for L in lengths)

    # chunked entropy for every chunk size
    dense_ent = np.concatenate([entropy(softmax(z)) for z in full_logits])
    total = dense_ent.size
    ent_err, peak_ok = 0.0, True
    for chunk in range(1, total + 1):
        cc = Counters()
        got = np.concatenate(chunked_entropy(student, batch, chunk, cc))
        ent_err = max(ent_err, float(np.max(np.abs(got - dense_ent))))
        peak_ok &= cc.peak_live_logits <= chunk * V

    # counters inside a real training step
    cfg = DistillRun(vocab_size=V, rank=6, train_tokens=4000, heldout_tokens=200, max_seq_len=40, steps=1)
    teacher_m, train, _ = build_world(cfg)
    d = Distiller(cfg, teacher_m, train)
    step_batch = d.next_batch()
    d.train_step(step_batch)
    step_select = sum(budget(int(L - 1), 0.2) for L in step_batch.lengths)

    ok = (loss_err < 1e-10 and grad_err < 1e-10 and logit_err == 0 and ent_err < 1e-12 and peak_ok
          and c.lm_head_positions == n_select and d.counters.lm_head_positions == step_select
          and d.counters.teacher_queries == step_select)
    verdict(request, 5, ok,
            f"loss_err={loss_err:.1e} grad_err={grad_err:.1e} logit_err={logit_err:g} (< 1e-10); "
            f"entropy_err={ent_err:.1e} over chunk sizes 1..{total} (< 1e-12), peak ok={peak_ok}; "
            f"lm_head={c.lm_head_positions}/{n_select}, train step lm_head={d.counters.lm_head_positions}"
            f"/{step_select}")


# 6 ---------------------------------------------------------------------------

def test_criterion_6_budgets(request):
    rng = np.random.default_rng(6)
    ks = (0.0025, 0.01, 0.05, 0.07, 0.1, 0.2, 0.25, 1 / 3, 0.5, 0.9, 1.0)
    bad = []
    checked = 0
    for L in range(2, 258):
        n = L - 1
        scores = rng.random(n)
        for k in ks:
            want = math.ceil(k * n - 1e-9)
            counts = {
                "topk": select_topk(scores, k).count,
                "random": select_random(n, k, rng).count,
            }
            sched = CurriculumSchedule(k, 100)
            for step in (0, 33, 100, 500):
                counts[f"curriculum@{step}"] = select_curriculum(scores, step, sched).count
            for name, got in counts.items():
                checked += 1
                if got != want:
                    bad.append((L, k, name, got, want))

    state = GlsState(0.2)
    selected = seen = 0
    while seen < 100_000:
        s = rng.exponential(size=int(rng.integers(8, 128)))
        m, _ = select_gls(s, state)
        selected += m.count
        seen += s.size
    frac = selected / seen
    gls_ok = abs(frac - 0.2) / 0.2 < 0.02
    verdict(request, 6, not bad and gls_ok,
            f"{checked} (L, k, policy) cells exact, {len(bad)} mismatches; "
            f"GLS fraction {frac:.4f} over {seen} positions (|rel err| {abs(frac - 0.2) / 0.2:.2%} < 2%)")


# 7 ---------------------------------------------------------------------------

def test_criterion_7_codec_and_replay(request, tmp_path):
    rng = np.random.default_rng(7)
    V, U = 100_000, 64
    mismatches = 0
    for _ in range(10_000):
        n = int(rng.integers(1, 21))
        support = np.sort(rng.choice(V - 1, size=n, replace=False))
        counts = 1 + rng.multinomial(U - n, np.full(n, 1 / n))
        t = SparseTarget(support, counts, U)
        back = decode_position(encode_position(t, U), U)
        if not (back == t and np.array_equal(back.weights, counts / U)):
            mismatches += 1

    cfg = DistillRun(vocab_size=32, rank=6, train_tokens=6000, heldout_tokens=500, max_seq_len=32,
                     class_U=12, sampling_seed=77, steps=60, sample_l=0.5)
    world = build_world(cfg.validated())
    path = tmp_path / "teacher.skdc"
    build_cache(path, world[0], world[1], cfg.class_U, cfg.sampling_seed)
    online = run_experiment(cfg, world=world)
    replay = run_experiment(dataclasses.replace(cfg, cache_path=str(path)), world=world)
    same = (np.array_equal(online.losses, replay.losses)
            and online.student.state_bytes() == replay.student.state_bytes())
    verdict(request, 7, mismatches == 0 and same,
            f"{mismatches} roundtrip mismatches in 1e4 positions (V=1e5, U=64); "
            f"replay vs online over {len(online.losses)} steps bit-identical={same}")


# 8 ---------------------------------------------------------------------------

def test_criterion_8_trend(request):
    t0 = time.perf_counter()
    base = DistillRun()  # V=64, d=8, 50k training tokens, k=0.2, student-entropy top-k
    assert (base.vocab_size, base.rank, base.train_tokens, base.k) == (64, 8, 50_000, 0.2)
    world = build_world(base.validated())
    train = world[1]
    ratios, exact = [], True
    for seed in DEFAULT_SEEDS:
        full = run_experiment(dataclasses.replace(base, seed=seed, policy="full"), world=world)
        sekd = run_experiment(dataclasses.replace(base, seed=seed), world=world)
        ratios.append(sekd.report.perplexity / full.report.perplexity)
        # replay the batch order to get the exact supervision budget
        d = Distiller(dataclasses.replace(base, seed=seed), world[0], train)
        expect = sum(sum(budget(int(L - 1), 0.2) for L in d.next_batch().lengths) for _ in range(base.steps))
        exact &= sekd.counters.supervised_positions == expect
    elapsed = time.perf_counter() - t0
    ok = all(r <= 1.05 for r in ratios) and exact and elapsed < 300
    verdict(request, 8, ok,
            "SE-KD/Full KD perplexity ratio per seed "
            + ", ".join(f"{r:.3f}" for r in ratios)
            + f" (need <= 1.05); budget exact={exact}; {elapsed:.0f} s")


# 9 ---------------------------------------------------------------------------

def test_criterion_9_determinism(request, tmp_path):
    small = DistillRun(vocab_size=24, rank=4, train_tokens=5000, heldout_tokens=1000,
                       max_seq_len=32, steps=80)
    configs = {
        "se_kd_3x": dataclasses.replace(small, class_U=16, sample_l=0.3),
        "gls": dataclasses.replace(small, policy="gls", gls_capacity=500),
        "pos_rs_corrected": dataclasses.replace(small, policy="pos_rs_corrected"),
        "on_policy": dataclasses.replace(small, on_policy=True, alignment="reverse_kl"),
    }
    files = ("student.ckpt", "report.txt", "counters.txt", "losses.tsv")
    identical = {}
    for name, cfg in configs.items():
        run_experiment(cfg, tmp_path / name / "a")
        run_experiment(cfg, tmp_path / name / "b")
        identical[name] = all(
            (tmp_path / name / "a" / f).read_bytes() == (tmp_path / name / "b" / f).read_bytes() for f in files
        )
    verdict(request, 9, all(identical.values()),
            "bit-identical checkpoint+report on rerun: " + ", ".join(f"{k}={v}" for k, v in identical.items()))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
