"""
What each position policy picks
===============================

Ten positions with known scores, budget k = 0.2, so the fixed-budget
policies pick exactly ceil(0.2 * 10) = 2 of them.
"""
import numpy as np

from selkd.selection import (
    CurriculumSchedule,
    GlsState,
    pos_rs_mask,
    select_curriculum,
    select_gls,
    select_random,
    select_topk,
)

scores = np.array([0.3, 2.1, 0.9, 1.7, 0.1, 2.5, 0.4, 1.2, 0.8, 0.2])
rng = np.random.default_rng(3)

print("scores        ", scores)
print("topk          ", select_topk(scores, 0.2).positions)        # the two largest
print("random        ", select_random(scores.size, 0.2, rng).positions)

# curriculum slides from the easiest positions to the hardest
sched = CurriculumSchedule(0.2, total_steps=100)
for step in (0, 50, 100):
    print(f"curriculum@{step:<3}", select_curriculum(scores, step, sched).positions)

# GLS compares against a threshold from recently seen scores, so the count varies
state = GlsState(0.2, capacity=1000)
state.push(rng.exponential(size=500))
m, _ = select_gls(scores, state)
print("gls           ", m.positions, f"(tau={state.threshold():.3f})")

# Pos RS-KD draws with replacement; the weights are draw frequencies
m = pos_rs_mask(scores, 0.2, rng)
print("pos_rs        ", m.positions, m.weights[m.bits])
m = pos_rs_mask(scores, 0.2, rng, corrected=True)
print("pos_rs_corr   ", m.positions, np.round(m.weights[m.bits], 3))
