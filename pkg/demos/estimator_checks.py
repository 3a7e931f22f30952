"""
Sampling positions instead of ranking them
==========================================

Drawing positions with probability proportional to a score gives, on
average, the score-weighted distillation loss. Reweighting each draw by
1 / (K N q(t)) recovers the plain average over every position instead.
"""
import numpy as np

from selkd.selection import importance_correction_weights, sample_positions_rs
from selkd.training import verify_class_targets, verify_position_estimators

losses = np.array([1.0, 5.0])
weights = np.array([3.0, 1.0])
print("weighted target:", weights @ losses / weights.sum())   # 2.0
print("plain target:   ", losses.mean())                       # 3.0

rng = np.random.default_rng(0)
draws, q = sample_positions_rs(weights, 1, rng)
print("one draw:", draws, "q =", q)
print("its corrected weight:", importance_correction_weights(draws, q, 1, 2))

# the same thing over many trials
for check in verify_position_estimators(losses, weights, trials=20_000, seed=1):
    print(check.line())

# sparse class targets: counts / U average out to the teacher distribution
print(verify_class_targets(U=12, trials=20_000, seed=0).line())
