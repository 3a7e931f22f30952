"""
Position budget sweep
=====================

Held-out perplexity as the fraction k of supervised positions shrinks,
for entropy top-k and for uniformly random positions. Small world so it
finishes in about a minute; pass --full for the default world.
"""
import dataclasses
import sys

from selkd.training import DistillRun, sweep, sweep_table, sweep_tsv

base = DistillRun()
if "--full" not in sys.argv:
    base = dataclasses.replace(base, vocab_size=32, rank=6, train_tokens=10_000,
                               heldout_tokens=3000, steps=1000, lr=0.5)

grid = [0.01, 0.05, 0.2, 1.0]
for policy in ("topk", "random"):
    rows = sweep("k", grid, dataclasses.replace(base, policy=policy), seeds=[1, 2])
    print(f"\n{policy}")
    print(sweep_table(rows, "k"))

# the tab-separated form is what a plotting script would read
print()
print(sweep_tsv(rows, "k"), end="")
