"""
Offline teacher cache, then training from it
=============================================

Sample U classes per position from the teacher once, store them as 3-byte
records, and train from the file. With the same sampling seed the run is
identical to drawing the targets online.
"""
import dataclasses
import tempfile
from pathlib import Path

import numpy as np

from selkd.cache import CacheReader
from selkd.training import DistillRun, build_cache, build_world, run_experiment

cfg = DistillRun(vocab_size=32, rank=6, train_tokens=8000, heldout_tokens=2000,
                 max_seq_len=32, steps=200, class_U=12, sampling_seed=5)
world = build_world(cfg.validated())
teacher, train, heldout = world

tmp = Path(tempfile.mkdtemp())
path = tmp / "teacher.skdc"
size = build_cache(path, teacher, train, cfg.class_U, cfg.sampling_seed)
reader = CacheReader(path)
print(reader.summary())
print("first position of sample 0:", reader.read_position(0, 0))

online = run_experiment(cfg, world=world)
replay = run_experiment(dataclasses.replace(cfg, cache_path=str(path)), world=world)
print("same loss trajectory:", np.array_equal(online.losses, replay.losses))
print("teacher queries online/replay:", online.counters.teacher_queries, replay.counters.teacher_queries)
print("held-out perplexity:", replay.report.perplexity)
