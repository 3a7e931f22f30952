"""
Storage needed to keep teacher supervision around
==================================================

Bytes per supervised position, times positions, for 100B tokens and a
100k vocabulary. RS-KD stores U records of 3 bytes per position; adding
sample selection keeps only a fraction l of the corpus.
"""
from selkd.cache import estimate_storage, storage_table

print(storage_table())
print()

# one cell by hand: 3 bytes * 64 draws * 0.2 of the samples
e = estimate_storage("se_kd_3x", U=64, l=0.2)
print(f"se_kd_3x @ U=64: {float(e.bytes_per_position)} bytes/position -> {float(e.total_terabytes)} TB")

# a dense fp16 cache is the one that does not fit anywhere
full = estimate_storage("full_kd")
print(f"full_kd: {float(full.total_terabytes):g} TB")
print(full.note)
