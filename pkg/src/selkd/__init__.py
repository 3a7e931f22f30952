"""Selective knowledge distillation at desk scale.

Position, class and sample selection for distilling a toy autoregressive
teacher into a low-rank student, plus the sparse offline teacher cache.
"""
from selkd.errors import (
    CacheCapacityError,
    CacheCorruptionError,
    ConfigError,
    ContractError,
    SelkdError,
)
from selkd.metrics import (
    EPS,
    METRICS,
    cross_entropy,
    entropy,
    kl,
    reverse_kl,
    score_positions,
    softmax,
)

__version__ = "0.1.0"

__all__ = [
    "EPS",
    "METRICS",
    "CacheCapacityError",
    "CacheCorruptionError",
    "ConfigError",
    "ContractError",
    "SelkdError",
    "cross_entropy",
    "entropy",
    "kl",
    "reverse_kl",
    "score_positions",
    "softmax",
]
