"""Deterministic 64-bit seed derivation.

Every random stream in a run is keyed by the master seed plus a list of
(label, index) pairs, e.g. ("rep", 3) then ("fold", 1). Labels are hashed
with FNV-1a (never Python's salted ``hash``) and folded through a
splitmix-style finalizer, so seeds are stable across processes and
adding replications never perturbs earlier ones.
"""

from __future__ import annotations

from typing import Sequence

from .errors import ContractError

_MASK64 = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_GOLDEN = 0x9E3779B97F4A7C15


def fnv1a64(text: str) -> int:
    """FNV-1a over the UTF-8 bytes; stable across platforms and runs."""
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def mix64(x: int) -> int:
    """Splitmix64 finalizer: bijective avalanche mix on 64 bits."""
    x &= _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(master: int, labels: Sequence[tuple[str, int]] = ()) -> int:
    """Fold ``master`` with each (label, index) pair into a fresh seed.

    Distinct label paths give distinct seeds across the scales used here
    (stages x folds x replications); identical inputs always give the
    identical seed.
    """
    if not 0 <= master <= _MASK64:
        raise ContractError(f"master seed must be a u64, got {master}")
    h = mix64(master + _GOLDEN)
    for label, index in labels:
        if not isinstance(label, str) or not label:
            raise ContractError(f"seed label must be a non-empty string, got {label!r}")
        if not 0 <= int(index) <= _MASK64:
            raise ContractError(f"seed index must be a u64, got {index}")
        h = mix64((h ^ fnv1a64(label)) + _GOLDEN)
        h = mix64((h ^ int(index)) + _GOLDEN)
    return h
