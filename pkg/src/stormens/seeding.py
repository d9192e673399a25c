"""Deterministic seed derivation.

Every stochastic component derives its stream as hash(global seed, tokens),
so parallel work can partition the seed space without coordination.
"""

import zlib

import numpy as np


def _token(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part) & 0xFFFFFFFF


def derive_rng(*parts):
    """Independent Generator for a (seed, *tokens) path."""
    return np.random.default_rng(np.random.SeedSequence([_token(p) for p in parts]))


def derive_seed(*parts):
    """Stable 32-bit child seed for a (seed, *tokens) path."""
    return int(np.random.SeedSequence([_token(p) for p in parts]).generate_state(1)[0])
