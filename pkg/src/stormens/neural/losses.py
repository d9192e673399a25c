"""Scalar losses with gradients w.r.t. their first argument."""

import numpy as np

from ..errors import ShapeMismatch

PROB_CLAMP = 1e-7


def binary_cross_entropy(p, y):
    """Mean BCE of probabilities against {0,1} targets.

    Probabilities are clamped to [1e-7, 1-1e-7]; the gradient is zero where
    the clamp was active (subgradient choice).
    """
    p = np.asarray(p, dtype=float)
    y = np.asarray(y, dtype=float)
    if p.shape != y.shape:
        raise ShapeMismatch(f"bce: {p.shape} vs {y.shape}")
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = float(-np.mean(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)))
    inside = (p >= PROB_CLAMP) & (p <= 1.0 - PROB_CLAMP)
    grad = np.where(inside, (pc - y) / (pc * (1.0 - pc)), 0.0) / p.size
    return loss, grad


def l1_loss(a, b):
    """Mean absolute difference; subgradient 0 at exact ties."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ShapeMismatch(f"l1: {a.shape} vs {b.shape}")
    d = a - b
    loss = float(np.mean(np.abs(d)))
    grad = np.sign(d) / a.size
    return loss, grad
