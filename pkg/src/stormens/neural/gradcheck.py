"""Finite-difference verification of analytic gradients."""

import numpy as np


def grad_check(loss_fn, store, n_coords=50, eps=1e-5, seed=0, param_names=None):
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn()`` must return ``(loss, grads)`` and be deterministic (any
    stochastic layers must be driven by fixed seeds inside it); it is
    re-evaluated with single coordinates of the store perturbed by +/- eps.
    Coordinates are sampled uniformly over the named parameters (all by
    default). Run the store in float64 for meaningful results.
    """
    _, grads = loss_fn()
    names = sorted(param_names or grads.keys())
    rng = np.random.default_rng(seed)
    sizes = np.array([store.params[n].size for n in names])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in picks:
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[which]
        idx = int(flat - offsets[which])
        p = store.params[name]
        orig = p.flat[idx]
        p.flat[idx] = orig + eps
        up, _ = loss_fn()
        p.flat[idx] = orig - eps
        down, _ = loss_fn()
        p.flat[idx] = orig
        numeric = (up - down) / (2.0 * eps)
        analytic = grads[name].flat[idx]
        scale = max(abs(numeric), abs(analytic), 1e-8)
        worst = max(worst, abs(numeric - analytic) / scale)
    return worst
