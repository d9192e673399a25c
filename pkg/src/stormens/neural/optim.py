"""Adam updates, training configuration, and early stopping."""

from dataclasses import dataclass

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    decay: float = 0.99  # multiplicative per-epoch learning-rate factor
    batch_size: int = 32
    max_epochs: int = 100
    early_stop_patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")

    def lr_at(self, epoch):
        return self.learning_rate * self.decay**epoch


def adam_step(store, grads, lr, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
    """One bias-corrected Adam update over the parameters named in ``grads``.

    Updates the store in place and returns it. Parameters absent from
    ``grads`` are left untouched, which is how frozen components skip
    updates during alternating steps.
    """
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, g in grads.items():
        m = store.adam_m[name]
        v = store.adam_v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        store.params[name] -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(store.dtype)
    return store


class EarlyStopper:
    """Track validation loss; restore the best parameter snapshot."""

    def __init__(self, store, patience):
        self.patience = patience
        self.best_loss = np.inf
        self.best = store.copy()
        self.bad_epochs = 0

    def update(self, store, val_loss):
        """Returns True when training should stop."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best = store.copy()
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    def restore(self, store):
        store.params = {k: v.copy() for k, v in self.best.params.items()}
        store.state = {k: v.copy() for k, v in self.best.state.items()}
        store.adam_m = {k: v.copy() for k, v in self.best.adam_m.items()}
        store.adam_v = {k: v.copy() for k, v in self.best.adam_v.items()}
        store.step = self.best.step
        return store
