"""Parameter storage, Adam state, and the sequential layer container."""

import numpy as np

from ..arrayio import load_bundle, save_bundle
from ..errors import BundleError


class ParamStore:
    """Named parameter arrays plus optimizer and layer state.

    ``params`` are trainable, ``state`` holds non-trainable layer state
    (batch-norm running statistics). Adam first/second moments live next to
    each parameter; the step count is shared across the store.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params = {}
        self.state = {}
        self.adam_m = {}
        self.adam_v = {}
        self.step = 0

    def add_param(self, name, value):
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        value = np.asarray(value, dtype=self.dtype)
        self.params[name] = value
        self.adam_m[name] = np.zeros_like(value)
        self.adam_v[name] = np.zeros_like(value)

    def add_state(self, name, value):
        self.state[name] = np.asarray(value, dtype=self.dtype)

    def zero_grads(self):
        return {name: np.zeros_like(p) for name, p in self.params.items()}

    def copy(self):
        out = ParamStore(self.dtype)
        out.params = {k: v.copy() for k, v in self.params.items()}
        out.state = {k: v.copy() for k, v in self.state.items()}
        out.adam_m = {k: v.copy() for k, v in self.adam_m.items()}
        out.adam_v = {k: v.copy() for k, v in self.adam_v.items()}
        out.step = self.step
        return out

    def n_params(self):
        return sum(p.size for p in self.params.values())

    def to_arrays(self, prefix=""):
        """Flatten into named arrays, for embedding in a shared container."""
        arrays = {f"{prefix}step": np.array([self.step], dtype=np.int64)}
        for k, v in self.params.items():
            arrays[f"{prefix}param/{k}"] = v
            arrays[f"{prefix}adam_m/{k}"] = self.adam_m[k]
            arrays[f"{prefix}adam_v/{k}"] = self.adam_v[k]
        for k, v in self.state.items():
            arrays[f"{prefix}state/{k}"] = v
        return arrays

    @classmethod
    def from_arrays(cls, arrays, prefix="", dtype=np.float32):
        out = cls(dtype)
        for key, value in arrays.items():
            if not key.startswith(prefix):
                continue
            key = key[len(prefix):]
            if key == "step":
                out.step = int(value[0])
                continue
            section, name = key.split("/", 1)
            if section == "param":
                out.params[name] = value.copy()
            elif section == "adam_m":
                out.adam_m[name] = value.copy()
            elif section == "adam_v":
                out.adam_v[name] = value.copy()
            elif section == "state":
                out.state[name] = value.copy()
        missing = set(out.params) - set(out.adam_m)
        if missing:
            raise BundleError(f"parameters missing Adam state: {sorted(missing)}")
        if out.params:
            out.dtype = next(iter(out.params.values())).dtype
        return out

    def save(self, path, meta=None):
        meta = dict(meta or {})
        meta.update({"kind": "param_store", "step": self.step, "dtype": str(self.dtype)})
        save_bundle(path, self.to_arrays(), meta=meta)

    @classmethod
    def load(cls, path):
        arrays, meta = load_bundle(path)
        if meta.get("kind") != "param_store":
            raise BundleError(f"{path}: not a parameter store")
        out = cls.from_arrays(arrays, dtype=np.dtype(meta["dtype"]))
        return out, meta


class Sequential:
    """A plain stack of layers sharing one ParamStore."""

    def __init__(self, layers):
        self.layers = list(layers)

    def init_params(self, store, rng):
        for layer in self.layers:
            layer.init_params(store, rng)

    def forward(self, store, x, mode, rng=None):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(store, x, mode, rng)
            caches.append(cache)
        return x, caches

    def backward(self, store, caches, gy, grads):
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            gy = layer.backward(store, cache, gy, grads)
        return gy
