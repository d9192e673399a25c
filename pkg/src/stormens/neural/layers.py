"""Layer forward/backward passes.

Conventions: activations are NHWC (2-d) or NTC (1-d); weights are
(k, k, c_in, c_out). Modes are "train" (batch statistics, dropout on),
"infer" (running statistics, dropout off), and "mc" (infer plus Monte Carlo
dropout on layers flagged for it).

Stride-1 convolutions and transposed convolutions run as k*k shifted GEMMs
over a padded buffer, which keeps all arithmetic in BLAS. Stride-2
convolutions go through the im2col/col2im kernel core.
"""

import numpy as np

from .. import kernels
from ..errors import ShapeMismatch

MODES = ("train", "infer", "mc")
BN_EPS = 1e-5


def he_uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def same_pads(size, k, stride):
    """Output size and leading pad for 'same'-style padding."""
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2


class Layer:
    def init_params(self, store, rng):
        pass

    def forward(self, store, x, mode, rng=None):
        raise NotImplementedError

    def backward(self, store, cache, gy, grads):
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, name, n_in, n_out, bias=True):
        self.name, self.n_in, self.n_out, self.bias = name, n_in, n_out, bias

    def init_params(self, store, rng):
        store.add_param(f"{self.name}.W", he_uniform(rng, (self.n_in, self.n_out),
                                                     self.n_in, store.dtype))
        if self.bias:
            store.add_param(f"{self.name}.b", np.zeros(self.n_out, dtype=store.dtype))

    def forward(self, store, x, mode, rng=None):
        if x.shape[-1] != self.n_in:
            raise ShapeMismatch(f"{self.name}: got {x.shape[-1]} features, want {self.n_in}")
        y = x @ store.params[f"{self.name}.W"]
        if self.bias:
            y += store.params[f"{self.name}.b"]
        return y, x

    def backward(self, store, cache, gy, grads):
        x = cache
        grads[f"{self.name}.W"] += x.T @ gy
        if self.bias:
            grads[f"{self.name}.b"] += gy.sum(axis=0)
        return gy @ store.params[f"{self.name}.W"].T


class Conv2d(Layer):
    """Same-padding 2-d convolution; stride 1 or 2 (kernel 3 when strided)."""

    def __init__(self, name, c_in, c_out, k=3, stride=1, bias=True):
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        if k % 2 == 0:
            raise ValueError("conv kernels must be odd-sized")
        self.name, self.c_in, self.c_out, self.k, self.stride = name, c_in, c_out, k, stride
        self.bias = bias

    def init_params(self, store, rng):
        fan_in = self.k * self.k * self.c_in
        store.add_param(f"{self.name}.W",
                        he_uniform(rng, (self.k, self.k, self.c_in, self.c_out),
                                   fan_in, store.dtype))
        if self.bias:
            store.add_param(f"{self.name}.b", np.zeros(self.c_out, dtype=store.dtype))

    def forward(self, store, x, mode, rng=None):
        if x.ndim != 4 or x.shape[3] != self.c_in:
            raise ShapeMismatch(f"{self.name}: input {x.shape}, want (n,h,w,{self.c_in})")
        w = store.params[f"{self.name}.W"]
        n, h, wd, _ = x.shape
        if self.stride == 1:
            p = self.k // 2
            xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
            flat = xp.reshape(-1, self.c_in)
            y = np.zeros((n, h, wd, self.c_out), dtype=x.dtype)
            for di in range(self.k):
                for dj in range(self.k):
                    t = (flat @ w[di, dj]).reshape(n, h + 2 * p, wd + 2 * p, self.c_out)
                    y += t[:, di:di + h, dj:dj + wd]
            if self.bias:
                y += store.params[f"{self.name}.b"]
            return y, (x.shape, xp)
        oh, pt = same_pads(h, self.k, 2)
        ow, pl = same_pads(wd, self.k, 2)
        cols = kernels.im2col(x, self.k, self.k, 2, pt, pl, oh, ow)
        y = (cols @ w.reshape(-1, self.c_out)).reshape(n, oh, ow, self.c_out)
        if self.bias:
            y += store.params[f"{self.name}.b"]
        return y, (x.shape, cols, (pt, pl, oh, ow))

    def backward(self, store, cache, gy, grads):
        w = store.params[f"{self.name}.W"]
        if self.bias:
            grads[f"{self.name}.b"] += gy.sum(axis=(0, 1, 2))
        if self.stride == 1:
            x_shape, xp = cache
            n, h, wd, _ = x_shape
            p = self.k // 2
            gxp = np.zeros_like(xp)
            gflat = gy.reshape(-1, self.c_out)
            for di in range(self.k):
                for dj in range(self.k):
                    grads[f"{self.name}.W"][di, dj] += np.tensordot(
                        xp[:, di:di + h, dj:dj + wd], gy, axes=([0, 1, 2], [0, 1, 2])
                    )
                    u = (gflat @ w[di, dj].T).reshape(n, h, wd, self.c_in)
                    gxp[:, di:di + h, dj:dj + wd] += u
            return np.ascontiguousarray(gxp[:, p:p + h, p:p + wd])
        x_shape, cols, (pt, pl, oh, ow) = cache
        n, h, wd, _ = x_shape
        gym = gy.reshape(-1, self.c_out)
        grads[f"{self.name}.W"] += (cols.T @ gym).reshape(w.shape)
        gcols = gym @ w.reshape(-1, self.c_out).T
        return kernels.col2im(gcols, n, h, wd, self.c_in, self.k, self.k, 2, pt, pl, oh, ow)


class ConvTranspose2d(Layer):
    """Stride-2 transposed convolution: spatial dims exactly double."""

    def __init__(self, name, c_in, c_out, k=3, bias=True):
        self.name, self.c_in, self.c_out, self.k, self.bias = name, c_in, c_out, k, bias

    def init_params(self, store, rng):
        fan_in = self.k * self.k * self.c_in
        store.add_param(f"{self.name}.W",
                        he_uniform(rng, (self.k, self.k, self.c_in, self.c_out),
                                   fan_in, store.dtype))
        if self.bias:
            store.add_param(f"{self.name}.b", np.zeros(self.c_out, dtype=store.dtype))

    def forward(self, store, x, mode, rng=None):
        if x.ndim != 4 or x.shape[3] != self.c_in:
            raise ShapeMismatch(f"{self.name}: input {x.shape}, want (n,h,w,{self.c_in})")
        w = store.params[f"{self.name}.W"]
        n, h, wd, _ = x.shape
        oh, ow = 2 * h, 2 * wd
        ypad = np.zeros((n, oh + 1, ow + 1, self.c_out), dtype=x.dtype)
        flat = x.reshape(-1, self.c_in)
        for di in range(self.k):
            for dj in range(self.k):
                t = (flat @ w[di, dj]).reshape(n, h, wd, self.c_out)
                ypad[:, di:di + oh:2, dj:dj + ow:2] += t
        y = np.ascontiguousarray(ypad[:, :oh, :ow])
        if self.bias:
            y += store.params[f"{self.name}.b"]
        return y, x

    def backward(self, store, cache, gy, grads):
        x = cache
        w = store.params[f"{self.name}.W"]
        n, h, wd, _ = x.shape
        oh, ow = 2 * h, 2 * wd
        if self.bias:
            grads[f"{self.name}.b"] += gy.sum(axis=(0, 1, 2))
        gyp = np.zeros((n, oh + 1, ow + 1, self.c_out), dtype=gy.dtype)
        gyp[:, :oh, :ow] = gy
        gx = np.zeros_like(x)
        for di in range(self.k):
            for dj in range(self.k):
                sl = np.ascontiguousarray(gyp[:, di:di + oh:2, dj:dj + ow:2])
                grads[f"{self.name}.W"][di, dj] += np.tensordot(
                    x, sl, axes=([0, 1, 2], [0, 1, 2])
                )
                gx += (sl.reshape(-1, self.c_out) @ w[di, dj].T).reshape(x.shape)
        return gx


class Conv1d(Layer):
    """Same-padding 1-d convolution over the lead-time axis of (n, t, c)."""

    def __init__(self, name, c_in, c_out, k=2):
        self.name, self.c_in, self.c_out, self.k = name, c_in, c_out, k

    def init_params(self, store, rng):
        fan_in = self.k * self.c_in
        store.add_param(f"{self.name}.W",
                        he_uniform(rng, (self.k, self.c_in, self.c_out), fan_in, store.dtype))
        store.add_param(f"{self.name}.b", np.zeros(self.c_out, dtype=store.dtype))

    def _pads(self, t):
        total = self.k - 1
        return total // 2, total - total // 2

    def forward(self, store, x, mode, rng=None):
        if x.ndim != 3 or x.shape[2] != self.c_in:
            raise ShapeMismatch(f"{self.name}: input {x.shape}, want (n,t,{self.c_in})")
        w = store.params[f"{self.name}.W"]
        n, t, _ = x.shape
        beg, end = self._pads(t)
        xp = np.pad(x, ((0, 0), (beg, end), (0, 0)))
        y = np.tile(store.params[f"{self.name}.b"], (n, t, 1)).astype(x.dtype)
        for d in range(self.k):
            y += (xp[:, d:d + t].reshape(-1, self.c_in) @ w[d]).reshape(n, t, self.c_out)
        return y, (x.shape, xp)

    def backward(self, store, cache, gy, grads):
        x_shape, xp = cache
        n, t, _ = x_shape
        beg, end = self._pads(t)
        w = store.params[f"{self.name}.W"]
        grads[f"{self.name}.b"] += gy.sum(axis=(0, 1))
        gxp = np.zeros_like(xp)
        gflat = gy.reshape(-1, self.c_out)
        for d in range(self.k):
            grads[f"{self.name}.W"][d] += np.tensordot(
                xp[:, d:d + t], gy, axes=([0, 1], [0, 1])
            )
            gxp[:, d:d + t] += (gflat @ w[d].T).reshape(n, t, self.c_in)
        return np.ascontiguousarray(gxp[:, beg:beg + t])


class BatchNorm(Layer):
    """Per-channel batch normalization with learned affine terms."""

    def __init__(self, name, c, momentum=0.9):
        self.name, self.c, self.momentum = name, c, momentum

    def init_params(self, store, rng):
        store.add_param(f"{self.name}.gamma", np.ones(self.c, dtype=store.dtype))
        store.add_param(f"{self.name}.beta", np.zeros(self.c, dtype=store.dtype))
        store.add_state(f"{self.name}.running_mean", np.zeros(self.c, dtype=store.dtype))
        store.add_state(f"{self.name}.running_var", np.ones(self.c, dtype=store.dtype))

    def _axes(self, x):
        if x.ndim == 2:
            return (0,)
        if x.ndim == 4:
            return (0, 1, 2)
        raise ShapeMismatch(f"{self.name}: unsupported input rank {x.ndim}")

    def forward(self, store, x, mode, rng=None):
        axes = self._axes(x)
        gamma = store.params[f"{self.name}.gamma"]
        beta = store.params[f"{self.name}.beta"]
        if mode == "train":
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            inv = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (x - mu) * inv
            rm = store.state[f"{self.name}.running_mean"]
            rv = store.state[f"{self.name}.running_var"]
            m = self.momentum
            store.state[f"{self.name}.running_mean"] = (m * rm + (1 - m) * mu).astype(rm.dtype)
            store.state[f"{self.name}.running_var"] = (m * rv + (1 - m) * var).astype(rv.dtype)
        else:
            mu = store.state[f"{self.name}.running_mean"]
            inv = 1.0 / np.sqrt(store.state[f"{self.name}.running_var"] + BN_EPS)
            xhat = (x - mu) * inv
        return gamma * xhat + beta, (xhat, inv, axes, mode, x.shape)

    def backward(self, store, cache, gy, grads):
        xhat, inv, axes, mode, x_shape = cache
        gamma = store.params[f"{self.name}.gamma"]
        grads[f"{self.name}.gamma"] += (gy * xhat).sum(axis=axes)
        grads[f"{self.name}.beta"] += gy.sum(axis=axes)
        ghat = gy * gamma
        if mode != "train":
            return ghat * inv
        m = np.prod([x_shape[a] for a in axes])
        return (inv / m) * (
            m * ghat - ghat.sum(axis=axes) - xhat * (ghat * xhat).sum(axis=axes)
        )


class ReLU(Layer):
    def forward(self, store, x, mode, rng=None):
        mask = x > 0
        return x * mask, mask

    def backward(self, store, cache, gy, grads):
        return gy * cache


class Sigmoid(Layer):
    def forward(self, store, x, mode, rng=None):
        y = 1.0 / (1.0 + np.exp(-x))
        return y, y

    def backward(self, store, cache, gy, grads):
        y = cache
        return gy * y * (1.0 - y)


class Dropout(Layer):
    """Inverted dropout; ``mc=True`` keeps it active in "mc" mode."""

    def __init__(self, rate, mc=False):
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate, self.mc = rate, mc

    def forward(self, store, x, mode, rng=None):
        active = self.rate > 0 and (mode == "train" or (mode == "mc" and self.mc))
        if not active:
            return x, None
        if rng is None:
            raise ValueError("dropout needs an rng in train/mc mode")
        mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        mask = mask.astype(x.dtype)
        return x * mask, mask

    def backward(self, store, cache, gy, grads):
        if cache is None:
            return gy
        return gy * cache


class GlobalMaxPool2d(Layer):
    """(n, h, w, c) -> (n, c); gradient flows to the first argmax on ties."""

    def forward(self, store, x, mode, rng=None):
        n, h, w, c = x.shape
        flat = x.reshape(n, h * w, c)
        am = flat.argmax(axis=1)
        y = np.take_along_axis(flat, am[:, None, :], axis=1)[:, 0, :]
        return y, (x.shape, am)

    def backward(self, store, cache, gy, grads):
        x_shape, am = cache
        n, h, w, c = x_shape
        gx = np.zeros((n, h * w, c), dtype=gy.dtype)
        np.put_along_axis(gx, am[:, None, :], gy[:, None, :], axis=1)
        return gx.reshape(x_shape)


class GlobalMaxPool1d(Layer):
    def forward(self, store, x, mode, rng=None):
        am = x.argmax(axis=1)
        y = np.take_along_axis(x, am[:, None, :], axis=1)[:, 0, :]
        return y, (x.shape, am)

    def backward(self, store, cache, gy, grads):
        x_shape, am = cache
        gx = np.zeros(x_shape, dtype=gy.dtype)
        np.put_along_axis(gx, am[:, None, :], gy[:, None, :], axis=1)
        return gx
