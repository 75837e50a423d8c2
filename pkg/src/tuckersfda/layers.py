"""1D-CNN layers with explicit forward caches and hand-written backward passes.

Every layer owns its parameters in ``self.params`` (local name -> array) and a
matching ``self.tags`` entry naming the subspace each tensor belongs to.
Activations are ``(batch, channels, length)`` until :class:`Flatten`.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import TuckerFactors, reconstruct

# subspace tags
CORE = "CORE"
FACTOR = "FACTOR"
BN = "BN"
CLASSIFIER = "CLASSIFIER"
ADAPTER = "ADAPTER"
DENSE = "DENSE"
IMPUTER = "IMPUTER"

TAGS = (CORE, FACTOR, BN, CLASSIFIER, ADAPTER, DENSE, IMPUTER)


class MacCounter:
    """Accumulates multiply-accumulates observed during an instrumented forward pass.

    Counts are per sample: layers divide the operand sizes they actually
    touched by the batch size.
    """

    def __init__(self):
        self.by_layer: dict[str, int] = {}

    def add(self, name: str, n: int) -> None:
        self.by_layer[name] = self.by_layer.get(name, 0) + int(n)

    @property
    def total(self) -> int:
        return sum(self.by_layer.values())


class Context:
    """Per-forward state: dropout RNG and an optional MAC counter."""

    def __init__(self, rng: np.random.Generator | None = None, counter: MacCounter | None = None):
        self.rng = rng
        self.counter = counter


def conv_out_len(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    # Kaiming-uniform with a=sqrt(5), the torch default for conv/linear weights
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


# -- raw convolution kernels -------------------------------------------------

def conv1d(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0):
    """Cross-correlation of ``x`` (N, C_in, L) with ``w`` (C_out, C_in, K).

    Returns the output and the padded window view needed by the backward pass.
    """
    n, c_in, length = x.shape
    c_out, c_in_w, k = w.shape
    if c_in != c_in_w:
        raise ValueError(f"input has {c_in} channels, kernel expects {c_in_w}")
    if conv_out_len(length, k, stride, padding) < 1:
        raise ValueError("input too short for kernel")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding))) if padding else x
    win = sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]  # N, C_in, L', K
    out = np.einsum("nclk,ock->nol", win, w, optimize=True)
    return out, win


def conv1d_backward(gy: np.ndarray, x_shape, w: np.ndarray, win: np.ndarray,
                    stride: int, padding: int):
    n, c_in, length = x_shape
    k = w.shape[2]
    gw = np.einsum("nol,nclk->ock", gy, win, optimize=True)
    gcols = np.einsum("nol,ock->nclk", gy, w, optimize=True)  # N, C_in, L', K
    l_out = gy.shape[2]
    gxp = np.zeros((n, c_in, length + 2 * padding))
    span = stride * (l_out - 1) + 1
    for j in range(k):
        gxp[:, :, j:j + span:stride] += gcols[:, :, :, j]
    gx = gxp[:, :, padding:padding + length] if padding else gxp
    return gx, gw


def pointwise(x: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Unit-window convolution: ``m`` (C_out, C_in) applied at every time step."""
    return np.einsum("oc,ncl->nol", m, x, optimize=True)


def pointwise_backward(gy: np.ndarray, x: np.ndarray, m: np.ndarray):
    gm = np.einsum("nol,ncl->oc", gy, x, optimize=True)
    gx = np.einsum("oc,nol->ncl", m, gy, optimize=True)
    return gx, gm


def factorized_conv1d(x, core, v1, v2, bias=None, stride=1, padding=0):
    """Down-projection, core convolution and up-projection (``v1``/``v2`` may be None)."""
    z = pointwise(x, v2.T) if v2 is not None else x
    zc, win = conv1d(z, core, stride, padding)
    out = pointwise(zc, v1) if v1 is not None else zc
    if bias is not None:
        out = out + bias[None, :, None]
    return out, (z, zc, win)


class Layer:
    kind = "Layer"

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.tags: dict[str, str] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.adapter = None

    # shapes are (C, L) for sequence activations and (D,) after flattening
    def out_shape(self, in_shape):
        return in_shape

    def macs(self, in_shape) -> int:
        return 0

    def forward(self, x, train: bool, ctx: Context):
        return x, None

    def backward(self, gy, cache):
        return gy, {}

    def config(self) -> dict:
        return {}

    def _count(self, ctx: Context, n_total: int, batch: int) -> None:
        if ctx is not None and ctx.counter is not None:
            ctx.counter.add(self.name, n_total // batch)

    def __repr__(self):
        cfg = ", ".join(f"{k}={v}" for k, v in self.config().items())
        return f"{self.kind}({self.name}: {cfg})"


class Conv1d(Layer):
    kind = "Conv1d"

    def __init__(self, name, c_in, c_out, kernel, stride=1, padding=None, bias=True, rng=None):
        super().__init__(name)
        self.c_in, self.c_out, self.kernel, self.stride = int(c_in), int(c_out), int(kernel), int(stride)
        self.padding = self.kernel // 2 if padding is None else int(padding)
        self.has_bias = bool(bias)
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = self.c_in * self.kernel
        self.params["weight"] = fan_in_uniform(rng, (self.c_out, self.c_in, self.kernel), fan_in)
        self.tags["weight"] = DENSE
        if self.has_bias:
            self.params["bias"] = rng.uniform(-1, 1, self.c_out) / math.sqrt(fan_in)
            self.tags["bias"] = DENSE

    def config(self):
        return dict(c_in=self.c_in, c_out=self.c_out, kernel=self.kernel, stride=self.stride,
                    padding=self.padding, bias=self.has_bias)

    def out_shape(self, in_shape):
        c, length = in_shape
        if c != self.c_in:
            raise ValueError(f"{self.name}: expected {self.c_in} channels, got {c}")
        return (self.c_out, conv_out_len(length, self.kernel, self.stride, self.padding))

    def macs(self, in_shape):
        l_out = self.out_shape(in_shape)[1]
        return self.c_out * self.c_in * self.kernel * l_out

    def weight(self) -> np.ndarray:
        return self.params["weight"]

    def forward(self, x, train, ctx):
        w = self.params["weight"]
        out, win = conv1d(x, w, self.stride, self.padding)
        self._count(ctx, win.shape[0] * win.shape[2] * w.size, x.shape[0])
        if self.has_bias:
            out = out + self.params["bias"][None, :, None]
        a_cache = None
        if self.adapter is not None:
            extra, a_cache = self.adapter.forward(x, ctx, self.name)
            out = out + extra
        return out, (x.shape, win, a_cache)

    def backward(self, gy, cache):
        x_shape, win, a_cache = cache
        gx, gw = conv1d_backward(gy, x_shape, self.params["weight"], win, self.stride, self.padding)
        grads = {"weight": gw}
        if self.has_bias:
            grads["bias"] = gy.sum(axis=(0, 2))
        if self.adapter is not None:
            gxa, ag = self.adapter.backward(gy, a_cache)
            gx = gx + gxa
            grads.update(ag)
        return gx, grads


class FactorizedConv1d(Layer):
    """Convolution re-parameterized as ``core x_1 v1 x_2 v2``.

    ``v2`` is absent when the input-channel mode is left undecomposed.
    """

    kind = "FactorizedConv1d"

    def __init__(self, name, core, v1, v2=None, bias=None, stride=1, padding=0):
        super().__init__(name)
        self.stride, self.padding = int(stride), int(padding)
        self.params["core"] = np.array(core, dtype=np.float64)
        self.tags["core"] = CORE
        self.params["v1"] = np.array(v1, dtype=np.float64)
        self.tags["v1"] = FACTOR
        if v2 is not None:
            self.params["v2"] = np.array(v2, dtype=np.float64)
            self.tags["v2"] = FACTOR
        if bias is not None:
            self.params["bias"] = np.array(bias, dtype=np.float64)
            self.tags["bias"] = FACTOR
        r_out, r_in, k = self.params["core"].shape
        if self.params["v1"].shape[1] != r_out:
            raise ValueError("v1 columns must equal the core's output rank")
        if v2 is not None and self.params["v2"].shape[1] != r_in:
            raise ValueError("v2 columns must equal the core's input rank")

    @property
    def c_out(self):
        return self.params["v1"].shape[0]

    @property
    def c_in(self):
        return self.params["v2"].shape[0] if "v2" in self.params else self.params["core"].shape[1]

    @property
    def kernel(self):
        return self.params["core"].shape[2]

    @property
    def ranks(self):
        r_out, r_in, _ = self.params["core"].shape
        return r_out, r_in

    @property
    def has_bias(self):
        return "bias" in self.params

    def config(self):
        r_out, r_in = self.ranks
        return dict(c_in=self.c_in, c_out=self.c_out, kernel=self.kernel, stride=self.stride,
                    padding=self.padding, r_in=r_in, r_out=r_out, bias=self.has_bias,
                    input_mode="v2" in self.params)

    def factors(self) -> TuckerFactors:
        return TuckerFactors(self.params["core"], [self.params["v1"], self.params.get("v2"), None])

    def weight(self) -> np.ndarray:
        return reconstruct(self.factors())

    def out_shape(self, in_shape):
        c, length = in_shape
        if c != self.c_in:
            raise ValueError(f"{self.name}: expected {self.c_in} channels, got {c}")
        return (self.c_out, conv_out_len(length, self.kernel, self.stride, self.padding))

    def macs(self, in_shape):
        length = in_shape[1]
        l_out = self.out_shape(in_shape)[1]
        r_out, r_in = self.ranks
        down = self.c_in * r_in * length if "v2" in self.params else 0
        return down + r_out * r_in * self.kernel * l_out + self.c_out * r_out * l_out

    def forward(self, x, train, ctx):
        p = self.params
        n = x.shape[0]
        v2 = p.get("v2")
        z = pointwise(x, v2.T) if v2 is not None else x
        if v2 is not None:
            self._count(ctx, v2.size * x.shape[0] * x.shape[2], n)
        zc, win = conv1d(z, p["core"], self.stride, self.padding)
        self._count(ctx, win.shape[0] * win.shape[2] * p["core"].size, n)
        a_cache = None
        if self.adapter is not None:
            extra, a_cache = self.adapter.forward(z, ctx, self.name)
            zc = zc + extra
        out = pointwise(zc, p["v1"])
        self._count(ctx, p["v1"].size * zc.shape[0] * zc.shape[2], n)
        if "bias" in p:
            out = out + p["bias"][None, :, None]
        return out, (x, z, zc, win, a_cache)

    def backward(self, gy, cache):
        x, z, zc, win, a_cache = cache
        p = self.params
        grads = {}
        if "bias" in p:
            grads["bias"] = gy.sum(axis=(0, 2))
        gzc, grads["v1"] = pointwise_backward(gy, zc, p["v1"])
        gz, grads["core"] = conv1d_backward(gzc, z.shape, p["core"], win, self.stride, self.padding)
        if self.adapter is not None:
            gza, ag = self.adapter.backward(gzc, a_cache)
            gz = gz + gza
            grads.update(ag)
        if "v2" in p:
            gx, gv2t = pointwise_backward(gz, x, p["v2"].T)
            grads["v2"] = gv2t.T
        else:
            gx = gz
        return gx, grads


class BatchNorm1d(Layer):
    kind = "BatchNorm1d"

    def __init__(self, name, channels, eps=1e-5, momentum=0.1):
        super().__init__(name)
        self.channels, self.eps, self.momentum = int(channels), float(eps), float(momentum)
        self.params["weight"] = np.ones(self.channels)
        self.params["bias"] = np.zeros(self.channels)
        self.tags["weight"] = BN
        self.tags["bias"] = BN
        self.buffers["running_mean"] = np.zeros(self.channels)
        self.buffers["running_var"] = np.ones(self.channels)

    def config(self):
        return dict(channels=self.channels, eps=self.eps, momentum=self.momentum)

    def _axes(self, x):
        return (0, 2) if x.ndim == 3 else (0,)

    def _bc(self, v, x):
        return v[None, :, None] if x.ndim == 3 else v[None, :]

    def forward(self, x, train, ctx):
        axes = self._axes(x)
        gamma, beta = self.params["weight"], self.params["bias"]
        if train:
            m = x.size // self.channels
            if m < 2:
                raise ValueError(f"{self.name}: batch statistics need more than one value per channel")
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.buffers["running_mean"] = (1 - self.momentum) * self.buffers["running_mean"] + self.momentum * mu
            self.buffers["running_var"] = ((1 - self.momentum) * self.buffers["running_var"]
                                           + self.momentum * var * m / (m - 1))
        else:
            mu, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._bc(mu, x)) * self._bc(inv, x)
        return xhat * self._bc(gamma, x) + self._bc(beta, x), (xhat, inv, train)

    def backward(self, gy, cache):
        xhat, inv, train = cache
        axes = self._axes(gy)
        gamma = self.params["weight"]
        grads = {"weight": (gy * xhat).sum(axis=axes), "bias": gy.sum(axis=axes)}
        gxhat = gy * self._bc(gamma, gy)
        if not train:
            return gxhat * self._bc(inv, gy), grads
        m = gy.size // self.channels
        mean_g = gxhat.mean(axis=axes)
        mean_gx = (gxhat * xhat).mean(axis=axes)
        gx = (gxhat - self._bc(mean_g, gy) - xhat * self._bc(mean_gx, gy)) * self._bc(inv, gy)
        return gx, grads


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, x, train, ctx):
        mask = x > 0
        return x * mask, mask

    def backward(self, gy, cache):
        return gy * cache, {}


class MaxPool1d(Layer):
    kind = "MaxPool1d"

    def __init__(self, name, kernel=2, stride=None, padding=0):
        super().__init__(name)
        self.kernel = int(kernel)
        self.stride = self.kernel if stride is None else int(stride)
        self.padding = int(padding)

    def config(self):
        return dict(kernel=self.kernel, stride=self.stride, padding=self.padding)

    def out_shape(self, in_shape):
        c, length = in_shape
        return (c, conv_out_len(length, self.kernel, self.stride, self.padding))

    def forward(self, x, train, ctx):
        p = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p)), constant_values=-np.inf) if p else x
        win = sliding_window_view(xp, self.kernel, axis=2)[:, :, ::self.stride, :]
        arg = np.argmax(win, axis=3)  # first maximum wins ties
        out = np.take_along_axis(win, arg[..., None], axis=3)[..., 0]
        return out, (x.shape, arg)

    def backward(self, gy, cache):
        (n, c, length), arg = cache
        p = self.padding
        gxp = np.zeros((n, c, length + 2 * p))
        l_out = gy.shape[2]
        pos = arg + (np.arange(l_out) * self.stride)[None, None, :]
        np.add.at(gxp, (np.arange(n)[:, None, None], np.arange(c)[None, :, None], pos), gy)
        return (gxp[:, :, p:p + length] if p else gxp), {}


class AdaptiveAvgPool1d(Layer):
    kind = "AdaptiveAvgPool1d"

    def __init__(self, name, output_size=1):
        super().__init__(name)
        self.output_size = int(output_size)

    def config(self):
        return dict(output_size=self.output_size)

    def out_shape(self, in_shape):
        return (in_shape[0], self.output_size)

    def _bounds(self, length):
        o = self.output_size
        return [(i * length // o, -(-(i + 1) * length // o)) for i in range(o)]

    def forward(self, x, train, ctx):
        bounds = self._bounds(x.shape[2])
        out = np.stack([x[:, :, a:b].mean(axis=2) for a, b in bounds], axis=2)
        return out, x.shape

    def backward(self, gy, cache):
        n, c, length = cache
        gx = np.zeros(cache)
        for i, (a, b) in enumerate(self._bounds(length)):
            gx[:, :, a:b] += gy[:, :, i:i + 1] / (b - a)
        return gx, {}


class Flatten(Layer):
    kind = "Flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train, ctx):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, gy, cache):
        return gy.reshape(cache), {}


class Dropout(Layer):
    kind = "Dropout"

    def __init__(self, name, rate=0.0):
        super().__init__(name)
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = float(rate)

    def config(self):
        return dict(rate=self.rate)

    def forward(self, x, train, ctx):
        if not train or self.rate == 0.0:
            return x, None
        if ctx is None or ctx.rng is None:
            raise ValueError("train-mode dropout needs a seeded generator")
        keep = (ctx.rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * keep, keep

    def backward(self, gy, cache):
        return (gy if cache is None else gy * cache), {}


class Linear(Layer):
    kind = "Linear"

    def __init__(self, name, d_in, d_out, bias=True, rng=None, tag=DENSE):
        super().__init__(name)
        self.d_in, self.d_out, self.has_bias = int(d_in), int(d_out), bool(bias)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = fan_in_uniform(rng, (self.d_out, self.d_in), self.d_in)
        self.tags["weight"] = tag
        if self.has_bias:
            self.params["bias"] = rng.uniform(-1, 1, self.d_out) / math.sqrt(self.d_in)
            self.tags["bias"] = tag

    def config(self):
        return dict(d_in=self.d_in, d_out=self.d_out, bias=self.has_bias, tag=self.tags["weight"])

    def out_shape(self, in_shape):
        if in_shape != (self.d_in,):
            raise ValueError(f"{self.name}: expected input ({self.d_in},), got {in_shape}")
        return (self.d_out,)

    def macs(self, in_shape):
        return self.d_in * self.d_out

    def weight(self):
        return self.params["weight"]

    def forward(self, x, train, ctx):
        w = self.params["weight"]
        self._count(ctx, x.shape[0] * w.size, x.shape[0])
        out = x @ w.T
        if self.has_bias:
            out = out + self.params["bias"]
        a_cache = None
        if self.adapter is not None:
            extra, a_cache = self.adapter.forward(x, ctx, self.name)
            out = out + extra
        return out, (x, a_cache)

    def backward(self, gy, cache):
        x, a_cache = cache
        grads = {"weight": gy.T @ x}
        if self.has_bias:
            grads["bias"] = gy.sum(axis=0)
        gx = gy @ self.params["weight"]
        if self.adapter is not None:
            gxa, ag = self.adapter.backward(gy, a_cache)
            gx = gx + gxa
            grads.update(ag)
        return gx, grads


class FactorizedLinear(Layer):
    """Dense layer with weight ``u_out @ core @ u_in.T`` (shape ``(d_out, d_in)``)."""

    kind = "FactorizedLinear"

    def __init__(self, name, core, u_out, u_in, bias=None):
        super().__init__(name)
        self.params["core"] = np.array(core, dtype=np.float64)
        self.tags["core"] = CORE
        self.params["u_out"] = np.array(u_out, dtype=np.float64)
        self.tags["u_out"] = FACTOR
        self.params["u_in"] = np.array(u_in, dtype=np.float64)
        self.tags["u_in"] = FACTOR
        if bias is not None:
            self.params["bias"] = np.array(bias, dtype=np.float64)
            self.tags["bias"] = FACTOR

    @property
    def d_out(self):
        return self.params["u_out"].shape[0]

    @property
    def d_in(self):
        return self.params["u_in"].shape[0]

    @property
    def ranks(self):
        return self.params["core"].shape

    @property
    def has_bias(self):
        return "bias" in self.params

    def config(self):
        r_out, r_in = self.ranks
        return dict(d_in=self.d_in, d_out=self.d_out, r_in=r_in, r_out=r_out, bias=self.has_bias)

    def factors(self) -> TuckerFactors:
        return TuckerFactors(self.params["core"], [self.params["u_out"], self.params["u_in"]])

    def weight(self):
        return reconstruct(self.factors())

    def out_shape(self, in_shape):
        if in_shape != (self.d_in,):
            raise ValueError(f"{self.name}: expected input ({self.d_in},), got {in_shape}")
        return (self.d_out,)

    def macs(self, in_shape):
        r_out, r_in = self.ranks
        return self.d_in * r_in + r_out * r_in + r_out * self.d_out

    def forward(self, x, train, ctx):
        p = self.params
        n = x.shape[0]
        z = x @ p["u_in"]
        self._count(ctx, n * p["u_in"].size, n)
        zc = z @ p["core"].T
        self._count(ctx, n * p["core"].size, n)
        a_cache = None
        if self.adapter is not None:
            extra, a_cache = self.adapter.forward(z, ctx, self.name)
            zc = zc + extra
        out = zc @ p["u_out"].T
        self._count(ctx, n * p["u_out"].size, n)
        if "bias" in p:
            out = out + p["bias"]
        return out, (x, z, zc, a_cache)

    def backward(self, gy, cache):
        x, z, zc, a_cache = cache
        p = self.params
        grads = {}
        if "bias" in p:
            grads["bias"] = gy.sum(axis=0)
        grads["u_out"] = gy.T @ zc
        gzc = gy @ p["u_out"]
        grads["core"] = gzc.T @ z
        gz = gzc @ p["core"]
        if self.adapter is not None:
            gza, ag = self.adapter.backward(gzc, a_cache)
            gz = gz + gza
            grads.update(ag)
        grads["u_in"] = x.T @ gz
        return gz @ p["u_in"].T, grads


LAYER_KINDS = {cls.kind: cls for cls in (
    Conv1d, FactorizedConv1d, BatchNorm1d, ReLU, MaxPool1d, AdaptiveAvgPool1d,
    Flatten, Dropout, Linear, FactorizedLinear)}
