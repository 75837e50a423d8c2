"""LoRA and LoKrA adapters attached to conv/linear weights or to factorized cores.

An adapter sees the same input as the weight it augments (for a factorized
layer that is the down-projected signal entering the core) and adds its
output to that weight's output.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .layers import (
    Conv1d, FactorizedConv1d, FactorizedLinear, Layer, Linear,
    conv1d, conv1d_backward, fan_in_uniform, pointwise, pointwise_backward,
)


@dataclass(frozen=True)
class AdapterSpec:
    """``kind`` is ``"lora"`` or ``"lokra"``.

    ``style`` picks the LoRA conv form: ``"three"`` (down 1x1, r x r x K mid,
    up 1x1) or ``"flatten"`` (``B @ A`` on the ``C_out x C_in*K`` unfolding).
    ``target`` is ``"weight"`` (dense layers), ``"core"`` (factorized layers)
    or ``"auto"``.
    """

    kind: str = "lora"
    rank: int = 2
    alpha: float | None = None
    style: str = "three"
    target: str = "auto"
    blocks: tuple | None = None  # LoKrA (m_out, m_in) override

    def __post_init__(self):
        if self.kind not in ("lora", "lokra"):
            raise ValueError(f"unknown adapter kind {self.kind!r}")
        if self.style not in ("three", "flatten"):
            raise ValueError(f"unknown LoRA style {self.style!r}")
        if self.target not in ("auto", "weight", "core"):
            raise ValueError(f"unknown adapter target {self.target!r}")
        if self.kind == "lora" and self.rank < 1:
            raise ValueError("LoRA rank must be >= 1")

    @property
    def scale(self) -> float:
        return 1.0 if self.alpha is None else self.alpha / self.rank


def balanced_split(n: int) -> tuple[int, int]:
    """``(m, n // m)`` with ``m`` the largest divisor not above ``sqrt(n)``."""
    m = int(math.isqrt(n))
    while n % m:
        m -= 1
    return m, n // m


def weight_geometry(layer: Layer):
    """(kind, c_in, c_out, K, stride, padding) of the weight an adapter would augment."""
    if isinstance(layer, Conv1d):
        return "conv", layer.c_in, layer.c_out, layer.kernel, layer.stride, layer.padding
    if isinstance(layer, FactorizedConv1d):
        r_out, r_in = layer.ranks
        return "conv", r_in, r_out, layer.kernel, layer.stride, layer.padding
    if isinstance(layer, Linear):
        return "linear", layer.d_in, layer.d_out, None, 1, 0
    if isinstance(layer, FactorizedLinear):
        r_out, r_in = layer.ranks
        return "linear", r_in, r_out, None, 1, 0
    raise TypeError(f"cannot attach an adapter to {type(layer).__name__}")


class LoRAAdapter:
    kind = "lora"

    def __init__(self, geometry, rank: int, scale: float = 1.0, style: str = "three", rng=None):
        self.geom, self.c_in, self.c_out, self.kernel, self.stride, self.padding = geometry
        self.rank, self.scale = int(rank), float(scale)
        self.style = style if self.geom == "conv" else "two"
        rng = rng if rng is not None else np.random.default_rng(0)
        r = self.rank
        self.params: dict[str, np.ndarray] = {}
        if self.style == "three":
            self.params["down"] = fan_in_uniform(rng, (r, self.c_in), self.c_in)
            self.params["mid"] = fan_in_uniform(rng, (r, r, self.kernel), r * self.kernel)
        elif self.style == "flatten":
            self.params["down"] = fan_in_uniform(rng, (r, self.c_in, self.kernel), self.c_in * self.kernel)
        else:
            self.params["down"] = fan_in_uniform(rng, (r, self.c_in), self.c_in)
        self.params["up"] = np.zeros((self.c_out, r))

    def config(self) -> dict:
        return dict(kind=self.kind, geometry=[self.geom, self.c_in, self.c_out, self.kernel,
                                             self.stride, self.padding],
                    rank=self.rank, scale=self.scale, style=self.style)

    def delta(self) -> np.ndarray:
        p = self.params
        if self.style == "three":
            d = np.einsum("oa,abk,bc->ock", p["up"], p["mid"], p["down"])
        elif self.style == "flatten":
            d = np.einsum("oa,ack->ock", p["up"], p["down"])
        else:
            d = p["up"] @ p["down"]
        return self.scale * d

    def macs(self, in_len: int | None, out_len: int | None) -> int:
        r = self.rank
        if self.style == "two":
            return r * (self.c_in + self.c_out)
        if self.style == "three":
            return self.c_in * r * in_len + r * r * self.kernel * out_len + self.c_out * r * out_len
        return r * self.c_in * self.kernel * out_len + self.c_out * r * out_len

    def forward(self, x, ctx, name):
        p = self.params
        count = ctx is not None and ctx.counter is not None
        if self.style == "two":
            z = x @ p["down"].T
            out = self.scale * (z @ p["up"].T)
            if count:
                ctx.counter.add(f"{name}.adapter", self.macs(None, None))
            return out, (x, z, None)
        if self.style == "three":
            z = pointwise(x, p["down"])
            zc, win = conv1d(z, p["mid"], self.stride, self.padding)
        else:
            z = x
            zc, win = conv1d(x, p["down"], self.stride, self.padding)
        if count:
            ctx.counter.add(f"{name}.adapter", self.macs(x.shape[2], zc.shape[2]))
        return self.scale * pointwise(zc, p["up"]), (x, z, (zc, win))

    def backward(self, gy, cache):
        x, z, conv_cache = cache
        p = self.params
        gy = self.scale * gy
        if self.style == "two":
            g_up = gy.T @ z
            gz = gy @ p["up"]
            return gz @ p["down"], {"adapter.up": g_up, "adapter.down": gz.T @ x}
        zc, win = conv_cache
        gzc, g_up = pointwise_backward(gy, zc, p["up"])
        if self.style == "three":
            gz, g_mid = conv1d_backward(gzc, z.shape, p["mid"], win, self.stride, self.padding)
            gx, g_down = pointwise_backward(gz, x, p["down"])
            return gx, {"adapter.up": g_up, "adapter.mid": g_mid, "adapter.down": g_down}
        gx, g_down = conv1d_backward(gzc, x.shape, p["down"], win, self.stride, self.padding)
        return gx, {"adapter.up": g_up, "adapter.down": g_down}


class LoKrAAdapter:
    """Kronecker adapter: ``delta[:, :, k] = kron(w1, w2[:, :, k])``; ``w2`` starts at zero."""

    kind = "lokra"

    def __init__(self, geometry, scale: float = 1.0, blocks=None, rng=None):
        self.geom, self.c_in, self.c_out, self.kernel, self.stride, self.padding = geometry
        self.scale = float(scale)
        if blocks is None:
            m_out, n_out = balanced_split(self.c_out)
            m_in, n_in = balanced_split(self.c_in)
        else:
            m_out, m_in = (int(b) for b in blocks)
            if self.c_out % m_out or self.c_in % m_in:
                raise ValueError(f"blocks {blocks} do not divide ({self.c_out}, {self.c_in})")
            n_out, n_in = self.c_out // m_out, self.c_in // m_in
        self.blocks = (m_out, m_in, n_out, n_in)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {"w1": fan_in_uniform(rng, (m_out, m_in), m_in)}
        tail = (self.kernel,) if self.geom == "conv" else ()
        self.params["w2"] = np.zeros((n_out, n_in) + tail)

    def config(self) -> dict:
        m_out, m_in, _, _ = self.blocks
        return dict(kind=self.kind, geometry=[self.geom, self.c_in, self.c_out, self.kernel,
                                             self.stride, self.padding],
                    scale=self.scale, blocks=[m_out, m_in])

    def delta(self) -> np.ndarray:
        m_out, m_in, n_out, n_in = self.blocks
        w1, w2 = self.params["w1"], self.params["w2"]
        if self.geom == "conv":
            d = np.einsum("ac,bdk->abcdk", w1, w2).reshape(self.c_out, self.c_in, self.kernel)
        else:
            d = np.kron(w1, w2)
        return self.scale * d

    def macs(self, in_len, out_len) -> int:
        if self.geom == "conv":
            return self.c_out * self.c_in * self.kernel * out_len
        return self.c_out * self.c_in

    def _split_grad(self, gd):
        m_out, m_in, n_out, n_in = self.blocks
        w1, w2 = self.params["w1"], self.params["w2"]
        if self.geom == "conv":
            g = gd.reshape(m_out, n_out, m_in, n_in, self.kernel)
            return (self.scale * np.einsum("abcdk,bdk->ac", g, w2),
                    self.scale * np.einsum("abcdk,ac->bdk", g, w1))
        g = gd.reshape(m_out, n_out, m_in, n_in)
        return (self.scale * np.einsum("abcd,bd->ac", g, w2),
                self.scale * np.einsum("abcd,ac->bd", g, w1))

    def forward(self, x, ctx, name):
        d = self.delta()
        if self.geom == "conv":
            out, win = conv1d(x, d, self.stride, self.padding)
            if ctx is not None and ctx.counter is not None:
                ctx.counter.add(f"{name}.adapter", self.macs(x.shape[2], out.shape[2]))
            return out, (x, d, win)
        if ctx is not None and ctx.counter is not None:
            ctx.counter.add(f"{name}.adapter", self.macs(None, None))
        return x @ d.T, (x, d, None)

    def backward(self, gy, cache):
        x, d, win = cache
        if self.geom == "conv":
            gx, gd = conv1d_backward(gy, x.shape, d, win, self.stride, self.padding)
        else:
            gx, gd = gy @ d, gy.T @ x
        g1, g2 = self._split_grad(gd)
        return gx, {"adapter.w1": g1, "adapter.w2": g2}


ADAPTER_KINDS = {"lora": LoRAAdapter, "lokra": LoKrAAdapter}


def make_adapter(layer: Layer, spec: AdapterSpec, rng=None):
    geom = weight_geometry(layer)
    if spec.kind == "lora":
        return LoRAAdapter(geom, spec.rank, spec.scale, spec.style, rng)
    return LoKrAAdapter(geom, 1.0 if spec.alpha is None else spec.alpha, spec.blocks, rng)


def adapter_from_config(cfg: dict):
    geom = tuple(cfg["geometry"])
    if cfg["kind"] == "lora":
        style = "three" if cfg["style"] == "two" else cfg["style"]
        return LoRAAdapter(geom, cfg["rank"], cfg["scale"], style)
    if cfg["kind"] == "lokra":
        return LoKrAAdapter(geom, cfg["scale"], cfg["blocks"])
    raise ValueError(f"unknown adapter kind {cfg['kind']!r}")


def adapter_targets(model, spec: AdapterSpec) -> list[Layer]:
    dense = (Conv1d, Linear)
    fact = (FactorizedConv1d, FactorizedLinear)
    out = []
    for layer in model.backbone:
        if spec.target in ("auto", "weight") and isinstance(layer, dense):
            out.append(layer)
        elif spec.target in ("auto", "core") and isinstance(layer, fact):
            out.append(layer)
    return out


def attach_adapters(model, spec: AdapterSpec, layers=None, seed: int = 0):
    """Copy of ``model`` with an adapter on every targeted backbone weight.

    Base parameters are untouched; the new tensors are tagged ADAPTER.
    """
    model = model.copy()
    rng = np.random.default_rng(seed)
    if layers is None:
        targets = adapter_targets(model, spec)
    else:
        targets = [model.layer(n) for n in layers]
    if not targets:
        raise ValueError(f"no layer in the backbone accepts a {spec.target!r} adapter")
    for layer in targets:
        if spec.target == "core" and not isinstance(layer, (FactorizedConv1d, FactorizedLinear)):
            raise ValueError(f"{layer.name} has no core tensor")
        if spec.target == "weight" and isinstance(layer, (FactorizedConv1d, FactorizedLinear)):
            raise ValueError(f"{layer.name} is factorized; use target='core'")
        if layer.adapter is not None:
            raise ValueError(f"{layer.name} already carries an adapter")
        layer.adapter = make_adapter(layer, spec, rng)
    return model


def merge_adapters(model):
    """Fold every adapter delta into its base weight (or core) and drop the adapter."""
    model = model.copy()
    for layer in model.layers():
        a = layer.adapter
        if a is None:
            continue
        key = "core" if isinstance(layer, (FactorizedConv1d, FactorizedLinear)) else "weight"
        layer.params[key] = layer.params[key] + a.delta()
        layer.adapter = None
    return model


def adapter_param_count(spec: AdapterSpec, c_in: int, c_out: int, kernel: int | None) -> int:
    """Closed-form size of one adapter on a ``(c_out, c_in[, K])`` weight."""
    if spec.kind == "lora":
        r = spec.rank
        if kernel is None:
            return r * (c_in + c_out)
        if spec.style == "three":
            return r * (c_in + c_out) + r * r * kernel
        return r * (c_in * kernel + c_out)
    if spec.blocks is None:
        m_out, n_out = balanced_split(c_out)
        m_in, n_in = balanced_split(c_in)
    else:
        m_out, m_in = spec.blocks
        n_out, n_in = c_out // m_out, c_in // m_in
    return m_out * m_in + n_out * n_in * (kernel or 1)


def count_adapter_params(spec: AdapterSpec, dims) -> int:
    """Total over ``dims``, a list of ``(c_in, c_out, K or None)`` weight geometries."""
    return sum(adapter_param_count(spec, c_in, c_out, k) for c_in, c_out, k in dims)


def adapter_dims(model, spec: AdapterSpec) -> list[tuple]:
    return [tuple(weight_geometry(l)[1:4]) for l in adapter_targets(model, spec)]
