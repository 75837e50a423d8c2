"""Model graph (backbone h, classifier g, optional imputer j), optimizers and subspace masks."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .layers import (
    ADAPTER, BN, CLASSIFIER, CORE, DENSE, FACTOR, IMPUTER, TAGS,
    AdaptiveAvgPool1d, BatchNorm1d, Context, Conv1d, Dropout, Flatten, Layer,
    Linear, MacCounter, MaxPool1d, ReLU,
)

SECTIONS = ("backbone", "classifier", "imputer")


@dataclass
class BackboneConfig:
    """Three conv blocks (conv-BN-ReLU-MaxPool) followed by adaptive average pooling.

    Conv padding is ``K // 2``; pooling defaults to ``MaxPool1d(2, 2, padding=1)``.
    """

    name: str
    input_channels: int
    seq_len: int
    n_classes: int
    mid_channels: int = 32
    final_channels: int = 128
    kernel_size: int = 25
    stride: int = 1
    inner_kernel: int = 8
    pool: tuple = (2, 2, 1)
    features_len: int = 1
    dropout: float = 0.0
    bias: bool = False
    channels: tuple | None = None

    @property
    def block_channels(self) -> tuple:
        if self.channels is not None:
            return tuple(self.channels)
        return (self.mid_channels, self.mid_channels * 2, self.final_channels)

    @property
    def feature_dim(self) -> int:
        return self.block_channels[-1] * self.features_len


class ModelGraph:
    """Ordered layers split into backbone, classifier and imputer sections.

    Parameters are addressed as ``"<layer>.<local>"``; adapter tensors as
    ``"<layer>.adapter.<local>"``.
    """

    def __init__(self, backbone, classifier, input_shape, n_classes, imputer=None, meta=None):
        self.sections: dict[str, list[Layer]] = {
            "backbone": list(backbone), "classifier": list(classifier),
            "imputer": list(imputer) if imputer else []}
        self.input_shape = tuple(int(s) for s in input_shape)
        self.n_classes = int(n_classes)
        self.meta = dict(meta or {})
        names = [l.name for l in self.layers()]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        self.check_shapes()

    @property
    def backbone(self):
        return self.sections["backbone"]

    @property
    def classifier(self):
        return self.sections["classifier"]

    @property
    def imputer(self):
        return self.sections["imputer"]

    def layers(self, section: str | None = None) -> list[Layer]:
        if section is not None:
            return self.sections[section]
        return [l for s in SECTIONS for l in self.sections[s]]

    def layer(self, name: str) -> Layer:
        for l in self.layers():
            if l.name == name:
                return l
        raise KeyError(name)

    def section_of(self, layer_name: str) -> str:
        for s in SECTIONS:
            if any(l.name == layer_name for l in self.sections[s]):
                return s
        raise KeyError(layer_name)

    def check_shapes(self) -> tuple:
        shape = self.input_shape
        for l in self.backbone:
            shape = l.out_shape(shape)
        self.feature_shape = shape
        out = shape
        for l in self.classifier:
            out = l.out_shape(out)
        if out != (self.n_classes,):
            raise ValueError(f"classifier emits {out}, expected ({self.n_classes},)")
        if self.imputer:
            imp = shape
            for l in self.imputer:
                imp = l.out_shape(imp)
            if imp != shape:
                raise ValueError("imputer must map features back to the feature shape")
        return shape

    @property
    def feature_dim(self) -> int:
        return int(np.prod(self.feature_shape))

    # -- parameter registry -------------------------------------------------
    def _entries(self):
        for l in self.layers():
            for k in l.params:
                yield f"{l.name}.{k}", l, l.params, k, l.tags[k]
            if l.adapter is not None:
                for k in l.adapter.params:
                    yield f"{l.name}.adapter.{k}", l, l.adapter.params, k, ADAPTER

    def params(self) -> dict[str, np.ndarray]:
        return {name: store[k] for name, _, store, k, _ in self._entries()}

    def tags(self) -> dict[str, str]:
        return {name: tag for name, _, _, _, tag in self._entries()}

    def param_layer(self) -> dict[str, str]:
        return {name: l.name for name, l, _, _, _ in self._entries()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{l.name}.{k}": v for l in self.layers() for k, v in l.buffers.items()}

    def set_param(self, name: str, value: np.ndarray) -> None:
        for pname, _, store, k, _ in self._entries():
            if pname == name:
                value = np.asarray(value, dtype=np.float64)
                if value.shape != store[k].shape:
                    raise ValueError(f"{name}: shape {value.shape} != {store[k].shape}")
                store[k] = value.copy()
                return
        raise KeyError(name)

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        lname, k = name.rsplit(".", 1)
        self.layer(lname).buffers[k] = np.asarray(value, dtype=np.float64).copy()

    def state(self) -> dict[str, np.ndarray]:
        """Snapshot of every parameter and buffer (copies)."""
        out = {k: v.copy() for k, v in self.params().items()}
        out.update({k: v.copy() for k, v in self.buffers().items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.params()
        for k, v in state.items():
            if k in params:
                self.set_param(k, v)
            else:
                self.set_buffer(k, v)

    def num_params(self, tags=None) -> int:
        tg = self.tags()
        return int(sum(v.size for k, v in self.params().items() if tags is None or tg[k] in tags))

    def copy(self) -> "ModelGraph":
        return copy.deepcopy(self)

    # -- forward / backward -------------------------------------------------
    def _run(self, layers, x, train, ctx):
        caches = []
        for l in layers:
            x, c = l.forward(x, train, ctx)
            caches.append(c)
        return x, caches

    def forward(self, x, train: bool = False, rng=None, counter: MacCounter | None = None):
        """Returns ``(logits, features, cache)``; eval mode uses BN running stats and no dropout."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[1:] != self.input_shape:
            raise ValueError(f"batch of shape {x.shape} does not match input {self.input_shape}")
        ctx = Context(rng, counter)
        feats, bcache = self._run(self.backbone, x, train, ctx)
        logits, ccache = self._run(self.classifier, feats, train, ctx)
        if not (np.all(np.isfinite(logits)) and np.all(np.isfinite(feats))):
            raise FloatingPointError("non-finite activation in forward pass")
        return logits, feats, {"backbone": bcache, "classifier": ccache}

    def _back(self, layers, caches, g, grads):
        for l, c in zip(reversed(layers), reversed(caches)):
            g, lg = l.backward(g, c)
            for k, v in lg.items():
                grads[f"{l.name}.{k}"] = grads.get(f"{l.name}.{k}", 0) + v
        return g

    def backward(self, cache, grad_logits=None, grad_features=None) -> dict[str, np.ndarray]:
        """Gradients for every backbone/classifier parameter (zeros where unused)."""
        if cache is None or "backbone" not in cache or "classifier" not in cache:
            raise ValueError("backward needs the cache of a matching forward call")
        grads: dict[str, np.ndarray] = {}
        g = None
        if grad_logits is not None:
            g = self._back(self.classifier, cache["classifier"], grad_logits, grads)
        if grad_features is not None:
            g = grad_features if g is None else g + grad_features
        if g is not None:
            self._back(self.backbone, cache["backbone"], g, grads)
        params = self.params()
        tags = self.tags()
        for name, p in params.items():
            if name not in grads and tags[name] != IMPUTER:
                grads[name] = np.zeros_like(p)
        return grads

    def impute(self, features, train: bool = False):
        if not self.imputer:
            raise ValueError("model has no imputer attached")
        return self._run(self.imputer, features, train, Context())

    def impute_backward(self, cache, g):
        grads: dict[str, np.ndarray] = {}
        gf = self._back(self.imputer, cache, g, grads)
        return gf, grads

    def predict(self, x, batch_size: int = 256) -> np.ndarray:
        out = [self.forward(x[i:i + batch_size])[0] for i in range(0, len(x), batch_size)]
        return np.concatenate(out).argmax(axis=1)

    def embed(self, x, batch_size: int = 256):
        logits, feats = [], []
        for i in range(0, len(x), batch_size):
            lo, fe, _ = self.forward(x[i:i + batch_size])
            logits.append(lo)
            feats.append(fe)
        return np.concatenate(logits), np.concatenate(feats)

    def __repr__(self):
        lines = [f"ModelGraph(input={self.input_shape}, classes={self.n_classes})"]
        for s in SECTIONS:
            for l in self.sections[s]:
                lines.append(f"  [{s}] {l!r}")
        return "\n".join(lines)


def build_model(cfg: BackboneConfig, seed: int = 0, imputer: bool = False) -> ModelGraph:
    """Seeded construction of the baseline (undecomposed) network."""
    rng = np.random.default_rng(seed)
    kernels = (cfg.kernel_size, cfg.inner_kernel, cfg.inner_kernel)
    strides = (cfg.stride, 1, 1)
    c_prev = cfg.input_channels
    layers: list[Layer] = []
    pk, ps, pp = cfg.pool
    for i, (c, k, s) in enumerate(zip(cfg.block_channels, kernels, strides), start=1):
        layers += [
            Conv1d(f"block{i}.conv", c_prev, c, k, stride=s, padding=k // 2, bias=cfg.bias, rng=rng),
            BatchNorm1d(f"block{i}.bn", c),
            ReLU(f"block{i}.relu"),
            MaxPool1d(f"block{i}.pool", pk, ps, pp),
        ]
        if i == 1 and cfg.dropout > 0:
            layers.append(Dropout(f"block{i}.drop", cfg.dropout))
        c_prev = c
    layers += [AdaptiveAvgPool1d("avgpool", cfg.features_len), Flatten("flatten")]
    head = [Linear("classifier.fc", cfg.feature_dim, cfg.n_classes, rng=rng, tag=CLASSIFIER)]
    imp = None
    if imputer:
        d = cfg.feature_dim
        imp = [Linear("imputer.fc1", d, d, rng=rng, tag=IMPUTER), ReLU("imputer.relu"),
               Linear("imputer.fc2", d, d, rng=rng, tag=IMPUTER)]
    return ModelGraph(layers, head, (cfg.input_channels, cfg.seq_len), cfg.n_classes,
                      imputer=imp, meta={"config": cfg.name, "seed": seed})


# -- subspace masks -----------------------------------------------------------

ALL_BACKBONE = "ALL_BACKBONE"


@dataclass(frozen=True)
class SubspaceMask:
    """Set of enabled tags; ``ALL_BACKBONE`` expands to every backbone tag."""

    tags: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "tags", frozenset(self.tags))
        unknown = self.tags - set(TAGS) - {ALL_BACKBONE}
        if unknown:
            raise ValueError(f"unknown subspace tags: {sorted(unknown)}")

    def expanded(self) -> frozenset:
        t = set(self.tags)
        if ALL_BACKBONE in t:
            t.discard(ALL_BACKBONE)
            t |= {CORE, FACTOR, BN, DENSE}
        return frozenset(t)

    def names(self, model: ModelGraph) -> list[str]:
        enabled = self.expanded()
        return [n for n, t in model.tags().items() if t in enabled]


MASK_PRESETS = {
    "core": SubspaceMask({CORE}),
    "factors": SubspaceMask({FACTOR}),
    "both": SubspaceMask({CORE, FACTOR}),
    "bn": SubspaceMask({BN}),
    "full": SubspaceMask({ALL_BACKBONE}),
    "adapter": SubspaceMask({ADAPTER}),
    "none": SubspaceMask(),
}


# -- optimizers ---------------------------------------------------------------

class Adam:
    """Adam with per-parameter moments; only names passed as ``enabled`` move.

    ``step`` returns the applied update of every changed tensor so callers can
    audit step sizes.
    """

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.betas, self.eps = float(lr), tuple(betas), float(eps)
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, model: ModelGraph, grads: dict, enabled) -> dict[str, np.ndarray]:
        params = model.params()
        enabled = list(enabled)
        for name in enabled:
            if name not in params:
                raise KeyError(f"unknown parameter {name!r}")
        self.t += 1
        b1, b2 = self.betas
        updates = {}
        for name in enabled:
            g = grads.get(name)
            if g is None:
                continue
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            upd = self.lr * mhat / (np.sqrt(vhat) + self.eps)
            params[name] -= upd
            updates[name] = upd
        return updates


class SGD:
    """Plain gradient descent ``w <- w - lr * g`` on the enabled names."""

    def __init__(self, lr=1e-2):
        self.lr = float(lr)
        self.t = 0

    def step(self, model: ModelGraph, grads: dict, enabled) -> dict[str, np.ndarray]:
        params = model.params()
        enabled = list(enabled)
        for name in enabled:
            if name not in params:
                raise KeyError(f"unknown parameter {name!r}")
        self.t += 1
        updates = {}
        for name in enabled:
            if name in grads:
                upd = self.lr * grads[name]
                params[name] -= upd
                updates[name] = upd
        return updates


def make_optimizer(kind: str, lr: float):
    if kind == "adam":
        return Adam(lr)
    if kind == "sgd":
        return SGD(lr)
    raise ValueError(f"unknown optimizer {kind!r}")
