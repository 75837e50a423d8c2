"""Weight-distance tracking, the PAC-Bayes complexity term, update-size bound audits
and singular spectra of kernel unfoldings."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .layers import Conv1d, FactorizedConv1d, FactorizedLinear, Linear
from .tensor import truncated_svd, unfold

WEIGHT_KINDS = (Conv1d, FactorizedConv1d, Linear, FactorizedLinear)


def effective_weight(layer) -> np.ndarray:
    """Kernel the layer applies, adapters included."""
    w = layer.weight()
    a = layer.adapter
    if a is None:
        return w
    d = a.delta()
    if isinstance(layer, FactorizedConv1d):
        f = layer.factors()
        v2 = f.factors[1]
        d = np.einsum("or,rsk->osk", f.factors[0], d)
        if v2 is not None:
            d = np.einsum("osk,cs->ock", d, v2)
    elif isinstance(layer, FactorizedLinear):
        d = layer.params["u_out"] @ d @ layer.params["u_in"].T
    return w + d


def _layer_tensors(layer) -> dict[str, np.ndarray]:
    out = dict(layer.params)
    if layer.adapter is not None:
        out.update({f"adapter.{k}": v for k, v in layer.adapter.params.items()})
    return out


def layer_distances(src, trg, sections=("backbone", "classifier")) -> dict[str, dict[str, float]]:
    """Per-layer Frobenius distance between two models of identical topology.

    ``recon`` measures the applied kernel (plus bias) so factorized layers
    are comparable with dense ones; ``raw`` sums the squared differences of
    every stored tensor of the layer in quadrature.
    """
    out = {}
    for sec in sections:
        a_layers, b_layers = src.sections[sec], trg.sections[sec]
        if [l.name for l in a_layers] != [l.name for l in b_layers]:
            raise ValueError(f"topology mismatch in section {sec!r}")
        for a, b in zip(a_layers, b_layers):
            ta, tb = _layer_tensors(a), _layer_tensors(b)
            if not ta and not tb:
                continue
            if type(a) is not type(b) or ta.keys() != tb.keys():
                raise ValueError(f"topology mismatch at layer {a.name!r}")
            for k in ta:
                if ta[k].shape != tb[k].shape:
                    raise ValueError(f"shape mismatch at {a.name}.{k}")
            raw = math.sqrt(sum(float(np.sum((tb[k] - ta[k]) ** 2)) for k in ta))
            if isinstance(a, WEIGHT_KINDS):
                sq = float(np.sum((effective_weight(b) - effective_weight(a)) ** 2))
                if "bias" in ta:
                    sq += float(np.sum((tb["bias"] - ta["bias"]) ** 2))
                recon = math.sqrt(sq)
            else:
                recon = raw
            out[a.name] = {"recon": recon, "raw": raw}
    return out


def weight_layer_names(model, sections=("backbone",)) -> list[str]:
    return [l.name for s in sections for l in model.sections[s] if isinstance(l, WEIGHT_KINDS)]


def mean_weight_distance(dist: dict, names, key: str = "recon") -> float:
    return float(np.mean([dist[n][key] for n in names]))


@dataclass
class DistanceTrace:
    """Per-layer distances from the starting weights, one entry per epoch."""

    layers: list
    epochs: list = field(default_factory=list)
    recon: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def add(self, epoch: int, dist: dict) -> None:
        self.epochs.append(int(epoch))
        for name in self.layers:
            self.recon.setdefault(name, []).append(dist[name]["recon"])
            self.raw.setdefault(name, []).append(dist[name]["raw"])

    def squared_sum(self, epoch_index: int = -1) -> float:
        return float(sum(self.recon[n][epoch_index] ** 2 for n in self.layers))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch"] + [f"{n}:recon" for n in self.layers] + [f"{n}:raw" for n in self.layers])
            for i, ep in enumerate(self.epochs):
                w.writerow([ep] + [self.recon[n][i] for n in self.layers] + [self.raw[n][i] for n in self.layers])

    def to_gnuplot(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("# epoch " + " ".join(self.layers) + "\n")
            for i, ep in enumerate(self.epochs):
                fh.write(f"{ep} " + " ".join(f"{self.recon[n][i]:.10g}" for n in self.layers) + "\n")


# -- PAC-Bayes term -------------------------------------------------------------

@dataclass(frozen=True)
class BoundInputs:
    sigma: float = 1.0
    n: int = 1
    C: float = 1.0
    delta: float = 0.1
    k: float = 1.0
    l: float = 1.0

    def __post_init__(self):
        if self.sigma <= 0 or self.n <= 0 or self.C <= 0:
            raise ValueError("sigma, n and C must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.k < 0 or self.l < 0:
            raise ValueError("k and l must be non-negative")

    @classmethod
    def report_defaults(cls, n: int, n_classes: int) -> "BoundInputs":
        return cls(sigma=1.0, n=n, C=math.log(n_classes), delta=0.1, k=1.0, l=1.0)


def pac_bound_term(sq_distance_sum: float, inputs: BoundInputs) -> float:
    """``C * sqrt(D / (2 sigma^2 n) + (k ln(n / delta) + l) / n)`` with ``D`` the summed squared distances."""
    if sq_distance_sum < 0:
        raise ValueError("squared distances are non-negative")
    b = inputs
    inner = sq_distance_sum / (2.0 * b.sigma ** 2 * b.n) + (b.k * math.log(b.n / b.delta) + b.l) / b.n
    return b.C * math.sqrt(max(inner, 0.0))


# -- update-size bounds -----------------------------------------------------------

def full_update_bound(lr: float, t: int, m: int, n: int, g: float) -> float:
    """Full fine-tuning: ``lr * t * sqrt(M N) * G``."""
    return lr * t * math.sqrt(m * n) * g


def core_update_bound(r1: int, r2: int, t: int, lr: float, m: int, n: int,
                 c_u: float, g_k: float, c_v: float) -> float:
    """Core-only updates with frozen factors: ``R1 R2 t lr sqrt(M N) C_u G_k C_v``."""
    return r1 * r2 * t * lr * math.sqrt(m * n) * c_u * g_k * c_v


@dataclass
class LemmaCheck:
    layer: str
    epoch: int
    mode: str
    distance: float
    bound: float

    @property
    def slack(self) -> float:
        return self.bound - self.distance

    @property
    def passed(self) -> bool:
        # relative tolerance absorbs rounding in the measured distance
        return self.distance <= self.bound * (1 + 1e-9) + 1e-12


REQUIRED_AUDIT_KEYS = ("layer", "epoch", "mode", "lr", "t", "m", "n", "g", "distance")


def lemma_audit(entries, mode: str | None = None) -> list[LemmaCheck]:
    """Check logged weight distances against the bound matching each entry's mode.

    ``entries`` are dicts carrying the run's measured constants (see
    :data:`REQUIRED_AUDIT_KEYS`; core-only entries also need ``r1, r2, c_u,
    c_v, g_k``). ``mode`` forces ``"full"`` or ``"core"`` for every entry.
    """
    checks = []
    for e in entries:
        missing = [k for k in REQUIRED_AUDIT_KEYS if k not in e]
        m = mode or e.get("mode")
        if m == "core":
            missing += [k for k in ("r1", "r2", "c_u", "c_v", "g_k") if k not in e]
        if missing:
            raise KeyError(f"audit entry lacks {missing}")
        if m == "full":
            bound = full_update_bound(e["lr"], e["t"], e["m"], e["n"], e["g"])
        elif m == "core":
            bound = core_update_bound(e["r1"], e["r2"], e["t"], e["lr"], e["m"], e["n"], e["c_u"], e["g_k"], e["c_v"])
        else:
            raise ValueError(f"unknown audit mode {m!r}")
        checks.append(LemmaCheck(e["layer"], int(e["epoch"]), m, float(e["distance"]), float(bound)))
    return checks


def singular_spectrum(kernel: np.ndarray, mode: int) -> np.ndarray:
    """All singular values of the mode-``mode`` unfolding, non-increasing."""
    mat = unfold(kernel, mode)
    return truncated_svd(mat, min(mat.shape))[1]


def write_summary(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, default=_jsonable))


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")
