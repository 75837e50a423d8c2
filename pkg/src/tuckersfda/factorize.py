"""Rank policy, model decomposition, recovery fine-tuning and parameter/MAC accounting."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

from .data import TimeSeriesDataset
from .layers import (
    BatchNorm1d, Conv1d, FactorizedConv1d, FactorizedLinear, Linear,
)
from .model import MASK_PRESETS, ModelGraph, SubspaceMask
from .peft import AdapterSpec, adapter_param_count, weight_geometry
from .tensor import hooi, relative_error
from .training import fit_supervised


@dataclass(frozen=True)
class RankPolicy:
    """``R = max(min_rank, C // RF)`` per channel mode.

    ``rank_factor`` is one RF or an ``(RF_out, RF_in)`` pair. When
    ``C_in // RF_in == 0`` the input mode is left undecomposed (implicit
    identity) unless ``materialize_input`` keeps an explicit full-rank
    ``C_in x C_in`` factor. ``input_layer_full_rank`` keeps the first
    backbone layer's input mode at ``R_in = C_in`` with an explicit factor,
    whatever the RF. Layers named in ``skip`` or with fewer than
    ``min_channels`` output channels stay dense.
    """

    rank_factor: int | tuple = 8
    min_rank: int = 1
    min_channels: int = 2
    skip: tuple = ()
    overrides: dict = field(default_factory=dict)
    materialize_input: bool = False
    input_layer_full_rank: bool = False
    max_iters: int = 50
    tol: float = 1e-6

    def factors_for(self, name: str):
        rf = self.overrides.get(name, self.rank_factor)
        rf_out, rf_in = (rf, rf) if np.isscalar(rf) else tuple(rf)
        if int(rf_out) < 1 or int(rf_in) < 1:
            raise ValueError("rank factors must be positive integers")
        return int(rf_out), int(rf_in)

    def ranks(self, name: str, c_in: int, c_out: int, first: bool = False):
        """``(R_out, R_in)``; ``R_in`` is None when the input mode is not decomposed."""
        rf_out, rf_in = self.factors_for(name)
        r_out = max(self.min_rank, c_out // rf_out)
        if first and self.input_layer_full_rank:
            r_in = c_in
        elif c_in // rf_in == 0:
            r_in = c_in if self.materialize_input else None
        else:
            r_in = max(self.min_rank, c_in // rf_in)
        return min(r_out, c_out), (None if r_in is None else min(r_in, c_in))

    def skips(self, name: str, c_out: int) -> bool:
        return name in self.skip or c_out < self.min_channels


def decompose_layer(layer, policy: RankPolicy, first: bool = False):
    """Factorized replacement of a Conv1d/Linear, its relative error and HOOI sweep count."""
    if isinstance(layer, Conv1d):
        w = layer.params["weight"]
        if not np.all(np.isfinite(w)):
            raise ValueError(f"{layer.name}: non-finite weights, refusing to decompose")
        r_out, r_in = policy.ranks(layer.name, layer.c_in, layer.c_out, first)
        ranks = {0: r_out} if r_in is None else {0: r_out, 1: r_in}
        f = hooi(w, ranks, modes=tuple(ranks), max_iters=policy.max_iters, tol=policy.tol)
        new = FactorizedConv1d(layer.name, f.core, f.factors[0], f.factors[1],
                               layer.params.get("bias"), layer.stride, layer.padding)
        return new, relative_error(w, f), len(f.errors) - 1
    if isinstance(layer, Linear):
        w = layer.params["weight"]
        if not np.all(np.isfinite(w)):
            raise ValueError(f"{layer.name}: non-finite weights, refusing to decompose")
        r_out, r_in = policy.ranks(layer.name, layer.d_in, layer.d_out, first)
        r_in = layer.d_in if r_in is None else r_in
        f = hooi(w, {0: r_out, 1: r_in}, max_iters=policy.max_iters, tol=policy.tol)
        new = FactorizedLinear(layer.name, f.core, f.factors[0], f.factors[1], layer.params.get("bias"))
        return new, relative_error(w, f), len(f.errors) - 1
    raise TypeError(f"{type(layer).__name__} cannot be decomposed")


def decompose_model(model: ModelGraph, policy: RankPolicy) -> ModelGraph:
    """Copy of ``model`` whose backbone Conv1d/Linear layers are Tucker-factorized.

    BN layers, biases and the classifier keep their values. Per-layer ranks,
    errors and sweep counts land in ``meta["decomposition"]``.
    """
    out = model.copy()
    info = {}
    layers = []
    weights = [l.name for l in out.backbone if isinstance(l, (Conv1d, Linear))]
    for layer in out.backbone:
        if isinstance(layer, (Conv1d, Linear)):
            c_out = layer.c_out if isinstance(layer, Conv1d) else layer.d_out
            if not policy.skips(layer.name, c_out):
                new, err, sweeps = decompose_layer(layer, policy, first=layer.name == weights[0])
                new.adapter = layer.adapter
                info[layer.name] = {"ranks": list(new.ranks), "rel_error": err, "sweeps": sweeps,
                                    "input_mode": ("v2" in new.params) or isinstance(new, FactorizedLinear)}
                layers.append(new)
                continue
        layers.append(layer)
    for layer in out.backbone:
        if isinstance(layer, BatchNorm1d) and not np.all(np.isfinite(layer.params["weight"])):
            raise ValueError(f"{layer.name}: non-finite weights")
    meta = dict(out.meta)
    meta["rank_factor"] = policy.rank_factor
    meta["decomposition"] = info
    return ModelGraph(layers, out.classifier, out.input_shape, out.n_classes, out.imputer or None, meta)


def recovery_finetune(model: ModelGraph, source: TimeSeriesDataset, epochs: int = 2, lr: float = 1e-3,
                      batch_size: int = 32, seed: int = 0, alpha: float = 0.1,
                      mask: SubspaceMask = MASK_PRESETS["both"]):
    """Brief label-smoothed source fine-tuning of cores and factors after decomposition.

    BN affine weights and the classifier stay frozen. The returned weights are
    the best epoch by source accuracy, the decomposed starting point included,
    so accuracy never drops below the post-decomposition value.
    """
    if len(source) == 0:
        raise ValueError("empty source data")
    if epochs == 0:
        return model.copy(), []
    return fit_supervised(model, source, mask.names(model), epochs, lr, batch_size, seed, alpha,
                          keep_best=True)


# -- accounting -------------------------------------------------------------------

def tensor_counts(layer) -> dict[str, tuple[str, int]]:
    """Closed-form size of each parameter tensor: ``local -> (tag, count)``."""
    if isinstance(layer, Conv1d):
        out = {"weight": (layer.tags["weight"], layer.c_out * layer.c_in * layer.kernel)}
        if layer.has_bias:
            out["bias"] = (layer.tags["bias"], layer.c_out)
    elif isinstance(layer, FactorizedConv1d):
        r_out, r_in = layer.ranks
        out = {"core": ("CORE", r_out * r_in * layer.kernel), "v1": ("FACTOR", layer.c_out * r_out)}
        if "v2" in layer.params:
            out["v2"] = ("FACTOR", layer.c_in * r_in)
        if layer.has_bias:
            out["bias"] = ("FACTOR", layer.c_out)
    elif isinstance(layer, Linear):
        out = {"weight": (layer.tags["weight"], layer.d_in * layer.d_out)}
        if layer.has_bias:
            out["bias"] = (layer.tags["bias"], layer.d_out)
    elif isinstance(layer, FactorizedLinear):
        r_out, r_in = layer.ranks
        out = {"core": ("CORE", r_out * r_in), "u_out": ("FACTOR", layer.d_out * r_out),
               "u_in": ("FACTOR", layer.d_in * r_in)}
        if layer.has_bias:
            out["bias"] = ("FACTOR", layer.d_out)
    elif isinstance(layer, BatchNorm1d):
        out = {"weight": ("BN", layer.channels), "bias": ("BN", layer.channels)}
    else:
        out = {}
    if layer.adapter is not None:
        a = layer.adapter
        _, c_in, c_out, k, _, _ = weight_geometry(layer)
        if a.kind == "lora":
            spec = AdapterSpec("lora", a.rank, style=a.style if a.style != "two" else "three")
        else:
            spec = AdapterSpec("lokra", blocks=a.blocks[:2])
        out["adapter"] = ("ADAPTER", adapter_param_count(spec, c_in, c_out, k))
    return out


def count_params(obj, mask: SubspaceMask | None = None, sections=("backbone",)):
    """Parameter count of a layer (int) or per-layer counts of a model (dict).

    With ``mask`` only tensors whose tag it enables are counted.
    """
    enabled = None if mask is None else mask.expanded()

    def one(layer):
        return sum(c for tag, c in tensor_counts(layer).values() if enabled is None or tag in enabled)

    if isinstance(obj, ModelGraph):
        return {l.name: one(l) for s in sections for l in obj.sections[s] if tensor_counts(l)}
    return one(obj)


def count_macs(model: ModelGraph, input_len: int | None = None, sections=("backbone",),
               adapters: bool = True) -> dict[str, int]:
    """Per-layer multiply-accumulates per sample at the given input length.

    Conv: ``C_out C_in K L'``; factorized conv: the three projection/core
    terms; linear: rows x cols; BN, pooling and activations: zero.
    """
    shape = (model.input_shape[0], input_len or model.input_shape[1])
    out = {}
    for sec in ("backbone", "classifier"):
        for l in model.sections[sec]:
            nxt = l.out_shape(shape)
            if sec in sections and (l.params or l.adapter is not None):
                m = l.macs(shape) if not isinstance(l, BatchNorm1d) else 0
                if adapters and l.adapter is not None:
                    a = l.adapter
                    if isinstance(l, (Conv1d, FactorizedConv1d)):
                        m += a.macs(shape[1], nxt[1])
                    else:
                        m += a.macs(None, None)
                out[l.name] = int(m)
            shape = nxt
    return out


def round_half_up(x: float, places: int = 2) -> float:
    q = Decimal(1).scaleb(-places)
    return float(Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP))


def display(n: int, unit: float) -> float:
    """Count in K (``unit=1e3``) or M (``unit=1e6``), two decimals."""
    return round_half_up(n / unit, 2)


def reduction_pct(new: int, old: int, unit: float) -> float:
    """Percent reduction computed from the two-decimal display values, as tables print it."""
    a, b = display(new, unit), display(old, unit)
    if a == 0 or b == 0:
        # too small to show in this unit; use the raw counts
        if old == 0:
            return 0.0
        a, b = new, old
    return round_half_up(100.0 * (1.0 - a / b), 2)


@dataclass
class LayerRow:
    layer: str
    kind: str
    params_full: int
    params_fact: int
    params_finetunable: int
    macs_full: int
    macs_fact: int


@dataclass
class EfficiencyReport:
    rows: list
    input_len: int
    rank_factor: object = None
    mask: list = field(default_factory=list)

    COLUMNS = ("layer", "kind", "params_full", "params_fact", "params_finetunable", "macs_full", "macs_fact")

    def total(self, column: str) -> int:
        return int(sum(getattr(r, column) for r in self.rows))

    @property
    def totals(self) -> dict[str, int]:
        return {c: self.total(c) for c in self.COLUMNS[2:]}

    def summary(self) -> dict:
        t = self.totals
        return {
            "params_full_K": display(t["params_full"], 1e3),
            "params_fact_K": display(t["params_fact"], 1e3),
            "params_finetunable_K": display(t["params_finetunable"], 1e3),
            "macs_full_M": display(t["macs_full"], 1e6),
            "macs_fact_M": display(t["macs_fact"], 1e6),
            "param_reduction_pct": reduction_pct(t["params_finetunable"], t["params_full"], 1e3),
            "mac_reduction_pct": reduction_pct(t["macs_fact"], t["macs_full"], 1e6),
        }

    def to_dict(self) -> dict:
        return {"input_len": self.input_len, "rank_factor": self.rank_factor, "mask": self.mask,
                "rows": [asdict(r) for r in self.rows], "totals": self.totals, "summary": self.summary()}

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([getattr(r, c) for c in self.COLUMNS])
            w.writerow(["total", ""] + [self.totals[c] for c in self.COLUMNS[2:]])


def efficiency_report(full: ModelGraph, fact: ModelGraph | None = None,
                      mask: SubspaceMask = MASK_PRESETS["core"], input_len: int | None = None,
                      sections=("backbone",)) -> EfficiencyReport:
    """Side-by-side accounting of a dense model and its factorized counterpart."""
    fact = full if fact is None else fact
    pf, pd = count_params(full, sections=sections), count_params(fact, sections=sections)
    pt = count_params(fact, mask, sections=sections)
    mf, md = count_macs(full, input_len, sections), count_macs(fact, input_len, sections)
    kinds = {l.name: l.kind for l in fact.layers()}
    names = [n for n in pd]
    if set(names) != set(pf):
        raise ValueError("models do not share layer names")
    rows = [LayerRow(n, kinds[n], pf[n], pd[n], pt[n], mf.get(n, 0), md.get(n, 0)) for n in names]
    return EfficiencyReport(rows, input_len or full.input_shape[1], fact.meta.get("rank_factor"),
                            sorted(mask.expanded()))
