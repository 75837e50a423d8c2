"""Source pretraining, supervised fine-tuning and masked target adaptation loops."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import TimeSeriesDataset, UnlabeledView, accuracy, macro_f1
from .diagnostics import WEIGHT_KINDS, DistanceTrace, effective_weight, layer_distances
from .layers import ADAPTER, CORE, FACTOR, IMPUTER, FactorizedConv1d, FactorizedLinear
from .model import ModelGraph, SubspaceMask, make_optimizer
from .objectives import (
    MemoryBank, aad_lambda, aad_loss, default_k, imputation_loss, mapu_losses, nrc_loss,
    pseudo_label_loss, shot_loss, shot_pseudo_labels, softmax, source_pretrain_loss, temporal_mask,
)

LR_GRID = (5e-4, 1e-4, 5e-5, 1e-5, 5e-6, 1e-6, 5e-7, 1e-7)
METHODS = ("shot", "nrc", "aad", "mapu")


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index chunks of near-equal size; no chunk has one sample when ``n >= 2``.

    Avoiding singletons can push a chunk one sample over ``batch_size``
    (``n = 3, batch_size = 2`` gives a single chunk of three).
    """
    if n < 1:
        raise ValueError("no samples to iterate")
    perm = rng.permutation(n)
    return np.array_split(perm, max(1, min(math.ceil(n / batch_size), n // 2)))


def evaluate(model: ModelGraph, ds: TimeSeriesDataset) -> dict[str, float]:
    pred = model.predict(ds.x)
    return {"acc": accuracy(ds.y, pred), "f1": macro_f1(ds.y, pred, ds.n_classes)}


@dataclass
class PretrainConfig:
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    alpha: float = 0.1
    mapu: bool = False
    mask_ratio: float = 0.125
    optimizer: str = "adam"


def fit_supervised(model: ModelGraph, data: TimeSeriesDataset, names, epochs: int, lr: float,
                   batch_size: int = 32, seed: int = 0, alpha: float = 0.1, keep_best: bool = False,
                   imputer: bool = False, mask_ratio: float = 0.125, optimizer: str = "adam"):
    """Label-smoothed cross-entropy on ``data``, updating only ``names``.

    With ``keep_best`` the returned weights are those of the epoch (0 included)
    with the highest training-set accuracy. With ``imputer`` the imputer is fit
    on detached features of masked inputs alongside.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    model = model.copy()
    rng = np.random.default_rng(seed)
    opt = make_optimizer(optimizer, lr)
    names = list(names)
    imp_names = [n for n, t in model.tags().items() if t == IMPUTER] if imputer else []
    log = []
    best = (evaluate(model, data)["acc"], model.state()) if keep_best else None
    for epoch in range(1, epochs + 1):
        total, aux_total, count = 0.0, 0.0, 0
        for idx in minibatches(len(data), batch_size, rng):
            xb, yb = data.x[idx], data.y[idx]
            logits, feats, cache = model.forward(xb, train=True, rng=rng)
            loss, g = source_pretrain_loss(logits, yb, alpha)
            grads = model.backward(cache, g)
            if imp_names:
                hide = temporal_mask(xb.shape, mask_ratio, rng)
                _, feats_m, _ = model.forward(np.where(hide, 0.0, xb), train=False)
                imp, icache = model.impute(feats_m, train=True)
                aux, _, g_imp = imputation_loss(feats, imp)
                _, igrads = model.impute_backward(icache, g_imp)
                grads.update(igrads)
                aux_total += aux * len(idx)
            opt.step(model, grads, names + imp_names)
            total += loss * len(idx)
            count += len(idx)
        rec = {"epoch": epoch, "loss": total / count, **evaluate(model, data)}
        if imp_names:
            rec["imputation"] = aux_total / count
        log.append(rec)
        if keep_best and rec["acc"] > best[0]:
            best = (rec["acc"], model.state())
    if keep_best:
        model.load_state(best[1])
    return model, log


def pretrain(model: ModelGraph, source: TimeSeriesDataset, cfg: PretrainConfig):
    """Train backbone and classifier (and the imputer when ``cfg.mapu``)."""
    if cfg.mapu and not model.imputer:
        raise ValueError("MAPU pretraining needs a model built with an imputer")
    names = [n for n, t in model.tags().items() if t not in (IMPUTER, ADAPTER)]
    return fit_supervised(model, source, names, cfg.epochs, cfg.lr, cfg.batch_size, cfg.seed,
                          cfg.alpha, imputer=cfg.mapu, mask_ratio=cfg.mask_ratio, optimizer=cfg.optimizer)


# -- target adaptation -------------------------------------------------------------

@dataclass
class AdaptationConfig:
    method: str = "shot"
    lr: float = 1e-4
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    ratio: float = 1.0
    mask_ratio: float = 0.125
    k_nn: int | None = None
    k_expand: int | None = None
    nrc_r: float = 0.1
    aad_alpha: float = 1.0
    aad_beta: float = 5.0
    imputation_weight: float = 0.5
    shot_pseudo: bool = False
    shot_pseudo_weight: float = 0.3
    optimizer: str = "adam"
    off_grid_lr: bool = False

    def __post_init__(self):
        self.method = self.method.lower()
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if not self.off_grid_lr and not any(math.isclose(self.lr, g, rel_tol=1e-9) for g in LR_GRID):
            raise ValueError(f"lr {self.lr} is not on the grid {LR_GRID}; set off_grid_lr to override")
        if self.epochs < 0 or self.batch_size < 2:
            raise ValueError("epochs must be >= 0 and batch_size >= 2")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in (0, 1)")


@dataclass
class AdaptationLog:
    records: list = field(default_factory=list)
    audit: list = field(default_factory=list)
    trace: DistanceTrace | None = None
    meta: dict = field(default_factory=dict)

    def column(self, key):
        return [r[key] for r in self.records]

    def to_csv(self, path) -> None:
        keys = ["epoch", "loss", "f1", "acc", "steps"]
        layers = self.trace.layers if self.trace else []
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(keys + [f"dist:{n}" for n in layers] + [f"raw:{n}" for n in layers])
            for i, r in enumerate(self.records):
                row = [r.get(k, "") for k in keys]
                row += [self.trace.recon[n][i] for n in layers] + [self.trace.raw[n][i] for n in layers]
                w.writerow(row)


def check_mask(model: ModelGraph, mask: SubspaceMask) -> list[str]:
    """Enabled parameter names, refusing masks that select nothing the model has."""
    tags = set(model.tags().values())
    hints = {CORE: "decompose the model first (core subspace needs a factorized archive)",
             FACTOR: "decompose the model first (factor subspace needs a factorized archive)",
             ADAPTER: "attach adapters first"}
    for t in mask.tags:
        if t in hints and t not in tags:
            raise ValueError(f"subspace {t} is empty for this model: {hints[t]}")
    names = mask.names(model)
    if mask.tags and not names:
        raise ValueError(f"mask {sorted(mask.tags)} selects no parameter of this model")
    return names


class _StepTracker:
    """Per-layer running constants for the update-size audits."""

    def __init__(self, model: ModelGraph, enabled: set, lr: float):
        self.lr = lr
        self.layers = {}
        owner = model.param_layer()
        touched = {owner[n] for n in enabled}
        for sec in ("backbone", "classifier"):
            for l in model.sections[sec]:
                if not isinstance(l, WEIGHT_KINDS) or l.name not in touched:
                    continue
                local = {n[len(l.name) + 1:] for n in enabled if owner[n] == l.name}
                core_only = isinstance(l, (FactorizedConv1d, FactorizedLinear)) and local == {"core"}
                w0 = effective_weight(l)
                m = w0.shape[0]
                info = {"w0": w0.copy(), "m": m, "n": int(w0.size // m), "g": 0.0,
                        "mode": "core" if core_only else "full"}
                if core_only:
                    r1, r2 = l.params["core"].shape[:2]
                    if isinstance(l, FactorizedConv1d):
                        u, v = l.params["v1"], l.params.get("v2")
                    else:
                        u, v = l.params["u_out"], l.params["u_in"]
                    info.update(r1=int(r1), r2=int(r2), c_u=float(np.abs(u).max()),
                                c_v=1.0 if v is None else float(np.abs(v).max()), g_k=0.0)
                self.layers[l.name] = (l, info)

    def before(self):
        # copies: dense weights are updated in place by the optimizer
        return {name: effective_weight(l).copy() for name, (l, _) in self.layers.items()}

    def after(self, prev, updates):
        for name, (l, info) in self.layers.items():
            step = float(np.abs(effective_weight(l) - prev[name]).max())
            info["g"] = max(info["g"], step / self.lr)
            if info["mode"] == "core":
                upd = updates.get(f"{name}.core")
                if upd is not None:
                    info["g_k"] = max(info["g_k"], float(np.abs(upd).max()) / self.lr)

    def entries(self, epoch: int, t: int):
        out = []
        for name, (l, info) in self.layers.items():
            e = {k: v for k, v in info.items() if k != "w0"}
            e.update(layer=name, epoch=epoch, lr=self.lr, t=t,
                     distance=float(np.linalg.norm(effective_weight(l) - info["w0"])))
            out.append(e)
        return out


def adapt(model: ModelGraph, target: UnlabeledView, cfg: AdaptationConfig, mask: SubspaceMask,
          eval_data: TimeSeriesDataset | None = None):
    """Unsupervised adaptation with updates restricted to ``mask``.

    BN layers run in train mode, so their running statistics follow the
    target batches; their affine weights move only if BN is in the mask. When
    the mask enables nothing the loop runs in eval mode and the model is
    returned unchanged. Labels of ``eval_data`` are used for scoring only.
    """
    if not isinstance(target, UnlabeledView):
        raise TypeError("adaptation consumes an UnlabeledView (call .unlabeled() on a dataset)")
    if len(target) == 0:
        raise ValueError("empty target set")
    start = model
    model = model.copy()
    enabled = check_mask(model, mask) if mask.expanded() else []
    if cfg.method == "mapu" and not model.imputer:
        raise ValueError("MAPU adaptation needs a model with a pretrained imputer")
    train = bool(enabled)
    rng = np.random.default_rng(cfg.seed)
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    x = target.x
    n = len(x)
    k = cfg.k_nn or default_k(cfg.batch_size)
    logits0, feats0 = model.embed(x)
    bank = MemoryBank.build(feats0, logits0)
    tracker = _StepTracker(model, set(enabled), cfg.lr)
    trace_layers = list(layer_distances(start, model).keys())
    trace = DistanceTrace(trace_layers, meta={"mask": sorted(mask.expanded()), "lr": cfg.lr,
                                              "seed": cfg.seed, "method": cfg.method})
    log = AdaptationLog(trace=trace, meta={"config": asdict(cfg), "enabled": enabled,
                                           "n_target": n})

    def record(epoch, loss, steps):
        rec = {"epoch": epoch, "loss": loss, "steps": steps}
        if eval_data is not None:
            rec.update(evaluate(model, eval_data))
        log.records.append(rec)
        trace.add(epoch, layer_distances(start, model))
        log.audit.extend(tracker.entries(epoch, steps))

    record(0, float("nan"), 0)
    steps = 0
    total_steps = max(1, cfg.epochs * len(minibatches(n, cfg.batch_size, np.random.default_rng(0))))
    for epoch in range(1, cfg.epochs + 1):
        pseudo = None
        if cfg.method == "shot" and cfg.shot_pseudo:
            lo, fe = model.embed(x)
            pseudo = shot_pseudo_labels(fe, softmax(lo))
        losses = []
        for idx in minibatches(n, cfg.batch_size, rng):
            xb = x[idx]
            if cfg.method == "mapu":
                hide = temporal_mask(xb.shape, cfg.mask_ratio, rng)
                loss, _, _, grads = mapu_losses(model, xb, hide, cfg.imputation_weight, train=train, rng=rng)
                logits, feats = None, None
            else:
                logits, feats, cache = model.forward(xb, train=train, rng=rng)
                if cfg.method == "shot":
                    loss, g = shot_loss(logits)
                    if pseudo is not None:
                        pl, pg = pseudo_label_loss(logits, pseudo[idx])
                        loss, g = loss + cfg.shot_pseudo_weight * pl, g + cfg.shot_pseudo_weight * pg
                else:
                    bank.update(idx, feats, logits)
                    if cfg.method == "nrc":
                        loss, g = nrc_loss(logits, bank, idx, k, cfg.k_expand, cfg.nrc_r)
                    else:
                        lam = aad_lambda(steps / total_steps, cfg.aad_beta, cfg.aad_alpha)
                        loss, g = aad_loss(logits, bank, idx, k, lam)
                grads = model.backward(cache, g)
            if enabled:
                prev = tracker.before()
                updates = opt.step(model, grads, enabled)
                tracker.after(prev, updates)
                steps += 1
            losses.append(loss)
        record(epoch, float(np.mean(losses)), steps)
    return model, log
