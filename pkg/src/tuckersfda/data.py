"""Synthetic domain-shift tasks, dataset containers and I/O, stratified subsampling, macro-F1."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

SHIFT_KINDS = ("none", "negate", "scale", "time-warp", "channel-permute", "additive-drift")


@dataclass
class TimeSeriesDataset:
    """Labeled samples of shape ``(N, M, L)``."""

    x: np.ndarray
    y: np.ndarray
    n_classes: int
    domain: str = "source"

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 3:
            raise ValueError("samples must have shape (N, channels, length)")
        if len(self.x) < 1:
            raise ValueError("dataset is empty")
        if self.y.shape != (len(self.x),):
            raise ValueError("one label per sample is required")
        if self.y.min() < 0 or self.y.max() >= self.n_classes:
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return len(self.x)

    @property
    def shape(self):
        return self.x.shape[1:]

    def class_counts(self) -> dict[int, int]:
        vals, counts = np.unique(self.y, return_counts=True)
        return {int(v): int(c) for v, c in zip(vals, counts)}

    def subset(self, idx) -> "TimeSeriesDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return TimeSeriesDataset(self.x[idx], self.y[idx], self.n_classes, self.domain)

    def unlabeled(self) -> "UnlabeledView":
        return UnlabeledView(self.x, self.n_classes, self.domain)


@dataclass(frozen=True)
class UnlabeledView:
    """What adaptation code is allowed to see: inputs only."""

    x: np.ndarray
    n_classes: int
    domain: str = "target"

    def __len__(self):
        return len(self.x)


@dataclass(frozen=True)
class ShiftSpec:
    kind: str = "none"
    magnitude: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise ValueError(f"unknown shift kind {self.kind!r}")


def apply_shift(x: np.ndarray, spec: ShiftSpec) -> np.ndarray:
    """Deterministic domain shift of a batch ``(N, M, L)``."""
    x = np.asarray(x, dtype=np.float64)
    m = float(spec.magnitude)
    if spec.kind == "none" or m == 0.0:
        return x.copy()
    if spec.kind == "negate":
        return x * (1.0 - 2.0 * m)
    if spec.kind == "scale":
        return x * (1.0 + m)
    if spec.kind == "additive-drift":
        return x + m * np.linspace(0.0, 1.0, x.shape[2])
    if spec.kind == "time-warp":
        length = x.shape[2]
        t = np.linspace(0.0, 1.0, length)
        src = (length - 1) * t ** (1.0 + m)
        grid = np.arange(length)
        return np.stack([[np.interp(src, grid, ch) for ch in s] for s in x])
    # channel-permute
    perm = np.random.default_rng(spec.seed).permutation(x.shape[1])
    if x.shape[1] > 1:
        while np.all(perm == np.arange(x.shape[1])):
            perm = np.roll(perm, 1)
    return x[:, perm, :]


@dataclass(frozen=True)
class SyntheticTask:
    """Class-conditional templates plus jitter and noise.

    ``template`` is ``"bumps"`` (one Gaussian bump per class at distinct
    positions, with alternating sign per channel), ``"edges"`` (one
    derivative-of-Gaussian pulse per class, same on every channel) or
    ``"random"`` (smoothed random walks).
    """

    name: str = "synthetic"
    n_classes: int = 2
    channels: int = 1
    length: int = 64
    n_source: int = 100
    n_target: int = 100
    n_test: int = 50
    noise: float = 0.1
    shift_jitter: int = 2
    amp_jitter: float = 0.2
    template: str = "bumps"
    width: float = 3.0
    shift: ShiftSpec = field(default_factory=ShiftSpec)


def _templates(task: SyntheticTask, rng: np.random.Generator) -> np.ndarray:
    k, m, length = task.n_classes, task.channels, task.length
    t = np.arange(length)
    out = np.zeros((k, m, length))
    if task.template == "bumps":
        centers = np.linspace(0.15, 0.85, k) * length
        for c in range(k):
            for ch in range(m):
                sign = 1.0 if (c + ch) % 2 == 0 else -1.0
                if m == 1:
                    sign = 1.0
                out[c, ch] = sign * np.exp(-0.5 * ((t - centers[c]) / task.width) ** 2)
    elif task.template == "edges":
        # derivative-of-Gaussian pulses: negating one is close to a short time shift
        centers = np.linspace(0.15, 0.85, k) * length
        for c in range(k):
            z = (t - centers[c]) / task.width
            pulse = -z * np.exp(-0.5 * z ** 2)
            out[c, :] = pulse / np.abs(pulse).max()
    elif task.template == "random":
        steps = rng.normal(size=(k, m, length))
        walk = np.cumsum(steps, axis=2)
        kernel = np.hanning(9)
        kernel /= kernel.sum()
        for c in range(k):
            for ch in range(m):
                w = np.convolve(walk[c, ch] - walk[c, ch].mean(), kernel, mode="same")
                out[c, ch] = w / (np.abs(w).max() + 1e-12)
    else:
        raise ValueError(f"unknown template {task.template!r}")
    return out


def draw_samples(task: SyntheticTask, templates: np.ndarray, n_per_class: int,
                 rng: np.random.Generator):
    y = np.repeat(np.arange(task.n_classes), n_per_class)
    n = len(y)
    amp = 1.0 + task.amp_jitter * rng.uniform(-1, 1, size=n)
    shifts = rng.integers(-task.shift_jitter, task.shift_jitter + 1, size=n)
    x = np.empty((n, task.channels, task.length))
    for i in range(n):
        x[i] = amp[i] * np.roll(templates[y[i]], shifts[i], axis=1)
    x += task.noise * rng.normal(size=x.shape)
    order = rng.permutation(n)
    return x[order], y[order]


@dataclass
class DomainPair:
    """Source/target splits. Target labels exist for sampling and scoring only."""

    source: TimeSeriesDataset
    source_test: TimeSeriesDataset
    target: TimeSeriesDataset
    target_test: TimeSeriesDataset
    target_clean: TimeSeriesDataset


def make_synthetic(task: SyntheticTask, seed: int = 0) -> DomainPair:
    if task.n_classes < 2 or task.channels < 1 or task.length < 2:
        raise ValueError("task needs >= 2 classes, >= 1 channel and length >= 2")
    if min(task.n_source, task.n_target, task.n_test) < 1:
        raise ValueError("every split needs at least one sample per class")
    rng = np.random.default_rng(seed)
    tmpl = _templates(task, rng)
    k = task.n_classes
    src = TimeSeriesDataset(*draw_samples(task, tmpl, task.n_source, rng), k, "source")
    src_test = TimeSeriesDataset(*draw_samples(task, tmpl, task.n_test, rng), k, "source")
    xc, yc = draw_samples(task, tmpl, task.n_target, rng)
    xt, yt = draw_samples(task, tmpl, task.n_test, rng)
    clean = TimeSeriesDataset(xc, yc, k, "target-clean")
    trg = TimeSeriesDataset(apply_shift(xc, task.shift), yc, k, "target")
    trg_test = TimeSeriesDataset(apply_shift(xt, task.shift), yt, k, "target")
    return DomainPair(src, src_test, trg, trg_test, clean)


def _class_take(n: int, ratio: float) -> int:
    take = (Decimal(repr(float(ratio))) * n).quantize(Decimal(1), rounding=ROUND_HALF_UP)
    return max(1, min(n, int(take)))


def stratified_subsample(ds: TimeSeriesDataset, ratio: float, seed: int = 0) -> TimeSeriesDataset:
    """Per-class ``max(1, round_half_up(ratio * count))`` samples, original order kept.

    Each class draws a prefix of one seeded permutation, so a smaller ratio
    always selects a subset of a larger one.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError("ratio must lie in (0, 1]")
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    keep = []
    for c in np.unique(ds.y):
        idx = np.flatnonzero(ds.y == c)
        perm = np.random.default_rng([int(seed), int(c)]).permutation(len(idx))
        keep.append(idx[perm[:_class_take(len(idx), ratio)]])
    return ds.subset(np.sort(np.concatenate(keep)))


def macro_f1(y_true, y_pred, n_classes: int | None = None) -> float:
    """Unweighted mean of per-class F1 over the classes present in ``y_true``."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred differ in length")
    if y_true.size == 0:
        raise ValueError("no samples to score")
    scores = []
    for c in np.unique(y_true):
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        scores.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores))


def accuracy(y_true, y_pred) -> float:
    return float(np.mean(np.asarray(y_true) == np.asarray(y_pred)))


# -- CSV + JSON sidecar ---------------------------------------------------------

def save_dataset(ds: TimeSeriesDataset, path) -> None:
    """Write ``label, ch0_t0 ... chM-1_tL-1`` rows plus a ``.json`` sidecar."""
    path = Path(path)
    n, m, length = ds.x.shape
    header = ["label"] + [f"ch{c}_t{t}" for c in range(m) for t in range(length)]
    rows = np.concatenate([ds.y[:, None].astype(np.float64), ds.x.reshape(n, -1)], axis=1)
    fmt = ["%d"] + ["%.17g"] * (m * length)
    np.savetxt(path, rows, delimiter=",", header=",".join(header), comments="", fmt=fmt)
    meta = {"channels": m, "length": length, "n_classes": ds.n_classes, "domain": ds.domain}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2))


def load_dataset(path) -> TimeSeriesDataset:
    path = Path(path)
    side = path.with_suffix(".json")
    if not path.exists() or not side.exists():
        raise FileNotFoundError(f"dataset {path} or its sidecar is missing")
    meta = json.loads(side.read_text())
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    m, length = int(meta["channels"]), int(meta["length"])
    if rows.shape[1] != 1 + m * length:
        raise ValueError(f"{path}: expected {1 + m * length} columns, found {rows.shape[1]}")
    return TimeSeriesDataset(rows[:, 1:].reshape(len(rows), m, length), rows[:, 0].astype(np.int64),
                             int(meta["n_classes"]), meta.get("domain", "source"))


def with_shift(task: SyntheticTask, **kw) -> SyntheticTask:
    return replace(task, shift=replace(task.shift, **kw))
