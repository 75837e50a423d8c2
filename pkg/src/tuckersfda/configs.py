"""Shipped backbone configurations and synthetic tasks.

The three benchmark backbones reproduce published parameter/MAC totals:
SSC 83.17K / 12.92M, HHAR 198.21K / 9.04M, MFD 199.3K / 58.18M (backbone
only, BN parameters counted, BN MACs not).
"""
from __future__ import annotations

from .data import ShiftSpec, SyntheticTask
from .experiments import Protocol
from .model import BackboneConfig

SSC = BackboneConfig("ssc", input_channels=1, seq_len=3000, n_classes=5, mid_channels=32,
                     final_channels=128, kernel_size=25, stride=6)
HHAR = BackboneConfig("hhar", input_channels=3, seq_len=128, n_classes=6, mid_channels=64,
                      final_channels=128, kernel_size=5, stride=1)
MFD = BackboneConfig("mfd", input_channels=1, seq_len=5120, n_classes=3, mid_channels=64,
                     final_channels=128, kernel_size=32, stride=6)

# Sign-flip toy: one channel, class = position of an edge pulse, target is the
# negated signal. Decomposed at RF=8 every layer has R_in = R_out = 1.
TOY_NEGATION_TASK = SyntheticTask("toy-negation", n_classes=4, channels=1, length=64, n_source=60,
                                  n_target=60, n_test=40, noise=0.15, template="edges",
                                  shift=ShiftSpec("negate", 1.0))
TOY_NEGATION = BackboneConfig("toy-negation", input_channels=1, seq_len=64, n_classes=4,
                              channels=(8, 8, 8), kernel_size=9, stride=1, inner_kernel=5,
                              features_len=4)
# rank 1 needs a longer recovery than the usual 2-3 epochs
TOY_NEGATION_PROTOCOL = Protocol(pretrain_epochs=15, pretrain_lr=3e-3, rank_factor=8, recovery_epochs=10,
                                 recovery_lr=3e-3, adapt_epochs=30, adapt_lr=5e-4, batch_size=32)

# Two-class task for pretraining / recovery checks.
SYNTH2_TASK = SyntheticTask("synthetic-2class", n_classes=2, channels=2, length=64, n_source=100,
                            n_target=100, n_test=60, noise=0.3, template="random",
                            shift=ShiftSpec("scale", 0.5))
SYNTH2 = BackboneConfig("synthetic-2class", input_channels=2, seq_len=64, n_classes=2,
                        channels=(16, 32, 32), kernel_size=7, stride=1, inner_kernel=5)

# Overfit-prone task: two unlabeled target samples per class, noisy signals, a
# wide backbone. Adaptation takes full-batch steps on all ten target samples.
OVERFIT_TASK = SyntheticTask("overfit", n_classes=5, channels=2, length=64, n_source=120,
                             n_target=2, n_test=200, noise=1.0, template="random",
                             shift=ShiftSpec("time-warp", 0.3))
OVERFIT = BackboneConfig("overfit", input_channels=2, seq_len=64, n_classes=5,
                         channels=(64, 128, 128), kernel_size=7, stride=1, inner_kernel=5)
OVERFIT_PROTOCOL = Protocol(pretrain_epochs=15, pretrain_lr=3e-3, rank_factor=8, recovery_epochs=3,
                            recovery_lr=1e-3, adapt_epochs=10, adapt_lr=5e-4, batch_size=10)

BACKBONES = {c.name: c for c in (SSC, HHAR, MFD, TOY_NEGATION, SYNTH2, OVERFIT)}
TASKS = {t.name: t for t in (TOY_NEGATION_TASK, SYNTH2_TASK, OVERFIT_TASK)}


def backbone(name: str) -> BackboneConfig:
    try:
        return BACKBONES[name]
    except KeyError:
        raise KeyError(f"unknown backbone {name!r}; shipped: {sorted(BACKBONES)}") from None


def task(name: str) -> SyntheticTask:
    try:
        return TASKS[name]
    except KeyError:
        raise KeyError(f"unknown task {name!r}; shipped: {sorted(TASKS)}") from None
