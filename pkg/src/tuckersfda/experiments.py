"""Fixed end-to-end protocols: pretrain -> decompose -> recover -> adapt."""
from __future__ import annotations

from dataclasses import dataclass

from .data import DomainPair, SyntheticTask, make_synthetic, stratified_subsample
from .factorize import RankPolicy, decompose_model, recovery_finetune
from .model import MASK_PRESETS, BackboneConfig, ModelGraph, build_model
from .training import AdaptationConfig, AdaptationLog, PretrainConfig, adapt, pretrain


@dataclass(frozen=True)
class Protocol:
    pretrain_epochs: int = 15
    pretrain_lr: float = 3e-3
    rank_factor: int = 8
    recovery_epochs: int = 3
    recovery_lr: float = 1e-3
    adapt_epochs: int = 10
    adapt_lr: float = 1e-4
    batch_size: int = 32
    method: str = "shot"

    def adaptation(self, seed: int, **kw) -> AdaptationConfig:
        base = dict(method=self.method, lr=self.adapt_lr, epochs=self.adapt_epochs,
                    batch_size=self.batch_size, seed=seed)
        return AdaptationConfig(**{**base, **kw})


@dataclass
class Prepared:
    pair: DomainPair
    dense: ModelGraph
    factorized: ModelGraph


def prepare(task: SyntheticTask, cfg: BackboneConfig, protocol: Protocol, seed: int) -> Prepared:
    """Source-pretrained dense model and its recovered Tucker-factorized copy."""
    pair = make_synthetic(task, seed)
    dense, _ = pretrain(build_model(cfg, seed), pair.source,
                        PretrainConfig(epochs=protocol.pretrain_epochs, lr=protocol.pretrain_lr, seed=seed))
    fact = decompose_model(dense, RankPolicy(protocol.rank_factor))
    fact, _ = recovery_finetune(fact, pair.source, epochs=protocol.recovery_epochs, lr=protocol.recovery_lr,
                                seed=seed)
    return Prepared(pair, dense, fact)


def run_arm(prep: Prepared, protocol: Protocol, subspace: str, seed: int,
            ratio: float = 1.0) -> tuple[ModelGraph, AdaptationLog]:
    """Adapt the dense model (``full``) or the factorized one (any other subspace)."""
    model = prep.dense if subspace == "full" else prep.factorized
    target = prep.pair.target if ratio >= 1.0 else stratified_subsample(prep.pair.target, ratio, seed)
    return adapt(model, target.unlabeled(), protocol.adaptation(seed, ratio=ratio), MASK_PRESETS[subspace],
                 prep.pair.target_test)
