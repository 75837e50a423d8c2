"""Tucker-factorized 1D-CNNs with core-subspace fine-tuning for source-free domain adaptation."""
from .tensor import TuckerFactors, fold, hooi, hosvd, mode_product, reconstruct, truncated_svd, unfold
from .model import Adam, BackboneConfig, ModelGraph, SGD, SubspaceMask, MASK_PRESETS, build_model
from .factorize import RankPolicy, count_macs, count_params, decompose_model, efficiency_report, recovery_finetune
from .training import AdaptationConfig, PretrainConfig, adapt, pretrain

__version__ = "0.1.0"
