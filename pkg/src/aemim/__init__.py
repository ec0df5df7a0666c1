"""Masked image modeling co-trained with adversarial examples, on numpy."""
from .attack import AttackConfig, feature_distance, fgsm_attack, pgd_attack, project, random_init
from .mim import MaskSpec, reconstruction_loss, reconstruction_target, sample_mask
from .model import (Domain, ModelConfig, ParamStore, decode, encode, extract_finetune_params,
                    init_params, patchify, unpatchify)
from .tensor import Tensor, backward, detach, grad
from .trainer import OptimizerState, Pretrainer, StepMetrics, TrainConfig, train_step

__version__ = "0.1.0"
