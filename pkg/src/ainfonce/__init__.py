"""Asymmetric InfoNCE for adversarial contrastive learning, on a small numpy autodiff core."""
from . import tensor_core
from .attack import AttackConfig, AttackError, pgd_contrastive, pgd_supervised
from .data import AugmentPolicy, ContrastiveBatch, Dataset, default_blobs, gen_blobs
from .encoder import EncoderDims, LinearClassifier, MlpEncoder, Model, init_params
from .losses import (AnnealState, LossConfig, a_infonce, alpha_from_distance, anneal_alpha,
                     debiased_negative_mass, infonce, loss_hn, loss_infonce, loss_ip,
                     loss_ip_hn, sim_alpha)
from .persistence import RunConfig, load_checkpoint, load_config, save_checkpoint, save_config
from .train_eval import (AnnealConfig, FinetuneConfig, TrainConfig, collapse_metric, evaluate,
                         finetune, pretrain)

__version__ = "0.1.0"
