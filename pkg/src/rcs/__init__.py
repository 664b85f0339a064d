"""Robustness-aware coreset selection: pick the training minibatches whose
gradients best reduce a model's representational divergence, then pretrain
on just those batches."""

from .attack import AttackConfig, fgsm, pgd_ce, pgd_pair, pgd_pair_batch, pgd_rd, rcs_step_size
from .autodiff import Tape, Tensor, finite_difference_gradient
from .config import ExperimentConfig, load_config
from .data import Dataset, DatasetSpec, generate, load_dataset, save_dataset
from .divergence import DistanceKind, ValidationSet, js_div, kl_div, rd_point, rd_set
from .losses import (
    AugmentedBatch,
    acl_loss,
    augment_batch,
    cl_loss,
    cross_entropy,
    dynacl_schedule,
    sat_loss,
    trades_loss,
)
from .model import EncoderConfig, Model, ModelSnapshot, load_checkpoint, save_checkpoint
from .selection import (
    CoresetResult,
    GuaranteeParams,
    MinibatchPartition,
    SelectionConfig,
    chunked_select,
    exact_gain,
    exhaustive_oracle,
    precompute_batch_grads,
    random_select,
    rcs_greedy,
    taylor_gain,
    verify_guarantee,
)
from .trainer import pretrain, pretrain_acl, pretrain_supervised, speedup_report

__all__ = [
    "AttackConfig",
    "AugmentedBatch",
    "CoresetResult",
    "Dataset",
    "DatasetSpec",
    "DistanceKind",
    "EncoderConfig",
    "ExperimentConfig",
    "GuaranteeParams",
    "MinibatchPartition",
    "Model",
    "ModelSnapshot",
    "SelectionConfig",
    "Tape",
    "Tensor",
    "ValidationSet",
    "acl_loss",
    "augment_batch",
    "chunked_select",
    "cl_loss",
    "cross_entropy",
    "dynacl_schedule",
    "exact_gain",
    "exhaustive_oracle",
    "fgsm",
    "finite_difference_gradient",
    "generate",
    "js_div",
    "kl_div",
    "load_checkpoint",
    "load_config",
    "load_dataset",
    "pgd_ce",
    "pgd_pair",
    "pgd_pair_batch",
    "pgd_rd",
    "precompute_batch_grads",
    "pretrain",
    "pretrain_acl",
    "pretrain_supervised",
    "random_select",
    "rcs_greedy",
    "rcs_step_size",
    "rd_point",
    "rd_set",
    "sat_loss",
    "save_checkpoint",
    "save_dataset",
    "speedup_report",
    "taylor_gain",
    "trades_loss",
    "verify_guarantee",
]
