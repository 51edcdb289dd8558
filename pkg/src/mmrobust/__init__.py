"""Multimodal adversarial training on a synthetic image-text world."""

from .attacks import PerturbationBudget, compose_multimodal, eval_attack_sga, pgd_image_attack, text_attack
from .augment import AugmenterSpec, build_augmented_dataset
from .config import ExperimentConfig, load_config
from .estimators import DualEncoderRetriever, PairAugmenter
from .metrics import MetricsReport, augmentation_quality, recall_table, robust_eval
from .model import ModelParams, init_params, load_checkpoint, save_checkpoint
from .pipeline import run_experiment
from .train import TrainConfig, train
from .world import PairedDataset, WorldConfig, generate_splits

__version__ = "0.1.0"

__all__ = [
    "AugmenterSpec",
    "DualEncoderRetriever",
    "ExperimentConfig",
    "MetricsReport",
    "ModelParams",
    "PairAugmenter",
    "PairedDataset",
    "PerturbationBudget",
    "TrainConfig",
    "WorldConfig",
    "augmentation_quality",
    "build_augmented_dataset",
    "compose_multimodal",
    "eval_attack_sga",
    "generate_splits",
    "init_params",
    "load_checkpoint",
    "load_config",
    "pgd_image_attack",
    "recall_table",
    "robust_eval",
    "run_experiment",
    "save_checkpoint",
    "text_attack",
    "train",
]
