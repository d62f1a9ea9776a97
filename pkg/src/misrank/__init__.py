"""Adversarial mis-ranking attacks on embedding-based re-identification models."""
from .data import (ConfigurationError, DatasetManifest, IngestionError, export_reid_dir, gen_synthetic_dataset,
                   load_dataset, pk_batches)
from .discriminator import PyramidDiscriminator
from .generator import BudgetViolation, NoiseGenerator, certify_budget, compose_adversarial, project_linf
from .losses import LossWeights, misclass_loss, misrank_loss, msssim, total_loss
from .metrics import RankingReport, attack_eval, cmc_map, noise_baseline_eval, transfer_eval
from .models import BACKBONES, EmbeddingModel, TargetConfig, load_checkpoint, save_checkpoint, train_target
from .sampler import parse_ratio, ratio_to_k, sample_mask
from .trainer import AttackConfig, Attacker, train_attacker

__version__ = "0.1.0"
