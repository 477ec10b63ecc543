"""Person re-identification embeddings trained with identification, center
and feature-reweighting losses, built on a small numpy autodiff engine."""

from .data import AugmentConfig, ReidDataset, augment, desk_benchmark, generate_synthetic, load_directory, preprocess
from .evaluation import Protocol, cmc_single_shot, evaluate_splits, normalize_embeddings, pairwise_distances
from .losses import LossConfig, center_loss, fold_frw_into_softmax, identification_loss, total_loss, update_centers
from .model import ModelConfig, build, embed, load, replace_head, save
from .tensor import Tensor, backward, finite_diff_check
from .training import TrainPlan, compare_losses, train, two_step_finetune

__version__ = "0.1.0"
