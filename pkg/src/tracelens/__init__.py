"""Gradient-based training data attribution and cross-group sharing analyses."""

__version__ = "0.1.0"

from .analysis import group_share_table, select_test_samples  # noqa: E402
from .dataset import Dataset, Sample, SynthConfig, generate_synthetic, load_dataset, save_dataset, split_by_pair  # noqa: E402
from .influence import InfluenceMatrix, TopKSet, influence_matrix, topk, topk_all, tracin_cos, tracin_dot  # noqa: E402
from .model import CheckpointSeries, Hyperparams, train  # noqa: E402
from .stats import rank_agreement, wilcoxon_signed_rank  # noqa: E402

__all__ = [
    "CheckpointSeries",
    "Dataset",
    "Hyperparams",
    "InfluenceMatrix",
    "Sample",
    "SynthConfig",
    "TopKSet",
    "generate_synthetic",
    "group_share_table",
    "influence_matrix",
    "load_dataset",
    "rank_agreement",
    "save_dataset",
    "select_test_samples",
    "split_by_pair",
    "topk",
    "topk_all",
    "tracin_cos",
    "tracin_dot",
    "train",
    "wilcoxon_signed_rank",
]
