"""Retraining-free structured pruning for decoder-only transformers.

Coupled row/column removal, activation-weighted column scoring and
closed-form least-squares restoration of the surviving weights.
"""

from .calibration import CalibConfig, CalibStats, collect_stats, feature_norms, sample_corpus, synthetic_corpus
from .checkpoint import load_model, save_model
from .evaluation import EvalResult, output_fidelity, perplexity
from .model import ArchSpec, DecoderModel, Family, build_model, coupling_graph, forward_block, forward_model
from .prune import (
    PruneMask,
    PruneMode,
    SparsityPlan,
    apply_coupled_prune,
    plan_sparsity,
    prune_model,
    restore_weights,
    score_columns,
    select_channels,
)

__version__ = "0.1.0"
