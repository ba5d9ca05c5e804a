from .ensemble import (
    CausalForestModel,
    ForestConfig,
    InsufficientData,
    TehEstimates,
    Tree,
    compute_weights,
    grow_tree,
    oob_tau_rd,
    predict_tau,
    train_forest,
    variable_importance,
)
from .estimator import GLMCausalForest
from .splitting import (
    SplitScore,
    compute_baseline_risk,
    enumerate_split_candidates,
    score_split,
)

__all__ = [
    "CausalForestModel",
    "ForestConfig",
    "GLMCausalForest",
    "InsufficientData",
    "SplitScore",
    "TehEstimates",
    "Tree",
    "compute_baseline_risk",
    "compute_weights",
    "enumerate_split_candidates",
    "grow_tree",
    "oob_tau_rd",
    "predict_tau",
    "score_split",
    "train_forest",
    "variable_importance",
]
