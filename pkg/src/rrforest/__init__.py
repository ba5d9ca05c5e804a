"""Honest causal forests that split on GLM treatment-interaction tests.

A Poisson (log link) split model targets the relative effect (risk ratio);
a gaussian (identity link) split model targets the absolute effect (risk
difference).
"""

from .data import TrialDataset, ingest_csv, write_csv
from .evaluation import (
    AnovaResult,
    CalibrationResult,
    anova_omnibus,
    center_data,
    oracle_power_test,
    test_calibration,
)
from .forest import (
    CausalForestModel,
    ForestConfig,
    GLMCausalForest,
    TehEstimates,
    predict_tau,
    train_forest,
    variable_importance,
)
from .glm import GlmFit, LinkFamily, chi_square_sf, fit_glm, likelihood_ratio_test, wald_p_value
from .simulation import (
    SyntheticTrialConfig,
    TrialReport,
    default_generator,
    generate_trial,
    run_experiment,
)

__version__ = "0.1.0"

__all__ = [
    "AnovaResult",
    "CalibrationResult",
    "CausalForestModel",
    "ForestConfig",
    "GLMCausalForest",
    "GlmFit",
    "LinkFamily",
    "SyntheticTrialConfig",
    "TehEstimates",
    "TrialDataset",
    "TrialReport",
    "anova_omnibus",
    "center_data",
    "chi_square_sf",
    "default_generator",
    "fit_glm",
    "generate_trial",
    "ingest_csv",
    "likelihood_ratio_test",
    "oracle_power_test",
    "predict_tau",
    "run_experiment",
    "test_calibration",
    "train_forest",
    "variable_importance",
    "wald_p_value",
]
