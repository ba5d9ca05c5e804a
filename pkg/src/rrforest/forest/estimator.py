"""scikit-learn style wrapper around :func:`train_forest`."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from ..data import TrialDataset, check_trial_arrays
from .ensemble import (
    ForestConfig,
    predict_tau,
    train_forest,
    variable_importance,
)


class GLMCausalForest(BaseEstimator):
    """Honest causal forest whose splits maximise a GLM interaction test.

    Parameters
    ----------
    link : {"poisson-log", "gaussian-identity", "binomial-logit"}
        Family of the split GLM. ``"poisson-log"`` targets the risk ratio,
        ``"gaussian-identity"`` the risk difference.
    n_trees : int
    subsample_fraction : float
        Share of training rows drawn (without replacement) for each tree.
    honesty_fraction : float
        Share of each tree's subsample used to place splits; the rest
        populates the leaves.
    min_node_per_arm : int
        Minimum treated and control rows per leaf, on both halves.
    max_candidates_per_feature : int
    mtry : int, optional
        Features tried per node; defaults to ``ceil(sqrt(d))``.
    z_projection_threshold : int, optional
        Nodes with fewer split-half rows use the baseline-risk projection in
        place of the covariates; defaults to ``10 * (d + 4)``.
    split_statistic : {"wald", "lrt"}
    random_state : int
    n_jobs : int

    Attributes
    ----------
    model_ : CausalForestModel
    feature_importances_ : ndarray of shape (n_features,)
    n_features_in_ : int
    """

    def __init__(self, link="poisson-log", n_trees=2000, subsample_fraction=0.5,
                 honesty_fraction=0.5, min_node_per_arm=5,
                 max_candidates_per_feature=64, mtry=None,
                 z_projection_threshold=None, split_statistic="wald",
                 random_state=0, n_jobs=1):
        self.link = link
        self.n_trees = n_trees
        self.subsample_fraction = subsample_fraction
        self.honesty_fraction = honesty_fraction
        self.min_node_per_arm = min_node_per_arm
        self.max_candidates_per_feature = max_candidates_per_feature
        self.mtry = mtry
        self.z_projection_threshold = z_projection_threshold
        self.split_statistic = split_statistic
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _config(self):
        return ForestConfig(
            n_trees=self.n_trees,
            subsample_fraction=self.subsample_fraction,
            honesty_fraction=self.honesty_fraction,
            min_node_per_arm=self.min_node_per_arm,
            max_candidates_per_feature=self.max_candidates_per_feature,
            mtry=self.mtry,
            link=self.link,
            z_projection_threshold=self.z_projection_threshold,
            split_statistic=self.split_statistic,
            seed=self.random_state,
        )

    def fit(self, X, y, w, feature_names=None):
        """Fit on covariates ``X``, binary outcome ``y`` and binary treatment ``w``."""
        X, y, w = check_trial_arrays(X, y, w)
        names = tuple(feature_names) if feature_names is not None else ()
        dataset = TrialDataset(X, y, w, names)
        self.model_ = train_forest(dataset, self._config(), n_jobs=self.n_jobs)
        self.n_features_in_ = X.shape[1]
        self.feature_importances_ = variable_importance(self.model_)
        return self

    def _check_X(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, but the forest was fit with {self.n_features_in_}"
            )
        return X

    def predict_effects(self, X):
        """:class:`TehEstimates` with both effect scales for each row."""
        X = self._check_X(X)
        return predict_tau(self.model_, X)

    def predict(self, X):
        """Risk-difference estimates."""
        return self.predict_effects(X).tau_rd

    def predict_risk_ratio(self, X):
        return self.predict_effects(X).tau_rr
