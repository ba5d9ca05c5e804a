"""Synthetic randomised trials with controllable relative heterogeneity.

Covariates are multivariate Gaussian. Baseline risk is a logistic function
of every covariate except the effect feature. Treated rows above the effect
threshold have their risk multiplied by ``K`` (clipped at 1) and treated rows
at or below it have it divided by ``K``; control rows keep the baseline risk.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import statistics
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from joblib import Parallel, delayed
from scipy import special

from .data import TrialDataset
from .evaluation import anova_omnibus, center_data, oracle_power_test, test_calibration
from .forest import ForestConfig, predict_tau, train_forest, variable_importance
from .glm import LinkFamily

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MIN_SUCCESS_FRACTION = 0.8
REJECTION_LEVEL = 0.05


@dataclass(frozen=True)
class SyntheticTrialConfig:
    """Generator parameters.

    ``risk_coefficients`` has one entry per covariate and must be zero at
    ``effect_feature_index``; ``risk_intercept`` is the logit-scale intercept.
    """

    mean: np.ndarray
    covariance: np.ndarray
    risk_intercept: float
    risk_coefficients: np.ndarray
    effect_feature_index: int = 0
    effect_threshold: float = 0.0
    k_factor: float = 1.0
    n: int = 10_000
    seed: int = 0
    feature_names: tuple = ()

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.asarray(self.covariance, dtype=float)
        coef = np.asarray(self.risk_coefficients, dtype=float).reshape(-1)
        d = mean.size
        if cov.shape != (d, d):
            raise ValueError(f"covariance must be {d}x{d}, got {cov.shape}")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValueError("covariance must be positive definite") from None
        if coef.size != d:
            raise ValueError(f"need {d} risk coefficients, got {coef.size}")
        if not 0 <= self.effect_feature_index < d:
            raise ValueError("effect_feature_index out of range")
        if coef[self.effect_feature_index] != 0:
            raise ValueError("the effect feature must not enter the baseline risk")
        if not self.k_factor >= 1:
            raise ValueError("k_factor must be >= 1")
        if int(self.n) < 2:
            raise ValueError("n must be at least 2")
        names = tuple(self.feature_names) or tuple(f"x{j}" for j in range(d))
        if len(names) != d:
            raise ValueError("feature_names length does not match the dimension")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "risk_coefficients", coef)
        object.__setattr__(self, "feature_names", names)

    @property
    def d(self):
        return self.mean.size

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "mean": self.mean.tolist(),
            "covariance": self.covariance.tolist(),
            "risk_intercept": float(self.risk_intercept),
            "risk_coefficients": self.risk_coefficients.tolist(),
            "effect_feature_index": int(self.effect_feature_index),
            "effect_threshold": float(self.effect_threshold),
            "k_factor": float(self.k_factor),
            "n": int(self.n),
            "seed": int(self.seed),
            "feature_names": list(self.feature_names),
        }

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data.pop("schema_version", None)
        data.pop("provenance", None)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown generator config keys: {sorted(unknown)}")
        if "feature_names" in data:
            data["feature_names"] = tuple(data["feature_names"])
        return cls(**data)

    def baseline_risk(self, X):
        X = np.asarray(X, dtype=float)
        return special.expit(self.risk_intercept + X @ self.risk_coefficients)


def default_generator() -> SyntheticTrialConfig:
    """Shipped nine-covariate generator with a skewed baseline-risk profile.

    Constants live in ``default_generator.json`` (see
    ``scripts/calibrate_generator.py`` for how they were chosen). The effect
    feature is column 0 with its threshold at the Gaussian mean (the median).
    """
    text = resources.files("rrforest").joinpath("default_generator.json").read_text()
    return SyntheticTrialConfig.from_dict(json.loads(text))


@dataclass
class SyntheticTrial:
    dataset: TrialDataset
    baseline_risk: np.ndarray
    adjusted_risk: np.ndarray
    t_indicator: np.ndarray


def adjust_risk(baseline, w, above, k_factor):
    """Treated risks times ``K`` above the threshold, divided by ``K`` below."""
    baseline = np.asarray(baseline, dtype=float)
    treated = np.asarray(w) > 0.5
    above = np.asarray(above, dtype=bool)
    out = baseline.copy()
    up = treated & above
    down = treated & ~above
    out[up] = np.clip(k_factor * baseline[up], 0.0, 1.0)
    out[down] = baseline[down] / k_factor
    return out


def generate_trial(config: SyntheticTrialConfig, rng=None) -> SyntheticTrial:
    """Draw one trial. ``rng`` defaults to a generator seeded by ``config.seed``."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    n, d = int(config.n), config.d
    chol = np.linalg.cholesky(config.covariance)
    X = config.mean + rng.standard_normal((n, d)) @ chol.T
    w = np.zeros(n)
    w[rng.permutation(n)[: n // 2]] = 1.0
    p_hat = config.baseline_risk(X)
    above = X[:, config.effect_feature_index] > config.effect_threshold
    p_star = adjust_risk(p_hat, w, above, config.k_factor)
    y = (rng.random(n) < p_star).astype(float)
    dataset = TrialDataset(X, y, w, config.feature_names)
    return SyntheticTrial(dataset, p_hat, p_star, above.astype(float))


def trial_seed_sequence(seed, k_factor, trial_id):
    """Independent stream for one (K, trial) job."""
    k_key = int(round(float(k_factor) * 1_000_000))
    return np.random.SeedSequence(int(seed), spawn_key=(k_key, int(trial_id)))


def default_forest_configs(n_trees=2000, seed=0):
    return {
        "original": ForestConfig(n_trees=n_trees, link=LinkFamily.GAUSSIAN, seed=seed),
        "rr": ForestConfig(n_trees=n_trees, link=LinkFamily.POISSON, seed=seed),
    }


@dataclass
class TrialReport:
    records: list = field(default_factory=list)
    oracle: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    feature_names: tuple = ()
    effect_feature_index: int = 0

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "feature_names": list(self.feature_names),
            "effect_feature_index": self.effect_feature_index,
            "aggregates": self.aggregates,
            "records": self.records,
            "oracle": self.oracle,
            "failures": self.failures,
        }

    def csv_rows(self):
        d = len(self.feature_names)
        header = ["trial_id", "k", "variant", "anova_p", "beta_p"] + [f"imp_{j}" for j in range(d)]
        rows = [
            [r["trial_id"], r["k"], r["variant"], r["anova_p"], r["beta_p"], *r["importance"]]
            for r in self.records
        ]
        return header, rows

    def power_curve(self):
        """(k, variant, n_trials, rejection_fraction) rows at level 0.05."""
        rows = []
        for key, agg in self.aggregates.items():
            for variant, frac in agg["rejection_fraction"].items():
                rows.append([float(key), variant, agg["n_trials"][variant], frac])
        return rows


def _run_trial(generator, k_factor, trial_id, forest_configs, test_fraction, folds):
    ss = trial_seed_sequence(generator.seed, k_factor, trial_id)
    data_ss, split_ss, forest_ss = ss.spawn(3)
    config = generator.replace(k_factor=float(k_factor))
    trial = generate_trial(config, np.random.default_rng(data_ss))
    n = trial.dataset.n
    perm = np.random.default_rng(split_ss).permutation(n)
    n_test = int(round(test_fraction * n))
    test_rows, train_rows = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    train, test = trial.dataset.subset(train_rows), trial.dataset.subset(test_rows)
    forest_seed = int(forest_ss.generate_state(1, np.uint64)[0])

    records, failures = [], []
    oracle_rec = None
    try:
        oracle = oracle_power_test(test, trial.t_indicator[test_rows])
        oracle_rec = {"trial_id": trial_id, "k": float(k_factor), "oracle_p": oracle.p_value}
    except Exception as exc:  # recorded, not fatal
        logger.warning("trial %d K=%g oracle test failed: %s", trial_id, k_factor, exc)
        failures.append({"trial_id": trial_id, "k": float(k_factor), "variant": "oracle",
                         "error": f"{type(exc).__name__}: {exc}"})
    for variant, fc in forest_configs.items():
        try:
            fc = dataclasses.replace(fc, seed=forest_seed)
            model = train_forest(train, fc)
            est = predict_tau(model, test.X)
            anova = anova_omnibus(test, est.tau_rr)
            y_tilde, w_tilde = center_data(test, folds=folds, family=fc.link, seed=forest_seed)
            calib = test_calibration(est, y_tilde, w_tilde)
            imp = variable_importance(model)
        except Exception as exc:  # recorded, not fatal
            logger.warning("trial %d K=%g %s failed: %s", trial_id, k_factor, variant, exc)
            failures.append({"trial_id": trial_id, "k": float(k_factor), "variant": variant,
                             "error": f"{type(exc).__name__}: {exc}"})
            continue
        records.append({
            "trial_id": trial_id,
            "k": float(k_factor),
            "variant": variant,
            "anova_p": anova.p_value,
            "anova_degenerate": anova.degenerate,
            "beta_p": calib.beta_p,
            "alpha": calib.alpha,
            "beta": calib.beta,
            "importance": [float(v) for v in imp],
        })
    return records, oracle_rec, failures


def _aggregate(records, oracle, failures, k_values, n_trials, variants, effect):
    out = {}
    for k in k_values:
        key = f"{float(k):g}"
        recs = [r for r in records if r["k"] == float(k)]
        by_variant = {v: {r["trial_id"]: r for r in recs if r["variant"] == v} for v in variants}
        n_ok = {v: len(by_variant[v]) for v in variants}
        agg = {
            "k": float(k),
            "n_trials": n_ok,
            "sufficient": all(n_ok[v] >= MIN_SUCCESS_FRACTION * n_trials for v in variants),
            "median_p": {},
            "median_effect_importance": {},
            "median_importance": {},
            "rejection_fraction": {},
        }
        for v in variants:
            rs = list(by_variant[v].values())
            if not rs:
                continue
            agg["median_p"][v] = statistics.median(r["anova_p"] for r in rs)
            agg["median_effect_importance"][v] = statistics.median(r["importance"][effect] for r in rs)
            agg["median_importance"][v] = np.median([r["importance"] for r in rs], axis=0).tolist()
            agg["rejection_fraction"][v] = float(np.mean([r["anova_p"] < REJECTION_LEVEL for r in rs]))
        orc = [o["oracle_p"] for o in oracle if o["k"] == float(k)]
        agg["n_trials"]["oracle"] = len(orc)
        agg["rejection_fraction"]["oracle"] = float(np.mean([p < REJECTION_LEVEL for p in orc])) if orc else math.nan
        if "rr" in variants and "original" in variants:
            paired = set(by_variant["rr"]) & set(by_variant["original"])
            agg["n_paired"] = len(paired)
            agg["rr_win_count"] = sum(
                by_variant["rr"][t]["anova_p"] < by_variant["original"][t]["anova_p"] for t in paired
            )
            agg["rr_importance_win_count"] = sum(
                by_variant["rr"][t]["importance"][effect] > by_variant["original"][t]["importance"][effect]
                for t in paired
            )
        if not agg["sufficient"]:
            logger.warning("K=%s: fewer than %.0f%% of trials succeeded", key, 100 * MIN_SUCCESS_FRACTION)
        out[key] = agg
    return out


def run_experiment(generator: SyntheticTrialConfig, k_values, n_trials,
                   forest_configs=None, *, test_fraction=0.2, folds=5, n_jobs=1) -> TrialReport:
    """Simulate ``n_trials`` trials per ``K`` and compare forest variants.

    Each trial is split into train/test; every variant is trained on the
    training rows and evaluated on the test rows (ANOVA omnibus on
    ``log(tau_rr)``, calibration test, variable importance). The oracle test
    on the true effect-group indicator runs on the same test rows, so its
    power is directly comparable. An empty ``forest_configs`` runs the oracle
    test alone. Results do not depend on ``n_jobs``.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    if forest_configs is None:
        forest_configs = default_forest_configs()
    k_values = [float(k) for k in k_values]
    jobs = [(k, t) for k in k_values for t in range(n_trials)]
    run = delayed(_run_trial)
    if n_jobs == 1:
        results = [_run_trial(generator, k, t, forest_configs, test_fraction, folds) for k, t in jobs]
    else:
        results = Parallel(n_jobs=n_jobs)(
            run(generator, k, t, forest_configs, test_fraction, folds) for k, t in jobs
        )
    records, oracle, failures = [], [], []
    for recs, orc, fails in results:
        records.extend(recs)
        if orc is not None:
            oracle.append(orc)
        failures.extend(fails)
    order = {v: i for i, v in enumerate(forest_configs)}
    records.sort(key=lambda r: (k_values.index(r["k"]), r["trial_id"], order[r["variant"]]))
    aggregates = _aggregate(records, oracle, failures, k_values, n_trials,
                            list(forest_configs), generator.effect_feature_index)
    return TrialReport(records, oracle, failures, aggregates, generator.feature_names,
                       generator.effect_feature_index)
