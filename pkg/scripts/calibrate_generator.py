"""Choose the constants of the shipped default trial generator.

Covariate moments are a plausible paediatric severe-malaria profile (nine
continuous measurements, temperature first). Logit-scale risk weights are
fixed up to a common spread; the intercept is then solved by Monte Carlo so
that mean baseline risk is 9.7% with a long right tail. Writes
``src/rrforest/default_generator.json``.

    python scripts/calibrate_generator.py [--check-power]
"""

import argparse
import json
from pathlib import Path

import numpy as np
from scipy import optimize, special

NAMES = [
    "temperature", "age_months", "weight_kg", "respiratory_rate", "heart_rate",
    "systolic_bp", "hemoglobin", "base_deficit", "log_bun",
]
MEANS = np.array([38.0, 32.0, 12.0, 44.0, 152.0, 98.0, 7.5, 8.0, 1.9])
SDS = np.array([1.0, 18.0, 4.0, 12.0, 22.0, 14.0, 2.6, 6.0, 0.6])
CORR_PAIRS = {
    (0, 4): 0.30, (0, 3): 0.15, (1, 2): 0.80, (1, 3): -0.30, (1, 4): -0.30,
    (1, 5): 0.25, (2, 3): -0.25, (2, 4): -0.25, (2, 5): 0.20, (3, 4): 0.30,
    (3, 7): 0.40, (4, 6): -0.20, (6, 7): -0.15, (7, 8): 0.35, (5, 7): -0.20,
}
# relative logit weights per standard deviation; temperature is excluded
SHAPE = np.array([0.0, -0.15, -0.20, 0.45, 0.15, -0.25, -0.30, 0.80, 0.55])
TARGET_MEAN = 0.097
SPREAD = 1.25
MC_ROWS = 400_000
MC_SEED = 20240501


def covariance():
    corr = np.eye(len(NAMES))
    for (i, j), r in CORR_PAIRS.items():
        corr[i, j] = corr[j, i] = r
    cov = corr * np.outer(SDS, SDS)
    np.linalg.cholesky(cov)
    return cov


def sample(cov, n, seed):
    rng = np.random.default_rng(seed)
    return MEANS + rng.standard_normal((n, len(NAMES))) @ np.linalg.cholesky(cov).T


def calibrate():
    cov = covariance()
    X = sample(cov, MC_ROWS, MC_SEED)
    coef = SPREAD * SHAPE / SDS
    eta = (X - MEANS) @ coef
    shift = optimize.brentq(lambda a: special.expit(a + eta).mean() - TARGET_MEAN, -10, 5)
    intercept = shift - MEANS @ coef
    risk = special.expit(intercept + X @ coef)
    return cov, coef, float(intercept), risk


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--check-power", action="store_true")
    parser.add_argument("--out", default=Path(__file__).resolve().parents[1] / "src/rrforest/default_generator.json")
    args = parser.parse_args()
    cov, coef, intercept, risk = calibrate()
    print(f"mean={risk.mean():.4f} p01={np.quantile(risk, .01):.5f} "
          f"p99={np.quantile(risk, .99):.4f} max={risk.max():.4f}")
    config = {
        "schema_version": 1,
        "mean": MEANS.tolist(),
        "covariance": cov.tolist(),
        "risk_intercept": intercept,
        "risk_coefficients": coef.tolist(),
        "effect_feature_index": 0,
        "effect_threshold": float(MEANS[0]),
        "k_factor": 1.0,
        "n": 10000,
        "seed": 0,
        "feature_names": NAMES,
        "provenance": {
            "target_mean_risk": TARGET_MEAN,
            "logit_spread": SPREAD,
            "monte_carlo_rows": MC_ROWS,
            "monte_carlo_seed": MC_SEED,
            "mean_risk": float(risk.mean()),
            "p99_risk": float(np.quantile(risk, 0.99)),
            "max_risk": float(risk.max()),
        },
    }
    Path(args.out).write_text(json.dumps(config, indent=2) + "\n")
    print(f"wrote {args.out}")
    if args.check_power:
        from rrforest.evaluation import oracle_power_test
        from rrforest.simulation import SyntheticTrialConfig, generate_trial, trial_seed_sequence

        gen = SyntheticTrialConfig.from_dict(config)
        for k in (1.0, 1.25, 1.5, 1.75, 2.0):
            ps = []
            for t in range(200):
                rng = np.random.default_rng(trial_seed_sequence(99, k, t))
                trial = generate_trial(gen.replace(k_factor=k), rng)
                test = rng.permutation(gen.n)[: gen.n // 5]
                ps.append(oracle_power_test(trial.dataset.subset(test), trial.t_indicator[test]).p_value)
            print(f"K={k}: test-split power={np.mean(np.array(ps) < 0.05):.3f}")


if __name__ == "__main__":
    main()
