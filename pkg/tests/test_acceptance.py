"""Acceptance criteria, each run at its stated scale and tolerance.

Every test records a one-line pass/fail summary, printed at the end of the
pytest run. Monte Carlo criteria are marked ``slow``.
"""

import math
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from acceptance_log import LINES, record
from oracles import chi_square_tail, newton_mle, normal_two_sided_p
from rrforest import cli
from rrforest.data import TrialDataset
from rrforest.forest import ForestConfig, train_forest
from rrforest.forest.ensemble import grow_tree
from rrforest.glm import GlmFit, LinkFamily, chi_square_sf, fit_glm, wald_p_value
from rrforest.simulation import default_forest_configs, default_generator, generate_trial, run_experiment

FAMILIES = ["gaussian-identity", "binomial-logit", "poisson-log"]


@pytest.fixture(autouse=True)
def _record_errors(request):
    """A criterion that errors before reporting still gets a FAIL line."""
    criterion = int(request.node.name.split("_")[2])
    yield
    if criterion not in LINES:
        record(criterion, False, "did not complete (see traceback)")


def small_design(family, rng):
    """Random design with n <= 60, p <= 5 whose MLE exists and is moderate."""
    while True:
        p = int(rng.integers(1, 6))
        n = int(rng.integers(p + 15, 61))
        X = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
        beta = rng.normal(scale=0.5, size=p)
        eta = X @ beta
        if family == "gaussian-identity":
            y = eta + rng.normal(size=n)
        elif family == "binomial-logit":
            y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float)
        else:
            y = rng.poisson(np.exp(eta)).astype(float)
        ref = newton_mle(family, X, y)
        if np.all(np.abs(ref) < 10):
            return X, y, ref


def test_criterion_01_glm_matches_newton_oracle():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    not_converged = 0
    for family in FAMILIES:
        for _ in range(100):
            X, y, ref = small_design(family, rng)
            fit = fit_glm(X, y, family)
            not_converged += not fit.converged
            worst = max(worst, float(np.max(np.abs(fit.coefficients - ref))))
    elapsed = time.perf_counter() - start
    passed = worst <= 1e-8 and not_converged == 0 and elapsed < 60
    record(1, passed, f"300 designs, max |coef diff| {worst:.2e} (tol 1e-8), "
                      f"non-converged {not_converged}, {elapsed:.1f} s (limit 60 s)")
    assert passed


def test_criterion_02_distribution_kernels_match_integration():
    worst_wald = 0.0
    for z in np.r_[np.round(np.arange(0.0, 8.0001, 0.01), 10), 1.959964, 2.575829]:
        for sign in (1.0, -1.0):
            fit = GlmFit(np.array([sign * z]), np.array([1.0]), 0.0, 0.0, True, 1,
                         LinkFamily.GAUSSIAN, 10)
            worst_wald = max(worst_wald, abs(wald_p_value(fit, 0).p_value - normal_two_sided_p(z)))
    worst_chi = 0.0
    for df in range(1, 11):
        for x in np.round(np.arange(0.1, 20.0001, 0.1), 10):
            worst_chi = max(worst_chi, abs(chi_square_sf(x, df) - chi_square_tail(x, df)))
    passed = worst_wald < 1e-6 and worst_chi < 1e-6
    record(2, passed, f"wald max err {worst_wald:.1e} over |z| in [0, 8]; "
                      f"chi-square max err {worst_chi:.1e} over x in [0.1, 20], df 1..10 (tol 1e-6)")
    assert passed


def test_criterion_03_honesty_and_leaf_minimum():
    gen = default_generator()
    config = ForestConfig(n_trees=1)
    k = config.min_node_per_arm
    checked = []
    problems = []

    @settings(max_examples=50, derandomize=True, deadline=None, database=None,
              suppress_health_check=list(HealthCheck))
    @given(st.integers(0, 2**31 - 1), st.sampled_from([1.0, 2.0]), st.integers(400, 1600))
    def check(seed, k_factor, n):
        data = generate_trial(gen.replace(n=n, seed=seed, k_factor=k_factor)).dataset
        rng = np.random.default_rng(seed)
        sub = np.sort(rng.choice(n, n // 2, replace=False))
        tree = grow_tree(sub, data, config, np.random.default_rng(seed + 1))
        y = data.y.copy()
        y[tree.j_sample] = rng.permutation(y[tree.j_sample])
        other = grow_tree(sub, TrialDataset(data.X, y, data.w, data.feature_names), config,
                          np.random.default_rng(seed + 1))
        if not (np.array_equal(tree.feature, other.feature)
                and np.array_equal(tree.threshold, other.threshold)):
            problems.append(f"seed {seed}: split moved")
        leaves = tree.is_leaf
        leaf_of_i = tree.apply(data.X[tree.i_sample])
        w_i = data.w[tree.i_sample]
        for node in np.flatnonzero(leaves):
            i_t = np.sum((leaf_of_i == node) & (w_i == 1))
            i_c = np.sum((leaf_of_i == node) & (w_i == 0))
            if min(tree.treated_count[node], tree.control_count[node], i_t, i_c) < k:
                problems.append(f"seed {seed}: leaf {node} below k")
        checked.append(tree.n_nodes)

    start = time.perf_counter()
    check()
    elapsed = time.perf_counter() - start
    passed = not problems and len(checked) == 50 and elapsed < 120
    record(3, passed, f"{len(checked)} trees ({sum(checked)} nodes), {len(problems)} violations, "
                      f"{elapsed:.1f} s (limit 120 s)")
    assert passed, problems[:5]


@pytest.mark.slow
def test_criterion_04_null_calibration():
    gen = default_generator().replace(n=2000)
    start = time.perf_counter()
    report = run_experiment(gen, [1.0], 200, default_forest_configs(n_trees=250))
    elapsed = time.perf_counter() - start
    agg = report.aggregates["1"]
    rates = {v: agg["rejection_fraction"][v] for v in ("original", "rr")}
    in_band = all(0.01 <= r <= 0.12 for r in rates.values())
    on_time = elapsed < 30 * 60
    passed = in_band and agg["sufficient"] and on_time
    record(4, passed, f"K=1 rejection at 0.05: original {rates['original']:.3f}, rr {rates['rr']:.3f} "
                      f"(band [0.01, 0.12]); median p original {agg['median_p']['original']:.2f}, "
                      f"rr {agg['median_p']['rr']:.2f}; {len(report.failures)} failed fits; "
                      f"{elapsed / 60:.1f} min (target 30 min)")
    assert passed


@pytest.mark.slow
def test_criterion_05_oracle_power_curve():
    gen = default_generator().replace(n=10_000)
    report = run_experiment(gen, [1.0, 1.5, 2.0], 200, {})
    power = [report.aggregates[key]["rejection_fraction"]["oracle"] for key in ("1", "1.5", "2")]
    counts = [report.aggregates[key]["n_trials"]["oracle"] for key in ("1", "1.5", "2")]
    passed = power[0] < power[1] < power[2] and power[2] > 0.7 and min(counts) == 200
    record(5, passed, f"oracle power K=1 {power[0]:.3f}, K=1.5 {power[1]:.3f}, K=2 {power[2]:.3f} "
                      f"(strictly increasing, K=2 > 0.7); fits {counts}")
    assert passed


@pytest.fixture(scope="module")
def k2_report():
    gen = default_generator().replace(n=4000)
    start = time.perf_counter()
    report = run_experiment(gen, [2.0], 20, default_forest_configs(n_trees=500))
    return report, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_06_rr_beats_original_at_k2(k2_report):
    report, elapsed = k2_report
    agg = report.aggregates["2"]
    p_wins, imp_wins = agg["rr_win_count"], agg["rr_importance_win_count"]
    passed = agg["n_paired"] == 20 and p_wins >= 12 and imp_wins >= 12 and elapsed < 2 * 3600
    record(6, passed, f"rr lower ANOVA p in {p_wins}/{agg['n_paired']}, higher effect-feature "
                      f"importance in {imp_wins}/{agg['n_paired']} (need >= 12 each); median p "
                      f"original {agg['median_p']['original']:.3f}, rr {agg['median_p']['rr']:.3f}; "
                      f"{elapsed / 60:.1f} min (target 120 min)")
    assert passed


@pytest.mark.slow
def test_criterion_07_effect_feature_importance_concentrates(k2_report):
    report, _ = k2_report
    medians = np.array(report.aggregates["2"]["median_importance"]["rr"])
    effect = report.effect_feature_index
    others = np.delete(medians, effect)
    passed = bool(medians[effect] > others.max())
    record(7, passed, f"rr median importance: effect feature {medians[effect]:.3f}, "
                      f"largest other {others.max():.3f}")
    assert passed


def test_criterion_08_cli_determinism(tmp_path):
    def run(*args):
        assert cli.main([str(a) for a in args]) == 0

    outputs = []
    for rep in ("a", "b"):
        d = tmp_path / rep
        d.mkdir()
        run("simulate", "--k", 2, "--n", 1500, "--seed", 5, "--output", d / "train.csv")
        run("simulate", "--k", 2, "--n", 500, "--seed", 6, "--output", d / "test.csv")
        run("train", "--input", d / "train.csv", "--output", d / "model.json", "--trees", 20,
            "--seed", 9, "--workers", 1 if rep == "a" else 2)
        run("predict", "--model", d / "model.json", "--input", d / "test.csv", "--output", d / "pred.csv")
        run("evaluate", "--model", d / "model.json", "--input", d / "test.csv", "--output", d / "eval.json")
        run("importance", "--model", d / "model.json", "--output", d / "imp.csv")
        run("experiment", "--k", "1,2", "--trials", 2, "--n", 800, "--trees", 6, "--seed", 4,
            "--workers", 1 if rep == "a" else 2, "--output-dir", d / "exp")
        outputs.append(d)
    names = ["train.csv", "train.csv.oracle.csv", "test.csv", "model.json", "pred.csv", "eval.json",
             "imp.csv", "exp/records.csv", "exp/power_curve.csv", "exp/report.json"]
    differ = [n for n in names if (outputs[0] / n).read_bytes() != (outputs[1] / n).read_bytes()]
    passed = not differ
    record(8, passed, f"{len(names)} CLI outputs byte-identical across re-runs with 1 vs 2 workers"
                      + (f"; differing: {differ}" if differ else ""))
    assert passed


@pytest.mark.slow
def test_criterion_09_performance_envelope():
    gen = default_generator().replace(k_factor=2.0, seed=3)
    full = generate_trial(gen.replace(n=10_000)).dataset
    start = time.perf_counter()
    train_forest(full, ForestConfig(n_trees=2000))
    full_time = time.perf_counter() - start
    desk = generate_trial(gen.replace(n=4000)).dataset
    start = time.perf_counter()
    for link in ("poisson-log", "gaussian-identity"):
        train_forest(desk, ForestConfig(n_trees=500, link=link))
    desk_time = time.perf_counter() - start
    passed = full_time < 80 * 60 and desk_time < 10 * 60
    record(9, passed, f"n=10000 d=9 B=2000 poisson forest {full_time / 60:.1f} min (limit 80 min); "
                      f"desk scale n=4000 B=500 both variants {desk_time / 60:.1f} min (limit 10 min)")
    assert passed


def test_criterion_10_real_trial_results_not_reproducible():
    record(10, True, "real-trial results are not reproducible (proprietary data); "
                     "covered by criteria 1 to 9 instead", status="N/A ")
