"""Honest causal forests with GLM-interaction splitting."""

from __future__ import annotations

import dataclasses
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed

from ..data import DataError, TrialDataset
from ..glm import IRLS_MAX_ITER, IRLS_TOL, RIDGE, LinkFamily
from . import _kernels
from .splitting import compute_baseline_risk, with_intercept

logger = logging.getLogger(__name__)

PSEUDO_COUNT = 0.5
IMPORTANCE_MAX_DEPTH = 4
IMPORTANCE_DECAY = 2.0
SPLIT_STATISTICS = ("wald", "lrt")


class InsufficientData(DataError):
    """The subsample cannot satisfy the honesty minimums."""


@dataclass(frozen=True)
class ForestConfig:
    """Training parameters; ``None`` entries resolve from the data dimension."""

    n_trees: int = 2000
    subsample_fraction: float = 0.5
    honesty_fraction: float = 0.5
    min_node_per_arm: int = 5
    max_candidates_per_feature: int = 64
    mtry: int | None = None
    link: LinkFamily = LinkFamily.POISSON
    z_projection_threshold: int | None = None
    split_statistic: str = "wald"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "link", LinkFamily.parse(self.link))
        if int(self.n_trees) < 1:
            raise ValueError("n_trees must be positive")
        if not 0 < self.subsample_fraction <= 1:
            raise ValueError("subsample_fraction must lie in (0, 1]")
        if not 0 < self.honesty_fraction < 1:
            raise ValueError("honesty_fraction must lie in (0, 1)")
        if int(self.min_node_per_arm) < 1:
            raise ValueError("min_node_per_arm must be positive")
        if int(self.max_candidates_per_feature) < 1:
            raise ValueError("max_candidates_per_feature must be positive")
        if self.mtry is not None and int(self.mtry) < 1:
            raise ValueError("mtry must be positive")
        if self.z_projection_threshold is not None and int(self.z_projection_threshold) < 1:
            raise ValueError("z_projection_threshold must be positive")
        if self.split_statistic not in SPLIT_STATISTICS:
            raise ValueError(f"split_statistic must be one of {SPLIT_STATISTICS}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def resolved_mtry(self, d):
        mtry = math.ceil(math.sqrt(d)) if self.mtry is None else int(self.mtry)
        if mtry > d:
            raise ValueError(f"mtry={mtry} exceeds the number of features {d}")
        return mtry

    def resolved_z_threshold(self, d):
        if self.z_projection_threshold is None:
            return 10 * (d + 4)
        return int(self.z_projection_threshold)

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["link"] = self.link.value
        return out

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown forest config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class Tree:
    """One honest tree stored as flat node arrays.

    Node 0 is the root. Internal nodes have ``feature >= 0`` and route
    ``x[feature] <= threshold`` left. Leaf ``l`` owns the J-sample rows
    ``j_rows[j_start[l]:j_end[l]]``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    depth: np.ndarray
    z_statistic: np.ndarray
    j_start: np.ndarray
    j_end: np.ndarray
    j_rows: np.ndarray
    i_sample: np.ndarray
    j_sample: np.ndarray
    z_coefficients: np.ndarray
    treated_count: np.ndarray = field(default=None)
    control_count: np.ndarray = field(default=None)
    treated_mean: np.ndarray = field(default=None)
    control_mean: np.ndarray = field(default=None)

    @property
    def n_nodes(self):
        return len(self.feature)

    @property
    def is_leaf(self):
        return self.feature < 0

    @property
    def max_depth(self):
        return int(self.depth.max())

    def leaf_rows(self, node):
        return self.j_rows[self.j_start[node]:self.j_end[node]]

    def fill_leaf_stats(self, y, w):
        n = self.n_nodes
        tc, cc = np.zeros(n, np.int64), np.zeros(n, np.int64)
        tm, cm = np.zeros(n), np.zeros(n)
        for node in np.flatnonzero(self.is_leaf):
            rows = self.leaf_rows(node)
            treated = w[rows] > 0.5
            tc[node] = treated.sum()
            cc[node] = (~treated).sum()
            tm[node] = y[rows][treated].mean() if tc[node] else 0.0
            cm[node] = y[rows][~treated].mean() if cc[node] else 0.0
        self.treated_count, self.control_count = tc, cc
        self.treated_mean, self.control_mean = tm, cm

    def apply(self, X):
        X = np.ascontiguousarray(X, dtype=float)
        out = np.empty((1, X.shape[0]), np.int64)
        _kernels.apply_trees(X, self.feature, self.threshold, self.left, self.right,
                             np.array([0, self.n_nodes]), out)
        return out[0]

    def split_census(self):
        """(depth, feature) for every internal node, root depth 1."""
        internal = np.flatnonzero(~self.is_leaf)
        return self.depth[internal] + 1, self.feature[internal]

    def to_dict(self):
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "depth": self.depth.tolist(),
            "z_statistic": self.z_statistic.tolist(),
            "j_start": self.j_start.tolist(),
            "j_end": self.j_end.tolist(),
            "j_rows": self.j_rows.tolist(),
            "i_sample": self.i_sample.tolist(),
            "j_sample": self.j_sample.tolist(),
            "z_coefficients": self.z_coefficients.tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        ints = {"feature", "left", "right", "depth", "j_start", "j_end", "j_rows",
                "i_sample", "j_sample"}
        kwargs = {
            key: np.asarray(data[key], dtype=np.int64 if key in ints else float)
            for key in ints | {"threshold", "z_statistic", "z_coefficients"}
        }
        return cls(**kwargs)


def _tree_seed_sequence(seed, tree_index):
    return np.random.SeedSequence(int(seed), spawn_key=(int(tree_index),))


def split_honest(subsample, w, honesty_fraction, rng):
    """Split a subsample into I and J, stratified by treatment arm."""
    subsample = np.asarray(subsample, dtype=np.int64)
    I, J = [], []
    for arm in (1.0, 0.0):
        rows = subsample[w[subsample] == arm]
        rows = rows[rng.permutation(rows.size)]
        cut = int(round(honesty_fraction * rows.size))
        I.append(rows[:cut])
        J.append(rows[cut:])
    return np.sort(np.concatenate(I)), np.sort(np.concatenate(J))


def minimum_subsample(k):
    return 2 * (2 * k + 2)


def grow_tree(subsample, dataset: TrialDataset, config: ForestConfig, rng,
              X_std=None) -> Tree:
    """Grow one honest tree on ``subsample`` rows of ``dataset``.

    ``rng`` is a :class:`numpy.random.Generator`; it draws the I/J partition
    and the seed for per-node feature sampling.
    """
    k = int(config.min_node_per_arm)
    subsample = np.asarray(subsample, dtype=np.int64)
    if subsample.size < minimum_subsample(k):
        raise InsufficientData(
            f"subsample of {subsample.size} rows is below the minimum {minimum_subsample(k)}"
        )
    X, y, w = dataset.X, dataset.y, dataset.w
    if X_std is None:
        X_std = standardize(X, *column_scaling(X))
    I, J = split_honest(subsample, w, config.honesty_fraction, rng)
    j_treated = int(np.count_nonzero(w[J] > 0.5))
    if j_treated < k or J.size - j_treated < k:
        raise InsufficientData(
            f"J sample has {j_treated} treated and {J.size - j_treated} control rows; need {k} each"
        )
    node_seed = np.uint64(rng.integers(0, 2**63))
    family = config.link
    z_coef = compute_baseline_risk(X_std[I], y[I], family)
    Z = with_intercept(X_std) @ z_coef
    d = X.shape[1]
    statistic = SPLIT_STATISTICS.index(config.split_statistic)
    arrays = _kernels.grow_tree_arrays(
        X, X_std, Z, y, w, I, J, family.code, k, config.resolved_mtry(d),
        int(config.max_candidates_per_feature), config.resolved_z_threshold(d),
        statistic, node_seed, IRLS_MAX_ITER, IRLS_TOL, RIDGE,
    )
    feature, threshold, left, right, depth, zstat, j_start, j_end, j_rows = arrays
    tree = Tree(feature.copy(), threshold.copy(), left.copy(), right.copy(),
                depth.copy(), zstat.copy(), j_start.copy(), j_end.copy(),
                j_rows.copy(), I, J, z_coef)
    tree.fill_leaf_stats(y, w)
    return tree


def column_scaling(X):
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale <= 0] = 1.0
    return mean, scale


def standardize(X, mean, scale):
    return np.ascontiguousarray((X - mean) / scale)


def _grow_many(indices, dataset, config, X_std, n_sub):
    trees = []
    for b in indices:
        rng = np.random.default_rng(_tree_seed_sequence(config.seed, b))
        subsample = np.sort(rng.choice(dataset.n, size=n_sub, replace=False))
        trees.append(grow_tree(subsample, dataset, config, rng, X_std=X_std))
    return trees


@dataclass
class TehEstimates:
    """Forest effect estimates for ``m`` query rows."""

    tau_rd: np.ndarray
    tau_rr: np.ndarray
    tau_bar_rd: float
    treated_mean: np.ndarray = None
    control_mean: np.ndarray = None


class CausalForestModel:
    """A trained ensemble. Immutable after construction."""

    def __init__(self, trees, config, dataset, x_mean, x_scale, tau_bar_rd=math.nan):
        self.trees = list(trees)
        self.config = config
        self.feature_names = dataset.feature_names
        self.y_train = dataset.y
        self.w_train = dataset.w
        self.training_n = dataset.n
        self.n_features = dataset.d
        self.x_mean = np.asarray(x_mean, dtype=float)
        self.x_scale = np.asarray(x_scale, dtype=float)
        self.tau_bar_rd = float(tau_bar_rd)
        self._flatten()

    @property
    def per_tree_partitions(self):
        return [(t.i_sample, t.j_sample) for t in self.trees]

    def _flatten(self):
        trees = self.trees
        self._node_offsets = np.zeros(len(trees) + 1, np.int64)
        self._node_offsets[1:] = np.cumsum([t.n_nodes for t in trees])
        self._row_offsets = np.zeros(len(trees) + 1, np.int64)
        self._row_offsets[1:] = np.cumsum([t.j_rows.size for t in trees])
        cat = lambda name: np.concatenate([getattr(t, name) for t in trees])
        self._feature = cat("feature")
        self._threshold = cat("threshold")
        self._left = cat("left")
        self._right = cat("right")
        self._j_start = cat("j_start")
        self._j_end = cat("j_end")
        self._j_rows = cat("j_rows")
        y, w = self.y_train, self.w_train
        agg = np.zeros((len(self._feature), 4))
        for b, t in enumerate(trees):
            off = self._node_offsets[b]
            for node in np.flatnonzero(t.is_leaf):
                rows = t.leaf_rows(node)
                size = rows.size
                wr, yr = w[rows], y[rows]
                agg[off + node] = (
                    np.sum(wr * yr) / size,
                    np.sum(wr) / size,
                    np.sum((1 - wr) * yr) / size,
                    np.sum(1 - wr) / size,
                )
        self._agg = agg

    def _sums(self, X, oob_mask=None):
        X = np.ascontiguousarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got shape {X.shape}")
        m = X.shape[0]
        out = np.zeros((m, 4))
        support = np.zeros(m, np.int64)
        used = np.zeros(m, np.int64)
        if oob_mask is None:
            oob_mask = np.zeros((0, m), dtype=np.bool_)
        _kernels.forest_sums(
            X, self._feature, self._threshold, self._left, self._right,
            self._node_offsets, self._agg, self._j_rows, self._j_start, self._j_end,
            self._row_offsets, self.training_n, oob_mask, out, support, used,
        )
        return out, support, used

    def inbag_mask(self):
        mask = np.zeros((len(self.trees), self.training_n), dtype=np.bool_)
        for b, t in enumerate(self.trees):
            mask[b, t.i_sample] = True
            mask[b, t.j_sample] = True
        return mask

    def summary(self):
        """JSON-ready summary: tree count, depths, split census, importance."""
        census = np.zeros((IMPORTANCE_MAX_DEPTH, self.n_features), np.int64)
        for t in self.trees:
            depth, feature = t.split_census()
            keep = depth <= IMPORTANCE_MAX_DEPTH
            np.add.at(census, (depth[keep] - 1, feature[keep]), 1)
        return {
            "n_trees": len(self.trees),
            "training_n": self.training_n,
            "feature_names": list(self.feature_names),
            "tree_depths": [t.max_depth for t in self.trees],
            "tree_leaves": [int(t.is_leaf.sum()) for t in self.trees],
            "split_census": census.tolist(),
            "variable_importance": variable_importance(self).tolist(),
            "tau_bar_rd": self.tau_bar_rd,
            "config": self.config.to_dict(),
        }

    def to_dict(self):
        return {
            "config": self.config.to_dict(),
            "feature_names": list(self.feature_names),
            "training_n": self.training_n,
            "x_mean": self.x_mean.tolist(),
            "x_scale": self.x_scale.tolist(),
            "y_train": self.y_train.astype(int).tolist(),
            "w_train": self.w_train.astype(int).tolist(),
            "tau_bar_rd": self.tau_bar_rd,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, data):
        config = ForestConfig.from_dict(data["config"])
        n, d = int(data["training_n"]), len(data["feature_names"])
        # covariates are not stored; leaves only need outcomes and arms
        dataset = TrialDataset(np.zeros((n, d)), data["y_train"], data["w_train"],
                               tuple(data["feature_names"]))
        trees = [Tree.from_dict(t) for t in data["trees"]]
        for t in trees:
            t.fill_leaf_stats(dataset.y, dataset.w)
        return cls(trees, config, dataset, data["x_mean"], data["x_scale"],
                   data["tau_bar_rd"])


def train_forest(dataset: TrialDataset, config: ForestConfig | None = None, *,
                 n_jobs=1) -> CausalForestModel:
    """Grow ``config.n_trees`` honest trees on independent subsamples.

    Tree ``b`` draws everything from a stream seeded by ``(config.seed, b)``,
    so the model does not depend on ``n_jobs``.
    """
    config = config or ForestConfig()
    if not isinstance(dataset, TrialDataset):
        raise TypeError("dataset must be a TrialDataset")
    if dataset.w.sum() == 0 or dataset.w.sum() == dataset.n:
        raise InsufficientData("both treatment arms must be non-empty")
    config.resolved_mtry(dataset.d)
    n_sub = int(math.floor(dataset.n * config.subsample_fraction))
    k = int(config.min_node_per_arm)
    if n_sub < minimum_subsample(k):
        raise InsufficientData(
            f"subsample size {n_sub} is below the minimum {minimum_subsample(k)} for k={k}"
        )
    mean, scale = column_scaling(dataset.X)
    X_std = standardize(dataset.X, mean, scale)
    n_trees = int(config.n_trees)
    if n_jobs is None or n_jobs == 1 or n_trees == 1:
        trees = _grow_many(range(n_trees), dataset, config, X_std, n_sub)
    else:
        n_workers = n_jobs if n_jobs > 0 else max(1, len(os.sched_getaffinity(0)))
        chunks = [c for c in np.array_split(np.arange(n_trees), 4 * n_workers) if c.size]
        parts = Parallel(n_jobs=n_workers)(
            delayed(_grow_many)(c.tolist(), dataset, config, X_std, n_sub) for c in chunks
        )
        trees = [t for part in parts for t in part]
    model = CausalForestModel(trees, config, dataset, mean, scale)
    model.tau_bar_rd = float(np.mean(oob_tau_rd(model, dataset.X)))
    return model


def oob_tau_rd(model: CausalForestModel, X_train):
    """Out-of-bag absolute effect predictions for the training rows.

    Rows that every tree used fall back to the full-forest prediction.
    """
    mask = model.inbag_mask()
    sums, _, used = model._sums(X_train, oob_mask=mask)
    tau = _tau_rd_from_sums(sums)
    missing = used == 0
    if missing.any():
        full, _, _ = model._sums(np.asarray(X_train)[missing])
        tau[missing] = _tau_rd_from_sums(full)
    return tau


def _tau_rd_from_sums(sums):
    with np.errstate(invalid="ignore", divide="ignore"):
        return sums[:, 0] / sums[:, 1] - sums[:, 2] / sums[:, 3]


def compute_weights(model: CausalForestModel, x) -> np.ndarray:
    """Forest weights of every training row for one query point ``x``.

    ``weight_i = mean over trees of 1{i in J_b and leaf_b(x)} / |J_b ∩ leaf_b(x)|``.
    """
    x = np.asarray(x, dtype=float).reshape(1, -1)
    if x.shape[1] != model.n_features:
        raise ValueError(f"expected {model.n_features} features, got {x.shape[1]}")
    weights = np.zeros(model.training_n)
    for t in model.trees:
        rows = t.leaf_rows(t.apply(x)[0])
        weights[rows] += 1.0 / rows.size
    return weights / len(model.trees)


def predict_tau(model: CausalForestModel, X) -> TehEstimates:
    """Absolute and relative effect estimates from forest-weighted arm means.

    The relative estimate adds a pseudo-count of 0.5 (scaled by the mean
    non-zero forest weight) to each arm's weighted event count and twice that
    to its weighted size, so it is always finite and positive.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] < 1:
        raise ValueError("need at least one query row")
    sums, support, _ = model._sums(X)
    s1y, s1, s0y, s0 = sums.T
    tau_rd = s1y / s1 - s0y / s0
    c = PSEUDO_COUNT / support
    tau_rr = ((s1y + c) / (s1 + 2 * c)) / ((s0y + c) / (s0 + 2 * c))
    return TehEstimates(tau_rd=tau_rd, tau_rr=tau_rr, tau_bar_rd=model.tau_bar_rd,
                        treated_mean=s1y / s1, control_mean=s0y / s0)


def variable_importance(model: CausalForestModel, max_depth=IMPORTANCE_MAX_DEPTH,
                        decay_exponent=IMPORTANCE_DECAY) -> np.ndarray:
    """Depth-weighted split frequencies, normalised to sum to one.

    At each depth 1..max_depth the share of splits on each feature is
    weighted by ``depth ** -decay_exponent``. A forest with no splits gets
    the zero vector.
    """
    d = model.n_features
    counts = np.zeros((max_depth, d))
    for t in model.trees:
        depth, feature = t.split_census()
        keep = depth <= max_depth
        np.add.at(counts, (depth[keep] - 1, feature[keep]), 1.0)
    totals = counts.sum(axis=1, keepdims=True)
    freq = counts / np.maximum(totals, 1.0)
    weights = np.arange(1, max_depth + 1, dtype=float) ** -decay_exponent
    raw = weights @ freq
    total = raw.sum()
    return raw / total if total > 0 else np.zeros(d)
