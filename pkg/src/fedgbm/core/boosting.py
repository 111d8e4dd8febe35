"""Boosting loop: base score, gradients, batches, ensembles, centralized training.

The centralized trainer follows the federated schedule step for step (same
random stream, same base tree on A's columns, same fixed-point statistics)
so that it doubles as the reference the protocol is checked against.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from fedgbm.core.binning import DEFAULT_BINS, BinMapper
from fedgbm.core.split import quantize
from fedgbm.core.tree import GrowParams, LocalSearch, Tree, grow_tree_leafwise
from fedgbm.errors import ConfigError, DataError
from fedgbm.metrics import MetricsRecord, f1, safe_auc

P_CLAMP = 1e-6
EPS_CLAMP = 1e-12
STRATEGIES = ("phe-aggregate", "psi-cardinality")


def init_base_score(labels) -> float:
    y = np.asarray(labels, dtype=np.float64)
    if y.size == 0:
        raise DataError("cannot initialise from empty labels")
    p = min(max(float(y.mean()), P_CLAMP), 1 - P_CLAMP)
    return math.log(p / (1 - p))


def compute_gradients(labels, raw_scores):
    """Cross-entropy gradient, hessian and per-sample loss at ``raw_scores``."""
    s = np.asarray(raw_scores, dtype=np.float64)
    if np.isnan(s).any():
        raise DataError("NaN raw score")
    y = np.asarray(labels, dtype=np.float64)
    p = expit(s)
    g = p - y
    h = p * (1 - p)
    pc = np.clip(p, EPS_CLAMP, 1 - EPS_CLAMP)
    eps = -(y * np.log(pc) + (1 - y) * np.log(1 - pc))
    return g, h, eps


def batch_size(n: int, fraction: float) -> int:
    return max(1, int(math.floor(fraction * n + 0.5)))


def sample_batch(rng: np.random.Generator, n_intersection: int, fraction: float) -> np.ndarray:
    """Sorted uniform sample without replacement of ``round(b * n)`` positions."""
    if not 0 < fraction <= 1:
        raise ConfigError("batch fraction must be in (0, 1]")
    return np.sort(rng.choice(n_intersection, size=batch_size(n_intersection, fraction), replace=False))


@dataclass
class TrainConfig:
    iterations: int = 200
    t: int = 4
    learning_rate: float = 0.1
    batch_fraction: float = 1.0
    lam: float = 1.0
    min_leaf: int = 20
    bins: int = DEFAULT_BINS
    seed: int = 0
    strategy: str = "phe-aggregate"
    base_tree: bool = True
    learning_rates: list[float] | None = None  # optional per-iteration schedule

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown split strategy {self.strategy!r}")
        if not 0 < self.learning_rate <= 1:
            raise ConfigError("learning rate must be in (0, 1]")
        if not 0 < self.batch_fraction <= 1:
            raise ConfigError("batch fraction must be in (0, 1]")
        if self.t < 1 or self.iterations < 0:
            raise ConfigError("need t >= 1 and iterations >= 0")

    def alpha(self, k: int) -> float:
        if self.learning_rates:
            return float(self.learning_rates[min(k, len(self.learning_rates) - 1)])
        return float(self.learning_rate)

    @property
    def grow_params(self) -> GrowParams:
        scorer = "gini" if self.strategy == "psi-cardinality" else "gain"
        return GrowParams(self.t, self.lam, self.min_leaf, scorer)


@dataclass
class Ensemble:
    base_score: float
    learning_rate: float
    trees: list[Tree] = field(default_factory=list)
    alphas: list[float] = field(default_factory=list)
    has_base_tree: bool = False

    @property
    def iterations_completed(self) -> int:
        return len(self.trees) - (1 if self.has_base_tree else 0)

    def raw_score(self, views: dict, n: int | None = None) -> np.ndarray:
        if n is None:
            n = len(next(iter(views.values())))
        s = np.full(n, self.base_score, dtype=np.float64)
        for tree, a in zip(self.trees, self.alphas):
            s += a * tree.predict(views)
        return s


def update_ensemble(ens: Ensemble, tree: Tree, alpha: float | None = None) -> Ensemble:
    """New ensemble with ``tree`` appended; the input is left untouched."""
    a = ens.learning_rate if alpha is None else alpha
    return replace(ens, trees=list(ens.trees) + [tree], alphas=list(ens.alphas) + [float(a)])


def predict(ens: Ensemble, views: dict) -> np.ndarray:
    return expit(ens.raw_score(views))


def views_for(X, n_a: int) -> dict:
    X = np.asarray(X)
    return {"A": X[:, :n_a], "B": X[:, n_a:]}


class IterationLog:
    """Collects one :class:`MetricsRecord` per iteration."""

    def __init__(self, y_train, y_test=None, counter=None):
        self.y_train = y_train
        self.y_test = y_test
        self.counter = counter
        self.records: list[MetricsRecord] = []
        self.t0 = time.perf_counter()

    def add(self, k, train_scores, test_scores, mean_eps):
        p_tr = expit(train_scores)
        test_auc = test_f1 = None
        if self.y_test is not None and test_scores is not None and len(self.y_test):
            p_te = expit(test_scores)
            test_auc = safe_auc(self.y_test, p_te)
            test_f1 = f1(self.y_test, p_te)
        c = self.counter
        self.records.append(MetricsRecord(
            k, safe_auc(self.y_train, p_tr), test_auc, f1(self.y_train, p_tr), test_f1,
            float(mean_eps), c.bytes_sent if c else 0, c.bytes_received if c else 0,
            int(round((time.perf_counter() - self.t0) * 1000))))


def train_centralized(train, config: TrainConfig, n_a: int | None = None, test=None,
                      base_tree_features: int | None = None, on_iteration=None):
    """Plaintext training on one table whose first ``n_a`` columns belong to A.

    With ``n_a`` equal to the column count this is the A-only model; with the
    joined table it is the centralized reference for federated training. The
    base tree uses the first ``base_tree_features`` columns (default ``n_a``).
    Returns ``(ensemble, records, state)`` where ``state`` holds the final
    scores and per-iteration timings.
    """
    if train.labels is None:
        raise DataError("training data needs labels")
    m = train.n_features
    n_a = m if n_a is None else n_a
    n_base = n_a if base_tree_features is None else base_tree_features
    params = config.grow_params
    y = train.labels.astype(np.int64)
    mapper = BinMapper.fit(train.features, config.bins)
    binned = mapper.transform(train.features)
    owners = ["A"] * n_a + ["B"] * (m - n_a)
    local = list(range(n_a)) + list(range(m - n_a))
    search = LocalSearch(binned, mapper, params, owners, local, labels=y)
    views = views_for(train.features, n_a)
    test_views = views_for(test.features, n_a) if test is not None else None
    n = train.n_samples
    rng = np.random.default_rng(config.seed)

    base = init_base_score(y)
    ens = Ensemble(base, config.learning_rate)
    scores = np.full(n, base)
    test_scores = np.full(test.n_samples, base) if test is not None else None
    log = IterationLog(y, test.labels if test is not None else None)
    timings = []

    if config.base_tree and n_base > 0:
        g, h, eps = compute_gradients(y, scores)
        bmap = BinMapper(mapper.edges[:n_base])
        bsearch = LocalSearch(binned[:, :n_base], bmap, params, ["A"] * n_base,
                              list(range(n_base)), labels=y)
        tree0, _ = grow_tree_leafwise(np.arange(n), quantize(g), quantize(h), bsearch, params, 0)
        a0 = config.alpha(0)
        ens = update_ensemble(ens, tree0, a0)
        ens.has_base_tree = True
        scores += a0 * tree0.predict(views)
        if test is not None:
            test_scores += a0 * tree0.predict(test_views)
    for k in range(1, config.iterations + 1):
        t0 = time.perf_counter()
        batch = sample_batch(rng, n, config.batch_fraction)
        g, h, eps = compute_gradients(y, scores)
        tree, _ = grow_tree_leafwise(batch, quantize(g), quantize(h), search, params, k)
        a = config.alpha(k)
        ens = update_ensemble(ens, tree, a)
        scores += a * tree.predict(views)
        timings.append(time.perf_counter() - t0)
        if test is not None:
            test_scores += a * tree.predict(test_views)
        log.add(k, scores, test_scores, eps[batch].mean())
        if on_iteration:
            on_iteration(k, ens)
    state = {"scores": scores, "test_scores": test_scores, "timings": timings, "mapper": mapper}
    return ens, log.records, state
