"""CART trees, Random Forest / Extra Trees, and a second-order logistic GBM.

Trees are stored flat in preorder.  A node routes ``x[feature] <= threshold``
to the left child.  Split candidates whose gains lie within
``GAIN_TOL`` of each other are treated as ties, resolved by lowest feature
index and then lowest threshold.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ValidationError

GAIN_TOL = 1e-12
TREE_FORMAT = "foglab-trees"
TREE_VERSION = 1


@dataclass(frozen=True)
class ForestConfig:
    n_estimators: int = 10
    max_depth: int = 0  # 0 = unlimited
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    criterion: str = "gini"
    splitter: str = "best"
    bootstrap: bool = True
    max_features: str = "sqrt"
    seed: int = 42

    def __post_init__(self):
        if self.n_estimators < 1:
            raise ValueError("n_estimators must be >= 1")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")
        if self.min_samples_leaf < 1 or self.max_depth < 0:
            raise ValueError("min_samples_leaf must be >= 1 and max_depth >= 0")
        if self.criterion not in ("gini", "entropy"):
            raise ValueError(f"unknown criterion {self.criterion!r}")
        if self.splitter not in ("best", "random"):
            raise ValueError(f"unknown splitter {self.splitter!r}")
        if self.max_features not in ("sqrt", "all"):
            raise ValueError(f"unknown max_features {self.max_features!r}")


@dataclass(frozen=True)
class GbmConfig:
    iterations: int = 50
    depth: int = 3
    learning_rate: float = 0.01
    l2_leaf_reg: float = 1.0
    seed: int = 42

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.l2_leaf_reg < 0 or self.depth < 1:
            raise ValueError("l2_leaf_reg must be >= 0 and depth >= 1")


def random_forest_preset(**overrides) -> ForestConfig:
    base = dict(n_estimators=50, max_depth=2, min_samples_split=2, criterion="gini",
                splitter="best", bootstrap=True, max_features="sqrt", seed=42)
    return ForestConfig(**{**base, **overrides})


def extra_trees_preset(**overrides) -> ForestConfig:
    base = dict(n_estimators=10, max_depth=0, min_samples_split=2, min_samples_leaf=4,
                criterion="entropy", splitter="random", bootstrap=False, max_features="sqrt", seed=42)
    return ForestConfig(**{**base, **overrides})


def gbm_preset(**overrides) -> GbmConfig:
    base = dict(iterations=50, depth=3, learning_rate=0.01, l2_leaf_reg=1.0, seed=42)
    return GbmConfig(**{**base, **overrides})


@dataclass
class Tree:
    """Flat preorder tree; ``feature == -1`` marks a leaf."""

    feature: list = field(default_factory=list)
    threshold: list = field(default_factory=list)
    left: list = field(default_factory=list)
    right: list = field(default_factory=list)
    n0: list = field(default_factory=list)
    n1: list = field(default_factory=list)
    value: list = field(default_factory=list)

    def __len__(self):
        return len(self.feature)

    def _add(self, feature=-1, threshold=0.0, n0=0, n1=0, value=0.0) -> int:
        self.feature.append(feature)
        self.threshold.append(threshold)
        self.left.append(-1)
        self.right.append(-1)
        self.n0.append(n0)
        self.n1.append(n1)
        self.value.append(value)
        return len(self.feature) - 1

    def is_leaf(self, i: int) -> bool:
        return self.feature[i] < 0

    def leaves(self) -> list[int]:
        return [i for i in range(len(self)) if self.is_leaf(i)]

    def depth(self) -> int:
        def rec(i):
            return 0 if self.is_leaf(i) else 1 + max(rec(self.left[i]), rec(self.right[i]))
        return rec(0)

    def apply(self, X) -> np.ndarray:
        """Leaf index reached by every row of ``X``."""
        X = np.asarray(X, dtype=np.float64)
        feat = np.asarray(self.feature)
        thr = np.asarray(self.threshold)
        left, right = np.asarray(self.left), np.asarray(self.right)
        node = np.zeros(len(X), dtype=np.int64)
        active = feat[node] >= 0
        while active.any():
            rows = np.flatnonzero(active)
            cur = node[rows]
            go_left = X[rows, feat[cur]] <= thr[cur]
            node[rows] = np.where(go_left, left[cur], right[cur])
            active = feat[node] >= 0
        return node

    def predict(self, X) -> np.ndarray:
        return np.asarray(self.value, dtype=np.float64)[self.apply(X)]

    def to_records(self) -> list:
        out = []
        for i in range(len(self)):
            if self.is_leaf(i):
                out.append(["L", int(self.n0[i]), int(self.n1[i]), float(self.value[i])])
            else:
                out.append(["I", int(self.feature[i]), float(self.threshold[i])])
        return out

    @classmethod
    def from_records(cls, records: list) -> "Tree":
        tree = cls()
        pos = 0

        def rec():
            nonlocal pos
            r = records[pos]
            pos += 1
            if r[0] == "L":
                return tree._add(n0=r[1], n1=r[2], value=r[3])
            node = tree._add(feature=r[1], threshold=r[2])
            tree.left[node] = rec()
            tree.right[node] = rec()
            return node

        rec()
        if pos != len(records):
            raise ValueError("trailing records in tree dump")
        return tree


# ---------------------------------------------------------------------------
# Impurity and split search
# ---------------------------------------------------------------------------

def impurity(n0, n1, criterion: str = "gini"):
    """Gini (1 - sum p^2) or base-2 entropy; vectorised over count arrays."""
    n0 = np.asarray(n0, dtype=np.float64)
    n1 = np.asarray(n1, dtype=np.float64)
    n = n0 + n1
    with np.errstate(divide="ignore", invalid="ignore"):
        p1 = np.where(n > 0, n1 / np.where(n > 0, n, 1), 0.0)
    p0 = 1.0 - p1
    if criterion == "gini":
        return 1.0 - p0 ** 2 - p1 ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(np.where(p0 > 0, p0 * np.log2(np.where(p0 > 0, p0, 1)), 0.0)
              + np.where(p1 > 0, p1 * np.log2(np.where(p1 > 0, p1, 1)), 0.0))
    return h


def _midpoint(a: float, b: float) -> float:
    mid = (a + b) / 2.0
    # adjacent floats: the midpoint can round up to b, which would send b left
    return a if mid >= b else mid


def _better(gain, feature, threshold, best) -> bool:
    if best is None:
        return True
    bgain, bfeat, bthr = best
    if gain > bgain + GAIN_TOL:
        return True
    if gain < bgain - GAIN_TOL:
        return False
    return (feature, threshold) < (bfeat, bthr)


def best_class_split(X, y, features, criterion="gini", min_samples_leaf=1):
    """Exhaustive midpoint search; returns (gain, feature, threshold) or None."""
    n = len(y)
    n1 = int(y.sum())
    parent = float(impurity(n - n1, n1, criterion))
    best = None
    for f in sorted(features):
        order = np.argsort(X[:, f], kind="stable")
        xs, ys = X[order, f], y[order]
        left_n = np.arange(1, n)
        ok = (xs[1:] > xs[:-1]) & (left_n >= min_samples_leaf) & (n - left_n >= min_samples_leaf)
        if not ok.any():
            continue
        left1 = np.cumsum(ys)[:-1]
        left0 = left_n - left1
        right1 = n1 - left1
        right0 = (n - left_n) - right1
        child = (left_n * impurity(left0, left1, criterion)
                 + (n - left_n) * impurity(right0, right1, criterion)) / n
        gain = parent - child
        cand = np.flatnonzero(ok)
        top = gain[cand].max()
        # thresholds increase with position, so the first near-max is the lowest
        pos = cand[np.flatnonzero(gain[cand] >= top - GAIN_TOL)[0]]
        thr = _midpoint(xs[pos], xs[pos + 1])
        if _better(float(gain[pos]), f, thr, best):
            best = (float(gain[pos]), f, thr)
    return best


def random_class_split(X, y, features, rng, criterion="gini", min_samples_leaf=1):
    """One uniform threshold per candidate feature; keep the best-scoring one."""
    n = len(y)
    n1 = int(y.sum())
    parent = float(impurity(n - n1, n1, criterion))
    best = None
    for f in sorted(features):
        col = X[:, f]
        lo, hi = col.min(), col.max()
        if not lo < hi:
            continue
        thr = float(rng.uniform(lo, hi))
        if thr >= hi:
            thr = lo
        mask = col <= thr
        nl = int(mask.sum())
        if nl < min_samples_leaf or n - nl < min_samples_leaf:
            continue
        l1 = int(y[mask].sum())
        child = (nl * impurity(nl - l1, l1, criterion) + (n - nl) * impurity(n - nl - (n1 - l1), n1 - l1, criterion)) / n
        gain = parent - float(child)
        if _better(gain, f, thr, best):
            best = (gain, f, thr)
    return best


def n_candidate_features(max_features: str, d: int) -> int:
    return d if max_features == "all" else max(1, math.ceil(math.sqrt(d)))


def fit_tree(X, y, cfg: ForestConfig = ForestConfig(), seed: int | None = None, sample_idx=None) -> Tree:
    """Greedy classification tree.  ``sample_idx`` may repeat rows (bootstrap)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) < 1 or X.shape[1] < 1:
        raise ValueError("X must be a non-empty 2-D array")
    if len(y) != len(X):
        raise ValueError("X and y lengths differ")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    idx = np.arange(len(y)) if sample_idx is None else np.asarray(sample_idx, dtype=np.int64)
    d = X.shape[1]
    k = n_candidate_features(cfg.max_features, d)
    tree = Tree()

    def grow(rows, depth):
        yy = y[rows]
        n = len(rows)
        n1 = int(yy.sum())
        stop = (
            n1 == 0 or n1 == n
            or (cfg.max_depth and depth >= cfg.max_depth)
            or n < cfg.min_samples_split
            or n < 2 * cfg.min_samples_leaf
        )
        split = None
        if not stop:
            feats = np.arange(d) if k == d else rng.choice(d, size=k, replace=False)
            xx = X[rows]
            if cfg.splitter == "best":
                split = best_class_split(xx, yy, feats, cfg.criterion, cfg.min_samples_leaf)
            else:
                split = random_class_split(xx, yy, feats, rng, cfg.criterion, cfg.min_samples_leaf)
        if split is None or split[0] <= GAIN_TOL:
            return tree._add(n0=n - n1, n1=n1, value=n1 / n)
        _, f, thr = split
        node = tree._add(feature=int(f), threshold=float(thr), n0=n - n1, n1=n1, value=n1 / n)
        mask = X[rows, f] <= thr
        tree.left[node] = grow(rows[mask], depth + 1)
        tree.right[node] = grow(rows[~mask], depth + 1)
        return node

    grow(idx, 0)
    return tree


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------

@dataclass
class ForestModel:
    trees: list
    n_features: int
    config: ForestConfig


@dataclass
class GbmModel:
    base_score: float
    trees: list
    learning_rate: float
    n_features: int
    config: GbmConfig


def _check_binary(y):
    y = np.asarray(y, dtype=np.int64)
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("labels must be binary")
    if y.min() == y.max():
        raise ValidationError("both classes must be present to train")
    return y


def fit_forest(X, y, cfg: ForestConfig) -> ForestModel:
    """Bagged (RF) or randomised (ET) trees; tree ``t`` uses seed ``cfg.seed + t``."""
    X = np.asarray(X, dtype=np.float64)
    y = _check_binary(y)
    n = len(y)
    trees = []
    for t in range(cfg.n_estimators):
        seed = cfg.seed + t
        bag = None
        if cfg.bootstrap:
            bag = bootstrap_sample(n, seed)
            seed = seed + 7919 * (t + 1)  # keep split draws apart from the bag draws
        trees.append(fit_tree(X, y, cfg, seed=seed, sample_idx=bag))
    return ForestModel(trees, X.shape[1], cfg)


def bootstrap_sample(n: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, n, size=n)


def fit_regression_tree(X, grad, hess, depth: int, l2: float) -> Tree:
    """Depth-limited tree on (gradient, hessian) pairs with Newton leaf values."""
    n, d = X.shape
    tree = Tree()
    orders = [np.argsort(X[:, f], kind="stable") for f in range(d)]

    def score(G, H):
        return G * G / (H + l2)

    def grow(rows, level):
        G, H = float(grad[rows].sum()), float(hess[rows].sum())
        leaf_value = -G / (H + l2) if H + l2 > 0 else 0.0
        best = None
        if level < depth and len(rows) >= 2:
            member = np.zeros(n, dtype=bool)
            member[rows] = True
            parent = score(G, H)
            for f in range(d):
                o = orders[f][member[orders[f]]]
                xs = X[o, f]
                ok = xs[1:] > xs[:-1]
                if not ok.any():
                    continue
                gl = np.cumsum(grad[o])[:-1]
                hl = np.cumsum(hess[o])[:-1]
                gain = score(gl, hl) + score(G - gl, H - hl) - parent
                cand = np.flatnonzero(ok)
                top = gain[cand].max()
                pos = cand[np.flatnonzero(gain[cand] >= top - GAIN_TOL)[0]]
                thr = _midpoint(xs[pos], xs[pos + 1])
                if _better(float(gain[pos]), f, thr, best):
                    best = (float(gain[pos]), f, thr)
        if best is None or best[0] <= GAIN_TOL:
            return tree._add(value=leaf_value, n0=len(rows))
        _, f, thr = best
        node = tree._add(feature=f, threshold=thr, value=leaf_value, n0=len(rows))
        mask = X[rows, f] <= thr
        tree.left[node] = grow(rows[mask], level + 1)
        tree.right[node] = grow(rows[~mask], level + 1)
        return node

    grow(np.arange(n), 0)
    return tree


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def fit_gbm(X, y, cfg: GbmConfig) -> GbmModel:
    """Logistic-loss gradient boosting with second-order leaf values."""
    X = np.asarray(X, dtype=np.float64)
    y = _check_binary(y).astype(np.float64)
    p_bar = y.mean()
    base = math.log(p_bar / (1.0 - p_bar))
    F = np.full(len(y), base)
    trees = []
    for _ in range(cfg.iterations):
        p = _sigmoid(F)
        tree = fit_regression_tree(X, p - y, p * (1.0 - p), cfg.depth, cfg.l2_leaf_reg)
        F = F + cfg.learning_rate * tree.predict(X)
        trees.append(tree)
    return GbmModel(base, trees, cfg.learning_rate, X.shape[1], cfg)


def gbm_raw_score(model: GbmModel, X, n_trees: int | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    F = np.full(len(X), model.base_score)
    for tree in model.trees[:n_trees]:
        F = F + model.learning_rate * tree.predict(X)
    return F


def predict_proba(model, X) -> np.ndarray:
    """Positive-class probability for a :class:`ForestModel` or :class:`GbmModel`."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ValueError(f"expected {model.n_features} features, got array of shape {X.shape}")
    if isinstance(model, ForestModel):
        total = np.zeros(len(X))
        for tree in model.trees:
            total += tree.predict(X)
        return total / len(model.trees)
    if isinstance(model, GbmModel):
        return _sigmoid(gbm_raw_score(model, X))
    raise TypeError(f"unsupported model type {type(model).__name__}")


def predict(model, X) -> np.ndarray:
    # probability exactly 0.5 goes to class 0
    return (predict_proba(model, X) > 0.5).astype(np.int64)


def fit_model(cfg, X, y):
    if isinstance(cfg, ForestConfig):
        return fit_forest(X, y, cfg)
    if isinstance(cfg, GbmConfig):
        return fit_gbm(X, y, cfg)
    raise TypeError(f"unsupported config type {type(cfg).__name__}")


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------

def model_to_dict(model) -> dict:
    if isinstance(model, ForestModel):
        return {"format": TREE_FORMAT, "version": TREE_VERSION, "type": "forest",
                "n_features": model.n_features, "config": asdict(model.config),
                "trees": [t.to_records() for t in model.trees]}
    if isinstance(model, GbmModel):
        return {"format": TREE_FORMAT, "version": TREE_VERSION, "type": "gbm",
                "n_features": model.n_features, "config": asdict(model.config),
                "base_score": model.base_score, "learning_rate": model.learning_rate,
                "trees": [t.to_records() for t in model.trees]}
    raise TypeError(f"unsupported model type {type(model).__name__}")


def model_from_dict(d: dict):
    if d.get("format") != TREE_FORMAT or d.get("version") != TREE_VERSION:
        raise ValueError(f"unsupported tree dump: {d.get('format')} v{d.get('version')}")
    trees = [Tree.from_records(r) for r in d["trees"]]
    if d["type"] == "forest":
        return ForestModel(trees, d["n_features"], ForestConfig(**d["config"]))
    if d["type"] == "gbm":
        return GbmModel(d["base_score"], trees, d["learning_rate"], d["n_features"], GbmConfig(**d["config"]))
    raise ValueError(f"unknown model type {d['type']!r}")
