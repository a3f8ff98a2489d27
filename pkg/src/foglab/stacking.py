"""Logistic regression and the two-level stacking ensemble."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import trees
from .data import kfold_indices
from .errors import StratificationError, ValidationError
from .trees import ForestConfig, GbmConfig

STACK_FORMAT = "foglab-stack"
STACK_VERSION = 1


@dataclass
class LogisticModel:
    weights: np.ndarray
    bias: float
    iterations: int = 0
    grad_norm: float = float("nan")


@dataclass(frozen=True)
class LogisticParams:
    lr: float = 0.1
    max_iters: int = 5000
    tol: float = 1e-6
    l2: float = 1e-4
    standardize: bool = False


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def logistic_loss(w, b, X, y, l2: float = 0.0) -> float:
    z = X @ w + b
    # log(1 + e^z) - y z, written stably
    return float(np.mean(np.logaddexp(0.0, z) - y * z) + l2 * np.dot(w, w))


def logistic_gradient(w, b, X, y, l2: float = 0.0):
    """Gradient of :func:`logistic_loss` as (dw, db)."""
    r = _sigmoid(X @ w + b) - y
    return X.T @ r / len(y) + 2.0 * l2 * w, float(r.mean())


def fit_logistic(X, y, lr: float = 0.1, max_iters: int = 5000, tol: float = 1e-6,
                 l2: float = 1e-4, standardize: bool = False) -> LogisticModel:
    """Full-batch gradient descent from zero on L2-regularised log-loss.

    With ``standardize`` the descent runs on z-scored columns and the result
    is mapped back to raw-feature coefficients (the penalty then applies to
    the standardised coefficients).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(np.unique(y)) < 2:
        raise ValidationError("logistic regression needs both classes")
    mu = np.zeros(X.shape[1])
    sd = np.ones(X.shape[1])
    if standardize:
        mu = X.mean(axis=0)
        sd = X.std(axis=0)
        sd[sd == 0] = 1.0
    Z = (X - mu) / sd
    w = np.zeros(X.shape[1])
    b = 0.0
    gnorm = np.inf
    it = 0
    for it in range(1, max_iters + 1):
        gw, gb = logistic_gradient(w, b, Z, y, l2)
        gnorm = max(np.max(np.abs(gw), initial=0.0), abs(gb))
        if gnorm < tol:
            it -= 1
            break
        w = w - lr * gw
        b = b - lr * gb
    w_raw = w / sd
    b_raw = b - float(np.dot(w_raw, mu))
    return LogisticModel(w_raw, b_raw, it, float(gnorm))


def logistic_proba(model: LogisticModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != len(model.weights):
        raise ValueError(f"expected {len(model.weights)} features, got shape {X.shape}")
    return _sigmoid(X @ model.weights + model.bias)


# ---------------------------------------------------------------------------
# Stacking
# ---------------------------------------------------------------------------

def default_base_configs(seed: int = 42) -> list:
    """The four level-1 learners: RF, ET and two GBM slots (XGBoost-like, CatBoost-like)."""
    return [
        ForestConfig(n_estimators=10, max_depth=3, criterion="gini", splitter="best",
                     bootstrap=True, max_features="sqrt", seed=seed),
        ForestConfig(n_estimators=10, max_depth=3, criterion="gini", splitter="random",
                     bootstrap=False, max_features="sqrt", seed=seed),
        GbmConfig(iterations=10, depth=3, learning_rate=0.3, l2_leaf_reg=1.0, seed=seed),
        GbmConfig(iterations=10, depth=3, learning_rate=0.1, l2_leaf_reg=3.0, seed=seed),
    ]


BASE_NAMES = ("random_forest", "extra_trees", "gbm_xgb_slot", "gbm_catboost_slot")


@dataclass
class StackConfig:
    base_configs: list = field(default_factory=default_base_configs)
    meta: LogisticParams = field(default_factory=LogisticParams)
    cv_folds: int = 10
    passthrough: bool = False
    seed: int = 42

    def __post_init__(self):
        if self.cv_folds < 2:
            raise ValueError("cv_folds must be >= 2")
        if not self.base_configs:
            raise ValueError("at least one base learner is required")
        if self.passthrough:
            raise NotImplementedError("passthrough=True is unsupported")


@dataclass
class StackModel:
    bases: list
    meta: LogisticModel
    config: StackConfig
    n_features: int
    oof: np.ndarray = None       # (n, n_bases) out-of-fold probabilities
    oof_fold: np.ndarray = None  # fold index that produced each row's OOF value


def oof_predictions(X, y, base_configs, cv_folds: int, seed: int):
    """Out-of-fold probability matrix plus the fold each row was held out in."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    if n < cv_folds:
        raise ValidationError(f"{n} rows cannot form {cv_folds} folds")
    folds = kfold_indices(n, cv_folds, labels=y, seed=seed)
    for f, (tr, _) in enumerate(folds):
        if len(np.unique(y[tr])) < 2:
            raise StratificationError(f"fold {f}: training part holds a single class")
    oof = np.full((n, len(base_configs)), np.nan)
    fold_of = np.full(n, -1, dtype=np.int64)
    for j, cfg in enumerate(base_configs):
        for f, (tr, te) in enumerate(folds):
            model = trees.fit_model(cfg, X[tr], y[tr])
            oof[te, j] = trees.predict_proba(model, X[te])
            fold_of[te] = f
    return oof, fold_of, folds


def fit_stack(X, y, cfg: StackConfig = None) -> StackModel:
    cfg = cfg or StackConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise ValidationError("stacking needs both classes")
    oof, fold_of, _ = oof_predictions(X, y, cfg.base_configs, cfg.cv_folds, cfg.seed)
    meta = fit_logistic(oof, y, **asdict(cfg.meta))
    bases = [trees.fit_model(c, X, y) for c in cfg.base_configs]
    return StackModel(bases, meta, cfg, X.shape[1], oof, fold_of)


def base_probabilities(model: StackModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ValueError(f"expected {model.n_features} features, got shape {X.shape}")
    return np.column_stack([trees.predict_proba(b, X) for b in model.bases])


def predict_stack(model: StackModel, X) -> np.ndarray:
    return logistic_proba(model.meta, base_probabilities(model, X))


def predict_proba(model, X) -> np.ndarray:
    """Positive-class probability for any tabular model in the package."""
    if isinstance(model, StackModel):
        return predict_stack(model, X)
    if isinstance(model, LogisticModel):
        return logistic_proba(model, X)
    return trees.predict_proba(model, X)


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------

def _config_to_dict(cfg) -> dict:
    kind = "forest" if isinstance(cfg, ForestConfig) else "gbm"
    return {"kind": kind, **asdict(cfg)}


def _config_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind")
    return ForestConfig(**d) if kind == "forest" else GbmConfig(**d)


def logistic_to_dict(m: LogisticModel) -> dict:
    return {"weights": [float(v) for v in m.weights], "bias": float(m.bias),
            "iterations": int(m.iterations), "grad_norm": float(m.grad_norm)}


def logistic_from_dict(d: dict) -> LogisticModel:
    return LogisticModel(np.array(d["weights"], dtype=np.float64), d["bias"], d["iterations"], d["grad_norm"])


def stack_to_dict(model: StackModel) -> dict:
    cfg = model.config
    return {
        "format": STACK_FORMAT,
        "version": STACK_VERSION,
        "n_features": model.n_features,
        "config": {
            "base_configs": [_config_to_dict(c) for c in cfg.base_configs],
            "meta": asdict(cfg.meta),
            "cv_folds": cfg.cv_folds,
            "passthrough": cfg.passthrough,
            "seed": cfg.seed,
        },
        "bases": [trees.model_to_dict(b) for b in model.bases],
        "meta": logistic_to_dict(model.meta),
    }


def stack_from_dict(d: dict) -> StackModel:
    if d.get("format") != STACK_FORMAT or d.get("version") != STACK_VERSION:
        raise ValueError(f"unsupported stack file: {d.get('format')} v{d.get('version')}")
    c = d["config"]
    cfg = StackConfig([_config_from_dict(x) for x in c["base_configs"]], LogisticParams(**c["meta"]),
                      c["cv_folds"], c["passthrough"], c["seed"])
    return StackModel([trees.model_from_dict(b) for b in d["bases"]], logistic_from_dict(d["meta"]),
                      cfg, d["n_features"])
