"""Exact (interventional) Shapley attributions over a handful of features."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

MAX_EXACT_FEATURES = 20


@dataclass
class Attribution:
    phi: np.ndarray
    base_value: float
    feature_values: np.ndarray
    output: float  # model output on the explained sample


@dataclass
class ShapSummary:
    feature_names: list
    mean_abs: np.ndarray
    ranking: list           # feature indices, most important first
    triplets: list          # (sample_index, feature_index, phi, feature_value)

    def bar_rows(self) -> list[tuple[str, float]]:
        return [(self.feature_names[i], float(self.mean_abs[i])) for i in self.ranking]


def _coalition_weights(d: int) -> np.ndarray:
    """Shapley kernel |S|! (d-|S|-1)! / d! indexed by |S|."""
    return np.array([math.factorial(s) * math.factorial(d - s - 1) / math.factorial(d) for s in range(d)])


def coalition_values(predict_fn: Callable, x, background) -> np.ndarray:
    """v(S) for every bitmask S: mean model output with x on S, background elsewhere."""
    x = np.asarray(x, dtype=np.float64)
    bg = np.asarray(background, dtype=np.float64)
    d = x.shape[0]
    m = len(bg)
    masks = ((np.arange(2 ** d)[:, None] >> np.arange(d)[None, :]) & 1).astype(bool)  # (2^d, d)
    composite = np.where(masks[:, None, :], x[None, None, :], bg[None, :, :])  # (2^d, m, d)
    out = np.asarray(predict_fn(composite.reshape(-1, d)), dtype=np.float64).reshape(2 ** d, m)
    return out.mean(axis=1)


def shapley_exact(predict_fn: Callable, x, background) -> Attribution:
    """Exact Shapley values by enumerating all 2^d coalitions.

    ``predict_fn`` maps an (n, d) array to n outputs.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    bg = np.asarray(background, dtype=np.float64)
    if bg.ndim != 2 or len(bg) == 0:
        raise ValueError("background must be a non-empty 2-D array")
    d = x.shape[0]
    if bg.shape[1] != d:
        raise ValueError(f"background has {bg.shape[1]} features, sample has {d}")
    if d > MAX_EXACT_FEATURES:
        raise ValueError(f"{d} features is too many for exact enumeration; use sampling")
    v = coalition_values(predict_fn, x, bg)
    w = _coalition_weights(d)
    sizes = np.array([bin(s).count("1") for s in range(2 ** d)])
    phi = np.zeros(d)
    for i in range(d):
        bit = 1 << i
        without = np.array([s for s in range(2 ** d) if not s & bit])
        phi[i] = float(np.sum(w[sizes[without]] * (v[without | bit] - v[without])))
    return Attribution(phi, float(v[0]), x.copy(), float(v[-1]))


def explain_rows(predict_fn: Callable, X, background) -> list[Attribution]:
    return [shapley_exact(predict_fn, x, background) for x in np.asarray(X, dtype=np.float64)]


def background_sample(X, size: int = 100, seed: int = 0) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if len(X) <= size:
        return X.copy()
    idx = np.sort(np.random.default_rng(seed).choice(len(X), size=size, replace=False))
    return X[idx]


def summarize(attributions: Sequence[Attribution], feature_names: Sequence[str] | None = None) -> ShapSummary:
    """Mean |phi| ranking (ties by feature index) and beeswarm triplets."""
    if not attributions:
        raise ValueError("no attributions to summarise")
    d = len(attributions[0].phi)
    if any(len(a.phi) != d for a in attributions):
        raise ValueError("attributions have inconsistent dimensions")
    names = list(feature_names) if feature_names is not None else [f"x{i}" for i in range(d)]
    phis = np.array([a.phi for a in attributions])
    mean_abs = np.abs(phis).mean(axis=0)
    ranking = [int(i) for i in np.argsort(-mean_abs, kind="stable")]
    triplets = [
        (s, i, float(a.phi[i]), float(a.feature_values[i]))
        for s, a in enumerate(attributions) for i in ranking
    ]
    return ShapSummary(names, mean_abs, ranking, triplets)


def write_bar_csv(summary: ShapSummary, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature_name", "mean_abs_shap"])
        for name, value in summary.bar_rows():
            w.writerow([name, repr(value)])


def write_beeswarm_csv(summary: ShapSummary, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_index", "feature_name", "feature_value", "shap_value"])
        for s, i, phi, val in summary.triplets:
            w.writerow([s, summary.feature_names[i], repr(val), repr(phi)])
