"""Binary classification metrics, reports and the nested cross-validation driver."""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import kfold_indices
from .errors import StratificationError, ValidationError


class UndefinedMetricWarning(UserWarning):
    """A metric had a zero denominator and was reported as 0."""


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def grid(self) -> list[list[int]]:
        """Rows are true class 0/1, columns predicted class 0/1."""
        return [[self.tn, self.fp], [self.fn, self.tp]]

    def flipped(self) -> "ConfusionMatrix":
        """The same matrix with class 0 treated as positive."""
        return ConfusionMatrix(tp=self.tn, fp=self.fn, fn=self.fp, tn=self.tp)

    def to_text(self) -> str:
        return "\n".join(",".join(str(v) for v in row) for row in self.grid()) + "\n"


def _binary(a, name):
    a = np.asarray(a)
    if not np.all((a == 0) | (a == 1)):
        raise ValueError(f"{name} must be binary")
    return a.astype(np.int64)


def confusion(pred, truth) -> ConfusionMatrix:
    pred = _binary(pred, "pred")
    truth = _binary(truth, "truth")
    if len(pred) != len(truth):
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(truth)} labels")
    if len(pred) == 0:
        raise ValueError("empty input")
    return ConfusionMatrix(
        tp=int(np.sum((pred == 1) & (truth == 1))),
        fp=int(np.sum((pred == 1) & (truth == 0))),
        fn=int(np.sum((pred == 0) & (truth == 1))),
        tn=int(np.sum((pred == 0) & (truth == 0))),
    )


def _ratio(num, den, what):
    if den == 0:
        warnings.warn(f"{what} is undefined (zero denominator); reported as 0", UndefinedMetricWarning,
                      stacklevel=3)
        return 0.0
    return num / den


def accuracy(cm: ConfusionMatrix) -> float:
    return _ratio(cm.tp + cm.tn, cm.total, "accuracy")


def error_rate(cm: ConfusionMatrix) -> float:
    return _ratio(cm.fp + cm.fn, cm.total, "error rate")


def precision(cm: ConfusionMatrix) -> float:
    return _ratio(cm.tp, cm.tp + cm.fp, "precision")


def recall(cm: ConfusionMatrix) -> float:
    return _ratio(cm.tp, cm.tp + cm.fn, "recall")


def f1(cm: ConfusionMatrix) -> float:
    p, r = precision(cm), recall(cm)
    return _ratio(2 * p * r, p + r, "f1")


def roc_auc(scores, truth) -> float:
    """Mann-Whitney AUC: P(random positive outranks random negative), ties count 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(truth, "truth")
    if len(s) != len(y):
        raise ValueError("scores and truth lengths differ")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUC needs both classes present")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s))
    sorted_s = s[order]
    # average ranks over runs of tied scores
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], len(s)]
    avg = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(avg, ends - starts)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    per_class: dict  # class label -> ClassMetrics
    accuracy: float
    macro: ClassMetrics
    weighted: ClassMetrics
    confusion: ConfusionMatrix
    auc: float | None = None

    @property
    def n(self) -> int:
        return self.confusion.total

    def to_dict(self) -> dict:
        """Flat key-value mapping at full precision."""
        out = {"n": self.n, "accuracy": self.accuracy}
        for name, m in [*((f"class_{c}", m) for c, m in self.per_class.items()),
                        ("macro_avg", self.macro), ("weighted_avg", self.weighted)]:
            out[f"{name}.precision"] = m.precision
            out[f"{name}.recall"] = m.recall
            out[f"{name}.f1"] = m.f1
            out[f"{name}.support"] = m.support
        cm = self.confusion
        out.update({"confusion.tn": cm.tn, "confusion.fp": cm.fp, "confusion.fn": cm.fn, "confusion.tp": cm.tp})
        if self.auc is not None:
            out["auc"] = self.auc
        return out

    def to_keyvalue(self) -> str:
        return "".join(f"{k} = {v!r}\n" for k, v in self.to_dict().items())

    def to_text(self, digits: int = 2) -> str:
        """Aligned text table: per class, accuracy, macro and weighted averages."""
        head = f"{'':>14}{'precision':>11}{'recall':>9}{'f1-score':>10}{'support':>9}"
        rows = [head, ""]

        def fmt(v):
            return f"{v:.{digits}f}"

        for c, m in self.per_class.items():
            rows.append(f"{c:>14}{fmt(m.precision):>11}{fmt(m.recall):>9}{fmt(m.f1):>10}{m.support:>9}")
        rows.append("")
        rows.append(f"{'accuracy':>14}{'':>11}{'':>9}{fmt(self.accuracy):>10}{self.n:>9}")
        for label, m in (("macro avg", self.macro), ("weighted avg", self.weighted)):
            rows.append(f"{label:>14}{fmt(m.precision):>11}{fmt(m.recall):>9}{fmt(m.f1):>10}{m.support:>9}")
        if self.auc is not None:
            rows.append("")
            rows.append(f"{'auc':>14}{fmt(self.auc):>11}")
        return "\n".join(rows) + "\n"


def _class_metrics(cm: ConfusionMatrix) -> ClassMetrics:
    return ClassMetrics(precision(cm), recall(cm), f1(cm), cm.tp + cm.fn)


def report_from_confusion(cm: ConfusionMatrix, auc: float | None = None) -> MetricsReport:
    per_class = {0: _class_metrics(cm.flipped()), 1: _class_metrics(cm)}
    n = cm.total
    macro = ClassMetrics(*(float(np.mean([getattr(m, a) for m in per_class.values()]))
                           for a in ("precision", "recall", "f1")), n)
    wavg = {a: sum(getattr(m, a) * m.support for m in per_class.values()) / n for a in ("precision", "f1")}
    # support-weighted recall is sum(correct_c) / n; count directly so it equals accuracy bit for bit
    wrec = _ratio(cm.tp + cm.tn, n, "weighted recall")
    weighted = ClassMetrics(wavg["precision"], wrec, wavg["f1"], n)
    return MetricsReport(per_class, accuracy(cm), macro, weighted, cm, auc)


def classification_report(pred, truth, scores=None) -> MetricsReport:
    cm = confusion(pred, truth)
    auc = None
    if scores is not None and 0 < cm.tp + cm.fn < cm.total:
        auc = roc_auc(scores, truth)
    return report_from_confusion(cm, auc)


# ---------------------------------------------------------------------------
# Nested cross-validation
# ---------------------------------------------------------------------------

@dataclass
class NestedCvResult:
    fold_scores: list
    mean: float
    std: float
    chosen_params: list = field(default_factory=list)

    @classmethod
    def from_scores(cls, scores: Sequence[float], chosen_params=None) -> "NestedCvResult":
        mean, std = aggregate_scores(scores)
        return cls([float(s) for s in scores], mean, std, list(chosen_params or []))

    def to_csv(self) -> str:
        lines = ["fold,accuracy"]
        lines += [f"{i + 1},{s!r}" for i, s in enumerate(self.fold_scores)]
        lines += [f"mean,{self.mean!r}", f"std,{self.std!r}"]
        return "\n".join(lines) + "\n"


def aggregate_scores(scores: Sequence[float]) -> tuple[float, float]:
    """Arithmetic mean and population (divisor N) standard deviation."""
    a = np.asarray(scores, dtype=np.float64)
    if a.size == 0:
        raise ValueError("no scores to aggregate")
    if np.all(a == a[0]):
        return float(a[0]), 0.0
    mean = math.fsum(a) / a.size
    var = math.fsum((a - mean) ** 2) / a.size
    return mean, math.sqrt(var)


def expand_grid(param_grid) -> list[dict]:
    """Accept a list of dicts, or a dict of value lists (cartesian product in key order)."""
    if isinstance(param_grid, Mapping):
        keys = list(param_grid)
        grid = [dict(zip(keys, combo)) for combo in itertools.product(*(param_grid[k] for k in keys))]
    else:
        grid = [dict(p) for p in param_grid]
    if not grid:
        raise ValueError("parameter grid is empty")
    return grid


def _fold_accuracy(fit_fn, predict_fn, params, X, y, tr, te):
    model = fit_fn(params, X[tr], y[tr])
    pred = (np.asarray(predict_fn(model, X[te])) > 0.5).astype(np.int64)
    return float(np.mean(pred == y[te]))


def _stratified_folds(n, k, y, seed, where):
    if k > n:
        raise ValidationError(f"{where}: {n} rows cannot form {k} folds")
    folds = kfold_indices(n, k, labels=y, seed=seed)
    for f, (tr, _) in enumerate(folds):
        if len(np.unique(y[tr])) < 2:
            raise StratificationError(f"{where}: fold {f} training part holds a single class")
    return folds


def nested_cv(fit_fn: Callable, param_grid, X, y, outer_k: int = 10, inner_k: int = 3,
              seed: int = 0, predict_fn: Callable | None = None) -> NestedCvResult:
    """Outer stratified CV for scoring around inner stratified CV for selection.

    ``fit_fn(params, X, y)`` returns a model; ``predict_fn(model, X)`` returns
    positive-class probabilities (defaults to the package-wide
    ``stacking.predict_proba``).  Grid ties go to the earliest point.
    """
    if outer_k < 2 or inner_k < 2:
        raise ValueError("outer_k and inner_k must be >= 2")
    if predict_fn is None:
        from .stacking import predict_proba as predict_fn
    grid = expand_grid(param_grid)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    scores, chosen = [], []
    for o, (otr, ote) in enumerate(_stratified_folds(len(y), outer_k, y, seed, "outer")):
        Xo, yo = X[otr], y[otr]
        if len(grid) == 1:
            best = grid[0]
        else:
            inner = _stratified_folds(len(yo), inner_k, yo, seed + 1 + o, f"outer fold {o} inner")
            means = [np.mean([_fold_accuracy(fit_fn, predict_fn, p, Xo, yo, itr, ite) for itr, ite in inner])
                     for p in grid]
            best = grid[int(np.argmax(means))]
        chosen.append(best)
        scores.append(_fold_accuracy(fit_fn, predict_fn, best, X, y, otr, ote))
    return NestedCvResult.from_scores(scores, chosen)
