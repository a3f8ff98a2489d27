"""Experiment steps behind the command-line interface.

Each ``run_*`` function reads an :class:`ExperimentConfig`, writes its data
files into ``out_dir`` and returns a small dict of headline numbers.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import data, explain, fed, nn, stacking, trees
from .config import ExperimentConfig, ForestSection, GbmSection
from .data import ImuDataset, SplitSpec
from .errors import SchemaError
from .evaluation import classification_report, nested_cv, NestedCvResult

logger = logging.getLogger(__name__)


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

def load_dataset(cfg: ExperimentConfig, with_reports: bool = False):
    """Build the combined dataset named by ``cfg.data``."""
    dc = cfg.data
    reports = []
    if dc.source == "synthetic":
        s = dc.synthetic
        ds = data.generate_synthetic(s.n_users, s.samples_per_user, s.positive_ratio, s.seed,
                                     s.separation, s.user_spread)
    else:
        parts, uids = [], []
        for f in dc.files:
            part, rep = data.load_csv_with_report(f.path, dc.columns)
            parts.append(part)
            uids.append(f.user_id)
            reports.append(rep)
        ds = data.merge_users(parts, uids) if "user_id" not in dc.columns else _concat(parts)
    return (ds, reports) if with_reports else ds


def _concat(parts):
    return ImuDataset(np.concatenate([p.features for p in parts]), np.concatenate([p.labels for p in parts]),
                      np.concatenate([p.user_ids for p in parts]))


def tabular_split(cfg: ExperimentConfig, ds: ImuDataset | None = None):
    """(X_train, y_train, X_test, y_test) over the 7 raw columns."""
    ds = load_dataset(cfg) if ds is None else ds
    pp = cfg.preprocess
    if pp.balance_ratio is not None:
        ds = data.downsample_balance(ds, pp.balance_ratio, pp.balance_seed)
    train, test = data.train_test_split(ds, SplitSpec(pp.split.test_fraction, pp.split.seed, pp.split.stratified))
    return train.features, train.labels, test.features, test.labels


# ---------------------------------------------------------------------------
# Model construction
# ---------------------------------------------------------------------------

def forest_config(sec: ForestSection) -> trees.ForestConfig:
    return trees.ForestConfig(**asdict(sec))


def gbm_config(sec: GbmSection) -> trees.GbmConfig:
    return trees.GbmConfig(**asdict(sec))


def stack_config(cfg: ExperimentConfig, **overrides) -> stacking.StackConfig:
    sec = cfg.central.stack
    depth = overrides.pop("base_depth", sec.base_depth)
    n_est = overrides.pop("base_estimators", sec.base_estimators)
    bases = [
        replace(c, max_depth=depth, n_estimators=n_est) if isinstance(c, trees.ForestConfig)
        else replace(c, depth=depth, iterations=n_est)
        for c in stacking.default_base_configs(sec.seed)
    ]
    meta = stacking.LogisticParams(**asdict(sec.meta))
    kw = dict(cv_folds=sec.cv_folds, passthrough=sec.passthrough, seed=sec.seed)
    kw.update(overrides)
    return stacking.StackConfig(bases, meta, **kw)


def model_fitter(cfg: ExperimentConfig, name: str):
    """``fit(params, X, y)`` for the named model; params override config fields."""
    central = cfg.central

    def fit(params, X, y):
        params = dict(params)
        if name == "stack":
            return stacking.fit_stack(X, y, stack_config(cfg, **params))
        if name == "gbm":
            return trees.fit_gbm(X, y, replace(gbm_config(central.gbm), **params))
        sec = central.random_forest if name == "random_forest" else central.extra_trees
        return trees.fit_forest(X, y, replace(forest_config(sec), **params))

    return fit


def model_to_dict(model) -> dict:
    if isinstance(model, stacking.StackModel):
        return stacking.stack_to_dict(model)
    return trees.model_to_dict(model)


def model_from_dict(d: dict):
    if d.get("format") == stacking.STACK_FORMAT:
        return stacking.stack_from_dict(d)
    return trees.model_from_dict(d)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def run_ingest(cfg: ExperimentConfig, out: Path) -> dict:
    ds, reports = load_dataset(cfg, with_reports=True)
    data.write_csv(ds, out / "dataset.csv")
    n0, n1 = ds.class_counts()
    lines = [f"samples = {len(ds)}", f"class_0 = {n0}", f"class_1 = {n1}",
             f"users = {','.join(str(u) for u in ds.users())}"]
    for i, rep in enumerate(reports):
        lines += [f"file.{i}.{line}" for line in rep.to_text().splitlines()]
    write_text(out / "ingest_report.txt", "\n".join(lines) + "\n")
    return {"samples": len(ds), "files": len(reports)}


def run_synth(cfg: ExperimentConfig, out: Path) -> dict:
    s = cfg.data.synthetic
    ds = data.generate_synthetic(s.n_users, s.samples_per_user, s.positive_ratio, s.seed,
                                 s.separation, s.user_spread)
    data.write_csv(ds, out / "synthetic.csv", cfg.data.columns)
    n0, n1 = ds.class_counts()
    write_text(out / "synthetic_report.txt",
               f"samples = {len(ds)}\nclass_0 = {n0}\nclass_1 = {n1}\nusers = {s.n_users}\n")
    return {"samples": len(ds)}


def run_train_central(cfg: ExperimentConfig, out: Path) -> dict:
    Xtr, ytr, Xte, yte = tabular_split(cfg)
    rows = ["model,train_accuracy,test_accuracy"]
    results = {}
    for name in cfg.central.models:
        model = model_fitter(cfg, name)({}, Xtr, ytr)
        p_tr = stacking.predict_proba(model, Xtr)
        p_te = stacking.predict_proba(model, Xte)
        train_acc = float(np.mean((p_tr > 0.5) == ytr))
        report = classification_report((p_te > 0.5).astype(int), yte, p_te)
        rows.append(f"{name},{train_acc!r},{report.accuracy!r}")
        write_text(out / f"report_{name}.txt", report.to_text())
        write_text(out / f"report_{name}.kv", report.to_keyvalue())
        write_text(out / f"confusion_{name}.csv", report.confusion.to_text())
        write_text(out / f"model_{name}.json", dump_json(model_to_dict(model)))
        results[name] = report.accuracy
    write_text(out / "accuracy_table.csv", "\n".join(rows) + "\n")
    return results


def run_nested_cv(cfg: ExperimentConfig, out: Path) -> NestedCvResult:
    sec = cfg.nested_cv
    if sec.fold_scores is not None:
        result = NestedCvResult.from_scores(sec.fold_scores)
    else:
        Xtr, ytr, Xte, yte = tabular_split(cfg)
        X = np.concatenate([Xtr, Xte])
        y = np.concatenate([ytr, yte])
        grid = sec.grid or [{}]
        result = nested_cv(model_fitter(cfg, sec.model), grid, X, y, sec.outer_k, sec.inner_k, sec.seed)
    write_text(out / "nested_cv.csv", result.to_csv())
    write_text(out / "nested_cv_params.json", dump_json(result.chosen_params))
    return result


def run_explain(cfg: ExperimentConfig, out: Path, model_path: Path | None = None) -> explain.ShapSummary:
    sec = cfg.explain
    Xtr, ytr, Xte, yte = tabular_split(cfg)
    if model_path is not None:
        model = model_from_dict(json.loads(Path(model_path).read_text(encoding="utf-8")))
    else:
        model = model_fitter(cfg, sec.model)({}, Xtr, ytr)
    if getattr(model, "n_features", Xtr.shape[1]) != Xtr.shape[1]:
        raise SchemaError("model feature count does not match the configured dataset")
    bg = explain.background_sample(Xtr, sec.background_size, sec.seed)
    rng = np.random.default_rng(sec.seed)
    n = min(sec.n_samples, len(Xte))
    rows = np.sort(rng.choice(len(Xte), size=n, replace=False))
    attributions = explain.explain_rows(lambda Z: stacking.predict_proba(model, Z), Xte[rows], bg)
    summary = explain.summarize(attributions, list(data.FEATURE_NAMES))
    explain.write_bar_csv(summary, out / "shap_bar.csv")
    explain.write_beeswarm_csv(summary, out / "shap_beeswarm.csv")
    meta = {
        "model": sec.model if model_path is None else str(Path(model_path).name),
        "explained_output": "positive-class probability",
        "background": {"source": "training split", "size": len(bg), "seed": sec.seed},
        "explained_rows": [int(r) for r in rows],
        "max_efficiency_gap": max(abs(float(a.phi.sum()) + a.base_value - a.output) for a in attributions),
    }
    write_text(out / "explain_meta.json", dump_json(meta))
    return summary


def fed_config(cfg: ExperimentConfig) -> fed.FedConfig:
    f = cfg.federated
    local = nn.TrainConfig(seed=cfg.seed, **asdict(f.local))
    kw = {k: v for k, v in asdict(f).items() if k != "local"}
    return fed.FedConfig(local=local, seed=cfg.seed, **kw)


def run_federate(cfg: ExperimentConfig, out: Path) -> tuple[fed.FedRun, fed.UserSummary]:
    ds = load_dataset(cfg)
    fcfg = fed_config(cfg)
    clients, test_set = fed.build_clients(ds, fcfg)
    run = fed.run_rounds(clients, test_set, fcfg, keep_checkpoints=True)
    summary = fed.user_summary(run.logs)
    write_text(out / "rounds.jsonl", "".join(json.dumps(log.to_record(), sort_keys=True) + "\n" for log in run.logs))
    trend = ["round,accuracy,f1,auc"]
    for log in run.logs:
        g = log.global_metrics
        trend.append(f"{log.round},{g.accuracy!r},{g.per_class[1].f1!r},{g.auc!r}")
    write_text(out / "trend.csv", "\n".join(trend) + "\n")
    write_text(out / "user_summary.txt", summary.to_text())
    write_text(out / "user_summary.json", dump_json(summary.to_dict()))
    final = run.logs[-1].global_metrics
    write_text(out / "global_report.txt", final.to_text())
    write_text(out / "global_report.kv", final.to_keyvalue())
    write_text(out / "global_confusion.csv", final.confusion.to_text())
    ckpt = out / "checkpoints"
    ckpt.mkdir(parents=True, exist_ok=True)
    for r, w in enumerate(run.checkpoints, start=1):
        nn.save_weights(ckpt / f"round_{r:02d}.json", w, run.specs)
    return run, summary
