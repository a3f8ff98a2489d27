"""Experiment configuration: a closed, versioned YAML schema.

Every section is a dataclass; unknown keys anywhere are rejected.  The
fully resolved config (defaults expanded) is written beside each run's
outputs.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import DEFAULT_SCHEMA
from .errors import SchemaError

CONFIG_VERSION = 1
MODEL_NAMES = ("random_forest", "extra_trees", "gbm", "stack")


@dataclass
class SourceFile:
    path: str = ""
    user_id: int = 0


@dataclass
class SyntheticSection:
    n_users: int = 3
    samples_per_user: int = 2000
    positive_ratio: float = 0.5
    seed: int = 7
    separation: float = 1.0
    user_spread: float = 1.0


@dataclass
class DataSection:
    source: str = "synthetic"  # synthetic | csv
    files: list[SourceFile] = field(default_factory=list)
    columns: dict = field(default_factory=lambda: dict(DEFAULT_SCHEMA))
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)


@dataclass
class SplitSection:
    test_fraction: float = 0.2
    seed: int = 42
    stratified: bool = True


@dataclass
class PreprocessSection:
    balance_ratio: typing.Optional[float] = None  # None: keep all rows
    balance_seed: int = 42
    split: SplitSection = field(default_factory=SplitSection)


@dataclass
class ForestSection:
    n_estimators: int = 10
    max_depth: int = 0
    min_samples_split: int = 2
    min_samples_leaf: int = 1
    criterion: str = "gini"
    splitter: str = "best"
    bootstrap: bool = True
    max_features: str = "sqrt"
    seed: int = 42


def _rf_default():
    return ForestSection(n_estimators=50, max_depth=2)


def _et_default():
    return ForestSection(n_estimators=10, max_depth=0, min_samples_leaf=4, criterion="entropy",
                         splitter="random", bootstrap=False)


@dataclass
class GbmSection:
    iterations: int = 50
    depth: int = 3
    learning_rate: float = 0.01
    l2_leaf_reg: float = 1.0
    seed: int = 42


@dataclass
class MetaSection:
    lr: float = 0.1
    max_iters: int = 5000
    tol: float = 1e-6
    l2: float = 1e-4


@dataclass
class StackSection:
    cv_folds: int = 10
    passthrough: bool = False
    seed: int = 42
    base_depth: int = 3
    base_estimators: int = 10
    meta: MetaSection = field(default_factory=MetaSection)


@dataclass
class CentralSection:
    models: list[str] = field(default_factory=lambda: list(MODEL_NAMES))
    random_forest: ForestSection = field(default_factory=_rf_default)
    extra_trees: ForestSection = field(default_factory=_et_default)
    gbm: GbmSection = field(default_factory=GbmSection)
    stack: StackSection = field(default_factory=StackSection)


@dataclass
class NestedCvSection:
    model: str = "stack"
    outer_k: int = 10
    inner_k: int = 3
    seed: int = 42
    grid: dict = field(default_factory=dict)
    fold_scores: typing.Optional[list[float]] = None  # aggregate these instead of running


@dataclass
class ExplainSection:
    model: str = "stack"
    n_samples: int = 50
    background_size: int = 100
    seed: int = 0


@dataclass
class LocalTrainSection:
    learning_rate: float = 0.001
    batch_size: int = 32
    max_epochs: int = 40
    l2_lambda: float = 0.0
    patience: int = 5
    validation_fraction: float = 0.2


@dataclass
class FederatedSection:
    rounds: int = 10
    min_samples_per_user: int = 20
    window_len: int = 32
    stride: int = 16
    label_rule: str = "majority"
    test_fraction: float = 0.2
    balance_ratio: float = 1.0
    units: int = 64
    filters: int = 64
    kernel_size: int = 3
    dropout: float = 0.3
    local: LocalTrainSection = field(default_factory=LocalTrainSection)


@dataclass
class ExperimentConfig:
    version: int = CONFIG_VERSION
    seed: int = 42
    output_dir: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    central: CentralSection = field(default_factory=CentralSection)
    nested_cv: NestedCvSection = field(default_factory=NestedCvSection)
    explain: ExplainSection = field(default_factory=ExplainSection)
    federated: FederatedSection = field(default_factory=FederatedSection)

    def validate(self) -> "ExperimentConfig":
        if self.version != CONFIG_VERSION:
            raise SchemaError(f"unsupported config version {self.version}; expected {CONFIG_VERSION}")
        if self.data.source not in ("synthetic", "csv"):
            raise SchemaError(f"data.source must be 'synthetic' or 'csv', got {self.data.source!r}")
        if self.data.source == "csv" and not self.data.files:
            raise SchemaError("data.files must list at least one CSV when data.source is 'csv'")
        for m in self.central.models:
            if m not in MODEL_NAMES:
                raise SchemaError(f"central.models: unknown model {m!r}")
        for m in (self.nested_cv.model, self.explain.model):
            if m not in MODEL_NAMES:
                raise SchemaError(f"unknown model {m!r}")
        return self


def _build(cls, raw, path: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise SchemaError(f"{path or 'config'}: expected a mapping, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise SchemaError(f"unknown key {path + '.' if path else ''}{unknown[0]}")
    kwargs = {}
    for name, value in raw.items():
        kwargs[name] = _coerce(hints[name], value, f"{path}.{name}" if path else name)
    return cls(**kwargs)


def _coerce(tp, value, path):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return None if value is None else _coerce(args[0], value, path)
    if origin is list:
        if not isinstance(value, list):
            raise SchemaError(f"{path}: expected a list")
        (item,) = typing.get_args(tp) or (object,)
        return [_coerce(item, v, f"{path}[{i}]") for i, v in enumerate(value)]
    if tp is dict or origin is dict:
        if not isinstance(value, dict):
            raise SchemaError(f"{path}: expected a mapping")
        return dict(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise SchemaError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise SchemaError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SchemaError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise SchemaError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def config_from_dict(raw: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, raw, "").validate()


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise SchemaError(f"{path}: invalid YAML: {exc}") from None
    return config_from_dict(raw or {})


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.key=value`` overrides to a raw config mapping (values parsed as YAML)."""
    raw = dict(raw or {})
    for item in overrides:
        if "=" not in item:
            raise SchemaError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for p in parts[:-1]:
            child = node.get(p)
            node[p] = dict(child) if isinstance(child, dict) else {}
            node = node[p]
        node[parts[-1]] = yaml.safe_load(text)
    return raw


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True, default_flow_style=False)
