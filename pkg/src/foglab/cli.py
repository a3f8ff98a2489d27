"""``foglab`` command line: ingest | synth | train-central | nested-cv | explain | federate.

Exit codes: 0 success, 2 config or validation error, 3 runtime or numeric error.
"""

from __future__ import annotations

import json
import logging
import os
import platform
import sys
import time
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np
import yaml

from . import __version__, experiments
from .config import ExperimentConfig, apply_overrides, config_from_dict, dump_config
from .errors import FogLabError, NumericError, ParseError, SchemaError, ValidationError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
LOCK_NAME = ".foglab.lock"
META_NAME = "run_meta.json"


class ConfigFailure(click.ClickException):
    exit_code = EXIT_CONFIG


class RuntimeFailure(click.ClickException):
    exit_code = EXIT_RUNTIME


def _load(config_path, overrides, out_dir) -> ExperimentConfig:
    raw = {}
    if config_path:
        try:
            raw = yaml.safe_load(Path(config_path).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigFailure(f"cannot read config {config_path}: {exc}")
    try:
        raw = apply_overrides(raw, list(overrides))
        if out_dir:
            raw["output_dir"] = str(out_dir)
        return config_from_dict(raw)
    except (SchemaError, ValueError, TypeError) as exc:
        raise ConfigFailure(str(exc))


@contextmanager
def _output_dir(path: Path):
    path.mkdir(parents=True, exist_ok=True)
    lock = path / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeFailure(f"{path} is locked by another run (remove {lock} if stale)")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield path
    finally:
        lock.unlink(missing_ok=True)


def _run(command: str, cfg: ExperimentConfig, step):
    out = Path(cfg.output_dir)
    started = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    with _output_dir(out):
        (out / "config.resolved.yaml").write_text(dump_config(cfg), encoding="utf-8")
        try:
            result = step(out)
        except (SchemaError, ParseError, ValidationError) as exc:
            raise ConfigFailure(str(exc))
        except NumericError as exc:
            raise RuntimeFailure(str(exc))
        except FogLabError as exc:
            raise RuntimeFailure(str(exc))
        except (ValueError, TypeError, NotImplementedError) as exc:
            raise ConfigFailure(str(exc))
        except FileNotFoundError as exc:
            raise ConfigFailure(str(exc))
        except (ArithmeticError, np.linalg.LinAlgError) as exc:
            raise RuntimeFailure(str(exc))
        meta = {
            "command": command,
            "started_utc": started,
            "duration_s": time.perf_counter() - t0,
            "foglab_version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
        }
        if command == "federate":
            meta["round_durations_s"] = [log.duration_s for log in result[0].logs]
        (out / META_NAME).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return result


_config_opt = click.option("--config", "config_path", type=click.Path(dir_okay=False),
                           help="YAML experiment config.")
_set_opt = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                        help="Override a config key, e.g. --set federated.rounds=3 (repeatable).")
_out_opt = click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Output directory.")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
@click.version_option(__version__, prog_name="foglab")
def main(verbose):
    """Freezing-of-gait detection experiments."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@_config_opt
@_set_opt
@_out_opt
def ingest(config_path, overrides, out_dir):
    """Validate and combine the configured CSV sources into dataset.csv."""
    cfg = _load(config_path, overrides, out_dir)
    res = _run("ingest", cfg, lambda out: experiments.run_ingest(cfg, out))
    click.echo(f"ingested {res['samples']} samples -> {cfg.output_dir}")


@main.command()
@_config_opt
@_set_opt
@_out_opt
def synth(config_path, overrides, out_dir):
    """Write the synthetic multi-user fixture as CSV."""
    cfg = _load(config_path, overrides, out_dir)
    res = _run("synth", cfg, lambda out: experiments.run_synth(cfg, out))
    click.echo(f"wrote {res['samples']} synthetic samples -> {cfg.output_dir}")


@main.command("train-central")
@_config_opt
@_set_opt
@_out_opt
def train_central(config_path, overrides, out_dir):
    """Train the centralized models and write reports and confusion grids."""
    cfg = _load(config_path, overrides, out_dir)
    res = _run("train-central", cfg, lambda out: experiments.run_train_central(cfg, out))
    for name, acc in res.items():
        click.echo(f"{name:>14}  test accuracy {acc:.4f}")


@main.command("nested-cv")
@_config_opt
@_set_opt
@_out_opt
def nested_cv_cmd(config_path, overrides, out_dir):
    """Nested cross-validation of the configured model."""
    cfg = _load(config_path, overrides, out_dir)
    res = _run("nested-cv", cfg, lambda out: experiments.run_nested_cv(cfg, out))
    click.echo(f"mean {res.mean:.4f}  std {res.std:.4f}  over {len(res.fold_scores)} folds")


@main.command("explain")
@_config_opt
@_set_opt
@_out_opt
@click.option("--model", "model_path", type=click.Path(dir_okay=False, exists=True),
              help="Model file from train-central; trained afresh when omitted.")
def explain_cmd(config_path, overrides, out_dir, model_path):
    """Exact Shapley attributions; writes bar and beeswarm data."""
    cfg = _load(config_path, overrides, out_dir)
    summary = _run("explain", cfg, lambda out: experiments.run_explain(cfg, out, model_path))
    for name, value in summary.bar_rows():
        click.echo(f"{name:>8}  {value:.5f}")


@main.command()
@_config_opt
@_set_opt
@_out_opt
def federate(config_path, overrides, out_dir):
    """Federated Conv1D+LSTM training with FedAvg."""
    cfg = _load(config_path, overrides, out_dir)
    run, summary = _run("federate", cfg, lambda out: experiments.run_federate(cfg, out))
    g = run.logs[-1].global_metrics
    click.echo(f"global accuracy {g.accuracy:.4f}  f1 {g.per_class[1].f1:.4f}  "
               f"user mean accuracy {summary.mean_accuracy:.4f}")


if __name__ == "__main__":
    sys.exit(main())
