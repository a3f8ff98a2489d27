"""Single-process federated learning simulation with sample-weighted FedAvg.

Clients keep their windows private.  Everything that crosses the client
boundary is a :class:`ClientUpdate` (weights, sample count, epochs, local
metrics) or a :class:`ChannelStats` triple of sums.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .data import (ImuDataset, SplitSpec, WindowSet, balance_windows, make_windows,
                   partition_by_user, split_indices)
from .errors import AggregationError, StratificationError, ValidationError
from .evaluation import MetricsReport, aggregate_scores, classification_report

logger = logging.getLogger(__name__)


@dataclass
class FedConfig:
    rounds: int = 10
    min_samples_per_user: int = 20
    local: nn.TrainConfig = field(default_factory=lambda: nn.TrainConfig(max_epochs=40, patience=5))
    seed: int = 42
    window_len: int = 32
    stride: int = 16
    label_rule: str = "majority"
    test_fraction: float = 0.2
    balance_ratio: float = 1.0
    units: int = 64
    filters: int = 64
    kernel_size: int = 3
    dropout: float = 0.3

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.min_samples_per_user < 1:
            raise ValueError("min_samples_per_user must be positive")

    def architecture(self) -> list:
        return nn.default_architecture(self.units, self.dropout, self.filters, self.kernel_size)


@dataclass(frozen=True)
class ChannelStats:
    count: int
    total: np.ndarray
    total_sq: np.ndarray


@dataclass
class ClientUpdate:
    user_id: int
    weights: dict
    n_k: int
    epochs_run: int
    metrics: MetricsReport | None


class ClientState:
    """One user's private data plus the state of its latest local model."""

    def __init__(self, user_id: int, train: WindowSet, test: WindowSet | None = None):
        self.user_id = int(user_id)
        self._train = train
        self._test = test
        self._scale = None
        self.weights = None
        self.epochs_run = 0
        self.metrics = None

    @property
    def n_k(self) -> int:
        return len(self._train)

    def channel_stats(self) -> ChannelStats:
        flat = self._train.windows.reshape(-1, self._train.windows.shape[-1])
        return ChannelStats(len(flat), flat.sum(axis=0), (flat ** 2).sum(axis=0))

    def set_scaling(self, mean, std) -> None:
        self._scale = (np.asarray(mean), np.asarray(std))

    def _scaled(self, ws: WindowSet) -> WindowSet:
        if self._scale is None:
            return ws
        mean, std = self._scale
        return WindowSet((ws.windows - mean) / std, ws.labels, ws.user_ids, ws.window_len, ws.stride)

    def local_fit(self, global_weights, specs, cfg: nn.TrainConfig) -> nn.FitResult:
        return nn.fit(self._scaled(self._train), cfg, specs, initial_weights=global_weights)

    def local_evaluate(self, weights, specs) -> MetricsReport:
        ws = self._test if self._test is not None and len(self._test) else self._train
        ws = self._scaled(ws)
        probs = nn.predict(weights, specs, ws.windows)
        return classification_report(nn.hard_labels(probs), ws.labels, probs)

    def class_counts(self):
        return self._train.class_counts()


def combine_channel_stats(stats: list[ChannelStats]) -> tuple[np.ndarray, np.ndarray]:
    """Pooled per-channel mean and standard deviation from client sums."""
    count = sum(s.count for s in stats)
    total = sum(s.total for s in stats)
    total_sq = sum(s.total_sq for s in stats)
    mean = total / count
    var = np.maximum(total_sq / count - mean ** 2, 0.0)
    std = np.sqrt(var)
    std[std == 0] = 1.0
    return mean, std


def train_user_model(client: ClientState, global_weights, cfg: FedConfig, specs=None,
                     round_index: int = 0) -> ClientUpdate | None:
    """Local training from the broadcast weights; returns None when skipped."""
    specs = specs or cfg.architecture()
    n0, n1 = client.class_counts()
    if n0 == 0 or n1 == 0:
        logger.warning("round %d: user %d skipped, local data holds a single class",
                       round_index, client.user_id)
        return None
    local_cfg = replace(cfg.local, seed=cfg.seed + 1000 * round_index + client.user_id)
    result = client.local_fit(global_weights, specs, local_cfg)
    client.weights = result.weights
    client.epochs_run = result.epochs_run
    client.metrics = client.local_evaluate(result.weights, specs)
    return ClientUpdate(client.user_id, result.weights, client.n_k, result.epochs_run, client.metrics)


def federated_average(updates) -> dict:
    """Sample-weighted mean of client weights: sum_k (n_k / n) * w_k.

    ``updates`` is a sequence of ``(weights, n_k)`` pairs, summed left to
    right, or of :class:`ClientUpdate` objects, summed by ascending user_id.
    """
    updates = list(updates)
    if updates and all(isinstance(u, ClientUpdate) for u in updates):
        updates.sort(key=lambda u: u.user_id)  # canonical summation order
    pairs = [(u.weights, u.n_k) if isinstance(u, ClientUpdate) else tuple(u) for u in updates]
    if not pairs:
        raise ValueError("no client updates to aggregate")
    ref = pairs[0][0]
    for w, n_k in pairs:
        if n_k <= 0:
            raise ValueError(f"client sample count must be positive, got {n_k}")
        if list(w) != list(ref) or any(w[k].shape != ref[k].shape for k in ref):
            raise AggregationError("client weight layouts differ")
    n = float(sum(n_k for _, n_k in pairs))
    out = {}
    for name in ref:
        acc = np.zeros_like(ref[name], dtype=np.float64)
        for w, n_k in pairs:
            acc = acc + (n_k / n) * np.asarray(w[name], dtype=np.float64)
        stack = [w[name] for w, _ in pairs]
        # rounding may step an ulp outside the clients' range; the mean may not
        out[name] = np.clip(acc, np.minimum.reduce(stack), np.maximum.reduce(stack))
    return out


@dataclass
class RoundLog:
    round: int
    clients: list       # dicts: user_id, n_k, epochs_run, metrics
    global_metrics: MetricsReport
    duration_s: float = 0.0

    def to_record(self) -> dict:
        """Deterministic record; wall-clock duration is kept out on purpose."""
        return {
            "round": self.round,
            "clients": [
                {"user_id": c["user_id"], "n_k": c["n_k"], "epochs_run": c["epochs_run"],
                 "metrics": c["metrics"].to_dict() if c["metrics"] is not None else None}
                for c in self.clients
            ],
            "global": self.global_metrics.to_dict(),
        }


def evaluate_global(weights, specs, test_set: WindowSet, scale=None) -> MetricsReport:
    x = test_set.windows
    if scale is not None:
        x = (x - scale[0]) / scale[1]
    probs = nn.predict(weights, specs, x)
    return classification_report(nn.hard_labels(probs), test_set.labels, probs)


@dataclass
class FedRun:
    weights: dict
    logs: list
    specs: list
    scale: tuple
    checkpoints: list = field(default_factory=list)


def run_rounds(clients: list[ClientState], test_set: WindowSet, cfg: FedConfig, specs=None,
               keep_checkpoints: bool = False) -> FedRun:
    """Broadcast, train locally, aggregate and evaluate for ``cfg.rounds`` rounds."""
    if not clients:
        raise ValidationError("no qualifying clients")
    specs = specs or cfg.architecture()
    clients = sorted(clients, key=lambda c: c.user_id)
    mean, std = combine_channel_stats([c.channel_stats() for c in clients])
    for c in clients:
        c.set_scaling(mean, std)
    input_shape = (test_set.window_len, test_set.windows.shape[-1])
    global_w = nn.init_weights(specs, input_shape, cfg.seed)
    logs, checkpoints = [], []
    for r in range(1, cfg.rounds + 1):
        start = time.perf_counter()
        updates = []
        for c in clients:
            upd = train_user_model(c, global_w, cfg, specs, r)
            if upd is not None:
                updates.append(upd)
        if not updates:
            raise ValidationError(f"round {r}: every client was skipped")
        global_w = federated_average(updates)
        report = evaluate_global(global_w, specs, test_set, (mean, std))
        entries = [{"user_id": u.user_id, "n_k": u.n_k, "epochs_run": u.epochs_run, "metrics": u.metrics}
                   for u in updates]
        logs.append(RoundLog(r, entries, report, time.perf_counter() - start))
        if keep_checkpoints:
            checkpoints.append(global_w)
        logger.info("round %d: global accuracy %.4f", r, report.accuracy)
    return FedRun(global_w, logs, specs, (mean, std), checkpoints)


def build_clients(ds: ImuDataset, cfg: FedConfig) -> tuple[list[ClientState], WindowSet]:
    """Per-user windows, a stratified per-user holdout, and locally balanced clients.

    The union of the per-user holdouts is the global test set.
    """
    parts = partition_by_user(ds, cfg.min_samples_per_user)
    clients, tests = [], []
    for uid, part in parts.items():
        try:
            ws = make_windows(part, cfg.window_len, cfg.stride, cfg.label_rule)
        except ValidationError:
            logger.warning("user %d excluded: too short for one window", uid)
            continue
        split = SplitSpec(cfg.test_fraction, cfg.seed + uid, stratified=True)
        try:
            tr, te = split_indices(ws.labels, split)
        except StratificationError as exc:
            logger.warning("user %d excluded: %s", uid, exc)
            continue
        train, test = ws.subset(tr), ws.subset(te)
        try:
            train = balance_windows(train, cfg.balance_ratio, cfg.seed + uid)
        except ValidationError:
            pass  # single-class client; train_user_model skips it with a logged reason
        if len(train) < cfg.min_samples_per_user:
            logger.warning("user %d excluded: %d training windows < %d", uid, len(train),
                           cfg.min_samples_per_user)
            continue
        clients.append(ClientState(uid, train, test))
        tests.append(test)
    if not clients:
        raise ValidationError("no user qualifies for federated training")
    test_set = WindowSet(np.concatenate([t.windows for t in tests]), np.concatenate([t.labels for t in tests]),
                         np.concatenate([t.user_ids for t in tests]), cfg.window_len, cfg.stride)
    return clients, test_set


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------

@dataclass
class UserRow:
    user_id: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float | None
    epochs: int
    samples: int


@dataclass
class UserSummary:
    rows: list
    mean_accuracy: float
    std_accuracy: float
    mean_f1: float
    std_f1: float
    avg_epochs: float

    def to_text(self) -> str:
        lines = ["User Performance Summary",
                 f"{'User':>6}{'Accuracy':>10}{'Precision':>11}{'Recall':>8}{'F1 Score':>10}{'AUC':>7}"
                 f"{'Epochs':>8}{'Samples':>9}"]
        for r in self.rows:
            auc = f"{r.auc:.3f}" if r.auc is not None else "n/a"
            lines.append(f"{r.user_id:>6}{r.accuracy:>10.3f}{r.precision:>11.3f}{r.recall:>8.3f}"
                         f"{r.f1:>10.3f}{auc:>7}{r.epochs:>8}{r.samples:>9}")
        lines += ["", "User wise comparison",
                  f"Mean Accuracy     {self.mean_accuracy:.3f}",
                  f"Std Dev Accuracy  {self.std_accuracy:.3f}",
                  f"Mean F1 Score     {self.mean_f1:.3f}",
                  f"Std Dev F1 Score  {self.std_f1:.3f}",
                  f"Avg Epochs        {self.avg_epochs:.1f}"]
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "users": [vars(r) for r in self.rows],
            "mean_accuracy": self.mean_accuracy, "std_accuracy": self.std_accuracy,
            "mean_f1": self.mean_f1, "std_f1": self.std_f1, "avg_epochs": self.avg_epochs,
        }


def summarize_users(rows: list[UserRow], epochs=None) -> UserSummary:
    """Mean and population std of accuracy and F1; ``epochs`` defaults to the rows' own."""
    if not rows:
        raise ValueError("no user rows")
    acc_mean, acc_std = aggregate_scores([r.accuracy for r in rows])
    f1_mean, f1_std = aggregate_scores([r.f1 for r in rows])
    epochs = [r.epochs for r in rows] if epochs is None else list(epochs)
    return UserSummary(rows, acc_mean, acc_std, f1_mean, f1_std, float(np.mean(epochs)))


def user_summary(logs: list[RoundLog]) -> UserSummary:
    """Last-round per-user metrics; epochs averaged over users and rounds."""
    if not logs:
        raise ValueError("no completed rounds")
    last = {}
    all_epochs = []
    for log in logs:
        for c in log.clients:
            last[c["user_id"]] = c
            all_epochs.append(c["epochs_run"])
    rows = []
    for uid in sorted(last):
        c = last[uid]
        m = c["metrics"]
        pos = m.per_class[1]
        rows.append(UserRow(uid, m.accuracy, pos.precision, pos.recall, pos.f1, m.auc, c["epochs_run"], c["n_k"]))
    return summarize_users(rows, all_epochs)
