"""IMU gait data: ingest, balancing, windowing, splitting and partitioning.

Tabular learners consume one row per sample with the 7 raw columns
(``time_s`` first).  The neural model consumes windows over the 6 sensor
channels cut per user.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ParseError, SchemaError, StratificationError, ValidationError

logger = logging.getLogger(__name__)

FEATURE_NAMES = ("time_s", "acc_ml", "acc_ap", "acc_si", "gyr_ml", "gyr_ap", "gyr_si")
CHANNEL_NAMES = FEATURE_NAMES[1:]

# canonical field -> CSV header, as exported from the source dataset
DEFAULT_SCHEMA = {
    "time_s": "Time [s]",
    "acc_ml": "ACC ML [g]",
    "acc_ap": "ACC AP [g]",
    "acc_si": "ACC SI [g]",
    "gyr_ml": "GYR ML [deg/s]",
    "gyr_ap": "GYR AP [deg/s]",
    "gyr_si": "GYR SI [deg/s]",
    "label": "Freezing event [flag]",
}

LABEL_RULES = ("majority", "any_positive", "last_sample")


@dataclass(frozen=True)
class ImuSample:
    time_s: float
    acc_ml: float
    acc_ap: float
    acc_si: float
    gyr_ml: float
    gyr_ap: float
    gyr_si: float
    label: int
    user_id: int = 0


@dataclass
class ImuDataset:
    """Column-oriented collection of labelled IMU samples.

    ``features`` holds the 7 columns of :data:`FEATURE_NAMES` in order.
    """

    features: np.ndarray
    labels: np.ndarray
    user_ids: np.ndarray
    feature_names: tuple = FEATURE_NAMES
    provenance: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64).reshape(-1, len(FEATURE_NAMES))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.user_ids = np.asarray(self.user_ids, dtype=np.int64).reshape(-1)
        n = len(self.features)
        if len(self.labels) != n or len(self.user_ids) != n:
            raise ValueError("features, labels and user_ids must have equal length")
        if not np.all(np.isfinite(self.features)):
            raise ValidationError("non-finite feature value")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValidationError("labels must be 0 or 1")

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_samples(cls, samples: Sequence[ImuSample], provenance: str = "") -> "ImuDataset":
        feats = [[getattr(s, name) for name in FEATURE_NAMES] for s in samples]
        return cls(
            features=np.array(feats, dtype=np.float64).reshape(-1, len(FEATURE_NAMES)),
            labels=np.array([s.label for s in samples], dtype=np.int64),
            user_ids=np.array([s.user_id for s in samples], dtype=np.int64),
            provenance=provenance,
        )

    @property
    def samples(self) -> list[ImuSample]:
        return [
            ImuSample(*(float(v) for v in row), label=int(lab), user_id=int(uid))
            for row, lab, uid in zip(self.features, self.labels, self.user_ids)
        ]

    def subset(self, idx) -> "ImuDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return ImuDataset(
            self.features[idx], self.labels[idx], self.user_ids[idx],
            self.feature_names, self.provenance,
        )

    def class_counts(self) -> tuple[int, int]:
        n1 = int(self.labels.sum())
        return len(self) - n1, n1

    def users(self) -> list[int]:
        return sorted(int(u) for u in np.unique(self.user_ids))


@dataclass
class WindowSet:
    windows: np.ndarray  # (n, window_len, n_channels)
    labels: np.ndarray
    user_ids: np.ndarray
    window_len: int
    stride: int

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "WindowSet":
        idx = np.asarray(idx, dtype=np.int64)
        return WindowSet(self.windows[idx], self.labels[idx], self.user_ids[idx],
                         self.window_len, self.stride)

    def class_counts(self) -> tuple[int, int]:
        n1 = int(self.labels.sum())
        return len(self) - n1, n1


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float = 0.2
    seed: int = 42
    stratified: bool = True

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")


@dataclass
class IngestReport:
    source: str
    rows_read: int = 0
    rows_kept: int = 0
    rejected: Counter = field(default_factory=Counter)

    def to_text(self) -> str:
        lines = [
            f"source = {self.source}",
            f"rows_read = {self.rows_read}",
            f"rows_kept = {self.rows_kept}",
            f"rows_rejected = {sum(self.rejected.values())}",
        ]
        for reason in sorted(self.rejected):
            lines.append(f"rejected.{reason} = {self.rejected[reason]}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# CSV ingest
# ---------------------------------------------------------------------------

def load_csv_with_report(path, schema: Mapping[str, str] = DEFAULT_SCHEMA) -> tuple[ImuDataset, IngestReport]:
    """Read a header-bearing CSV into an :class:`ImuDataset`.

    ``schema`` maps canonical field names (``time_s``, channel names,
    ``label`` and optionally ``user_id``) to header names.  Rows with an
    empty numeric cell are dropped and counted; any other malformed cell
    raises.
    """
    path = Path(path)
    for name in (*FEATURE_NAMES, "label"):
        if name not in schema:
            raise SchemaError(f"schema has no mapping for field {name!r}")
    report = IngestReport(source=str(path))
    feats, labels, users = [], [], []

    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file, no header row") from None
        col = {}
        for name, column in schema.items():
            if column not in header:
                raise SchemaError(f"{path}: missing column {column!r}")
            col[name] = header.index(column)

        for rownum, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            report.rows_read += 1
            cells = {name: (row[i].strip() if i < len(row) else "") for name, i in col.items()}
            if any(v == "" for v in cells.values()):
                report.rejected["missing_value"] += 1
                continue
            try:
                values = {name: float(v) for name, v in cells.items()}
            except ValueError:
                bad = next(n for n, v in cells.items() if not _is_number(v))
                raise ParseError(f"{path}: row {rownum}: non-numeric value {cells[bad]!r} "
                                 f"in column {schema[bad]!r}", row=rownum) from None
            if not all(math.isfinite(v) for v in values.values()):
                raise ParseError(f"{path}: row {rownum}: non-finite value", row=rownum)
            flag = values["label"]
            if flag not in (0.0, 1.0):
                raise ValidationError(f"{path}: row {rownum}: flag must be 0 or 1, got {cells['label']!r}",
                                      row=rownum)
            if values["time_s"] < 0:
                raise ValidationError(f"{path}: row {rownum}: negative time", row=rownum)
            uid = values.get("user_id", 0.0)
            if uid < 0 or uid != int(uid):
                raise ValidationError(f"{path}: row {rownum}: bad user id {cells['user_id']!r}", row=rownum)
            feats.append([values[n] for n in FEATURE_NAMES])
            labels.append(int(flag))
            users.append(int(uid))

    report.rows_kept = len(labels)
    ds = ImuDataset(
        np.array(feats, dtype=np.float64).reshape(-1, len(FEATURE_NAMES)),
        np.array(labels, dtype=np.int64),
        np.array(users, dtype=np.int64),
        provenance=str(path),
    )
    _check_time_order(ds)
    return ds, report


def load_csv(path, schema: Mapping[str, str] = DEFAULT_SCHEMA) -> ImuDataset:
    return load_csv_with_report(path, schema)[0]


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def _check_time_order(ds: ImuDataset) -> None:
    for uid in ds.users():
        t = ds.features[ds.user_ids == uid, 0]
        if np.any(np.diff(t) < 0):
            raise ValidationError(f"samples of user {uid} are not sorted by time")


def write_csv(ds: ImuDataset, path, schema: Mapping[str, str] = DEFAULT_SCHEMA) -> None:
    """Write ``ds`` with a ``user_id`` column; floats use shortest round-trip repr."""
    schema = dict(schema)
    schema.setdefault("user_id", "user_id")
    names = [*FEATURE_NAMES, "label", "user_id"]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([schema[n] for n in names])
        for row, lab, uid in zip(ds.features, ds.labels, ds.user_ids):
            writer.writerow([repr(float(v)) for v in row] + [int(lab), int(uid)])


# ---------------------------------------------------------------------------
# Combining and balancing
# ---------------------------------------------------------------------------

def merge_users(datasets: Sequence[ImuDataset], user_ids: Sequence[int]) -> ImuDataset:
    if len(datasets) != len(user_ids):
        raise ValueError("datasets and user_ids must have the same length")
    if len(set(user_ids)) != len(user_ids):
        raise ValueError(f"duplicate user ids in {list(user_ids)}")
    if not datasets:
        raise ValueError("nothing to merge")
    return ImuDataset(
        np.concatenate([d.features for d in datasets]),
        np.concatenate([d.labels for d in datasets]),
        np.concatenate([np.full(len(d), uid, dtype=np.int64) for d, uid in zip(datasets, user_ids)]),
        provenance="+".join(d.provenance for d in datasets if d.provenance),
    )


def balance_indices(labels, target_ratio: float, seed: int) -> np.ndarray:
    """Sorted indices kept after undersampling the majority class.

    The majority class keeps ``floor(target_ratio * n_minority)`` members
    (or all of them, if fewer); minority rows are always kept.
    """
    if target_ratio < 1:
        raise ValueError("target_ratio must be >= 1")
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise ValidationError("balancing needs both classes present")
    minority, majority = (pos, neg) if len(pos) <= len(neg) else (neg, pos)
    keep_major = min(len(majority), int(math.floor(target_ratio * len(minority))))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(majority, size=keep_major, replace=False)
    return np.sort(np.concatenate([minority, chosen]))


def downsample_balance(ds: ImuDataset, target_ratio: float = 1.0, seed: int = 0) -> ImuDataset:
    return ds.subset(balance_indices(ds.labels, target_ratio, seed))


def balance_windows(ws: WindowSet, target_ratio: float = 1.0, seed: int = 0) -> WindowSet:
    return ws.subset(balance_indices(ws.labels, target_ratio, seed))


# ---------------------------------------------------------------------------
# Windowing
# ---------------------------------------------------------------------------

def window_count(length: int, window_len: int, stride: int) -> int:
    if length < window_len:
        return 0
    return (length - window_len) // stride + 1


def window_label(labels, rule: str = "majority") -> int:
    labels = np.asarray(labels)
    if rule == "majority":
        # ties resolve to the positive class
        return int(2 * labels.sum() >= len(labels))
    if rule == "any_positive":
        return int(labels.any())
    if rule == "last_sample":
        return int(labels[-1])
    raise ValueError(f"unknown label rule {rule!r}; expected one of {LABEL_RULES}")


def make_windows(ds: ImuDataset, window_len: int, stride: int, label_rule: str = "majority") -> WindowSet:
    """Cut sliding windows over the sensor channels, never crossing users."""
    if window_len < 1 or stride < 1:
        raise ValueError("window_len and stride must be positive")
    if label_rule not in LABEL_RULES:
        raise ValueError(f"unknown label rule {label_rule!r}")
    chans = ds.features[:, 1:]
    wins, labs, uids = [], [], []
    for uid in ds.users():
        rows = np.flatnonzero(ds.user_ids == uid)
        x, y = chans[rows], ds.labels[rows]
        for k in range(window_count(len(rows), window_len, stride)):
            s = k * stride
            wins.append(x[s:s + window_len])
            labs.append(window_label(y[s:s + window_len], label_rule))
            uids.append(uid)
    if not wins:
        raise ValidationError(f"no user has at least {window_len} samples; no windows produced")
    return WindowSet(np.stack(wins), np.array(labs, dtype=np.int64),
                     np.array(uids, dtype=np.int64), window_len, stride)


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

def split_indices(labels, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels)
    n = len(labels)
    if n < 2:
        raise ValidationError("need at least 2 items to split")
    rng = np.random.default_rng(spec.seed)
    if not spec.stratified:
        n_test = int(round(n * spec.test_fraction))
        if not 0 < n_test < n:
            raise ValidationError(f"test fraction {spec.test_fraction} leaves an empty side for n={n}")
        perm = rng.permutation(n)
        return np.sort(perm[n_test:]), np.sort(perm[:n_test])
    train, test = [], []
    for cls in (0, 1):
        members = np.flatnonzero(labels == cls)
        if len(members) == 0:
            continue
        n_test = int(round(len(members) * spec.test_fraction))
        if not 0 < n_test < len(members):
            raise StratificationError(
                f"class {cls} has {len(members)} items; cannot place at least one on each side "
                f"at test fraction {spec.test_fraction}")
        perm = rng.permutation(members)
        test.append(perm[:n_test])
        train.append(perm[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def train_test_split(data, spec: SplitSpec = SplitSpec()):
    """Split an :class:`ImuDataset` or :class:`WindowSet` into (train, test)."""
    train_idx, test_idx = split_indices(data.labels, spec)
    return data.subset(train_idx), data.subset(test_idx)


def kfold_indices(n: int, k: int, labels=None, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Seeded (optionally stratified) k-fold split.

    Items are shuffled (per class when ``labels`` is given), laid end to end
    and dealt round-robin into folds, so fold sizes differ by at most one
    overall and per class.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > n:
        raise ValueError(f"k={k} exceeds n={n}")
    rng = np.random.default_rng(seed)
    if labels is None:
        order = rng.permutation(n)
    else:
        labels = np.asarray(labels)
        if len(labels) != n:
            raise ValueError("labels length must equal n")
        order = np.concatenate([rng.permutation(np.flatnonzero(labels == c)) for c in (0, 1)])
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[order] = np.arange(n) % k
    all_idx = np.arange(n)
    return [(all_idx[fold_of != f], all_idx[fold_of == f]) for f in range(k)]


def partition_by_user(ds: ImuDataset, min_samples: int = 20) -> dict[int, ImuDataset]:
    """Group samples per user, dropping (and logging) users below ``min_samples``."""
    if min_samples < 1:
        raise ValueError("min_samples must be positive")
    parts, excluded = {}, {}
    for uid in ds.users():
        part = ds.subset(np.flatnonzero(ds.user_ids == uid))
        if len(part) >= min_samples:
            parts[uid] = part
        else:
            excluded[uid] = len(part)
    for uid, size in excluded.items():
        logger.warning("user %d excluded: %d samples < min_samples=%d", uid, size, min_samples)
    if not parts:
        raise ValidationError(f"no user has at least {min_samples} samples (excluded: {excluded})")
    return parts


# ---------------------------------------------------------------------------
# Synthetic fixture
# ---------------------------------------------------------------------------

SAMPLE_RATE_HZ = 128.0
_BASE_MEAN = np.array([0.0, -0.2, 0.9, 0.0, 0.0, 0.0])
_NOISE_SD = np.array([0.08, 0.08, 0.08, 8.0, 8.0, 8.0])
# shared freezing signature, in units of channel noise sd
_FOG_SHIFT = np.array([0.4, -0.6, -1.5, 0.5, 1.0, -0.8])


def generate_synthetic(n_users: int = 3, samples_per_user: int = 2000, positive_ratio: float = 0.5,
                       seed: int = 0, separation: float = 1.0, user_spread: float = 1.0) -> ImuDataset:
    """Reproducible pseudo-IMU recordings with labelled freezing episodes.

    Each user walks with a ~1 Hz gait oscillation on Gaussian channel noise
    around a user-specific posture offset.  During a freezing episode the
    channels shift by ``separation`` times a signature (a shared part plus a
    per-user part scaled by ``user_spread``), the noise variance grows by
    half and a 6 Hz trembling component replaces the gait rhythm.  Exactly
    ``round(positive_ratio * samples_per_user)`` samples per user are
    positive.  Large ``separation`` makes single rows linearly separable.
    """
    if n_users < 1 or samples_per_user < 1:
        raise ValueError("n_users and samples_per_user must be positive")
    if not 0.0 < positive_ratio < 1.0:
        raise ValueError("positive_ratio must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    feats, labels, users = [], [], []
    dt = 1.0 / SAMPLE_RATE_HZ
    for uid in range(1, n_users + 1):
        n = samples_per_user
        y = _episode_labels(n, positive_ratio, rng)
        t = np.arange(n) * dt
        offset = _BASE_MEAN + rng.normal(0.0, 0.5, 6) * _NOISE_SD
        personal = rng.normal(0.0, 1.0, 6)
        shift = separation * (_FOG_SHIFT + user_spread * personal) * _NOISE_SD
        gait_phase = rng.uniform(0, 2 * np.pi)
        gait = np.sin(2 * np.pi * 1.0 * t + gait_phase)[:, None] * (0.5 * _NOISE_SD)
        tremor = np.sin(2 * np.pi * 6.0 * t)[:, None] * (0.5 * _NOISE_SD)
        noise = rng.normal(0.0, 1.0, (n, 6)) * _NOISE_SD
        pos = y[:, None] == 1
        x = offset + np.where(pos, shift + tremor + 1.22 * noise, gait + noise)
        feats.append(np.column_stack([t, x]))
        labels.append(y)
        users.append(np.full(n, uid))
    return ImuDataset(np.concatenate(feats), np.concatenate(labels), np.concatenate(users),
                      provenance=f"synthetic(seed={seed})")


def _episode_labels(n: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    n_pos = int(round(ratio * n))
    n_pos = min(max(n_pos, 1), n - 1)
    n_neg = n - n_pos
    n_ep = max(1, min(n_pos, n_neg, n_pos // 150))
    pos_len = _composition(n_pos, n_ep, rng)
    # gaps before, between and after episodes
    gaps = _composition(n_neg, n_ep + 1, rng, min_part=0)
    y = np.zeros(n, dtype=np.int64)
    cursor = 0
    for i in range(n_ep):
        cursor += gaps[i]
        y[cursor:cursor + pos_len[i]] = 1
        cursor += pos_len[i]
    return y


def _composition(total: int, parts: int, rng: np.random.Generator, min_part: int = 1) -> list[int]:
    if parts == 1:
        return [total]
    if min_part:
        cuts = np.sort(rng.choice(np.arange(1, total), size=parts - 1, replace=False))
    else:
        cuts = np.sort(rng.integers(0, total + 1, size=parts - 1))
    bounds = np.concatenate([[0], cuts, [total]])
    return [int(v) for v in np.diff(bounds)]
