"""Loss contracts and backward-transfer / forgetting metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

ZERO_ONE = "zero-one"
CLAMPED_CE = "clamped-cross-entropy"

CSV_COLUMNS = (
    "checkpoint",
    "task_id",
    "bwt",
    "forgetting",
    "fwd_loss",
    "bwt_disc",
    "forget_disc",
    "bwt_bound",
    "forget_bound",
)


class MetricsError(ValueError):
    """Raised on malformed metric inputs; ``code`` is a stable identifier."""

    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code


@dataclass(frozen=True)
class LossFunction:
    """A bounded per-datum loss evaluated on logits.

    ``zero-one`` always has ``bound == 1``; ``clamped-cross-entropy`` clips
    the negative log-likelihood at ``bound``.
    """

    kind: str = ZERO_ONE
    bound: float = 1.0

    def __post_init__(self):
        if self.kind not in (ZERO_ONE, CLAMPED_CE):
            raise MetricsError("loss-kind", f"unknown loss kind {self.kind!r}")
        if self.bound < 0:
            raise MetricsError("loss-bound", "K must be nonnegative")
        if self.kind == ZERO_ONE and self.bound != 1.0:
            raise MetricsError("loss-bound", "zero-one loss has K = 1")

    def __call__(self, logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
        logits = np.atleast_2d(logits)
        labels = np.asarray(labels)
        if self.kind == ZERO_ONE:
            return (np.argmax(logits, axis=-1) != labels).astype(float)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=-1))
        nll = log_norm - np.take_along_axis(shifted, labels[..., None], axis=-1)[..., 0]
        return np.minimum(nll, self.bound)


@dataclass
class TaskDataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.features.shape[0] != self.labels.shape[0]:
            raise MetricsError(
                "dataset-shape",
                f"{self.features.shape[0]} feature rows vs {self.labels.shape[0]} labels",
            )
        if self.labels.size and self.labels.min() < 0:
            raise MetricsError("dataset-labels", "labels must be nonnegative class indices")

    @property
    def m(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, idx) -> "TaskDataset":
        return TaskDataset(self.features[idx], self.labels[idx])


Predictor = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _is_distribution(source) -> bool:
    return hasattr(source, "sample")


def empirical_loss_samples(
    source,
    data: TaskDataset,
    loss: LossFunction,
    n_mc: int = 30,
    seed=0,
    predict: Predictor | None = None,
) -> np.ndarray:
    """Per-hypothesis empirical losses behind :func:`empirical_loss`.

    ``source`` is either a point hypothesis (a callable ``x -> logits``, or a
    parameter vector paired with ``predict(params, x)``) or a distribution
    exposing ``sample(n, rng) -> (n, d)`` parameter draws. Point hypotheses
    yield a length-1 array.
    """
    if data.m == 0:
        raise MetricsError("empty-dataset")
    if n_mc < 1:
        raise MetricsError("n-mc", "n_mc must be >= 1")
    if _is_distribution(source):
        if predict is None:
            raise MetricsError("predict", "a distribution needs a predict function")
        rng = np.random.default_rng(seed)
        draws = source.sample(n_mc, rng)
        return np.array([loss(predict(w, data.features), data.labels).mean() for w in draws])
    if callable(source):
        return np.array([loss(source(data.features), data.labels).mean()])
    if predict is None:
        raise MetricsError("predict", "a parameter vector needs a predict function")
    return np.array([loss(predict(np.asarray(source), data.features), data.labels).mean()])


def empirical_loss(
    source,
    data: TaskDataset,
    loss: LossFunction,
    n_mc: int = 30,
    seed=0,
    predict: Predictor | None = None,
) -> float:
    """Mean loss of a point hypothesis, or its Monte-Carlo average under a posterior."""
    return float(empirical_loss_samples(source, data, loss, n_mc, seed, predict).mean())


class TransferMetrics(NamedTuple):
    bwt: float
    forgetting: float
    bwt_disc: float
    forget_disc: float


def bwt_and_forgetting(
    current_losses: Sequence[float],
    after_training_losses: Sequence[float],
    gamma: float = 0.95,
) -> TransferMetrics:
    """Average and discounted backward transfer / forgetting over previous tasks.

    The discounted variants are recency-weighted *sums* (weight
    ``gamma ** (T - 1 - t)`` for task ``t``), not means.
    """
    cur = np.asarray(current_losses, dtype=float).reshape(-1)
    after = np.asarray(after_training_losses, dtype=float).reshape(-1)
    if cur.shape != after.shape:
        raise MetricsError("vector-length", f"{cur.size} current vs {after.size} stored losses")
    if cur.size == 0:
        raise MetricsError("no-previous-tasks")
    if not 0.0 < gamma <= 1.0:
        raise MetricsError("gamma", "gamma must lie in (0, 1]")
    diff = cur - after
    weights = gamma ** np.arange(cur.size - 1, -1, -1, dtype=float)
    return TransferMetrics(
        bwt=float(cur.mean()),
        forgetting=float(diff.mean()),
        bwt_disc=float(weights @ cur),
        forget_disc=float(weights @ diff),
    )


@dataclass
class MetricsRecord:
    checkpoint: int
    task_id: int
    bwt: float = math.nan
    forgetting: float = math.nan
    fwd_loss: float = math.nan
    bwt_disc: float = math.nan
    forget_disc: float = math.nan
    bwt_bound: float = math.nan
    forget_bound: float = math.nan
    # Not serialized: combined MC standard error of (forgetting, bound).
    mc_stderr: float = field(default=math.nan, compare=False)


@dataclass
class MetricsLog:
    records: list[MetricsRecord] = field(default_factory=list)

    def append(self, record: MetricsRecord) -> None:
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for r in self.records:
                writer.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])

    @classmethod
    def from_csv(cls, path: str | Path) -> "MetricsLog":
        log = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                vals = {k: (float(v) if v not in ("", "nan") else math.nan) for k, v in row.items()}
                vals["checkpoint"] = int(vals["checkpoint"])
                vals["task_id"] = int(vals["task_id"])
                log.append(MetricsRecord(**vals))
        return log


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "nan"
    return repr(float(value))
