"""Synthetic 10-d Gaussian binary tasks with rotating 2-d linear separators."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .metrics import TaskDataset

KINDS = ("similar", "gradual", "orthogonal")


@dataclass(frozen=True)
class TaskSpec:
    angle: float
    m_train: int = 3000
    m_test: int = 1000
    seed: int = 0
    dim: int = 10

    def separator(self) -> np.ndarray:
        a = np.zeros(self.dim)
        a[0], a[1] = math.cos(self.angle), math.sin(self.angle)
        return a


@dataclass(frozen=True)
class EnvironmentConfig:
    kind: str = "similar"
    T: int = 100
    ref_angle: float = 0.0
    max_dev: float = math.radians(10.0)
    seed: int = 0
    drift_sign: int = 1  # gradual only

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown environment kind {self.kind!r}")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.max_dev < 0:
            raise ValueError("max_dev must be nonnegative")
        if self.drift_sign not in (-1, 1):
            raise ValueError("drift_sign must be +1 or -1")


def make_angle_schedule(cfg: EnvironmentConfig) -> np.ndarray:
    """Separator angles (radians) for tasks ``1..T``.

    similar: uniform jitter within ``max_dev`` of the reference angle.
    gradual: starts at the reference; each step adds ``U(0, max_dev)`` in the
    direction ``drift_sign``.
    orthogonal: first ``T // 2`` tasks jittered around the reference, the rest
    around the reference plus 90 degrees.
    """
    rng = np.random.default_rng(cfg.seed)
    T, dev = cfg.T, cfg.max_dev
    if cfg.kind == "similar":
        return cfg.ref_angle + rng.uniform(-dev, dev, T)
    if cfg.kind == "gradual":
        steps = rng.uniform(0.0, dev, T - 1)
        return cfg.ref_angle + cfg.drift_sign * np.concatenate([[0.0], np.cumsum(steps)])
    half = T // 2
    base = np.where(np.arange(T) < half, cfg.ref_angle, cfg.ref_angle + math.pi / 2)
    return base + rng.uniform(-dev, dev, T)


def label(x: np.ndarray, angle: float) -> np.ndarray:
    """``sgn(a^T x)`` mapped to {0, 1}; the measure-zero tie goes to 1."""
    score = math.cos(angle) * x[:, 0] + math.sin(angle) * x[:, 1]
    return (score >= 0).astype(np.int64)


def sample_task(spec: TaskSpec) -> tuple[TaskDataset, TaskDataset]:
    if spec.m_train < 1 or spec.m_test < 1:
        raise ValueError("m_train and m_test must be >= 1")
    rng = np.random.default_rng(spec.seed)
    x_train = rng.standard_normal((spec.m_train, spec.dim))
    x_test = rng.standard_normal((spec.m_test, spec.dim))
    return (
        TaskDataset(x_train, label(x_train, spec.angle)),
        TaskDataset(x_test, label(x_test, spec.angle)),
    )


def make_environment(cfg: EnvironmentConfig, m_train: int = 3000, m_test: int = 1000):
    """Angles plus ``(train, test)`` pairs for every task, all derived from ``cfg.seed``."""
    angles = make_angle_schedule(cfg)
    children = np.random.SeedSequence([cfg.seed, 0x7A5C]).spawn(cfg.T)
    data = [
        sample_task(TaskSpec(float(a), m_train, m_test, int(c.generate_state(1)[0])))
        for a, c in zip(angles, children)
    ]
    return angles, data


def dump_csv(data: TaskDataset, path: str | Path) -> None:
    """One row per sample: the features followed by the label."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(data.features.shape[1])] + ["label"])
        for x, y in zip(data.features, data.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])
