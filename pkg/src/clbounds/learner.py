"""Posterior families, Adam, the variational PAC-Bayes update and EWC."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import LossFunction, TaskDataset, empirical_loss
from .mlp import MlpArchitecture, active_loss_and_grad, fisher_diagonal, forward, init_params


class LearnerError(RuntimeError):
    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code


@dataclass
class GaussianMeanField:
    """Diagonal Gaussian over a flat parameter vector.

    ``log_std = -inf`` encodes a point mass in that coordinate.
    """

    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.log_std = np.broadcast_to(np.asarray(self.log_std, dtype=float), self.mean.shape).copy()
        if not np.all(np.isfinite(self.mean)):
            raise LearnerError("non-finite", "posterior mean has non-finite entries")
        if np.any(np.isnan(self.log_std)) or np.any(self.log_std == np.inf):
            raise LearnerError("non-finite", "posterior log-std has invalid entries")

    @classmethod
    def point_mass(cls, mean) -> "GaussianMeanField":
        mean = np.asarray(mean, dtype=float)
        return cls(mean, np.full(mean.shape, -np.inf))

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    def copy(self) -> "GaussianMeanField":
        return GaussianMeanField(self.mean.copy(), self.log_std.copy())

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        eps = rng.standard_normal((n, self.dim))
        return self.mean + self.std * eps

    def to_json(self, arch: MlpArchitecture | None = None) -> dict:
        return {
            "arch": arch.to_dict() if arch else None,
            "mean": self.mean.tolist(),
            "log_std": self.log_std.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "GaussianMeanField":
        return cls(np.array(doc["mean"]), np.array(doc["log_std"]))


def reparam_sample(q: GaussianMeanField, seed=0, eps: np.ndarray | None = None) -> np.ndarray:
    """``mean + std * eps`` with ``eps ~ N(0, I)``; exact mean when std is 0."""
    if eps is None:
        eps = np.random.default_rng(seed).standard_normal(q.dim)
    return q.mean + q.std * eps


def init_prior(arch: MlpArchitecture, rng: np.random.Generator, init_std: float = 0.05) -> GaussianMeanField:
    """Data-free prior: fan-in uniform means and a shared small std."""
    return GaussianMeanField(init_params(arch, rng), np.full(arch.n_params, math.log(init_std)))


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def fresh(self) -> "AdamState":
        return AdamState(self.lr, self.beta1, self.beta2, self.eps)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        """In-place Adam update of every array in ``params``."""
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        if [p.shape for p in params] != [mm.shape for mm in self.m]:
            raise LearnerError("adam-shape", "parameter shapes changed between steps")
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


def kl_gaussian_diag_grads(mu, log_std, p_mu, p_var):
    """Gradients of KL(q || p) w.r.t. the mean and log-std of q."""
    return (mu - p_mu) / p_var, np.exp(2 * log_std) / p_var - 1.0


def _batches(m: int, batch_size: int, epochs: int, rng: np.random.Generator):
    for _ in range(epochs):
        perm = rng.permutation(m)
        for start in range(0, m, batch_size):
            yield perm[start : start + batch_size]


def vi_train_task(
    prior: GaussianMeanField,
    arch: MlpArchitecture,
    data: TaskDataset,
    task: int,
    lam: float,
    epochs: int = 1,
    batch_size: int = 16,
    adam: AdamState | None = None,
    n_mc_train: int = 1,
    seed=0,
) -> GaussianMeanField:
    """Approximate ``argmin_Q  Lhat(Q, S) + KL(Q || prior) / lam`` over diagonal Gaussians.

    The expected loss is estimated with ``n_mc_train`` reparameterized draws
    per minibatch (cross-entropy); the KL is closed form. Only the trunk and
    head ``task`` move; every other coordinate stays equal to the prior.
    """
    if lam <= 0:
        raise LearnerError("lambda", "lam must be positive")
    if prior.dim != arch.n_params:
        raise LearnerError("dimension", f"prior has {prior.dim} coordinates, arch needs {arch.n_params}")
    rng = np.random.default_rng(seed)
    adam = (adam or AdamState()).fresh()
    idx = arch.active_index(task)
    p_mu = prior.mean[idx]
    p_var = np.exp(2 * prior.log_std[idx])
    mu = p_mu.copy()
    ls = prior.log_std[idx].copy()
    inv_lam = 1.0 / lam
    x_all, y_all = data.features, data.labels
    for batch in _batches(data.m, batch_size, epochs, rng):
        xb, yb = x_all[batch], y_all[batch]
        sigma = np.exp(ls)
        g_mu = np.zeros_like(mu)
        g_ls = np.zeros_like(ls)
        for _ in range(n_mc_train):
            eps = rng.standard_normal(mu.size)
            loss, g = active_loss_and_grad(mu + sigma * eps, arch, xb, yb)
            if not math.isfinite(loss):
                raise LearnerError("diverged", f"non-finite loss on task {task}")
            g_mu += g
            g_ls += g * eps * sigma
        g_mu /= n_mc_train
        g_ls /= n_mc_train
        k_mu, k_ls = kl_gaussian_diag_grads(mu, ls, p_mu, p_var)
        g_mu += inv_lam * k_mu
        g_ls += inv_lam * k_ls
        adam.step([mu, ls], [g_mu, g_ls])
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(ls))):
        raise LearnerError("diverged", f"non-finite parameters after task {task}")
    out = prior.copy()
    out.mean[idx] = mu
    out.log_std[idx] = ls
    return out


@dataclass
class EwcState:
    weights: np.ndarray
    fisher_diag: np.ndarray
    lam_ewc: float = 40.0
    sigma2: float = 1e-2

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.fisher_diag = np.asarray(self.fisher_diag, dtype=float)
        if self.fisher_diag.shape != self.weights.shape:
            raise LearnerError("dimension", "fisher and weights differ in length")
        if np.any(self.fisher_diag < 0):
            raise LearnerError("fisher", "fisher diagonal must be nonnegative")

    @classmethod
    def initial(cls, weights, lam_ewc: float = 40.0, sigma2: float = 1e-2) -> "EwcState":
        weights = np.asarray(weights, dtype=float)
        return cls(weights.copy(), np.zeros_like(weights), lam_ewc, sigma2)

    def penalty(self, w: np.ndarray) -> float:
        return 0.5 * self.lam_ewc * float(self.fisher_diag @ (w - self.weights) ** 2)

    def to_json(self, arch: MlpArchitecture | None = None) -> dict:
        return {
            "arch": arch.to_dict() if arch else None,
            "weights": self.weights.tolist(),
            "fisher_diag": self.fisher_diag.tolist(),
            "sigma2": self.sigma2,
            "lam_ewc": self.lam_ewc,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "EwcState":
        return cls(np.array(doc["weights"]), np.array(doc["fisher_diag"]), doc["lam_ewc"], doc["sigma2"])


def ewc_train_task(
    state: EwcState,
    arch: MlpArchitecture,
    data: TaskDataset,
    task: int,
    epochs: int = 1,
    batch_size: int = 16,
    adam: AdamState | None = None,
    seed=0,
    n_fisher: int | None = 500,
) -> EwcState:
    """Cross-entropy plus ``(lam_ewc/2) sum_j F_j (w_j - w_prev_j)^2``, then
    add this task's Fisher diagonal and re-anchor at the new weights."""
    rng = np.random.default_rng(seed)
    adam = (adam or AdamState()).fresh()
    idx = arch.active_index(task)
    w = state.weights[idx].copy()
    anchor = state.weights[idx]
    coef = state.lam_ewc * state.fisher_diag[idx]
    for batch in _batches(data.m, batch_size, epochs, rng):
        loss, g = active_loss_and_grad(w, arch, data.features[batch], data.labels[batch])
        if not math.isfinite(loss):
            raise LearnerError("diverged", f"non-finite loss on task {task}")
        g += coef * (w - anchor)
        adam.step([w], [g])
    if not np.all(np.isfinite(w)):
        raise LearnerError("diverged", f"non-finite weights after task {task}")
    new_w = state.weights.copy()
    new_w[idx] = w
    fisher = state.fisher_diag + fisher_diagonal(new_w, arch, task, data.features, n_fisher, seed=rng)
    return EwcState(new_w, fisher, state.lam_ewc, state.sigma2)


def ewc_posterior(state: EwcState) -> GaussianMeanField:
    """Isotropic Gaussian ``N(w, sigma2 I)`` around the EWC weights."""
    if state.sigma2 <= 0:
        raise LearnerError("sigma2", "sigma2 must be positive")
    return GaussianMeanField(state.weights.copy(), np.full(state.weights.shape, 0.5 * math.log(state.sigma2)))


def evaluate_posterior(
    q: GaussianMeanField,
    arch: MlpArchitecture,
    task: int,
    test_set: TaskDataset,
    loss: LossFunction,
    n_mc: int = 30,
    seed=0,
) -> float:
    return empirical_loss(q, test_set, loss, n_mc, seed, predict=lambda w, x: forward(w, arch, task, x))


class StackedTasks:
    """Several tasks' datasets stacked so the trunk runs once per hypothesis.

    Evaluation runs in float32 with preallocated buffers; it is the inner loop
    of every bound and metric computation.
    """

    def __init__(self, arch: MlpArchitecture, tasks: list[int], datasets: list[TaskDataset]):
        self.arch = arch
        self.tasks = list(tasks)
        x = np.vstack([d.features for d in datasets]) if datasets else np.zeros((0, arch.input_dim))
        self.x = np.ascontiguousarray(x, dtype=np.float32)
        self.y = [d.labels for d in datasets]
        sizes = [d.m for d in datasets]
        self.bounds = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self._buffers = [np.empty((len(self.x), o), dtype=np.float32) for _, o in arch.trunk_shapes]

    def losses(self, w: np.ndarray, loss: LossFunction) -> np.ndarray:
        """Mean loss of hypothesis ``w`` on each stacked task."""
        arch = self.arch
        w = np.asarray(w, dtype=np.float32)
        h = self.x
        off = 0
        for (fan_in, fan_out), buf in zip(arch.trunk_shapes, self._buffers):
            wm = w[off : off + fan_in * fan_out].reshape(fan_in, fan_out)
            off += fan_in * fan_out
            np.matmul(h, wm, out=buf)
            buf += w[off : off + fan_out]
            np.tanh(buf, out=buf)
            h = buf
            off += fan_out
        out = np.empty(len(self.tasks))
        f, c = arch.feature_dim, arch.classes_per_task
        for k, t in enumerate(self.tasks):
            hs = arch.head_slice(t)
            wh = w[hs.start : hs.start + f * c].reshape(f, c)
            bh = w[hs.start + f * c : hs.stop]
            logits = h[self.bounds[k] : self.bounds[k + 1]] @ wh + bh
            out[k] = loss(logits, self.y[k]).mean()
        return out


def sample_task_losses(
    q: GaussianMeanField,
    stacked: StackedTasks,
    loss: LossFunction,
    n_mc: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """``(n_mc, n_tasks)`` losses of independent posterior draws on each task."""
    draws = q.sample(n_mc, rng)
    return np.vstack([stacked.losses(w, loss) for w in draws])


def save_checkpoint(path: str | Path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path):
    doc = json.loads(Path(path).read_text())
    arch = MlpArchitecture.from_dict(doc["arch"]) if doc.get("arch") else None
    if "fisher_diag" in doc:
        return arch, EwcState.from_json(doc)
    return arch, GaussianMeanField.from_json(doc)
