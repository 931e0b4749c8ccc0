"""Multi-head tanh MLP on a flat parameter vector, with hand-written backprop.

Parameter layout: the shared trunk layers come first (each layer stores its
``(fan_in, fan_out)`` weight matrix row-major followed by its bias), then one
linear head per task in task order. The trunk is therefore always the prefix
``params[:arch.trunk_size]`` and head ``t`` a contiguous block after it.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


class ArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class MlpArchitecture:
    input_dim: int = 10
    hidden_dims: tuple[int, ...] = (64,)
    n_tasks: int = 1
    classes_per_task: int = 2
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.activation != "tanh":
            raise ArchitectureError(f"unsupported activation {self.activation!r}")
        if min((self.input_dim, self.n_tasks, self.classes_per_task, *self.hidden_dims)) < 1:
            raise ArchitectureError("all dimensions must be positive")

    @cached_property
    def trunk_shapes(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden_dims)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def feature_dim(self) -> int:
        return self.hidden_dims[-1] if self.hidden_dims else self.input_dim

    @cached_property
    def trunk_size(self) -> int:
        return sum(i * o + o for i, o in self.trunk_shapes)

    @property
    def head_size(self) -> int:
        return (self.feature_dim + 1) * self.classes_per_task

    @property
    def n_params(self) -> int:
        return self.trunk_size + self.n_tasks * self.head_size

    def head_slice(self, task: int) -> slice:
        self.check_task(task)
        start = self.trunk_size + task * self.head_size
        return slice(start, start + self.head_size)

    def active_index(self, task: int) -> np.ndarray:
        """Indices of trunk + head ``task``: the parameters task ``task`` touches."""
        hs = self.head_slice(task)
        return np.r_[0 : self.trunk_size, hs.start : hs.stop]

    def check_task(self, task: int) -> None:
        if not 0 <= task < self.n_tasks:
            raise ArchitectureError(f"task index {task} outside [0, {self.n_tasks})")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "n_tasks": self.n_tasks,
            "classes_per_task": self.classes_per_task,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpArchitecture":
        return cls(**{**d, "hidden_dims": tuple(d.get("hidden_dims", (64,)))})


def _layers(vec: np.ndarray, shapes, offset: int = 0):
    out = []
    for fan_in, fan_out in shapes:
        w = vec[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = vec[offset : offset + fan_out]
        offset += fan_out
        out.append((w, b))
    return out


def unpack(params: np.ndarray, arch: MlpArchitecture, task: int):
    """Views ``[(W, b), ...]`` for the trunk layers followed by head ``task``."""
    params = np.asarray(params)
    if params.shape[-1] != arch.n_params:
        raise ArchitectureError(f"expected {arch.n_params} parameters, got {params.shape[-1]}")
    hs = arch.head_slice(task)
    head_shape = [(arch.feature_dim, arch.classes_per_task)]
    return _layers(params, arch.trunk_shapes) + _layers(params, head_shape, hs.start)


def unpack_active(active: np.ndarray, arch: MlpArchitecture):
    """Same as :func:`unpack` for a compact trunk+head vector."""
    head_shape = [(arch.feature_dim, arch.classes_per_task)]
    return _layers(active, arch.trunk_shapes + head_shape)


def _check_x(x: np.ndarray, arch: MlpArchitecture) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != arch.input_dim:
        raise ArchitectureError(f"input has {x.shape[1]} columns, expected {arch.input_dim}")
    return x


def _forward_layers(layers, x):
    acts = [x]
    h = x
    for w, b in layers[:-1]:
        h = np.tanh(h @ w + b)
        acts.append(h)
    w, b = layers[-1]
    return h @ w + b, acts


def forward(params: np.ndarray, arch: MlpArchitecture, task: int, x: np.ndarray) -> np.ndarray:
    """Logits ``(n, classes_per_task)`` of head ``task`` on a batch."""
    x = _check_x(x, arch)
    logits, _ = _forward_layers(unpack(params, arch, task), x)
    return logits


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, y: np.ndarray) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(y)), y].mean())


def _backward_layers(layers, acts, d_logits):
    """Gradients for each (W, b) given dLoss/dlogits."""
    grads = [None] * len(layers)
    delta = d_logits
    for k in range(len(layers) - 1, -1, -1):
        w, _ = layers[k]
        a = acts[k]
        grads[k] = (a.T @ delta, delta.sum(axis=0))
        if k:
            delta = (delta @ w.T) * (1.0 - a * a)
    return grads


def active_loss_and_grad(active: np.ndarray, arch: MlpArchitecture, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. a compact trunk+head vector."""
    layers = unpack_active(active, arch)
    logits, acts = _forward_layers(layers, x)
    p = softmax(logits)
    n = len(y)
    loss = float(-np.log(np.maximum(p[np.arange(n), y], 1e-300)).mean())
    d = p
    d[np.arange(n), y] -= 1.0
    d /= n
    grads = _backward_layers(layers, acts, d)
    return loss, np.concatenate([g for pair in grads for g in (pair[0].ravel(), pair[1])])


def backward(params: np.ndarray, arch: MlpArchitecture, task: int, x: np.ndarray, y: np.ndarray):
    """Gradient of the mean cross-entropy over the batch w.r.t. all parameters.

    Only the trunk and head ``task`` receive nonzero entries.
    """
    x = _check_x(x, arch)
    y = np.asarray(y, dtype=np.int64)
    if y.min(initial=0) < 0 or y.max(initial=0) >= arch.classes_per_task:
        raise ArchitectureError("label outside the head's classes")
    idx = arch.active_index(task)
    _, g = active_loss_and_grad(np.asarray(params, dtype=float)[idx], arch, x, y)
    full = np.zeros(arch.n_params)
    full[idx] = g
    return full


def init_params(arch: MlpArchitecture, rng: np.random.Generator) -> np.ndarray:
    """Symmetric-uniform fan-in initialization, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
    parts = []
    for fan_in, fan_out in arch.trunk_shapes + [(arch.feature_dim, arch.classes_per_task)] * arch.n_tasks:
        bound = 1.0 / np.sqrt(fan_in)
        parts.append(rng.uniform(-bound, bound, fan_in * fan_out))
        parts.append(rng.uniform(-bound, bound, fan_out))
    return np.concatenate(parts)


def fisher_diagonal(
    params: np.ndarray,
    arch: MlpArchitecture,
    task: int,
    x: np.ndarray,
    n_samples: int | None = None,
    seed=0,
) -> np.ndarray:
    """Diagonal Fisher information of head ``task`` under the model's own predictive.

    For each input the squared per-example gradient of ``log p(y | x)`` is
    averaged over ``y ~ p(. | x)`` exactly (every class weighted by its
    predicted probability), then over ``n_samples`` inputs drawn without
    replacement. Entries outside the trunk and head ``task`` are zero.
    """
    x = _check_x(x, arch)
    m = x.shape[0]
    if n_samples is not None and n_samples < m:
        rng = np.random.default_rng(seed)
        x = x[rng.choice(m, size=n_samples, replace=False)]
    n = x.shape[0]
    idx = arch.active_index(task)
    layers = unpack_active(np.asarray(params, dtype=float)[idx], arch)
    logits, acts = _forward_layers(layers, x)
    p = softmax(logits)
    sq = [(np.zeros_like(w), np.zeros_like(b)) for w, b in layers]
    for c in range(arch.classes_per_task):
        # d(-log p_c)/dlogits = p - e_c, per example
        delta = p.copy()
        delta[:, c] -= 1.0
        weight = p[:, c]
        for k in range(len(layers) - 1, -1, -1):
            w, _ = layers[k]
            a = acts[k]
            d2 = delta * delta * weight[:, None]
            sq[k][0][...] += (a * a).T @ d2
            sq[k][1][...] += d2.sum(axis=0)
            if k:
                delta = (delta @ w.T) * (1.0 - a * a)
    full = np.zeros(arch.n_params)
    full[idx] = np.concatenate([g for pair in sq for g in (pair[0].ravel(), pair[1])]) / n
    return full
