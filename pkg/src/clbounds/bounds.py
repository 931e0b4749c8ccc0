"""Data-dependent forgetting / backward-transfer bounds for trained posteriors.

The forgetting bound after task ``T`` is the sum of

* the empirical loss of ``Q_{1:T}`` on the current training set,
* minus the mean of the stored just-after-training losses of tasks ``1..T-1``,
* ``KL(Q_{1:T} || Q_{1:T-1}) / lam``,
* the Hoeffding term ``lam K^2 / (8 m)``,
* the confidence term ``ln(1/delta) / lam``,
* the averaged log-MGF disagreement between old-task test losses and the
  current training loss under ``Q_{1:T-1}``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .metrics import LossFunction, MetricsError, TaskDataset


class BoundError(ValueError):
    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code


@dataclass(frozen=True)
class BoundConfig:
    lam: float | tuple = 1.0
    delta: float = 0.05
    K: float = 1.0
    n_mc_prior: int = 30
    n_mc: int = 30
    gamma: float = 0.95

    def __post_init__(self):
        lams = np.atleast_1d(np.asarray(self.lam, dtype=float))
        if np.any(lams <= 0):
            raise BoundError("lambda", "lam must be positive")
        if not 0 < self.delta < 1:
            raise BoundError("delta", "delta must lie in (0, 1)")
        if self.K < 0:
            raise BoundError("K", "K must be nonnegative")
        if self.n_mc_prior < 1 or self.n_mc < 1:
            raise BoundError("n-mc", "sample counts must be positive")
        if not 0 < self.gamma <= 1:
            raise BoundError("gamma", "gamma must lie in (0, 1]")

    def lam_for(self, task: int) -> float:
        """The lambda of (zero-based) task ``task``; a scalar applies to all."""
        lams = np.atleast_1d(np.asarray(self.lam, dtype=float))
        return float(lams[0] if lams.size == 1 else lams[task])


@dataclass
class BoundReport:
    empirical_term: float
    past_loss_term: float
    kl_term: float
    hoeffding_term: float
    confidence_term: float
    disagreement_term: float
    total_forgetting_bound: float
    total_bwt_bound: float
    mc_stderr: float = 0.0

    @classmethod
    def from_terms(
        cls,
        empirical_term: float,
        past_loss_term: float,
        kl_term: float,
        hoeffding_term: float,
        confidence_term: float,
        disagreement_term: float,
        mc_stderr: float = 0.0,
    ) -> "BoundReport":
        total = (
            empirical_term
            - past_loss_term
            + kl_term
            + hoeffding_term
            + confidence_term
            + disagreement_term
        )
        return cls(
            empirical_term,
            past_loss_term,
            kl_term,
            hoeffding_term,
            confidence_term,
            disagreement_term,
            total,
            total + past_loss_term,
            mc_stderr,
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def kl_gaussian_diag(q_mean, q_logstd, p_mean, p_logstd) -> float:
    """Closed-form KL between two diagonal Gaussians."""
    qm, ql, pm, pl = (np.asarray(a, dtype=float).reshape(-1) for a in (q_mean, q_logstd, p_mean, p_logstd))
    if not (qm.shape == ql.shape == pm.shape == pl.shape):
        raise BoundError("vector-length", "mean/log-std vectors differ in length")
    if qm.size == 0:
        raise BoundError("vector-length", "empty parameter vectors")
    # zero-variance coordinates: identical point masses contribute nothing,
    # any other mass against a point mass is not absolutely continuous
    degenerate = np.isneginf(pl)
    if np.any(degenerate & ~(np.isneginf(ql) & (qm == pm))):
        return math.inf
    keep = ~degenerate
    qm, ql, pm, pl = qm[keep], ql[keep], pm[keep], pl[keep]
    ratio = np.exp(2 * (ql - pl))
    terms = ratio + (pm - qm) ** 2 * np.exp(-2 * pl) - 1.0 + 2 * (pl - ql)
    return max(0.5 * float(terms.sum()), 0.0)


def kl_posteriors(q, p) -> float:
    return kl_gaussian_diag(q.mean, q.log_std, p.mean, p.log_std)


def kl_isotropic_shift(w_new, w_old, sigma2: float) -> float:
    """KL between ``N(w_new, sigma2 I)`` and ``N(w_old, sigma2 I)``."""
    a, b = np.asarray(w_new, dtype=float), np.asarray(w_old, dtype=float)
    if a.shape != b.shape:
        raise BoundError("vector-length", "weight vectors differ in length")
    if sigma2 <= 0:
        raise BoundError("sigma2", "sigma2 must be positive")
    return float(np.sum((a - b) ** 2)) / (2.0 * sigma2)


def structural_terms(lam: float, K: float, m: int, delta: float) -> tuple[float, float]:
    """``(lam K^2 / (8 m), ln(1/delta) / lam)``."""
    if lam <= 0:
        raise BoundError("lambda", "lam must be positive")
    if m < 1:
        raise BoundError("m", "m must be >= 1")
    if not 0 < delta <= 1:
        raise BoundError("delta", "delta must lie in (0, 1]")
    if K < 0:
        raise BoundError("K", "K must be nonnegative")
    return lam * K * K / (8.0 * m), math.log(1.0 / delta) / lam


def disagreement_from_losses(past_losses: np.ndarray, current_losses: np.ndarray, lam: float):
    """Averaged log-MGF term and its delta-method standard error.

    ``past_losses`` is ``(n, T-1)`` (draw ``j`` on past task ``t``),
    ``current_losses`` is ``(n,)`` on the current training set, with draws
    shared across past tasks.
    """
    past = np.atleast_2d(np.asarray(past_losses, dtype=float))
    cur = np.asarray(current_losses, dtype=float).reshape(-1)
    if past.shape[1] == 0:
        raise BoundError("no-previous-tasks")
    if past.shape[0] != cur.shape[0]:
        raise BoundError("shape-mismatch", "draw counts differ")
    n, n_past = past.shape
    expo = lam * (past - cur[:, None])
    per_task = logsumexp(expo, axis=0) - math.log(n)
    value = float(per_task.sum() / (n_past * lam))
    if n < 2:
        return value, 0.0
    # d value / d (normalized weight) for each draw, summed over tasks.
    influence = np.exp(expo - per_task[None, :]).sum(axis=1) / (n_past * lam)
    return value, float(influence.std(ddof=1) / math.sqrt(n))


TaskPredict = Callable[[np.ndarray, int, np.ndarray], np.ndarray]


def _draw_losses(source, datasets, tasks, loss, predict, n, rng):
    draws = source.sample(n, rng)
    out = np.empty((n, len(datasets)))
    for j, w in enumerate(draws):
        for k, (t, d) in enumerate(zip(tasks, datasets)):
            out[j, k] = loss(predict(w, t, d.features), d.labels).mean()
    return out


def disagreement_mc(
    prior_posterior,
    past_test_sets: Sequence[TaskDataset],
    current_train_set: TaskDataset,
    loss: LossFunction,
    lam: float,
    n_mc_prior: int = 30,
    seed=0,
    predict: TaskPredict | None = None,
    return_stderr: bool = False,
):
    """Monte-Carlo estimate of the disagreement term under ``Q_{1:T-1}``.

    Past task ``t`` (zero-based) is evaluated with ``predict(w, t, x)``; the
    current task has index ``len(past_test_sets)``. The same
    ``n_mc_prior`` hypothesis draws serve every past task.
    """
    if not past_test_sets:
        raise BoundError("no-previous-tasks")
    if lam <= 0:
        raise BoundError("lambda", "lam must be positive")
    if predict is None:
        raise BoundError("predict", "a predict(w, task, x) function is required")
    rng = np.random.default_rng(seed)
    n_past = len(past_test_sets)
    datasets = list(past_test_sets) + [current_train_set]
    losses = _draw_losses(prior_posterior, datasets, list(range(n_past + 1)), loss, predict, n_mc_prior, rng)
    value, se = disagreement_from_losses(losses[:, :n_past], losses[:, n_past], lam)
    return (value, se) if return_stderr else value


def forgetting_bound_assemble(
    current_posterior,
    previous_posterior,
    current_train_set: TaskDataset,
    past_test_sets: Sequence[TaskDataset],
    past_after_training_losses,
    cfg: BoundConfig,
    seed=0,
    predict: TaskPredict | None = None,
    loss: LossFunction | None = None,
    kl: float | None = None,
) -> BoundReport:
    """Itemized forgetting bound after the task with index ``len(past_test_sets)``.

    ``kl`` overrides the divergence between the two posteriors; by default it
    is the diagonal-Gaussian closed form.
    """
    if predict is None:
        raise BoundError("predict", "a predict(w, task, x) function is required")
    loss = loss or LossFunction()
    after = np.asarray(past_after_training_losses, dtype=float).reshape(-1)
    if after.size != len(past_test_sets):
        raise MetricsError("vector-length", "one stored loss per past task is required")
    if after.size == 0:
        raise BoundError("no-previous-tasks")
    task = len(past_test_sets)
    lam = cfg.lam_for(task)
    seeds = np.random.SeedSequence(seed if isinstance(seed, int) else 0).spawn(2)
    emp = _draw_losses(
        current_posterior, [current_train_set], [task], loss, predict, cfg.n_mc, np.random.default_rng(seeds[0])
    )[:, 0]
    if kl is None:
        kl = kl_posteriors(current_posterior, previous_posterior)
    hoeff, conf = structural_terms(lam, cfg.K, current_train_set.m, cfg.delta)
    dis, dis_se = disagreement_mc(
        previous_posterior,
        past_test_sets,
        current_train_set,
        loss,
        lam,
        cfg.n_mc_prior,
        np.random.default_rng(seeds[1]),
        predict,
        return_stderr=True,
    )
    emp_se = float(emp.std(ddof=1) / math.sqrt(emp.size)) if emp.size > 1 else 0.0
    return BoundReport.from_terms(
        float(emp.mean()),
        float(after.mean()),
        kl / lam,
        hoeff,
        conf,
        dis,
        mc_stderr=math.hypot(emp_se, dis_se),
    )
