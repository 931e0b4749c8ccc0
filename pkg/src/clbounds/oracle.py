"""Exact computations on finite hypothesis spaces.

Everything here works with probability vectors over ``n_hyp`` hypotheses and
per-hypothesis loss tables. Exponentials go through log-sum-exp so that large
``lam * loss`` products never overflow.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
import numpy as np
from scipy.special import logsumexp

PROB_ATOL = 1e-12
MODES = ("cor42", "thm47", "highcov", "gibbs_ratio")


class OracleError(ValueError):
    def __init__(self, code: str, message: str = ""):
        super().__init__(f"{code}: {message}" if message else code)
        self.code = code


@dataclass(frozen=True)
class DiscreteDistribution:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if w.size == 0 or np.any(w < 0) or not np.all(np.isfinite(w)):
            raise OracleError("bad-weights", "weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise OracleError("bad-weights", f"weights sum to {w.sum()!r}")
        object.__setattr__(self, "weights", w / w.sum())

    @classmethod
    def uniform(cls, n: int) -> "DiscreteDistribution":
        return cls(np.full(n, 1.0 / n))

    @classmethod
    def point_mass(cls, n: int, index: int) -> "DiscreteDistribution":
        w = np.zeros(n)
        w[index] = 1.0
        return cls(w)

    @property
    def n(self) -> int:
        return self.weights.size

    def expect(self, values) -> float:
        return float(self.weights @ np.asarray(values, dtype=float))


def _as_weights(dist) -> np.ndarray:
    if isinstance(dist, DiscreteDistribution):
        return dist.weights
    return np.asarray(dist, dtype=float).reshape(-1)


def _log_weights(w: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(w)


def _check_shape(*vectors):
    n = vectors[0].shape
    for v in vectors[1:]:
        if v.shape != n:
            raise OracleError("shape-mismatch", f"{v.shape} vs {n}")


def log_mean_exp(prior, exponents) -> float:
    """``ln E_prior[exp(exponents)]`` computed stably."""
    w = _as_weights(prior)
    x = np.asarray(exponents, dtype=float).reshape(-1)
    _check_shape(w, x)
    return float(logsumexp(x, b=w))


@dataclass
class BoundCheckResult:
    lhs: float
    rhs: float
    mc_stderr: float = 0.0
    mode: str = ""
    violations: int = 0
    flag: str = ""
    details: dict = field(default_factory=dict)

    @property
    def gap(self) -> float:
        return self.rhs - self.lhs

    @property
    def holds(self) -> bool:
        return self.gap >= -3.0 * self.mc_stderr

    def to_json(self) -> dict:
        out = {
            "mode": self.mode,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "gap": self.gap,
            "mc_stderr": self.mc_stderr,
            "holds": self.holds,
            "violations": self.violations,
        }
        if self.flag:
            out["flag"] = self.flag
        return out


# ---------------------------------------------------------------------------
# Elementary exact operations
# ---------------------------------------------------------------------------


def gibbs_posterior(prior, losses, lam: float) -> DiscreteDistribution:
    """Tilt ``prior`` by ``exp(-lam * losses)`` and renormalize."""
    w = _as_weights(prior)
    losses = np.asarray(losses, dtype=float).reshape(-1)
    _check_shape(w, losses)
    if lam < 0:
        raise OracleError("negative-lambda")
    if not np.all(np.isfinite(losses)):
        raise OracleError("non-finite-loss")
    if w.sum() <= 0:
        raise OracleError("degenerate-prior")
    if lam == 0:
        return DiscreteDistribution(w / w.sum())
    logits = _log_weights(w) - lam * losses
    return DiscreteDistribution(np.exp(logits - logsumexp(logits)))


def kl_discrete(q, p) -> float:
    """KL(q || p) with the convention ``0 ln 0 = 0``."""
    qw, pw = _as_weights(q), _as_weights(p)
    _check_shape(qw, pw)
    support = qw > 0
    if np.any(pw[support] <= 0):
        raise OracleError("not-absolutely-continuous")
    qs, ps = qw[support], pw[support]
    return max(float(np.sum(qs * (np.log(qs) - np.log(ps)))), 0.0)


def change_of_measure_check(rho, pi, f, lam: float) -> BoundCheckResult:
    """Exact Donsker-Varadhan inequality for one instance.

    ``lam (E_rho f - E_pi f) <= KL(rho || pi) + ln E_pi exp(lam (f - E_pi f))``
    """
    rw, pw = _as_weights(rho), _as_weights(pi)
    f = np.asarray(f, dtype=float).reshape(-1)
    _check_shape(rw, pw, f)
    kl = kl_discrete(rw, pw)
    mean_pi = float(pw @ f)
    lhs = lam * (float(rw @ f) - mean_pi)
    rhs = kl + log_mean_exp(pw, lam * (f - mean_pi))
    return BoundCheckResult(lhs=lhs, rhs=rhs, mode="change_of_measure")


def optimal_tilt(rho, pi, lam: float, offset: float = 0.0) -> np.ndarray:
    """The ``f`` that turns the change-of-measure inequality into an equality.

    ``f = ln(d rho / d pi) / lam`` shifted so that ``E_pi f = offset``. Off the support of ``rho`` the
    log-ratio is undefined, so ``rho`` and ``pi`` must share support.
    """
    rw, pw = _as_weights(rho), _as_weights(pi)
    if np.any((rw > 0) != (pw > 0)):
        raise OracleError("support-mismatch", "equality needs supp(rho) == supp(pi)")
    f = np.zeros_like(rw)
    s = rw > 0
    f[s] = np.log(rw[s] / pw[s]) / lam
    # Shift so that E_pi f equals ``offset`` on the common support.
    return f - float(pw @ f) + offset


def disagreement_exact(prior, past_losses, current_emp_losses, lam: float) -> float:
    """``(1/lam) ln E_prior exp(lam (L_s - Lhat_t))``, the log-MGF term of the
    two-task forgetting bound."""
    if lam <= 0:
        raise OracleError("non-positive-lambda")
    ls = np.asarray(past_losses, dtype=float).reshape(-1)
    lt = np.asarray(current_emp_losses, dtype=float).reshape(-1)
    _check_shape(ls, lt)
    return log_mean_exp(prior, lam * (ls - lt)) / lam


def _exact_cov(w: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    ea, eb = w @ a, w @ b
    return float(w @ ((a - ea) * (b - eb)))


def loss_covariance(prior, emp_losses_s, emp_losses_t, lam: float) -> float:
    """Covariance under ``prior`` of ``exp(-lam Lhat_s)`` and ``exp(-lam Lhat_t)``."""
    w = _as_weights(prior)
    a = np.asarray(emp_losses_s, dtype=float).reshape(-1)
    b = np.asarray(emp_losses_t, dtype=float).reshape(-1)
    _check_shape(w, a, b)
    return _exact_cov(w, np.exp(-lam * a), np.exp(-lam * b))


def task_covariance(prior, emp_tables, i: int, lams) -> float:
    """Covariance between task ``i``'s tilt and the pooled tilt of all other tasks.

    ``cov_P(exp(-lam_T Lhat_i), exp(-sum_{j != i} lam_j Lhat_j))`` where
    ``lam_T`` is the last task's parameter. ``i`` is zero-based.
    """
    tables = np.atleast_2d(np.asarray(emp_tables, dtype=float))
    n_tasks = tables.shape[0]
    lams = np.broadcast_to(np.asarray(lams, dtype=float), (n_tasks,))
    if not 0 <= i < n_tasks:
        raise OracleError("task-index", f"{i} not in [0, {n_tasks})")
    w = _as_weights(prior)
    _check_shape(w, tables[0])
    others = np.delete(np.arange(n_tasks), i)
    pooled = lams[others] @ tables[others] if others.size else np.zeros_like(w)
    return _exact_cov(w, np.exp(-lams[-1] * tables[i]), np.exp(-pooled))


def sequential_gibbs(prior, emp_tables, lams) -> DiscreteDistribution:
    """Chain of Gibbs updates, each posterior serving as the next prior."""
    tables = np.atleast_2d(np.asarray(emp_tables, dtype=float))
    lams = np.broadcast_to(np.asarray(lams, dtype=float), (tables.shape[0],))
    q = prior if isinstance(prior, DiscreteDistribution) else DiscreteDistribution(prior)
    for table, lam in zip(tables, lams):
        q = gibbs_posterior(q, table, lam)
    return q


def pooled_gibbs(prior, emp_tables, lams) -> DiscreteDistribution:
    """Single-shot Gibbs posterior with the summed exponent ``sum_j lam_j Lhat_j``."""
    tables = np.atleast_2d(np.asarray(emp_tables, dtype=float))
    lams = np.broadcast_to(np.asarray(lams, dtype=float), (tables.shape[0],))
    return gibbs_posterior(prior, lams @ tables, 1.0)


def gibbs_objective(q, prior, emp_losses, lam: float) -> float:
    """``E_q Lhat + KL(q || prior) / lam``; minimized by the Gibbs posterior."""
    return float(_as_weights(q) @ np.asarray(emp_losses, dtype=float)) + kl_discrete(q, prior) / lam


def forgetting_bound_exact(q_prev, q_new, past_losses, current_emp_losses, lam: float):
    """Both sides of the two-task forgetting inequality, every term exact.

    Returns ``(lhs, rhs)`` with ``lhs = E_{q_new} L_s`` and
    ``rhs = E_{q_new} Lhat_t + KL(q_new || q_prev)/lam + disagreement``.
    """
    qn = _as_weights(q_new)
    lhs = float(qn @ np.asarray(past_losses, dtype=float))
    rhs = (
        float(qn @ np.asarray(current_emp_losses, dtype=float))
        + kl_discrete(q_new, q_prev) / lam
        + disagreement_exact(q_prev, past_losses, current_emp_losses, lam)
    )
    return lhs, rhs


# ---------------------------------------------------------------------------
# Resamplable hypothesis spaces
# ---------------------------------------------------------------------------


@dataclass
class DiscreteHypothesisSpace:
    """Finite hypothesis set with per-task expected losses and a data model.

    A task sample of size ``m`` is ``m`` shared uniforms ``u_j``; hypothesis
    ``h`` pays ``K`` on datum ``j`` iff ``u_j < L[t][h] / K``. Each datum's
    loss is therefore Bernoulli with mean ``L[t][h]``, and empirical losses
    are monotone in the expected loss within every sample.
    """

    K: float
    loss_means: np.ndarray  # (T, n_hyp)
    m: np.ndarray  # (T,)
    prior: DiscreteDistribution

    def __post_init__(self):
        self.loss_means = np.atleast_2d(np.asarray(self.loss_means, dtype=float))
        self.m = np.broadcast_to(np.asarray(self.m, dtype=int), (self.loss_means.shape[0],)).copy()
        if not isinstance(self.prior, DiscreteDistribution):
            self.prior = DiscreteDistribution(self.prior)
        if self.K < 0:
            raise OracleError("bad-space", "K must be nonnegative")
        if np.any(self.loss_means < 0) or np.any(self.loss_means > self.K):
            raise OracleError("bad-space", "expected losses must lie in [0, K]")
        if np.any(self.m < 1):
            raise OracleError("bad-space", "m must be positive")
        if self.prior.n != self.n_hyp:
            raise OracleError("bad-space", "prior length differs from n_hyp")

    @property
    def n_hyp(self) -> int:
        return self.loss_means.shape[1]

    @property
    def n_tasks(self) -> int:
        return self.loss_means.shape[0]

    def sample_emp_losses(self, task: int, rng: np.random.Generator, n_resample: int = 1) -> np.ndarray:
        """``(n_resample, n_hyp)`` empirical losses for one task."""
        m = int(self.m[task])
        if self.K == 0:
            return np.zeros((n_resample, self.n_hyp))
        u = rng.random((n_resample, m, 1))
        counts = (u < self.loss_means[task] / self.K).sum(axis=1)
        return self.K * counts / m

    def sample_all(self, rng: np.random.Generator) -> np.ndarray:
        """One draw of every task's empirical loss table, ``(T, n_hyp)``."""
        return np.vstack([self.sample_emp_losses(t, rng)[0] for t in range(self.n_tasks)])

    @classmethod
    def from_json(cls, doc: dict | str | Path) -> "DiscreteHypothesisSpace":
        if isinstance(doc, (str, Path)):
            doc = json.loads(Path(doc).read_text())
        try:
            n_hyp = int(doc["n_hyp"])
            tasks = doc["tasks"]
            means = np.array([t["loss_means"] for t in tasks], dtype=float)
            m = np.array([t["m"] for t in tasks], dtype=int)
            prior = doc.get("prior") or [1.0 / n_hyp] * n_hyp
            K = float(doc["K"])
        except (KeyError, TypeError) as exc:
            raise OracleError("bad-space", f"malformed space document: {exc}") from exc
        if means.shape[1] != n_hyp:
            raise OracleError("bad-space", "loss_means length differs from n_hyp")
        return cls(K=K, loss_means=means, m=m, prior=DiscreteDistribution(prior))

    def to_json(self) -> dict:
        return {
            "K": self.K,
            "n_hyp": self.n_hyp,
            "tasks": [{"m": int(m), "loss_means": row.tolist()} for m, row in zip(self.m, self.loss_means)],
            "prior": self.prior.weights.tolist(),
        }


def _lam_vector(lam_spec, n_tasks: int) -> np.ndarray:
    lams = np.broadcast_to(np.asarray(lam_spec, dtype=float), (n_tasks,)).copy()
    if np.any(lams <= 0):
        raise OracleError("non-positive-lambda")
    return lams


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        return float(x.mean()), 0.0
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def oracle_bound_check(
    space: DiscreteHypothesisSpace,
    mode: str,
    lam_spec=1.0,
    n_resample: int = 2000,
    seed=0,
    c: float = 0.1,
) -> BoundCheckResult:
    """Estimate an oracle bound's left side by resampling training sets and
    compare it with the right side.

    Modes:

    ``cor42``
        Two tasks (first = source, second = target; a one-task space uses the
        same task for both). ``Q_s`` is the Gibbs posterior on one fixed source
        sample; ``S_t`` is resampled. The infimum over posteriors is evaluated
        exactly as ``-(1/lam) ln E_{Q_s} exp(-lam L_t)``.
    ``thm47``
        Chain of Gibbs posteriors over all tasks; for every task ``i`` the mean
        expected loss of the final posterior is compared with
        ``lam_T K^2 / (8 m_i) + L(P, D_i)``. Requires nonnegative task
        covariance on each resample.
    ``highcov``
        As ``thm47`` but the right side is ``lam_T K^2 / (8 m_i) + c / lam_T``
        and each resample must also satisfy
        ``cov_P(i, [T]) >= exp(-c) - E_P exp(-lam_T Lhat_i)`` for ``i < T``.
    ``gibbs_ratio``
        Right side ``lam_T K^2/(8 m_i) + (1/lam_T) E ln(Z_{-i} / Z)``, with the
        expectation estimated on the same resamples; needs equal lambdas.

    The reported result is the task with the smallest gap (worst case).
    """
    if mode not in MODES:
        raise OracleError("mode", f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    prior = space.prior
    K = space.K

    if mode == "cor42":
        s = 0
        t = 1 if space.n_tasks > 1 else 0
        lam = float(_lam_vector(lam_spec, space.n_tasks)[t])
        q_s = gibbs_posterior(prior, space.sample_emp_losses(s, rng)[0], lam)
        emp_t = space.sample_emp_losses(t, rng, n_resample)
        lhs_samples = np.array([gibbs_posterior(q_s, row, lam).expect(space.loss_means[s]) for row in emp_t])
        inf_term = -log_mean_exp(q_s, -lam * space.loss_means[t]) / lam
        hoeff = lam * K**2 / (8 * space.m[t])
        disagreement = disagreement_exact(q_s, space.loss_means[s], space.loss_means[t], lam)
        lhs, se = _mean_se(lhs_samples)
        return BoundCheckResult(
            lhs=lhs,
            rhs=inf_term + hoeff + disagreement,
            mc_stderr=se,
            mode=mode,
            details={"inf_term": inf_term, "hoeffding": hoeff, "disagreement": disagreement},
        )

    T = space.n_tasks
    lams = _lam_vector(lam_spec, T)
    if mode == "gibbs_ratio" and not np.allclose(lams, lams[-1]):
        raise OracleError("lambda", "gibbs_ratio needs equal lambdas across tasks")
    w = prior.weights
    task_range = range(T - 1) if mode in ("highcov", "gibbs_ratio") and T > 1 else range(T)
    n_idx = len(task_range)
    lhs_s = np.empty((n_resample, n_idx))
    rhs_s = np.empty((n_resample, n_idx))
    violations = 0
    for r in range(n_resample):
        tables = space.sample_all(rng)
        q_final = sequential_gibbs(prior, tables, lams)
        bad = False
        for k, i in enumerate(task_range):
            lhs_s[r, k] = q_final.expect(space.loss_means[i])
            hoeff = lams[-1] * K**2 / (8 * space.m[i])
            if mode == "gibbs_ratio":
                others = np.delete(np.arange(T), i)
                log_z_minus = log_mean_exp(w, -(lams[others] @ tables[others])) if others.size else 0.0
                log_z = log_mean_exp(w, -(lams @ tables))
                rhs_s[r, k] = hoeff + (log_z_minus - log_z) / lams[-1]
                continue
            cov = task_covariance(w, tables, i, lams)
            if cov < -PROB_ATOL:
                bad = True
            if mode == "thm47":
                rhs_s[r, k] = hoeff + prior.expect(space.loss_means[i])
            else:
                floor = math.exp(-c) - float(w @ np.exp(-lams[-1] * tables[i]))
                if cov < floor - PROB_ATOL:
                    bad = True
                rhs_s[r, k] = hoeff + c / lams[-1]
        violations += bad

    lhs_means = lhs_s.mean(axis=0)
    rhs_means = rhs_s.mean(axis=0)
    diffs = rhs_s - lhs_s
    ses = diffs.std(axis=0, ddof=1) / math.sqrt(n_resample) if n_resample > 1 else np.zeros(n_idx)
    k = int(np.argmin((rhs_means - lhs_means) + 3 * ses))
    return BoundCheckResult(
        lhs=float(lhs_means[k]),
        rhs=float(rhs_means[k]),
        mc_stderr=float(ses[k]),
        mode=mode,
        violations=violations,
        flag="precondition-violated" if violations else "",
        details={"task": list(task_range)[k], "per_task_gap": (rhs_means - lhs_means).tolist()},
    )


def hoeffding_mgf_check(
    space: DiscreteHypothesisSpace,
    task: int,
    t: float,
    n_resample: int = 10_000,
    seed=0,
    delta: float = 0.05,
) -> BoundCheckResult:
    """Frequency with which ``ln E_pi exp(t (Lhat - L)) >= t^2 K^2/(8m) + ln(1/delta)``.

    ``lhs`` is the observed violation rate, ``rhs`` is ``delta``, and the
    stderr is the binomial one at rate ``delta``.
    """
    if not 0 < delta <= 1:
        raise OracleError("delta", "delta must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    m = int(space.m[task])
    emp = space.sample_emp_losses(task, rng, n_resample)
    w = space.prior.weights
    expo = t * (emp - space.loss_means[task])
    values = logsumexp(expo, b=w, axis=1)
    threshold = t**2 * space.K**2 / (8 * m) + math.log(1 / delta)
    violations = int(np.sum(values >= threshold))
    return BoundCheckResult(
        lhs=violations / n_resample,
        rhs=delta,
        mc_stderr=math.sqrt(delta * (1 - delta) / n_resample),
        mode="hoeffding",
        violations=violations,
        details={"threshold": threshold, "max_log_mgf": float(values.max())},
    )


def result_json(result: BoundCheckResult) -> str:
    return json.dumps(result.to_json(), sort_keys=True)


__all__ = [
    "BoundCheckResult",
    "DiscreteDistribution",
    "DiscreteHypothesisSpace",
    "OracleError",
    "change_of_measure_check",
    "disagreement_exact",
    "forgetting_bound_exact",
    "gibbs_objective",
    "gibbs_posterior",
    "hoeffding_mgf_check",
    "kl_discrete",
    "log_mean_exp",
    "loss_covariance",
    "oracle_bound_check",
    "optimal_tilt",
    "pooled_gibbs",
    "result_json",
    "sequential_gibbs",
    "task_covariance",
]
