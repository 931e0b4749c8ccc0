"""Property sweeps over finite hypothesis spaces and finite-difference gradient checks."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .mlp import MlpArchitecture, backward, cross_entropy, forward, init_params
from .oracle import (
    DiscreteDistribution,
    DiscreteHypothesisSpace,
    change_of_measure_check,
    forgetting_bound_exact,
    gibbs_objective,
    gibbs_posterior,
    hoeffding_mgf_check,
    optimal_tilt,
    oracle_bound_check,
    pooled_gibbs,
    sequential_gibbs,
)

SCOPES = ("all", "lemmas", "oracle", "gradients")


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: value={self.value:.3g} threshold={self.threshold:.3g} ({self.seconds:.2f}s)"

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "passed": bool(self.passed),
            "value": self.value,
            "threshold": self.threshold,
            "seconds": self.seconds,
            "detail": self.detail,
        }


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _random_dist(rng, n, sparse=False):
    w = rng.dirichlet(np.full(n, rng.uniform(0.2, 2.0)))
    if sparse and n > 2:
        w[rng.random(n) < 0.3] = 0.0
        if w.sum() == 0:
            w[rng.integers(n)] = 1.0
    return DiscreteDistribution(w / w.sum())


@_timed
def change_of_measure_sweep(n_instances=1000, seed=0) -> CheckResult:
    """Random (rho, pi, f, lam) triples: the inequality gap must be nonnegative;
    the tilted ``f`` must close it."""
    rng = np.random.default_rng(seed)
    worst, worst_eq = math.inf, 0.0
    violations = 0
    for _ in range(n_instances):
        n = int(rng.integers(2, 21))
        pi = _random_dist(rng, n)
        rho = _random_dist(rng, n, sparse=True)
        lam = float(np.exp(rng.uniform(np.log(0.05), np.log(50))))
        f = rng.normal(0, rng.uniform(0.1, 3.0), n)
        gap = change_of_measure_check(rho, pi, f, lam).gap
        worst = min(worst, gap)
        violations += gap < -1e-12
        rho_full = _random_dist(rng, n)
        eq = change_of_measure_check(rho_full, pi, optimal_tilt(rho_full, pi, lam, rng.normal()), lam).gap
        worst_eq = max(worst_eq, abs(eq))
    passed = violations == 0 and worst_eq < 1e-10
    return CheckResult(
        "change-of-measure",
        passed,
        worst,
        -1e-12,
        {"instances": n_instances, "violations": violations, "max_equality_gap": worst_eq},
    )


@_timed
def two_task_bound_sweep(n_instances=1000, seed=0) -> CheckResult:
    """Exact two-task forgetting bound on random finite instances."""
    rng = np.random.default_rng(seed)
    worst, violations = math.inf, 0
    for _ in range(n_instances):
        n = int(rng.integers(2, 21))
        q_prev = _random_dist(rng, n)
        q_new = _random_dist(rng, n, sparse=True)
        past = rng.random(n)
        cur = rng.random(n)
        lam = float(np.exp(rng.uniform(np.log(0.05), np.log(50))))
        lhs, rhs = forgetting_bound_exact(q_prev, q_new, past, cur, lam)
        worst = min(worst, rhs - lhs)
        violations += rhs - lhs < -1e-10
    return CheckResult("two-task-bound", violations == 0, worst, -1e-10, {"instances": n_instances, "violations": violations})


@_timed
def gibbs_optimality_sweep(n_instances=200, n_perturb=50, seed=0) -> CheckResult:
    """The Gibbs posterior never loses to a perturbed posterior on its own objective."""
    rng = np.random.default_rng(seed)
    worst, violations = math.inf, 0
    for _ in range(n_instances):
        n = int(rng.integers(2, 21))
        prior = _random_dist(rng, n)
        losses = rng.random(n)
        lam = float(np.exp(rng.uniform(np.log(0.05), np.log(50))))
        q = gibbs_posterior(prior, losses, lam)
        best = gibbs_objective(q, prior, losses, lam)
        for _ in range(n_perturb):
            scale = rng.uniform(0.01, 2.0)
            w = q.weights * np.exp(rng.normal(0, scale, n))
            other = DiscreteDistribution(w / w.sum())
            diff = gibbs_objective(other, prior, losses, lam) - best
            worst = min(worst, diff)
            violations += diff < -1e-12
    return CheckResult(
        "gibbs-optimality",
        violations == 0,
        worst,
        -1e-12,
        {"instances": n_instances, "perturbations": n_perturb, "violations": violations},
    )


@_timed
def sequential_pooled_sweep(n_chains=200, seed=0) -> CheckResult:
    """Sequential Gibbs updates against the one-shot pooled posterior."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_chains):
        n = int(rng.integers(2, 21))
        T = int(rng.integers(1, 11))
        prior = _random_dist(rng, n)
        tables = rng.random((T, n))
        lams = np.exp(rng.uniform(np.log(0.05), np.log(50), T))
        a = sequential_gibbs(prior, tables, lams).weights
        b = pooled_gibbs(prior, tables, lams).weights
        worst = max(worst, 0.5 * float(np.abs(a - b).sum()))
    return CheckResult("sequential-vs-pooled", worst < 1e-12, worst, 1e-12, {"chains": n_chains})


def identical_tasks_space(n_hyp=8, T=5, m=50, seed=0) -> DiscreteHypothesisSpace:
    """Every task shares one loss table, so task covariances are nonnegative."""
    rng = np.random.default_rng(seed)
    means = rng.uniform(0.05, 0.6, n_hyp)
    return DiscreteHypothesisSpace(1.0, np.tile(means, (T, 1)), np.full(T, m), DiscreteDistribution.uniform(n_hyp))


def low_loss_space(n_hyp=8, T=5, m=50, seed=0) -> DiscreteHypothesisSpace:
    """Identical tasks with losses small enough that ``E_P exp(-Lhat)`` stays above ``exp(-0.1)``."""
    rng = np.random.default_rng(seed)
    means = rng.uniform(0.0, 0.02, n_hyp)
    return DiscreteHypothesisSpace(1.0, np.tile(means, (T, 1)), np.full(T, m), DiscreteDistribution.uniform(n_hyp))


@_timed
def oracle_mode_check(mode: str, space: DiscreteHypothesisSpace, lam, n_resample=2000, seed=0, c=0.1) -> CheckResult:
    res = oracle_bound_check(space, mode, lam, n_resample=n_resample, seed=seed, c=c)
    passed = res.holds and res.violations == 0
    return CheckResult(
        f"oracle-{mode}",
        passed,
        res.gap,
        -3 * res.mc_stderr,
        {**res.to_json(), "task": res.details.get("task")},
    )


@_timed
def hoeffding_check(n_resample=10_000, m=50, delta=0.05, t=5.0, seed=0) -> CheckResult:
    """Violation frequency of the exponential-moment concentration bound."""
    space = identical_tasks_space(T=1, m=m, seed=seed)
    res = hoeffding_mgf_check(space, 0, t, n_resample, seed=seed, delta=delta)
    limit = delta + 3 * res.mc_stderr
    return CheckResult("hoeffding-frequency", res.lhs <= limit, res.lhs, limit, res.to_json())


def degenerate_space() -> DiscreteHypothesisSpace:
    return DiscreteHypothesisSpace(1.0, np.array([[0.3], [0.3]]), np.array([20, 20]), DiscreteDistribution.uniform(1))


@_timed
def degenerate_oracle_check(n_resample=200, seed=0) -> CheckResult:
    """A single-hypothesis space: every mode must hold."""
    space = degenerate_space()
    results = {mode: oracle_bound_check(space, mode, 2.0, n_resample=n_resample, seed=seed) for mode in ("cor42", "thm47", "gibbs_ratio")}
    results["highcov"] = oracle_bound_check(space, "highcov", 2.0, n_resample=n_resample, seed=seed, c=1.0)
    worst = min(r.gap + 3 * r.mc_stderr for r in results.values())
    return CheckResult("oracle-degenerate", all(r.holds for r in results.values()), worst, 0.0, {k: v.to_json() for k, v in results.items()})


def _fd_gradient(fun, x, h=1e-5):
    g = np.empty_like(x)
    for i in range(x.size):
        e = x[i]
        x[i] = e + h
        fp = fun(x)
        x[i] = e - h
        fm = fun(x)
        x[i] = e
        g[i] = (fp - fm) / (2 * h)
    return g


def random_architecture(rng, max_params=200) -> MlpArchitecture:
    while True:
        depth = int(rng.integers(0, 3))
        arch = MlpArchitecture(
            input_dim=int(rng.integers(1, 6)),
            hidden_dims=tuple(int(h) for h in rng.integers(1, 33, depth)),
            n_tasks=int(rng.integers(1, 4)),
            classes_per_task=int(rng.integers(2, 4)),
        )
        if arch.n_params <= max_params:
            return arch


def coordinate_errors(g: np.ndarray, g_fd: np.ndarray, floor: float = 1e-5) -> np.ndarray:
    """Per-coordinate relative error, with the scale floored at ``floor`` so
    near-zero gradients are compared absolutely rather than divided by noise."""
    diff = np.abs(g - g_fd)
    return diff / np.maximum(np.maximum(np.abs(g), np.abs(g_fd)), floor)


@_timed
def gradient_check(n_arch=20, seed=0, h=1e-5) -> CheckResult:
    """Backprop against central differences on random architectures with at most 200 parameters."""
    rng = np.random.default_rng(seed)
    worst, worst_abs = 0.0, 0.0
    sizes = []
    for _ in range(n_arch):
        arch = random_architecture(rng)
        params = init_params(arch, rng) * rng.uniform(0.5, 3.0)
        task = int(rng.integers(arch.n_tasks))
        n = int(rng.integers(1, 9))
        x = rng.normal(size=(n, arch.input_dim))
        y = rng.integers(arch.classes_per_task, size=n)
        g = backward(params, arch, task, x, y)

        def fun(p):
            return cross_entropy(forward(p, arch, task, x), y)

        g_fd = _fd_gradient(fun, params.copy(), h)
        worst = max(worst, float(coordinate_errors(g, g_fd).max()))
        worst_abs = max(worst_abs, float(np.abs(g - g_fd).max()))
        sizes.append(arch.n_params)
    return CheckResult(
        "gradients", worst < 1e-4, worst, 1e-4, {"architectures": n_arch, "max_params": max(sizes), "max_abs_error": worst_abs},
    )


def verify_suite(scope: str = "all", seed: int = 0, quick: bool = False) -> list[CheckResult]:
    """Run the checks in ``scope``; ``quick`` shrinks sample counts for smoke tests."""
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}")
    k = 10 if quick else 1
    out = []
    if scope in ("all", "lemmas"):
        out.append(change_of_measure_sweep(1000 // k, seed))
        out.append(two_task_bound_sweep(1000 // k, seed))
        out.append(hoeffding_check(10_000 // k, seed=seed))
    if scope in ("all", "oracle"):
        out.append(gibbs_optimality_sweep(200 // k, 50, seed))
        out.append(sequential_pooled_sweep(200 // k, seed))
        n_res = 2000 // k
        ident = identical_tasks_space(seed=seed)
        out.append(oracle_mode_check("thm47", ident, 10.0, n_res, seed))
        out.append(oracle_mode_check("highcov", low_loss_space(seed=seed), 1.0, n_res, seed, c=0.1))
        out.append(oracle_mode_check("gibbs_ratio", ident, 10.0, n_res, seed))
        two = DiscreteHypothesisSpace(
            1.0,
            np.random.default_rng(seed).uniform(0.05, 0.6, (2, 8)),
            np.array([50, 50]),
            DiscreteDistribution.uniform(8),
        )
        out.append(oracle_mode_check("cor42", two, 10.0, n_res, seed))
        out.append(degenerate_oracle_check(200 // k, seed))
    if scope in ("all", "gradients"):
        out.append(gradient_check(20, seed))
    return out
