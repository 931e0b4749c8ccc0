import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from clbounds.bounds import kl_gaussian_diag, kl_isotropic_shift, kl_posteriors
from clbounds.learner import (
    AdamState,
    EwcState,
    GaussianMeanField,
    LearnerError,
    StackedTasks,
    ewc_posterior,
    ewc_train_task,
    evaluate_posterior,
    init_prior,
    load_checkpoint,
    reparam_sample,
    sample_task_losses,
    save_checkpoint,
    vi_train_task,
)
from clbounds.metrics import CLAMPED_CE, LossFunction, TaskDataset
from clbounds.mlp import ArchitectureError, MlpArchitecture, backward, cross_entropy, fisher_diagonal, forward, init_params


def fd_gradient(f, w, h=1e-6):
    g = np.zeros_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (f(w + e) - f(w - e)) / (2 * h)
    return g


def separable(m, d=2, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(m, d))
    return TaskDataset(x, (x[:, 0] > 0).astype(int))


# --- MLP ----------------------------------------------------------------------------


def test_zero_params_give_zero_logits():
    arch = MlpArchitecture(input_dim=4, hidden_dims=(5,), n_tasks=2)
    assert np.all(forward(np.zeros(arch.n_params), arch, 1, np.ones((3, 4))) == 0)


def test_linear_head_by_hand():
    arch = MlpArchitecture(input_dim=2, hidden_dims=(), n_tasks=1)
    w = np.array([1.0, 2.0, 3.0, 4.0, 0.5, -0.5])  # W row-major then bias
    assert_allclose(forward(w, arch, 0, np.array([[1.0, -1.0]])), [[1 - 3 + 0.5, 2 - 4 - 0.5]])


def test_linear_gradient_is_softmax_minus_onehot_times_input():
    arch = MlpArchitecture(input_dim=3, hidden_dims=(), n_tasks=1)
    rng = np.random.default_rng(0)
    w = rng.normal(size=arch.n_params)
    x = rng.normal(size=(1, 3))
    logits = forward(w, arch, 0, x)[0]
    p = np.exp(logits) / np.exp(logits).sum()
    d = p - np.array([0.0, 1.0])
    expected = np.concatenate([np.outer(x[0], d).ravel(), d])
    assert_allclose(backward(w, arch, 0, x, np.array([1])), expected, atol=1e-14)


@settings(deadline=None, max_examples=20)
@given(st.integers(0, 2**31 - 1))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    depth = int(rng.integers(0, 3))
    arch = MlpArchitecture(
        input_dim=int(rng.integers(1, 5)),
        hidden_dims=tuple(int(h) for h in rng.integers(1, 6, depth)),
        n_tasks=int(rng.integers(1, 3)),
        classes_per_task=int(rng.integers(2, 4)),
    )
    task = int(rng.integers(arch.n_tasks))
    w = rng.normal(size=arch.n_params)
    x = rng.normal(size=(6, arch.input_dim))
    y = rng.integers(0, arch.classes_per_task, 6)
    g = backward(w, arch, task, x, y)
    g_fd = fd_gradient(lambda v: cross_entropy(forward(v, arch, task, x), y), w)
    assert_allclose(g, g_fd, rtol=1e-4, atol=1e-7)


def test_other_heads_get_no_gradient():
    arch = MlpArchitecture(input_dim=3, hidden_dims=(4,), n_tasks=3)
    rng = np.random.default_rng(1)
    g = backward(rng.normal(size=arch.n_params), arch, 1, rng.normal(size=(5, 3)), rng.integers(0, 2, 5))
    assert np.all(g[arch.head_slice(0)] == 0) and np.all(g[arch.head_slice(2)] == 0)
    assert np.any(g[arch.head_slice(1)] != 0)


def test_architecture_errors():
    arch = MlpArchitecture(input_dim=3, hidden_dims=(4,), n_tasks=2)
    with pytest.raises(ArchitectureError):
        forward(np.zeros(arch.n_params), arch, 2, np.zeros((1, 3)))
    with pytest.raises(ArchitectureError):
        forward(np.zeros(arch.n_params), arch, 0, np.zeros((1, 4)))
    with pytest.raises(ArchitectureError):
        forward(np.zeros(arch.n_params - 1), arch, 0, np.zeros((1, 3)))
    with pytest.raises(ArchitectureError):
        MlpArchitecture(activation="relu")


def test_fisher_matches_explicit_expectation():
    arch = MlpArchitecture(input_dim=2, hidden_dims=(3,), n_tasks=1)
    rng = np.random.default_rng(4)
    w = rng.normal(size=arch.n_params)
    x = rng.normal(size=(7, 2))
    expected = np.zeros(arch.n_params)
    for xi in x:
        logits = forward(w, arch, 0, xi[None])[0]
        p = np.exp(logits - logits.max())
        p /= p.sum()
        for c in range(2):
            expected += p[c] * backward(w, arch, 0, xi[None], np.array([c])) ** 2
    assert_allclose(fisher_diagonal(w, arch, 0, x), expected / len(x), rtol=1e-10, atol=1e-14)


def test_fisher_is_nonnegative_and_head_local():
    arch = MlpArchitecture(input_dim=3, hidden_dims=(4,), n_tasks=2)
    rng = np.random.default_rng(2)
    f = fisher_diagonal(rng.normal(size=arch.n_params), arch, 0, rng.normal(size=(50, 3)), n_samples=20)
    assert np.all(f >= 0)
    assert np.all(f[arch.head_slice(1)] == 0)


# --- posteriors and Adam ----------------------------------------------------------------


def test_reparam_sample_is_deterministic_and_exact_for_point_mass():
    q = GaussianMeanField(np.arange(4.0), np.log(np.full(4, 0.3)))
    assert_allclose(reparam_sample(q, seed=5), reparam_sample(q, seed=5), rtol=0)
    pm = GaussianMeanField.point_mass(np.arange(4.0))
    assert np.all(reparam_sample(pm, seed=9) == np.arange(4.0))


def test_posterior_sample_statistics():
    q = GaussianMeanField(np.array([1.0, -2.0]), np.log([0.5, 2.0]))
    s = q.sample(200_000, np.random.default_rng(0))
    assert_allclose(s.mean(axis=0), q.mean, atol=0.02)
    assert_allclose(s.std(axis=0), [0.5, 2.0], rtol=0.01)


def test_posterior_rejects_nan():
    with pytest.raises(LearnerError):
        GaussianMeanField(np.array([np.nan]), np.zeros(1))


def test_adam_first_step_moves_by_lr():
    p = np.array([1.0, -1.0])
    AdamState(lr=0.1).step([p], [np.array([3.0, -0.2])])
    assert_allclose(p, [0.9, -0.9], atol=1e-6)


def test_adam_minimizes_quadratic():
    p = np.array([5.0, -3.0])
    adam = AdamState(lr=0.05)
    for _ in range(2000):
        adam.step([p], [2 * p])
    assert np.all(np.abs(p) < 1e-2)
    assert adam.fresh().step_count == 0


# --- VI training ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_arch():
    return MlpArchitecture(input_dim=2, hidden_dims=(8,), n_tasks=2)


def test_vi_tiny_lambda_stays_at_prior(small_arch):
    prior = init_prior(small_arch, np.random.default_rng(0), 0.1)
    q = vi_train_task(prior, small_arch, separable(300), 0, lam=1e-6, epochs=1, adam=AdamState(lr=1e-4))
    assert np.max(np.abs(q.mean - prior.mean)) < 1e-3


def test_vi_learns_separable_task(small_arch):
    prior = init_prior(small_arch, np.random.default_rng(0), 0.05)
    q = vi_train_task(prior, small_arch, separable(2000), 0, lam=2000.0, epochs=3, adam=AdamState(lr=1e-2))
    err = evaluate_posterior(q, small_arch, 0, separable(1000, seed=1), LossFunction(), n_mc=20)
    assert err < 0.05


def test_vi_leaves_inactive_head_untouched(small_arch):
    prior = init_prior(small_arch, np.random.default_rng(0), 0.1)
    q = vi_train_task(prior, small_arch, separable(200), 1, lam=100.0)
    hs = small_arch.head_slice(0)
    assert np.all(q.mean[hs] == prior.mean[hs]) and np.all(q.log_std[hs] == prior.log_std[hs])


def test_vi_kl_grows_with_lambda(small_arch):
    prior = init_prior(small_arch, np.random.default_rng(0), 0.1)
    data = separable(500)
    kls = [kl_posteriors(vi_train_task(prior, small_arch, data, 0, lam, seed=3, adam=AdamState(lr=1e-2)), prior) for lam in (1e-4, 1e-3, 1e-2)]
    assert kls[0] < kls[1] < kls[2]


def test_vi_rejects_bad_lambda(small_arch):
    prior = init_prior(small_arch, np.random.default_rng(0))
    with pytest.raises(LearnerError):
        vi_train_task(prior, small_arch, separable(10), 0, lam=0.0)


# --- EWC ----------------------------------------------------------------------------------


def test_ewc_penalty_zero_at_anchor():
    s = EwcState(np.array([1.0, 2.0]), np.array([3.0, 4.0]), lam_ewc=10.0)
    assert s.penalty(s.weights) == 0.0
    assert_allclose(s.penalty(np.array([2.0, 2.0])), 15.0)


def test_ewc_zero_strength_is_plain_training(small_arch):
    w0 = init_params(small_arch, np.random.default_rng(0))
    data = separable(300)
    fisher = np.ones_like(w0)
    a = ewc_train_task(EwcState(w0, fisher, lam_ewc=0.0), small_arch, data, 0, seed=1)
    b = ewc_train_task(EwcState(w0, np.zeros_like(w0), lam_ewc=5.0), small_arch, data, 0, seed=1)
    assert_allclose(a.weights, b.weights, rtol=0, atol=1e-15)


def test_ewc_large_strength_pins_weights(small_arch):
    rng = np.random.default_rng(0)
    w0 = init_params(small_arch, rng)
    s = EwcState(w0, np.ones_like(w0), lam_ewc=1e6)
    out = ewc_train_task(s, small_arch, separable(300), 0, adam=AdamState(lr=1e-3))
    idx = small_arch.active_index(0)
    assert np.max(np.abs(out.weights[idx] - w0[idx])) < 1e-2


def test_ewc_fisher_accumulates(small_arch):
    w0 = init_params(small_arch, np.random.default_rng(0))
    s1 = ewc_train_task(EwcState.initial(w0), small_arch, separable(200), 0)
    s2 = ewc_train_task(s1, small_arch, separable(200, seed=1), 1)
    assert np.all(s2.fisher_diag >= s1.fisher_diag)


def test_ewc_posterior_noise_and_kl():
    s = EwcState.initial(np.zeros(3), sigma2=1e-2)
    q = ewc_posterior(s)
    assert_allclose(q.log_std, -2.302585, atol=1e-6)
    w1 = np.array([0.1, -0.2, 0.0])
    q1 = ewc_posterior(EwcState.initial(w1, sigma2=1e-2))
    assert abs(kl_posteriors(q1, q) - kl_isotropic_shift(w1, s.weights, 1e-2)) < 1e-12
    assert abs(kl_gaussian_diag(q1.mean, q1.log_std, q.mean, q.log_std) - 0.05 / 0.02) < 1e-12
    with pytest.raises(LearnerError):
        ewc_posterior(EwcState.initial(np.zeros(2), sigma2=0.0))


# --- evaluation and checkpoints --------------------------------------------------------------


def test_stacked_losses_match_forward(small_arch):
    rng = np.random.default_rng(0)
    w = init_params(small_arch, rng)
    sets = [separable(50, seed=1), separable(70, seed=2)]
    stacked = StackedTasks(small_arch, [0, 1], sets)
    for loss in (LossFunction(), LossFunction(CLAMPED_CE, 5.0)):
        got = stacked.losses(w, loss)
        want = [loss(forward(w, small_arch, t, d.features), d.labels).mean() for t, d in enumerate(sets)]
        assert_allclose(got, want, atol=1e-5)


def test_sample_task_losses_shape(small_arch):
    q = init_prior(small_arch, np.random.default_rng(0))
    stacked = StackedTasks(small_arch, [1, 0], [separable(20), separable(30)])
    out = sample_task_losses(q, stacked, LossFunction(), 7, np.random.default_rng(1))
    assert out.shape == (7, 2) and np.all((out >= 0) & (out <= 1))


def test_checkpoint_roundtrip(tmp_path, small_arch):
    q = init_prior(small_arch, np.random.default_rng(0))
    save_checkpoint(tmp_path / "q.json", q.to_json(small_arch))
    arch, back = load_checkpoint(tmp_path / "q.json")
    assert arch == small_arch
    assert np.array_equal(back.mean, q.mean) and np.array_equal(back.log_std, q.log_std)
    s = EwcState(q.mean, np.abs(q.mean), 3.0, 0.5)
    save_checkpoint(tmp_path / "s.json", s.to_json(small_arch))
    _, back = load_checkpoint(tmp_path / "s.json")
    assert isinstance(back, EwcState) and back.lam_ewc == 3.0 and np.array_equal(back.fisher_diag, s.fisher_diag)


def test_point_mass_checkpoint_roundtrip(tmp_path):
    q = GaussianMeanField.point_mass(np.ones(3))
    save_checkpoint(tmp_path / "p.json", q.to_json())
    _, back = load_checkpoint(tmp_path / "p.json")
    assert np.all(np.isneginf(back.log_std))
    assert math.isinf(kl_posteriors(GaussianMeanField(np.ones(3), np.zeros(3)), back))
    assert kl_posteriors(back, back) == 0.0


def test_forward_rows_are_independent():
    arch = MlpArchitecture(input_dim=3, hidden_dims=(4,), n_tasks=1)
    rng = np.random.default_rng(0)
    w, x = rng.normal(size=arch.n_params), rng.normal(size=(5, 3))
    full = forward(w, arch, 0, x)
    assert full.shape == (5, 2)
    assert_allclose(full[2], forward(w, arch, 0, x[2:3])[0], rtol=1e-14)


def test_vi_training_is_deterministic(small_arch):
    prior = init_prior(small_arch, np.random.default_rng(0), 0.1)
    a = vi_train_task(prior, small_arch, separable(200), 0, lam=50.0, seed=7)
    b = vi_train_task(prior, small_arch, separable(200), 0, lam=50.0, seed=7)
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.log_std, b.log_std)


def test_reparam_sample_mean_concentrates():
    q = GaussianMeanField(np.array([0.3, -1.0, 2.0]), np.log([0.1, 1.0, 3.0]))
    s = np.array([reparam_sample(q, seed=i) for i in range(10_000)])
    assert np.all(np.abs(s.mean(axis=0) - q.mean) < 3 * q.std / 100)


def test_fisher_linear_single_sample_by_hand():
    arch = MlpArchitecture(input_dim=2, hidden_dims=(), n_tasks=1)
    w = np.array([0.5, -1.0, 2.0, 0.3, 0.1, -0.2])
    x = np.array([[1.5, -0.5]])
    logits = forward(w, arch, 0, x)[0]
    p = np.exp(logits) / np.exp(logits).sum()
    expected = np.zeros(6)
    for c in range(2):
        d = p - np.eye(2)[c]
        expected += p[c] * np.concatenate([np.outer(x[0], d).ravel(), d]) ** 2
    assert_allclose(fisher_diagonal(w, arch, 0, x), expected, rtol=1e-12)


def test_fisher_zero_gradient_model():
    # constant features and a head that ignores them: only the bias sees gradient
    arch = MlpArchitecture(input_dim=2, hidden_dims=(), n_tasks=1)
    f = fisher_diagonal(np.zeros(arch.n_params), arch, 0, np.zeros((4, 2)))
    assert np.all(f[:4] == 0)


def test_fisher_subsampling_is_consistent():
    arch = MlpArchitecture(input_dim=3, hidden_dims=(4,), n_tasks=1)
    rng = np.random.default_rng(5)
    w = init_params(arch, rng)
    x = rng.normal(size=(20_000, 3))
    a = fisher_diagonal(w, arch, 0, x, n_samples=4000, seed=1)
    b = fisher_diagonal(w, arch, 0, x, n_samples=8000, seed=2)
    assert_allclose(a, b, rtol=0.1, atol=1e-4)
