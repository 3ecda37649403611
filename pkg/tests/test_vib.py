"""Bottleneck tests: posterior encoding, sampling moments, KL analytics."""

import math

import numpy as np
import pytest

from otfusion import autodiff as ad
from otfusion.autodiff import Tape, Tensor, backward, finite_diff_check
from otfusion.vib import (
    GaussianPosterior,
    classify,
    encode_gaussian,
    init_vib_params,
    kl_to_standard_normal,
    per_dim_kl_profile,
    reparameterize,
    task_loss,
    total_loss,
)


def zero_params(d, d_z, n_classes=3):
    p = init_vib_params(d, d_z, n_classes, np.random.default_rng(0))
    p.w_mu = Tensor(np.zeros((d, d_z)), requires_grad=True)
    p.b_sigma = Tensor(np.zeros((1, d_z)), requires_grad=True)
    return p


def mc_kl_estimate(mu, log_var, n_samples, seed):
    """Monte-Carlo E_q[log q - log p] for diagonal Gaussians, the KL oracle."""
    rng = np.random.default_rng(seed)
    sigma = np.exp(0.5 * log_var)
    total = 0.0
    for _ in range(n_samples):
        eps = rng.standard_normal(mu.shape)
        z = mu + sigma * eps
        log_q = -0.5 * (math.log(2 * math.pi) + log_var + eps**2).sum(axis=1)
        log_p = -0.5 * (math.log(2 * math.pi) + z**2).sum(axis=1)
        total += (log_q - log_p).mean()
    return total / n_samples


class TestEncode:
    def test_zero_maps_give_standard_posterior(self):
        params = zero_params(4, 3)
        post = encode_gaussian(Tensor(np.ones((2, 4))), params)
        assert not post.mu.values.any()
        assert not post.log_var.values.any()

    def test_identity_mean_map(self):
        rng = np.random.default_rng(1)
        params = zero_params(4, 4)
        params.w_mu = Tensor(np.eye(4), requires_grad=True)
        x = rng.normal(size=(3, 4))
        post = encode_gaussian(Tensor(x), params)
        np.testing.assert_array_equal(post.mu.values, x)

    def test_affine_map_matches_naive_loop(self):
        rng = np.random.default_rng(2)
        params = init_vib_params(4, 3, 2, rng)
        x = rng.normal(size=(5, 4))
        post = encode_gaussian(Tensor(x), params)
        naive = np.zeros((5, 3))
        for i in range(5):
            for j in range(3):
                naive[i, j] = params.b_mu.values[0, j] + sum(
                    x[i, k] * params.w_mu.values[k, j] for k in range(4)
                )
        np.testing.assert_allclose(post.mu.values, naive, rtol=1e-12)

    def test_log_var_clamped(self):
        params = zero_params(2, 2)
        params.b_sigma = Tensor(np.full((1, 2), 50.0))
        post = encode_gaussian(Tensor(np.zeros((1, 2))), params)
        assert post.log_var.values.max() == 10.0


class TestReparameterize:
    def test_tiny_variance_collapses_to_mean(self):
        rng = np.random.default_rng(3)
        mu = rng.normal(size=(4, 3))
        post = GaussianPosterior(mu=Tensor(mu), log_var=Tensor(np.full((4, 3), -10.0)))
        z = reparameterize(post, rng=np.random.default_rng(0))
        assert np.abs(z.values - mu).max() <= 0.007 * np.abs(post.epsilon).max()

    def test_zero_epsilon_gives_mean(self):
        rng = np.random.default_rng(4)
        mu = rng.normal(size=(4, 3))
        post = GaussianPosterior(mu=Tensor(mu), log_var=Tensor(rng.normal(size=(4, 3))))
        z = reparameterize(post, epsilon=np.zeros((4, 3)))
        np.testing.assert_array_equal(z.values, mu)

    def test_sample_moments(self):
        n = 100_000
        post = GaussianPosterior(
            mu=Tensor(np.full((n, 1), 1.0)), log_var=Tensor(np.full((n, 1), math.log(4.0)))
        )
        z = reparameterize(post, rng=np.random.default_rng(5)).values
        assert z.mean() == pytest.approx(1.0, abs=0.02)
        assert z.var() == pytest.approx(4.0, abs=0.1)


class TestKl:
    def test_prior_match_is_zero(self):
        post = GaussianPosterior(mu=Tensor(np.zeros((3, 4))), log_var=Tensor(np.zeros((3, 4))))
        assert kl_to_standard_normal(post).item() == 0.0

    def test_unit_mean_scalar_case(self):
        post = GaussianPosterior(mu=Tensor(np.ones((1, 1))), log_var=Tensor(np.zeros((1, 1))))
        assert kl_to_standard_normal(post).item() == pytest.approx(0.5, abs=1e-15)

    def test_wide_posterior_case(self):
        post = GaussianPosterior(mu=Tensor(np.zeros((1, 1))), log_var=Tensor(np.full((1, 1), math.log(4.0))))
        assert kl_to_standard_normal(post).item() == pytest.approx(0.5 * (4.0 - math.log(4.0) - 1.0), rel=1e-12)

    def test_kl_nonnegative_and_zero_only_at_prior(self):
        rng = np.random.default_rng(6)
        for _ in range(500):
            mu = rng.normal(0, 2, (2, 3))
            log_var = rng.uniform(-3, 3, (2, 3))
            post = GaussianPosterior(mu=Tensor(mu), log_var=Tensor(log_var))
            kl = kl_to_standard_normal(post).item()
            assert kl >= 0.0
            if abs(mu).max() > 1e-3 or abs(log_var).max() > 1e-3:
                assert kl > 0.0

    def test_closed_form_matches_monte_carlo(self):
        rng = np.random.default_rng(7)
        mu = rng.normal(0, 1, (2, 3))
        log_var = rng.uniform(-1.5, 1.5, (2, 3))
        post = GaussianPosterior(mu=Tensor(mu), log_var=Tensor(log_var))
        closed = kl_to_standard_normal(post).item()
        estimate = mc_kl_estimate(mu, log_var, n_samples=100_000, seed=8)
        assert estimate == pytest.approx(closed, rel=0.02)

    def test_per_dim_profile(self):
        post = GaussianPosterior(mu=Tensor(np.zeros((5, 3))), log_var=Tensor(np.zeros((5, 3))))
        np.testing.assert_array_equal(per_dim_kl_profile(post), np.zeros(3))
        mu = np.zeros((5, 3))
        mu[:, 1] = 1.0
        post = GaussianPosterior(mu=Tensor(mu), log_var=Tensor(np.zeros((5, 3))))
        np.testing.assert_allclose(per_dim_kl_profile(post), [0.0, 0.5, 0.0], atol=1e-15)


class TestClassify:
    def test_zero_weights_give_uniform(self):
        params = zero_params(4, 3, n_classes=5)
        params.w_cls = Tensor(np.zeros((3, 5)), requires_grad=True)
        probs = classify(Tensor(np.ones((2, 3))), params)
        np.testing.assert_allclose(probs.values, 0.2)

    def test_saturated_logits(self):
        params = zero_params(2, 1, n_classes=2)
        params.w_cls = Tensor(np.array([[10.0, -10.0]]))
        probs = classify(Tensor(np.ones((1, 1))), params)
        np.testing.assert_allclose(probs.values, [[1.0, 0.0]], atol=1e-8)

    def test_rows_sum_to_one_and_match_logsumexp(self):
        rng = np.random.default_rng(9)
        params = init_vib_params(4, 3, 6, rng)
        z = rng.normal(0, 3, (50, 3))
        probs = classify(Tensor(z), params).values
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
        logits = z @ params.w_cls.values + params.b_cls.values
        lse = np.log(np.exp(logits - logits.max(axis=1, keepdims=True)).sum(axis=1, keepdims=True)) + logits.max(
            axis=1, keepdims=True
        )
        np.testing.assert_allclose(probs, np.exp(logits - lse), rtol=1e-10)


class TestLosses:
    def test_perfect_predictions_near_zero_loss(self):
        probs = np.zeros((3, 4))
        probs[np.arange(3), [0, 2, 1]] = 1.0
        loss = task_loss(Tensor(probs), np.array([0, 2, 1]))
        assert loss.item() <= 1e-10

    def test_uniform_predictions_log_c(self):
        probs = np.full((5, 7), 1.0 / 7.0)
        loss = task_loss(Tensor(probs), np.zeros(5, dtype=int))
        assert loss.item() == pytest.approx(math.log(7.0), rel=1e-12)

    def test_two_token_hand_case(self):
        probs = np.array([[0.9, 0.1], [0.2, 0.8]])
        loss = task_loss(Tensor(probs), np.array([0, 1]))
        assert loss.item() == pytest.approx(-0.5 * (math.log(0.9) + math.log(0.8)), rel=1e-12)

    def test_mask_excludes_padding(self):
        probs = np.array([[0.9, 0.1], [0.5, 0.5], [0.2, 0.8]])
        loss = task_loss(Tensor(probs), np.array([0, -1, 1]), mask=np.array([1.0, 0.0, 1.0]))
        assert loss.item() == pytest.approx(-0.5 * (math.log(0.9) + math.log(0.8)), rel=1e-12)

    def test_no_supervision_rejected(self):
        with pytest.raises(ValueError, match="supervised"):
            task_loss(Tensor(np.full((2, 2), 0.5)), np.array([0, 1]), mask=np.zeros(2))

    def test_total_loss_arithmetic(self):
        assert total_loss(Tensor(0.5), Tensor(2.0), 0.1).item() == pytest.approx(0.7, rel=1e-15)
        assert total_loss(Tensor(0.5), Tensor(2.0), 0.0).item() == 0.5

    def test_negative_beta_rejected(self):
        with pytest.raises(ValueError, match="beta"):
            total_loss(Tensor(0.5), Tensor(2.0), -0.1)


class TestGradientsAndDeterminism:
    def test_reparameterized_gradient_with_frozen_epsilon(self):
        rng = np.random.default_rng(10)
        n, d, d_z, n_classes = 4, 5, 3, 4
        params = init_vib_params(d, d_z, n_classes, rng)
        params.w_sigma = Tensor(rng.normal(0, 0.3, (d, d_z)), requires_grad=True)
        x = Tensor(rng.normal(size=(n, d)), requires_grad=True)
        eps = rng.standard_normal((n, d_z))
        targets = rng.integers(0, n_classes, n)

        def f():
            post = encode_gaussian(x, params)
            z = reparameterize(post, epsilon=eps)
            loss = task_loss(classify(z, params), targets)
            return total_loss(loss, kl_to_standard_normal(post), beta=0.05)

        groups = [x, params.w_mu, params.b_mu, params.w_sigma, params.b_sigma, params.w_cls, params.b_cls]
        assert finite_diff_check(f, groups, h=1e-5) < 1e-4

    def test_mean_decoding_is_bit_identical(self):
        rng = np.random.default_rng(11)
        params = init_vib_params(6, 4, 3, rng)
        x = rng.normal(size=(5, 6))

        def run():
            post = encode_gaussian(Tensor(x), params)
            z = reparameterize(post, epsilon=np.zeros((5, 4)))
            return classify(z, params).values

        assert np.array_equal(run(), run())
