"""Variational bottleneck head: Gaussian posterior per token, reparameterized
sampling, a softmax classifier on the latent, and the closed-form KL to the
standard-normal prior that drives per-dimension collapse of uninformative
latents."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_VAR_BOUND = 10.0
LOG_PROB_FLOOR = 1e-12


@dataclass
class VibParams:
    w_mu: Tensor  # (d, d_z)
    b_mu: Tensor  # (1, d_z)
    w_sigma: Tensor  # (d, d_z)
    b_sigma: Tensor  # (1, d_z)
    w_cls: Tensor  # (d_z, n_classes)
    b_cls: Tensor  # (1, n_classes)
    beta: float

    def __post_init__(self) -> None:
        if self.beta < 0.0:
            raise ValueError(f"beta must be nonnegative, got {self.beta}")


@dataclass
class GaussianPosterior:
    mu: Tensor  # (N, d_z)
    log_var: Tensor  # (N, d_z), clamped to [-LOG_VAR_BOUND, LOG_VAR_BOUND]
    z: Tensor | None = None
    epsilon: np.ndarray | None = None


def init_vib_params(
    d: int,
    latent_dim: int,
    n_classes: int,
    rng: np.random.Generator,
    beta: float = 1e-3,
    log_var_init: float = -4.0,
) -> VibParams:
    """Mean map random, variance map zero: training starts near-deterministic
    with sigma^2 = exp(log_var_init)."""
    return VibParams(
        w_mu=Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), (d, latent_dim)), requires_grad=True),
        b_mu=Tensor(np.zeros((1, latent_dim)), requires_grad=True),
        w_sigma=Tensor(np.zeros((d, latent_dim)), requires_grad=True),
        b_sigma=Tensor(np.full((1, latent_dim), log_var_init), requires_grad=True),
        w_cls=Tensor(rng.normal(0.0, 1.0 / math.sqrt(latent_dim), (latent_dim, n_classes)), requires_grad=True),
        b_cls=Tensor(np.zeros((1, n_classes)), requires_grad=True),
        beta=beta,
    )


def encode_gaussian(gated_tokens: Tensor, params: VibParams) -> GaussianPosterior:
    """Affine mean and clamped affine log-variance per token."""
    gated_tokens = ad.as_tensor(gated_tokens)
    mu = ad.add(ad.matmul(gated_tokens, params.w_mu), params.b_mu)
    log_var = ad.clamp(
        ad.add(ad.matmul(gated_tokens, params.w_sigma), params.b_sigma), -LOG_VAR_BOUND, LOG_VAR_BOUND
    )
    return GaussianPosterior(mu=mu, log_var=log_var)


def reparameterize(
    posterior: GaussianPosterior,
    rng: np.random.Generator | None = None,
    epsilon: np.ndarray | None = None,
) -> Tensor:
    """Draw z = mu + exp(log_var / 2) * epsilon and record the noise.

    Pass `epsilon` explicitly to freeze the draw (zeros give posterior-mean
    decoding); otherwise it is sampled from `rng`.
    """
    shape = posterior.mu.values.shape
    if epsilon is None:
        if rng is None:
            raise ValueError("reparameterize needs either an rng or an explicit epsilon")
        epsilon = rng.standard_normal(shape)
    epsilon = np.asarray(epsilon, dtype=np.float64)
    if epsilon.shape != shape:
        raise ValueError(f"epsilon shape {epsilon.shape} does not match posterior {shape}")
    posterior.epsilon = epsilon
    sigma = ad.exp(ad.mul(posterior.log_var, 0.5))
    posterior.z = ad.add(posterior.mu, ad.mul(sigma, Tensor(epsilon)))
    return posterior.z


def kl_to_standard_normal(posterior: GaussianPosterior) -> Tensor:
    """Closed-form KL(q || N(0, I)), averaged over tokens.

    Per token it is 0.5 * sum_dim(mu^2 + sigma^2 - log sigma^2 - 1), which is
    zero exactly when the posterior matches the prior.
    """
    mu, log_var = posterior.mu, posterior.log_var
    n = mu.values.shape[0]
    terms = ad.sub(ad.add(ad.mul(mu, mu), ad.exp(log_var)), ad.add(log_var, 1.0))
    return ad.mul(ad.sum(terms), 0.5 / n)


def per_dim_kl_profile(posterior: GaussianPosterior) -> np.ndarray:
    """Mean per-latent-dimension KL over tokens (plain array, no gradients)."""
    mu, log_var = posterior.mu.values, posterior.log_var.values
    return 0.5 * (mu**2 + np.exp(log_var) - log_var - 1.0).mean(axis=0)


def classify(z: Tensor, params: VibParams) -> Tensor:
    """Row-softmax class probabilities from the latent."""
    logits = ad.add(ad.matmul(ad.as_tensor(z), params.w_cls), params.b_cls)
    return ad.softmax(logits, axis=1)


def task_loss(probs: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of the target class over supervised tokens.

    `targets` holds class indices; `mask` (0/1 per token) marks supervision.
    Probabilities are floored at 1e-12 before the log.
    """
    probs = ad.as_tensor(probs)
    n, n_classes = probs.values.shape
    targets = np.asarray(targets)
    if targets.shape != (n,):
        raise ValueError(f"targets must have shape ({n},), got {targets.shape}")
    mask = np.ones(n) if mask is None else np.asarray(mask, dtype=np.float64)
    n_sup = mask.sum()
    if n_sup == 0:
        raise ValueError("task_loss needs at least one supervised token")
    one_hot = np.zeros((n, n_classes))
    one_hot[mask > 0, targets[mask > 0]] = 1.0
    picked = ad.sum(ad.mul(probs, Tensor(one_hot)), axis=1, keepdims=True)
    # Padding rows have an all-zero one-hot; lift them to probability one so
    # their log vanishes from the sum.
    lifted = ad.add(picked, Tensor((1.0 - mask).reshape(n, 1)))
    logs = ad.log(ad.clamp(lifted, LOG_PROB_FLOOR, 1.0))
    return ad.mul(ad.sum(logs), -1.0 / n_sup)


def total_loss(task: Tensor, kl: Tensor | float, beta: float) -> Tensor:
    """Bottleneck objective: task + beta * kl."""
    if beta < 0.0:
        raise ValueError(f"beta must be nonnegative, got {beta}")
    return ad.add(ad.as_tensor(task), ad.mul(ad.as_tensor(kl), beta))
