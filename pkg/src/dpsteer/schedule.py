"""Noise-schedule tables and the forward/reverse denoising arithmetic.

Diffusion steps are 1-based (t = 1..K); array index 0 holds step 1. The
alpha-bar product uses the convention alpha_bar_0 = 1, which makes the
final reverse step noiseless (sigma_1 = 0) and the posterior mean at t=1
collapse to the predicted clean sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray        # (K,)
    alphas: np.ndarray       # 1 - beta
    alpha_bars: np.ndarray   # cumulative product of alphas
    sigmas: np.ndarray       # posterior std, sigma_1 = 0
    post_coef_x0: np.ndarray  # sqrt(abar_{t-1}) * beta_t / (1 - abar_t)
    post_coef_xt: np.ndarray  # sqrt(alpha_t) * (1 - abar_{t-1}) / (1 - abar_t)

    @property
    def K(self) -> int:
        return len(self.betas)

    def index(self, t):
        """Map 1-based step(s) to array index, validating the range."""
        t_arr = np.asarray(t)
        if np.any(t_arr < 1) or np.any(t_arr > self.K):
            raise ValueError(f"diffusion step {t} out of range [1, {self.K}]")
        return t_arr - 1


DEFAULT_BETA_MIN = 1e-3
DEFAULT_BETA_MAX = 0.1


def make_linear_schedule(K: int, beta_min: float = DEFAULT_BETA_MIN,
                         beta_max: float = DEFAULT_BETA_MAX) -> NoiseSchedule:
    if K < 1:
        raise ValueError(f"need at least one diffusion step, got K={K}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(f"invalid beta range [{beta_min}, {beta_max}]")
    betas = np.linspace(beta_min, beta_max, K)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    abar_prev = np.concatenate([[1.0], alpha_bars[:-1]])
    sigmas = np.sqrt(betas * (1.0 - abar_prev) / (1.0 - alpha_bars))
    post_coef_x0 = np.sqrt(abar_prev) * betas / (1.0 - alpha_bars)
    post_coef_xt = np.sqrt(alphas) * (1.0 - abar_prev) / (1.0 - alpha_bars)
    return NoiseSchedule(betas, alphas, alpha_bars, sigmas,
                         post_coef_x0, post_coef_xt)


def _col(values: np.ndarray, like: np.ndarray) -> np.ndarray:
    """Broadcast per-sample scalars over the trailing dims of a batch."""
    if values.ndim == 0:
        return values
    return values.reshape(values.shape + (1,) * (like.ndim - values.ndim))


def q_sample(sched: NoiseSchedule, x0, t, eps):
    """Forward marginal: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} != sample shape {x0.shape}")
    abar = sched.alpha_bars[sched.index(t)]
    return np.sqrt(_col(abar, x0)) * x0 + np.sqrt(1.0 - _col(abar, x0)) * eps


def predict_x0(sched: NoiseSchedule, x_t, t, eps_hat):
    """Invert q_sample: (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if x_t.shape != eps_hat.shape:
        raise ValueError(f"noise shape {eps_hat.shape} != sample shape {x_t.shape}")
    abar = _col(sched.alpha_bars[sched.index(t)], x_t)
    return (x_t - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar)


def reverse_step(sched: NoiseSchedule, x_t, t, eps_hat, z):
    """One denoising step:
    (x_t - (1-alpha_t)/sqrt(1-abar_t) * eps_hat) / sqrt(alpha_t) + sigma_t z.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    i = sched.index(t)
    alpha = _col(sched.alphas[i], x_t)
    abar = _col(sched.alpha_bars[i], x_t)
    sigma = _col(sched.sigmas[i], x_t)
    mean = (x_t - (1.0 - alpha) / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)
    return mean + sigma * z


def posterior_mean_from_x0(sched: NoiseSchedule, x_t, x0_hat, t):
    """Posterior mean given the clean-sample estimate:
    coef_x0 * x0_hat + coef_xt * x_t. At t=1 this equals x0_hat.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    i = sched.index(t)
    c0 = _col(sched.post_coef_x0[i], x_t)
    ct = _col(sched.post_coef_xt[i], x_t)
    return c0 * x0_hat + ct * x_t
