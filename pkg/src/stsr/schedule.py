"""Noise schedule, forward diffusion and the ancestral sampler.

The reverse process uses noise prediction: a denoiser maps
``(x_t, t, y, h)`` to an estimate of the injected noise, the posterior mean
is recovered algebraically, and the reverse variance is the fixed
posterior variance ``beta_t (1 - abar_{t-1}) / (1 - abar_t)``.
Timesteps are 1-based throughout (``t = 1..T``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray

    @property
    def T(self) -> int:
        return int(self.beta.shape[0])

    def check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside 1..{self.T}")

    def alpha_bar_prev(self, t: int) -> float:
        return 1.0 if t == 1 else float(self.alpha_bar[t - 2])


def from_betas(beta) -> NoiseSchedule:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or beta.size < 1:
        raise ValueError("beta must be a non-empty 1-D sequence")
    if np.any(beta <= 0) or np.any(beta >= 1):
        raise ValueError("every beta must lie in (0, 1)")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    abar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = beta * (1.0 - abar_prev) / (1.0 - alpha_bar)
    for arr in (beta, alpha, alpha_bar, posterior_var):
        arr.setflags(write=False)
    return NoiseSchedule(beta, alpha, alpha_bar, posterior_var)


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule from ``beta_start`` to ``beta_end`` over ``T`` steps."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        beta = np.array([beta_start])
    else:
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return from_betas(beta)


def scaled_linear(T: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                  reference_T: int = 1000) -> NoiseSchedule:
    """Linear schedule whose endpoints are rescaled by ``reference_T / T``.

    Keeps ``alpha_bar_T`` near zero for short chains; identical to
    :func:`make_schedule` at ``T = reference_T``.
    """
    k = reference_T / T
    return make_schedule(T, min(beta_start * k, 0.999), min(beta_end * k, 0.999))


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def q_sample(x0, t: int, noise, s: NoiseSchedule) -> np.ndarray:
    """Closed-form marginal ``sqrt(abar_t) x0 + sqrt(1 - abar_t) noise``."""
    s.check_t(t)
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    _check_pair(x0, noise)
    ab = s.alpha_bar[t - 1]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def stepwise_q(xprev, t: int, noise, s: NoiseSchedule) -> np.ndarray:
    """One forward step ``x_t ~ N(sqrt(1 - beta_t) x_{t-1}, beta_t I)``."""
    s.check_t(t)
    xprev = np.asarray(xprev, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    _check_pair(xprev, noise)
    b = s.beta[t - 1]
    return np.sqrt(1.0 - b) * xprev + np.sqrt(b) * noise


def eps_from_x0(x0hat, xt, t: int, s: NoiseSchedule) -> np.ndarray:
    s.check_t(t)
    ab = s.alpha_bar[t - 1]
    return (np.asarray(xt) - np.sqrt(ab) * np.asarray(x0hat)) / np.sqrt(1.0 - ab)


def posterior_mean(x0hat, xt, t: int, s: NoiseSchedule, eps: Optional[np.ndarray] = None) -> np.ndarray:
    """Mean of p(x_{t-1} | x_t) from a predicted noise.

    Pass ``eps`` directly, or ``x0hat`` from which the noise is recovered
    (``x0hat`` is ignored when ``eps`` is given).
    """
    s.check_t(t)
    xt = np.asarray(xt, dtype=np.float64)
    if eps is None:
        eps = eps_from_x0(x0hat, xt, t, s)
    eps = np.asarray(eps, dtype=np.float64)
    _check_pair(xt, eps)
    a, b, ab = s.alpha[t - 1], s.beta[t - 1], s.alpha_bar[t - 1]
    return (xt - (b / np.sqrt(1.0 - ab)) * eps) / np.sqrt(a)


NoisePredictor = Callable[[np.ndarray, int, np.ndarray, np.ndarray], np.ndarray]


def sample(denoiser: NoisePredictor, y, h, s: NoiseSchedule, seed: int,
           shape: Optional[tuple] = None, clip: Optional[tuple] = None) -> np.ndarray:
    """Ancestral sampling from ``x_T ~ N(0, I)`` down to ``x_0``.

    ``denoiser(x_t, t, y, h)`` returns the predicted noise. ``shape`` is the
    HR stack shape (defaults to ``y``'s shape for same-grid conditioning).
    ``clip`` optionally clamps the final output.
    """
    rng = np.random.default_rng(seed)
    shape = tuple(shape) if shape is not None else np.shape(y)
    x = rng.standard_normal(shape)
    for t in range(s.T, 0, -1):
        eps = np.asarray(denoiser(x, t, y, h), dtype=np.float64)
        if eps.shape != x.shape:
            raise ValueError(f"denoiser returned {eps.shape}, expected {x.shape}")
        x = posterior_mean(None, x, t, s, eps=eps)
        if t > 1:
            x = x + np.sqrt(s.posterior_var[t - 1]) * rng.standard_normal(shape)
    if clip is not None:
        x = np.clip(x, *clip)
    return x
