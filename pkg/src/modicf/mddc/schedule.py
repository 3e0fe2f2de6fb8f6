"""Forward-noising variance schedule and its closed-form marginal."""

from dataclasses import dataclass

import numpy as np


@dataclass
class NoiseSchedule:
    """Per-step noising coefficients, indexed 1..T (index 0 unused)."""

    T: int
    beta: np.ndarray        # (T+1,)
    alpha: np.ndarray       # (T+1,), 1 - beta
    alpha_bar: np.ndarray   # (T+1,), cumulative product of alpha
    sigma: np.ndarray       # (T+1,), sqrt(beta)
    sample_steps: np.ndarray  # (T_s,), strictly increasing, last == T


def build_noise_schedule(T, beta_start=1e-4, beta_end=0.02, T_s=10):
    if not (1 <= T_s <= T):
        raise ValueError(f"need 1 <= T_s <= T, got T={T}, T_s={T_s}")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = np.zeros(T + 1, dtype=np.float64)
    beta[1:] = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.ones(T + 1, dtype=np.float64)
    alpha_bar[1:] = np.cumprod(alpha[1:])
    sigma = np.sqrt(beta)
    if T_s == 1:
        steps = np.array([T], dtype=np.int64)
    else:
        steps = np.round(np.linspace(1, T, T_s)).astype(np.int64)
    if np.any(np.diff(steps) <= 0) or steps[-1] != T:
        raise ValueError("sampling sub-sequence must be strictly increasing and end at T")
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar,
                         sigma=sigma, sample_steps=steps)


def forward_diffuse(v0, t, noise, schedule):
    """Closed-form marginal of t noising steps: sqrt(abar_t) v0 + sqrt(1-abar_t) noise."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"step {t} outside [1, {schedule.T}]")
    v0 = np.asarray(v0)
    noise = np.asarray(noise)
    if noise.shape != v0.shape:
        raise ValueError("noise shape must match v0")
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * v0 + np.sqrt(1.0 - ab) * noise
