"""Symmetric diffusion schedule and closed-form bridge posterior moments.

The bridge between a source image z0 (t=0) and a target image z1 (t=1) is
driven by a variance rate beta(t) that is symmetric about t=1/2. All grid
quantities live on t_i = i/N for i = 0..N:

    sigma2[i]     = integral of beta from 0 to t_i      (trapezoidal)
    sigma_bar2[i] = integral of beta from t_i to 1

Given both endpoints, the state at t_i is Gaussian with

    mu  = (sigma_bar2 * z0 + sigma2 * z1) / (sigma2 + sigma_bar2)
    var = sigma2 * sigma_bar2 / (sigma2 + sigma_bar2)

Boundary indices return the exact endpoint with var = 0 and never evaluate
the ratio.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Schedule:
    """Discretized variance-rate schedule with accumulated variances.

    Immutable after construction; safe to share across threads.
    """

    n_steps: int
    beta: np.ndarray        # (N+1,) beta(t_i), nonnegative
    sigma2: np.ndarray      # (N+1,) accumulated variance from 0
    sigma_bar2: np.ndarray  # (N+1,) accumulated variance to 1

    @property
    def total_var(self) -> float:
        return float(self.sigma2[-1])


def make_schedule(n_steps: int, beta_min: float, beta_max: float) -> Schedule:
    """Build a triangular schedule: beta rises linearly from beta_min at the
    boundaries to beta_max at t = 1/2 and falls back symmetrically.

    Accumulations use the trapezoidal rule on the grid so any future beta
    array works unchanged.
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    if beta_min < 0 or beta_max < beta_min:
        raise ValueError(f"need 0 <= beta_min <= beta_max, got ({beta_min}, {beta_max})")

    n = int(n_steps)
    i = np.arange(n + 1)
    # |2t - 1| computed from integers so beta[i] == beta[N-i] is exact.
    tri = 1.0 - np.abs(2 * i - n) / n
    beta = beta_min + (beta_max - beta_min) * tri

    increments = (beta[:-1] + beta[1:]) / (2.0 * n)
    sigma2 = np.concatenate([[0.0], np.cumsum(increments)])
    # Reverse accumulation shares the same increments, so the sum identity
    # sigma2[i] + sigma_bar2[i] == sigma2[N] holds to rounding.
    sigma_bar2 = np.concatenate([np.cumsum(increments[::-1])[::-1], [0.0]])

    return Schedule(n_steps=n, beta=beta, sigma2=sigma2, sigma_bar2=sigma_bar2)


def _check_index(s: Schedule, i: int) -> None:
    if not 0 <= i <= s.n_steps:
        raise IndexError(f"grid index {i} out of range [0, {s.n_steps}]")


def bridge_moments(
    s: Schedule, i: int, z0: np.ndarray, z1: np.ndarray
) -> tuple[np.ndarray, float]:
    """Posterior mean and scalar variance of the bridge state at grid index i."""
    _check_index(s, i)
    if z0.shape != z1.shape:
        raise ValueError(f"shape mismatch: {z0.shape} vs {z1.shape}")
    if i == 0:
        return z0.copy(), 0.0
    if i == s.n_steps:
        return z1.copy(), 0.0
    a = s.sigma2[i]
    b = s.sigma_bar2[i]
    denom = a + b
    mu = (b / denom) * z0 + (a / denom) * z1
    var = a * b / denom
    return mu, float(var)


def interval_variances(s: Schedule, i: int, j: int) -> tuple[float, float]:
    """Accumulated variance over [t_i, t_j] and over [t_j, 1]."""
    _check_index(s, i)
    _check_index(s, j)
    if i > j:
        raise ValueError(f"need i <= j, got ({i}, {j})")
    return float(s.sigma2[j] - s.sigma2[i]), float(s.sigma_bar2[j])
