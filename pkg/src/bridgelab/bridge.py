"""Bridge-state sampling and the few-step generative recursion.

Training-time corruption draws z_t from the closed-form posterior between
the two endpoints. Sampling-time reconstruction starts at the source
boundary and hops along a coarse grid: each hop re-anchors on the network's
predicted endpoint and draws (or takes the mean of) the sub-interval
posterior between the current state and that prediction. A hop landing on
the final index returns the prediction exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .schedule import Schedule, interval_variances, bridge_moments


@dataclass
class BridgeState:
    """A point on a sampling trajectory, tagged with its grid index."""

    z: np.ndarray
    i: int
    rng_seed: int = 0


def sample_intermediate(
    s: Schedule, z0: np.ndarray, z1: np.ndarray, i: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw z_t ~ N(mu, var I) at grid index i. Exact endpoint at i=0 / i=N."""
    mu, var = bridge_moments(s, i, z0, z1)
    noise = rng.standard_normal(z0.shape)
    return mu + np.sqrt(var) * noise


def predict_endpoint(z_t: np.ndarray, score: np.ndarray, sigma_t: float) -> np.ndarray:
    """Invert the training target: zhat1 = z_t - sigma_t * score.

    sigma_t must be positive; the boundary case is short-circuited by the
    caller (the sampler never evaluates at index 0).
    """
    if sigma_t <= 0.0:
        raise ValueError(f"sigma_t must be > 0, got {sigma_t}")
    return z_t - sigma_t * score


def generative_step(
    s: Schedule,
    z_i: np.ndarray,
    zhat1: np.ndarray,
    i: int,
    j: int,
    rng: np.random.Generator | None = None,
    deterministic: bool = True,
) -> np.ndarray:
    """Advance the state from grid index i to j, anchored on zhat1.

    Uses the sub-interval posterior between (z_i at t_i) and (zhat1 at 1):
    mean = (b*z_i + a*zhat1)/(a+b), var = a*b/(a+b) with a the accumulated
    variance over [t_i, t_j] and b over [t_j, 1]. Deterministic mode takes
    the mean; otherwise adds sqrt(var) noise.
    """
    if i >= j:
        raise ValueError(f"need i < j, got ({i}, {j})")
    if j == s.n_steps:
        return zhat1.copy()
    a, b = interval_variances(s, i, j)
    denom = a + b
    if denom == 0.0:
        return zhat1.copy()
    mean = (b * z_i + a * zhat1) / denom
    if deterministic:
        return mean
    if rng is None:
        raise ValueError("stochastic step requires an rng")
    var = a * b / denom
    return mean + np.sqrt(var) * rng.standard_normal(z_i.shape)


def nfe_grid(n_steps: int, nfe: int) -> np.ndarray:
    """Map an NFE-step coarse grid onto the fine grid by nearest index.

    Returns nfe+1 strictly increasing indices from 0 to n_steps.
    """
    if nfe < 1:
        raise ValueError(f"nfe must be >= 1, got {nfe}")
    if nfe > n_steps:
        raise ValueError(f"nfe {nfe} exceeds grid resolution {n_steps}")
    grid = np.rint(np.linspace(0, n_steps, nfe + 1)).astype(int)
    if np.any(np.diff(grid) <= 0):
        raise ValueError(f"degenerate nfe grid for nfe={nfe}, n_steps={n_steps}")
    return grid
