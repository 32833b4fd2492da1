"""Guided few-step sampling and candidate-grid generation.

The chain starts at the source image on the fine-grid index 0 and hops along
an evenly spaced coarse grid to the far boundary. Each hop evaluates the
guided score at the hop's target index (the training target is singular at
the source boundary, so evaluation times are the grid points after the
start), inverts it into an endpoint prediction, and advances with the
sub-interval posterior. The last hop returns the prediction exactly.

Guidance combines the preference-conditioned and null-conditioned scores:
(1 + w) * s(r) - w * s(null). At w = 0 the null branch is skipped; it is
mathematically inert there and skipping halves the cost.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .schedule import Schedule
from .bridge import nfe_grid, predict_endpoint, generative_step
from .scorenet import R_NULL, ScoreNetParams, forward_batch, _r_to_index


class EvalCounter:
    """Counts guided score-network evaluations (per image)."""

    def __init__(self) -> None:
        self.n = 0

    def add(self, k: int) -> None:
        self.n += k


@dataclass(frozen=True)
class SampleRequest:
    z0: np.ndarray
    r_request: int = 0
    w: float = 0.0
    nfe: int = 10
    deterministic: bool = True
    seed: int = 0
    keep_trajectory: bool = False

    def validate(self) -> None:
        if self.nfe < 1:
            raise ValueError(f"nfe must be >= 1, got {self.nfe}")
        if self.w < 0:
            raise ValueError(f"guidance scale must be >= 0, got {self.w}")
        if self.r_request not in (0, 1):
            raise ValueError(f"r_request must be 0 or 1, got {self.r_request}")


@dataclass(eq=False)
class Candidate:
    """A generated reconstruction with full provenance."""

    image: np.ndarray
    z0: np.ndarray
    subject: str
    slice_id: int
    checkpoint_id: str
    scale: float
    seed: int
    candidate_id: str = ""

    def __post_init__(self) -> None:
        if not self.subject or not self.checkpoint_id:
            raise ValueError("candidate provenance fields must all be set")


def cfg_score(
    params: ScoreNetParams,
    z_t: np.ndarray,
    z0: np.ndarray,
    i: int,
    r: int,
    w: float,
    counter: EvalCounter | None = None,
) -> np.ndarray:
    """Guided score for one image: (1+w)*s(r) - w*s(null)."""
    batched = _cfg_score_batch(
        params, z_t[None], z0[None], i, np.array([_r_to_index(r)]), w, counter
    )
    return batched[0]


def _cfg_score_batch(
    params: ScoreNetParams,
    z_t: np.ndarray,
    z0: np.ndarray,
    i: int,
    r_index: np.ndarray,
    w: float,
    counter: EvalCounter | None,
) -> np.ndarray:
    b = z_t.shape[0]
    t_idx = np.full(b, i, dtype=int)
    cond = forward_batch(params, z_t, z0, t_idx, r_index)
    if counter is not None:
        counter.add(b)
    if w == 0.0:
        return cond
    null_idx = np.full(b, R_NULL, dtype=int)
    uncond = forward_batch(params, z_t, z0, t_idx, null_idx)
    if counter is not None:
        counter.add(b)
    return (1.0 + w) * cond - w * uncond


def sample(
    params: ScoreNetParams,
    req: SampleRequest,
    sched: Schedule,
    counter: EvalCounter | None = None,
) -> tuple[np.ndarray, list[np.ndarray] | None]:
    """Reconstruct from req.z0; returns (output, optional trajectory)."""
    req.validate()
    out, traj = _sample_batch(
        params,
        req.z0[None],
        req.r_request,
        req.w,
        req.nfe,
        req.deterministic,
        req.seed,
        sched,
        counter,
        req.keep_trajectory,
    )
    return out[0], ([t[0] for t in traj] if traj is not None else None)


def _sample_batch(
    params: ScoreNetParams,
    z0: np.ndarray,
    r_request: int,
    w: float,
    nfe: int,
    deterministic: bool,
    seed: int,
    sched: Schedule,
    counter: EvalCounter | None = None,
    keep_trajectory: bool = False,
) -> tuple[np.ndarray, list[np.ndarray] | None]:
    """Shared-settings batch of chains, one per row of z0."""
    grid = nfe_grid(sched.n_steps, nfe)
    rng = np.random.default_rng(seed)
    r_index = np.full(z0.shape[0], _r_to_index(r_request), dtype=int)
    z = z0.astype(params.dtype, copy=True)
    z0 = z0.astype(params.dtype)
    traj: list[np.ndarray] | None = [z.copy()] if keep_trajectory else None

    zhat1 = z
    for k in range(nfe):
        i, j = int(grid[k]), int(grid[k + 1])
        score = _cfg_score_batch(params, z, z0, j, r_index, w, counter)
        sigma_j = float(np.sqrt(sched.sigma2[j]))
        zhat1 = predict_endpoint(z, score, sigma_j)
        z = generative_step(sched, z, zhat1, i, j, rng, deterministic)
        if traj is not None:
            traj.append(z.copy())
    return zhat1, traj


def generate_candidates(
    checkpoints: list[tuple[str, ScoreNetParams]],
    scales: list[float],
    inputs: list[tuple[np.ndarray, str, int]],
    sched: Schedule,
    seed: int = 0,
    nfe: int = 10,
    deterministic: bool = True,
) -> list[Candidate]:
    """One candidate per (input x checkpoint x scale), all requested r = 0.

    Chains for all inputs run batched per (checkpoint, scale); results are
    deterministic functions of the seed and the grid position.
    """
    if not checkpoints or not scales or not inputs:
        raise ValueError("checkpoints, scales, and inputs must be nonempty")
    z0s = np.stack([z0 for z0, _, _ in inputs])
    out: list[Candidate] = []
    by_key: dict[tuple, Candidate] = {}
    for ci, (ckpt_id, params) in enumerate(checkpoints):
        for si, scale in enumerate(scales):
            run_seed = int(
                np.random.SeedSequence(entropy=seed, spawn_key=(ci, si)).generate_state(1)[0]
            )
            images, _ = _sample_batch(
                params, z0s, 0, float(scale), nfe, deterministic, run_seed, sched
            )
            for ii, (z0, subject, slice_id) in enumerate(inputs):
                cand = Candidate(
                    image=np.asarray(images[ii], dtype=float),
                    z0=z0,
                    subject=subject,
                    slice_id=slice_id,
                    checkpoint_id=ckpt_id,
                    scale=float(scale),
                    seed=run_seed,
                    candidate_id=f"c{ii:04d}_{ci:02d}_{si:02d}",
                )
                by_key[(ii, ci, si)] = cand
    # provenance-sorted: inputs outermost, then checkpoint, then scale
    for ii in range(len(inputs)):
        for ci in range(len(checkpoints)):
            for si in range(len(scales)):
                out.append(by_key[(ii, ci, si)])
    return out
