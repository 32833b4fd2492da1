"""Score-matching training loop with conditioning dropout and Adam.

Each step draws pairs with replacement, a time index per item away from the
singular source boundary, corrupts with the closed-form bridge posterior,
replaces the preference token with the null token at rate p_uncond (so the
unconditional branch used by guided sampling gets trained), and applies one
Adam update of the exact gradients.

Incremental fine-tuning continues training on the union of the base set and
tournament winners at a reduced learning rate.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .schedule import Schedule
from .scorenet import (
    ScoreNetParams,
    TrainItem,
    backward,
    save_params,
)
from .bridge import sample_intermediate


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 8
    learning_rate: float = 1e-3
    lr_final: float = 0.0  # > 0 enables geometric decay toward this rate
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    p_uncond: float = 0.1
    t_min_index: int = 1
    loss_kind: str = "naive"
    checkpoint_every: int = 0  # epochs; 0 disables
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.p_uncond < 1.0:
            raise ValueError(f"p_uncond must be in [0, 1), got {self.p_uncond}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.t_min_index < 1:
            raise ValueError("t_min_index must be >= 1 (loss is singular at 0)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr_final < 0 or self.lr_final > self.learning_rate:
            raise ValueError("lr_final must be in [0, learning_rate]")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch; geometric decay when enabled."""
        if self.lr_final <= 0.0 or self.epochs == 1 or self.learning_rate == 0.0:
            return self.learning_rate
        frac = (epoch - 1) / (self.epochs - 1)
        return float(self.learning_rate * (self.lr_final / self.learning_rate) ** frac)


@dataclass
class LabeledPair:
    """Source/pseudo-target pair with its binary preference label."""

    z0: np.ndarray
    z1: np.ndarray
    r: int  # 0 = good, 1 = bad
    subject: str = ""
    slice_id: int = 0

    def __post_init__(self) -> None:
        if self.z0.shape != self.z1.shape:
            raise ValueError(f"shape mismatch: {self.z0.shape} vs {self.z1.shape}")
        if self.r not in (0, 1):
            raise ValueError(f"r must be 0 or 1, got {self.r}")


class TrainingDiverged(RuntimeError):
    pass


class Adam:
    """Per-tensor Adam state; moments live in the parameter dtype."""

    def __init__(self, params: ScoreNetParams, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.t = 0

    def step(
        self,
        params: ScoreNetParams,
        grads: dict[str, np.ndarray],
        lr: float | None = None,
    ) -> None:
        c = self.cfg
        lr = c.learning_rate if lr is None else lr
        if lr == 0.0:
            return
        self.t += 1
        b1t = 1.0 - c.adam_beta1**self.t
        b2t = 1.0 - c.adam_beta2**self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m += (1.0 - c.adam_beta1) * (g - m)
            v += (1.0 - c.adam_beta2) * (g * g - v)
            params.tensors[k] -= lr * (m / b1t) / (np.sqrt(v / b2t) + c.adam_eps)


@dataclass
class TrainResult:
    params: ScoreNetParams
    history: list[tuple[int, float]]  # (epoch, mean loss)
    checkpoints: list[tuple[int, ScoreNetParams]] = field(default_factory=list)


def _draw_batch(
    dataset: list[LabeledPair],
    sched: Schedule,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> list[TrainItem]:
    n = sched.n_steps
    items = []
    for _ in range(cfg.batch_size):
        pair = dataset[int(rng.integers(len(dataset)))]
        i = int(rng.integers(cfg.t_min_index, n))  # in [t_min, N-1]
        z_t = sample_intermediate(sched, pair.z0, pair.z1, i, rng)
        r: int | None = pair.r
        if cfg.p_uncond > 0.0 and rng.random() < cfg.p_uncond:
            r = None
        items.append(TrainItem(z_t, pair.z0, pair.z1, i, r))
    return items


def train(
    params: ScoreNetParams,
    dataset: list[LabeledPair],
    cfg: TrainConfig,
    sched: Schedule,
    checkpoint_dir: str | Path | None = None,
    log_every: int = 0,
) -> TrainResult:
    """Train a copy of params; returns updated params, history, checkpoints."""
    cfg.validate()
    if not dataset:
        raise ValueError("empty dataset")

    params = params.copy()
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(params, cfg)
    steps_per_epoch = max(1, len(dataset) // cfg.batch_size)
    history: list[tuple[int, float]] = []
    checkpoints: list[tuple[int, ScoreNetParams]] = []

    for epoch in range(1, cfg.epochs + 1):
        losses = []
        lr = cfg.lr_at(epoch)
        for _ in range(steps_per_epoch):
            items = _draw_batch(dataset, sched, cfg, rng)
            loss, grads = backward(params, items, sched, cfg.loss_kind)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss} at epoch {epoch} "
                    f"(lr={cfg.learning_rate}, loss_kind={cfg.loss_kind})"
                )
            opt.step(params, grads, lr)
            losses.append(loss)
        history.append((epoch, float(np.mean(losses))))
        if log_every and epoch % log_every == 0:
            print(f"  epoch {epoch:4d}  loss {history[-1][1]:.6f}")
        if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            snap = params.copy()
            checkpoints.append((epoch, snap))
            if checkpoint_dir is not None:
                Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                save_params(Path(checkpoint_dir) / f"ckpt_{epoch}.sbsn", snap)

    return TrainResult(params=params, history=history, checkpoints=checkpoints)


def write_history(path: str | Path, history: list[tuple[int, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        w.writerows(history)


def finetune_incremental(
    params: ScoreNetParams,
    base_dataset: list[LabeledPair],
    pref_set: list[LabeledPair],
    cfg: TrainConfig,
    sched: Schedule,
    lr_decay: float = 0.1,
) -> TrainResult:
    """Continue training on base + tournament winners at a reduced rate.

    Winners must all carry r = 0; the union is a multiset (duplicates fine).
    """
    for p in pref_set:
        if p.r != 0:
            raise ValueError("preference set must contain only r=0 winners")
    ft_cfg = replace(
        cfg,
        learning_rate=cfg.learning_rate * lr_decay,
        lr_final=cfg.lr_final * lr_decay,
    )
    return train(params, list(base_dataset) + list(pref_set), ft_cfg, sched)
