"""Condition-aware score network with exact reverse-mode gradients.

A small encoder-decoder over single-channel images. The noisy state and the
source image enter as two input channels; a sinusoidal time embedding is
projected by an MLP and added as a per-channel bias at every encoder and
decoder level; a learned preference embedding (tokens: good, bad, null) is
projected to per-channel multiplicative gates applied at decoder levels
only. The final convolution is zero-initialized so an untrained network is
the zero score, and the gate projection is zero-initialized so all gates
start as the identity.

Computation follows the parameter dtype (float64 by default; the training
pipeline runs float32 for CPU speed). forward/backward are pure with
respect to the parameter dict; backward returns exact analytic gradients
(verified against finite differences in the test suite).

Checkpoint format ("SBSN1"): the magic bytes, a length-prefixed JSON config
block, then every tensor from ``param_names(config)`` in order, each as a
shape header (u8 ndim, ndim x u32 LE dims) followed by the row-major
little-endian float64 payload.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np
from scipy.special import expit

from .schedule import Schedule, bridge_moments

R_GOOD = 0
R_BAD = 1
R_NULL = 2  # internal row index for the null token (public API uses None)

MAGIC = b"SBSN1"


@dataclass(frozen=True)
class ScoreNetConfig:
    widths: tuple[int, ...] = (16, 32)
    in_channels: int = 2
    time_freqs: int = 16
    time_hidden: int = 64
    reward_dim: int = 16
    reward_hidden: int = 32
    n_steps: int = 1000
    drop_z0: bool = False

    @property
    def levels(self) -> int:
        return len(self.widths)

    @property
    def dec_widths(self) -> tuple[int, ...]:
        # Deepest-first mirror: level k outputs the width one level up.
        c = self.widths
        return tuple(c[k - 2] if k >= 2 else c[0] for k in range(self.levels, 0, -1))

    def validate(self) -> None:
        if self.levels < 1:
            raise ValueError("need at least one encoder level")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"invalid widths {self.widths}")
        if self.in_channels != 2:
            raise ValueError("network expects exactly [z_t; z0] input channels")
        if min(self.time_freqs, self.time_hidden, self.reward_dim, self.reward_hidden) < 1:
            raise ValueError("embedding dims must be positive")
        if self.n_steps < 2:
            raise ValueError("n_steps must be >= 2")


@dataclass
class Conditioning:
    """Inputs the score is conditioned on besides the noisy state."""

    z0: np.ndarray
    t_index: int
    r: int | None  # 0 = good, 1 = bad, None = null token


@dataclass
class ScoreNetParams:
    config: ScoreNetConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ScoreNetParams":
        return ScoreNetParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def n_parameters(self) -> int:
        return sum(int(v.size) for v in self.tensors.values())

    @property
    def dtype(self) -> np.dtype:
        return self.tensors["mid_w"].dtype

    def astype(self, dtype) -> "ScoreNetParams":
        return ScoreNetParams(
            self.config, {k: v.astype(dtype) for k, v in self.tensors.items()}
        )


def param_names(config: ScoreNetConfig) -> list[str]:
    """Fixed serialization/update order of all tensors."""
    names = []
    for k in range(1, config.levels + 1):
        names += [f"enc{k}_w", f"enc{k}_b"]
    names += ["mid_w", "mid_b"]
    for k in range(config.levels, 0, -1):
        names += [f"dec{k}_w", f"dec{k}_b"]
    names += ["out_w", "out_b"]
    names += ["time_w1", "time_b1", "time_w2", "time_b2"]
    names += ["reward_emb", "reward_w1", "reward_b1", "reward_w2", "reward_b2"]
    return names


def _time_dim(config: ScoreNetConfig) -> int:
    return sum(config.widths) + sum(config.dec_widths)


def _gate_dim(config: ScoreNetConfig) -> int:
    return sum(config.dec_widths)


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ScoreNetConfig, rng: np.random.Generator) -> ScoreNetParams:
    """Fan-in scaled uniform kernels; zero final layer; identity reward gates."""
    config.validate()
    c = config.widths
    t: dict[str, np.ndarray] = {}

    in_ch = config.in_channels
    for k in range(1, config.levels + 1):
        out_ch = c[k - 1]
        t[f"enc{k}_w"] = _uniform(rng, (out_ch, in_ch, 3, 3), in_ch * 9)
        t[f"enc{k}_b"] = np.zeros(out_ch)
        in_ch = out_ch
    deep = c[-1]
    t["mid_w"] = _uniform(rng, (deep, deep, 3, 3), deep * 9)
    t["mid_b"] = np.zeros(deep)

    up_ch = deep
    for k, out_ch in zip(range(config.levels, 0, -1), config.dec_widths):
        cat_ch = up_ch + c[k - 1]
        t[f"dec{k}_w"] = _uniform(rng, (out_ch, cat_ch, 3, 3), cat_ch * 9)
        t[f"dec{k}_b"] = np.zeros(out_ch)
        up_ch = out_ch

    t["out_w"] = np.zeros((1, config.dec_widths[-1], 3, 3))
    t["out_b"] = np.zeros(1)

    raw = 2 * config.time_freqs
    t["time_w1"] = _uniform(rng, (config.time_hidden, raw), raw)
    t["time_b1"] = np.zeros(config.time_hidden)
    t["time_w2"] = _uniform(rng, (_time_dim(config), config.time_hidden), config.time_hidden)
    t["time_b2"] = np.zeros(_time_dim(config))

    t["reward_emb"] = _uniform(rng, (3, config.reward_dim), config.reward_dim)
    t["reward_w1"] = _uniform(rng, (config.reward_hidden, config.reward_dim), config.reward_dim)
    t["reward_b1"] = np.zeros(config.reward_hidden)
    # Zero projection makes every gate 1 + 0 at init (identity for all tokens).
    t["reward_w2"] = np.zeros((_gate_dim(config), config.reward_hidden))
    t["reward_b2"] = np.zeros(_gate_dim(config))

    return ScoreNetParams(config, t)


def zero_grads(params: ScoreNetParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


# ---------------------------------------------------------------------------
# primitive layers (channels-last internally: activations are (B,H,W,C))


def _conv3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same-padding 3x3 convolution.

    One GEMM over the padded input against all nine taps at once, then nine
    shifted accumulations. Avoids im2col gathers, which dominate on this
    memory-bound workload.
    """
    B, H, W, C = x.shape
    O = w.shape[0]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    wcat = w.transpose(1, 2, 3, 0).reshape(C, 9 * O)  # taps (di,dj) major
    p = (xp.reshape(-1, C) @ wcat).reshape(B, H + 2, W + 2, 9, O)
    y = np.empty((B, H, W, O), dtype=x.dtype)
    y[:] = b
    k = 0
    for di in range(3):
        for dj in range(3):
            y += p[:, di : di + H, dj : dj + W, k, :]
            k += 1
    return y


def _conv3_backward(
    gy: np.ndarray, x: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (gx, gw, gb) of _conv3."""
    B, H, W, C = x.shape
    O = w.shape[0]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    gy2 = np.ascontiguousarray(gy).reshape(B * H * W, O)
    gy2t = np.ascontiguousarray(gy2.T)

    # all nine input-gradient taps in one GEMM, then shifted accumulation
    wall = np.ascontiguousarray(w.transpose(0, 2, 3, 1).reshape(O, 9 * C))
    q = (gy2 @ wall).reshape(B, H, W, 3, 3, C)
    gw = np.empty_like(w)
    gxp = np.zeros((B, H + 2, W + 2, C), dtype=x.dtype)
    for di in range(3):
        for dj in range(3):
            xs = xp[:, di : di + H, dj : dj + W, :].reshape(B * H * W, C)
            gw[:, :, di, dj] = gy2t @ xs
            gxp[:, di : di + H, dj : dj + W, :] += q[:, :, :, di, dj, :]
    gb = gy2.sum(axis=0)
    return gxp[:, 1 : H + 1, 1 : W + 1, :], gw, gb


def _avgpool2(x: np.ndarray) -> np.ndarray:
    B, H, W, C = x.shape
    return x.reshape(B, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4))


def _avgpool2_backward(gy: np.ndarray) -> np.ndarray:
    B, H2, W2, C = gy.shape
    g = np.broadcast_to(gy[:, :, None, :, None, :] * 0.25, (B, H2, 2, W2, 2, C))
    return g.reshape(B, H2 * 2, W2 * 2, C)


def _upnearest2(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=1).repeat(2, axis=2)


def _upnearest2_backward(gy: np.ndarray) -> np.ndarray:
    B, H, W, C = gy.shape
    return gy.reshape(B, H // 2, 2, W // 2, 2, C).sum(axis=(2, 4))


def _softplus(x: np.ndarray) -> np.ndarray:
    # stable and faster than logaddexp on large arrays
    return np.where(x > 34.0, x, np.log1p(np.exp(np.minimum(x, 34.0))))


# ---------------------------------------------------------------------------
# embeddings


def time_features(t_index: np.ndarray, n_steps: int, n_freqs: int) -> np.ndarray:
    """Raw sinusoidal features of t = i/N on a geometric ladder 1 .. N/2 rad."""
    t = np.asarray(t_index, dtype=float) / n_steps
    omega = np.geomspace(1.0, n_steps / 2.0, n_freqs)
    phase = t[:, None] * omega[None, :]
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=1)


def _time_vec(params: ScoreNetParams, t_index: np.ndarray) -> tuple[np.ndarray, dict]:
    cfg = params.config
    t = params.tensors
    feats = time_features(t_index, cfg.n_steps, cfg.time_freqs).astype(params.dtype)
    pre = feats @ t["time_w1"].T + t["time_b1"]
    hid = _softplus(pre)
    vec = hid @ t["time_w2"].T + t["time_b2"]
    return vec, {"feats": feats, "pre": pre, "hid": hid}


def embed_time(params: ScoreNetParams, t_index: int | Sequence[int]) -> dict[str, np.ndarray]:
    """Per-level time bias vectors, keyed 'enc1'..'encE', 'decE'..'dec1'."""
    idx = np.atleast_1d(np.asarray(t_index, dtype=int))
    if np.any(idx < 0) or np.any(idx > params.config.n_steps):
        raise IndexError(f"time index out of range [0, {params.config.n_steps}]")
    vec, _ = _time_vec(params, idx)
    return dict(zip(_time_keys(params.config), _split(vec, _time_splits(params.config))))


def _time_keys(cfg: ScoreNetConfig) -> list[str]:
    return [f"enc{k}" for k in range(1, cfg.levels + 1)] + [
        f"dec{k}" for k in range(cfg.levels, 0, -1)
    ]


def _time_splits(cfg: ScoreNetConfig) -> list[int]:
    return list(cfg.widths) + list(cfg.dec_widths)


def _split(vec: np.ndarray, sizes: list[int]) -> list[np.ndarray]:
    return np.split(vec, np.cumsum(sizes)[:-1], axis=1)


def _reward_gates(params: ScoreNetParams, r_index: np.ndarray) -> tuple[np.ndarray, dict]:
    t = params.tensors
    rows = t["reward_emb"][r_index]
    pre = rows @ t["reward_w1"].T + t["reward_b1"]
    hid = _softplus(pre)
    gates = 1.0 + hid @ t["reward_w2"].T + t["reward_b2"]
    return gates, {"rows": rows, "pre": pre, "hid": hid}


def _r_to_index(r: int | None) -> int:
    if r is None:
        return R_NULL
    if r in (R_GOOD, R_BAD):
        return int(r)
    raise ValueError(f"r must be 0, 1, or None, got {r!r}")


# ---------------------------------------------------------------------------
# forward / backward


def _check_spatial(cfg: ScoreNetConfig, shape: tuple[int, ...]) -> None:
    h, w = shape[-2:]
    div = 2 ** cfg.levels
    if h % div or w % div:
        raise ValueError(f"spatial shape {shape[-2:]} not divisible by {div}")


def forward_batch(
    params: ScoreNetParams,
    z_t: np.ndarray,
    z0: np.ndarray,
    t_index: np.ndarray,
    r_index: np.ndarray,
    want_cache: bool = False,
):
    """Score field for a batch: z_t, z0 are (B,H,W); t_index, r_index are (B,)."""
    cfg = params.config
    t = params.tensors
    if z_t.shape != z0.shape:
        raise ValueError(f"shape mismatch: {z_t.shape} vs {z0.shape}")
    _check_spatial(cfg, z_t.shape)

    z_t = np.asarray(z_t, dtype=params.dtype)
    z0_in = np.zeros_like(z_t) if cfg.drop_z0 else np.asarray(z0, dtype=params.dtype)
    x = np.stack([z_t, z0_in], axis=-1)

    tvec, tcache = _time_vec(params, t_index)
    tbias = _split(tvec, _time_splits(cfg))
    gates, rcache = _reward_gates(params, r_index)
    glist = _split(gates, list(cfg.dec_widths))

    cache: dict = {
        "tcache": tcache, "rcache": rcache, "r_index": r_index,
        "enc_in": [], "enc_pre": [], "skips": [],
    }

    h = x
    for k in range(1, cfg.levels + 1):
        pre = _conv3(h, t[f"enc{k}_w"], t[f"enc{k}_b"]) + tbias[k - 1][:, None, None, :]
        act = _softplus(pre)
        if want_cache:
            cache["enc_in"].append(h)
            cache["enc_pre"].append(pre)
        cache["skips"].append(act)
        h = _avgpool2(act)

    mid_pre = _conv3(h, t["mid_w"], t["mid_b"])
    d = _softplus(mid_pre)
    if want_cache:
        cache["mid_in"] = h
        cache["mid_pre"] = mid_pre

    cache["dec_cat"], cache["dec_pre"], cache["dec_act"] = [], [], []
    n_enc = cfg.levels
    for pos, k in enumerate(range(cfg.levels, 0, -1)):
        up = _upnearest2(d)
        cat = np.concatenate([up, cache["skips"][k - 1]], axis=-1)
        pre = _conv3(cat, t[f"dec{k}_w"], t[f"dec{k}_b"]) + tbias[n_enc + pos][:, None, None, :]
        act = _softplus(pre)
        d = act * glist[pos][:, None, None, :]
        if want_cache:
            cache["dec_cat"].append(cat)
            cache["dec_pre"].append(pre)
            cache["dec_act"].append(act)

    score = _conv3(d, t["out_w"], t["out_b"])[..., 0]
    if want_cache:
        cache["final_in"] = d
        cache["gates"] = glist
        return score, cache
    return score


def forward(params: ScoreNetParams, z_t: np.ndarray, cond: Conditioning) -> np.ndarray:
    """Single-image score field s(z_t | z0, t, r)."""
    r_idx = np.array([_r_to_index(cond.r)])
    t_idx = np.array([int(cond.t_index)])
    if not 0 <= t_idx[0] <= params.config.n_steps:
        raise IndexError(f"time index {cond.t_index} out of range")
    return forward_batch(params, z_t[None], cond.z0[None], t_idx, r_idx)[0]


def _backward_from_score_grad(
    params: ScoreNetParams, cache: dict, gscore: np.ndarray
) -> dict[str, np.ndarray]:
    """Exact reverse-mode sweep given dLoss/dscore (B,H,W)."""
    cfg = params.config
    t = params.tensors
    grads = zero_grads(params)

    gd, grads["out_w"], grads["out_b"] = _conv3_backward(
        gscore[..., None], cache["final_in"], t["out_w"]
    )

    gskips = [np.zeros_like(s) for s in cache["skips"]]
    gate_grads: list[np.ndarray] = [None] * cfg.levels  # type: ignore[list-item]
    tbias_grads: list[np.ndarray] = [None] * (2 * cfg.levels)  # type: ignore[list-item]

    n_enc = cfg.levels
    for pos in reversed(range(cfg.levels)):
        k = cfg.levels - pos
        act = cache["dec_act"][pos]
        gate = cache["gates"][pos][:, None, None, :]
        gate_grads[pos] = (gd * act).sum(axis=(1, 2))
        gact = gd * gate
        gpre = gact * expit(cache["dec_pre"][pos])
        tbias_grads[n_enc + pos] = gpre.sum(axis=(1, 2))
        gcat, grads[f"dec{k}_w"], grads[f"dec{k}_b"] = _conv3_backward(
            gpre, cache["dec_cat"][pos], t[f"dec{k}_w"]
        )
        up_ch = gcat.shape[-1] - cache["skips"][k - 1].shape[-1]
        gskips[k - 1] += gcat[..., up_ch:]
        gd = _upnearest2_backward(gcat[..., :up_ch])

    gpre = gd * expit(cache["mid_pre"])
    gh, grads["mid_w"], grads["mid_b"] = _conv3_backward(gpre, cache["mid_in"], t["mid_w"])

    for k in reversed(range(1, cfg.levels + 1)):
        gact = _avgpool2_backward(gh) + gskips[k - 1]
        gpre = gact * expit(cache["enc_pre"][k - 1])
        tbias_grads[k - 1] = gpre.sum(axis=(1, 2))
        gh, grads[f"enc{k}_w"], grads[f"enc{k}_b"] = _conv3_backward(
            gpre, cache["enc_in"][k - 1], t[f"enc{k}_w"]
        )

    # time-embedding MLP
    gtvec = np.concatenate(tbias_grads, axis=1)
    tc = cache["tcache"]
    grads["time_w2"] = gtvec.T @ tc["hid"]
    grads["time_b2"] = gtvec.sum(axis=0)
    ghid = gtvec @ t["time_w2"]
    gpre_t = ghid * expit(tc["pre"])
    grads["time_w1"] = gpre_t.T @ tc["feats"]
    grads["time_b1"] = gpre_t.sum(axis=0)

    # reward gate MLP and embedding rows
    ggate = np.concatenate(gate_grads, axis=1)
    rc = cache["rcache"]
    grads["reward_w2"] = ggate.T @ rc["hid"]
    grads["reward_b2"] = ggate.sum(axis=0)
    ghid = ggate @ t["reward_w2"]
    gpre_r = ghid * expit(rc["pre"])
    grads["reward_w1"] = gpre_r.T @ rc["rows"]
    grads["reward_b1"] = gpre_r.sum(axis=0)
    grows = gpre_r @ t["reward_w1"]
    np.add.at(grads["reward_emb"], cache["r_index"], grows)

    return grads


@dataclass
class TrainItem:
    """One training example: noisy state plus everything it conditions on."""

    z_t: np.ndarray
    z0: np.ndarray
    z1: np.ndarray
    t_index: int
    r: int | None


def batch_loss(
    params: ScoreNetParams,
    items: Sequence[TrainItem],
    sched: Schedule,
    loss_kind: str = "naive",
) -> float:
    """Loss only (used by the finite-difference oracle)."""
    score, target, _ = _score_and_target(params, items, sched, loss_kind)
    return float(np.mean((score - target) ** 2))


def _score_and_target(params, items, sched, loss_kind, want_cache=False):
    if not items:
        raise ValueError("empty batch")
    z_t = np.stack([it.z_t for it in items])
    z0 = np.stack([it.z0 for it in items])
    z1 = np.stack([it.z1 for it in items])
    t_idx = np.array([it.t_index for it in items], dtype=int)
    r_idx = np.array([_r_to_index(it.r) for it in items], dtype=int)

    if loss_kind == "naive":
        if np.any(t_idx < 1):
            raise ValueError("naive loss undefined at boundary index 0")
        sigma = np.sqrt(sched.sigma2[t_idx])
        target = (z_t - z1) / sigma[:, None, None]
    elif loss_kind == "exact":
        if np.any(t_idx < 1) or np.any(t_idx > sched.n_steps - 1):
            raise ValueError("exact loss needs interior time indices")
        mus, vars_ = [], []
        for it in items:
            mu, var = bridge_moments(sched, it.t_index, it.z0, it.z1)
            mus.append(mu)
            vars_.append(var)
        target = -(z_t - np.stack(mus)) / np.array(vars_)[:, None, None]
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")

    target = target.astype(params.dtype)
    out = forward_batch(params, z_t, z0, t_idx, r_idx, want_cache=want_cache)
    if want_cache:
        return out[0], target, out[1]
    return out, target, None


def backward(
    params: ScoreNetParams,
    items: Sequence[TrainItem],
    sched: Schedule,
    loss_kind: str = "naive",
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared score-matching loss and exact gradients for a batch."""
    score, target, cache = _score_and_target(params, items, sched, loss_kind, want_cache=True)
    resid = score - target
    loss = float(np.mean(resid**2))
    gscore = (2.0 / resid.size) * resid
    grads = _backward_from_score_grad(params, cache, gscore)
    return loss, grads


# ---------------------------------------------------------------------------
# checkpoint serialization


def save_params(path, params: ScoreNetParams) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    cfg = json.dumps(asdict(params.config)).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    for name in param_names(params.config):
        arr = np.ascontiguousarray(params.tensors[name], dtype="<f8")
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_params(path) -> ScoreNetParams:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:5] != MAGIC:
        raise ValueError(f"{path}: not a score-network checkpoint (bad magic)")
    off = 5
    (clen,) = struct.unpack_from("<I", data, off)
    off += 4
    raw = json.loads(data[off : off + clen])
    raw["widths"] = tuple(raw["widths"])
    config = ScoreNetConfig(**raw)
    off += clen
    tensors = {}
    for name in param_names(config):
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        tensors[name] = arr.astype(float)
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return ScoreNetParams(config, tensors)
