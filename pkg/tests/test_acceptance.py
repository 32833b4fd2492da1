"""Acceptance suite: every criterion at its stated tolerance.

Run with `pytest tests/test_acceptance.py -v -s` to see one pass/fail line
per criterion. The end-to-end phantom pipeline (training, feedback round,
fine-tune, held-out evaluation) runs once per session; the arithmetic
criteria run standalone.
"""

from __future__ import annotations

import time

import numpy as np
import pytest
from scipy.stats import binomtest

from bridgelab.schedule import make_schedule, bridge_moments
from bridgelab.bridge import nfe_grid, predict_endpoint, generative_step
from bridgelab.scorenet import (
    Conditioning,
    ScoreNetConfig,
    backward,
    batch_loss,
    forward,
    init_params,
    param_names,
)
from bridgelab.sampler import EvalCounter, SampleRequest, cfg_score, sample
from bridgelab.feedback import Rater, run_tournament
from bridgelab.sampler import Candidate
from bridgelab.metrics import rmse, ssim
from bridgelab.training import TrainConfig, train

from e2e_pipeline import PipelineScale, run_pipeline


def _report(name: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# fast criteria


def test_bridge_closed_form_suite():
    """Boundary identities exact; Monte-Carlo marginals (M=1e5, 5-sigma)."""
    t0 = time.time()
    sched = make_schedule(1000, 1e-4, 0.3)
    rng = np.random.default_rng(2024)
    M = 100_000
    ok = True
    for trial in range(5):
        z0 = rng.standard_normal((4, 4))
        z1 = rng.standard_normal((4, 4))
        mu0, v0 = bridge_moments(sched, 0, z0, z1)
        muN, vN = bridge_moments(sched, 1000, z0, z1)
        ok &= bool(np.array_equal(mu0, z0) and v0 == 0.0)
        ok &= bool(np.array_equal(muN, z1) and vN == 0.0)
        i = int(rng.integers(1, 1000))
        mu, var = bridge_moments(sched, i, z0, z1)
        draws = mu[None] + np.sqrt(var) * rng.standard_normal((M,) + z0.shape)
        ok &= bool(np.all(np.abs(draws.mean(0) - mu) <= 5 * np.sqrt(var / M)))
        ok &= bool(np.all(np.abs(draws.var(0) - var) <= 0.05 * var))
    elapsed = time.time() - t0
    ok &= elapsed < 10.0
    _report("bridge closed-form suite", ok, f"5 triples at M={M}, {elapsed:.1f}s < 10s")


def test_oracle_reconstruction():
    """Exact training-target oracle returns z1 within 1e-10 for all NFE."""
    t0 = time.time()
    sched = make_schedule(1000, 1e-4, 0.3)
    rng = np.random.default_rng(7)
    z0 = rng.standard_normal((16, 16))
    z1 = rng.standard_normal((16, 16))
    worst = 0.0
    for nfe in (1, 2, 5, 10):
        grid = nfe_grid(1000, nfe)
        z = z0.copy()
        zhat1 = z
        for k in range(nfe):
            i, j = int(grid[k]), int(grid[k + 1])
            sigma = float(np.sqrt(sched.sigma2[j]))
            zhat1 = predict_endpoint(z, (z - z1) / sigma, sigma)
            z = generative_step(sched, z, zhat1, i, j, deterministic=True)
        worst = max(worst, float(np.max(np.abs(z - z1))))
    elapsed = time.time() - t0
    ok = worst < 1e-10 and elapsed < 1.0
    _report("oracle reconstruction", ok,
            f"max |out - z1| = {worst:.2e} < 1e-10 over NFE in {{1,2,5,10}}, {elapsed:.2f}s < 1s")


def _fd_sweep(params, items, sched, grads, rng, per_tensor):
    """Central finite differences (step 1e-4, fourth-order) per tensor."""
    h = 1e-4
    worst = 0.0
    for name in param_names(params.config):
        flat = params.tensors[name].reshape(-1)
        if per_tensor >= flat.size:
            idxs = np.arange(flat.size)
        else:
            idxs = rng.choice(flat.size, size=per_tensor, replace=False)
        for ix in idxs:
            orig = flat[ix]
            flat[ix] = orig + h
            fp = batch_loss(params, items, sched)
            flat[ix] = orig - h
            fm = batch_loss(params, items, sched)
            flat[ix] = orig + 2 * h
            fp2 = batch_loss(params, items, sched)
            flat[ix] = orig - 2 * h
            fm2 = batch_loss(params, items, sched)
            flat[ix] = orig
            fd = (8 * (fp - fm) - (fp2 - fm2)) / (12 * h)
            rel = abs(grads[name].reshape(-1)[ix] - fd) / (abs(fd) + 1e-8)
            worst = max(worst, rel)
    return worst


def test_gradient_suite():
    """Analytic gradients vs finite differences, 8x8 double precision.

    Every scalar of every tensor on a compact config, plus sampled entries
    of every tensor at the default widths.
    """
    from bridgelab.scorenet import TrainItem

    t0 = time.time()
    rng = np.random.default_rng(31)
    sched = make_schedule(40, 1e-4, 0.3)

    def make_items(n_steps):
        return [
            TrainItem(
                z_t=rng.standard_normal((8, 8)) * 0.3,
                z0=rng.standard_normal((8, 8)) * 0.3,
                z1=rng.standard_normal((8, 8)) * 0.3,
                t_index=int(rng.integers(1, n_steps)),
                r=[0, 1, None][k % 3],
            )
            for k in range(3)
        ]

    worst = 0.0
    # compact config: every scalar gets checked
    compact = ScoreNetConfig(
        widths=(4, 8), time_freqs=8, time_hidden=12, reward_dim=6,
        reward_hidden=8, n_steps=40,
    )
    params = init_params(compact, rng)
    for k in params.tensors:
        params.tensors[k] = params.tensors[k] + 0.2 * rng.standard_normal(params.tensors[k].shape)
    items = make_items(40)
    _, grads = backward(params, items, sched)
    worst = max(worst, _fd_sweep(params, items, sched, grads, rng, per_tensor=10**9))

    # default widths: sampled entries from every tensor
    dflt = ScoreNetConfig(n_steps=40)
    params = init_params(dflt, rng)
    for k in params.tensors:
        params.tensors[k] = params.tensors[k] + 0.2 * rng.standard_normal(params.tensors[k].shape)
    items = make_items(40)
    _, grads = backward(params, items, sched)
    worst = max(worst, _fd_sweep(params, items, sched, grads, rng, per_tensor=8))

    elapsed = time.time() - t0
    ok = worst < 1e-4 and elapsed < 60.0
    _report("gradient suite", ok, f"max rel err {worst:.2e} < 1e-4, {elapsed:.1f}s < 60s")


def test_cfg_algebra():
    """w=0 identity; affinity in w within 1e-10; 2*NFE guided evaluations."""
    sched = make_schedule(1000, 1e-4, 0.3)
    rng = np.random.default_rng(17)
    params = init_params(ScoreNetConfig(), rng)  # float64
    for k in params.tensors:
        params.tensors[k] = params.tensors[k] + 0.1 * rng.standard_normal(params.tensors[k].shape)
    z = rng.standard_normal((16, 16))
    z0 = rng.standard_normal((16, 16))

    plain = forward(params, z, Conditioning(z0=z0, t_index=500, r=0))
    guided0 = cfg_score(params, z, z0, 500, 0, 0.0)
    ok = bool(np.array_equal(plain, guided0))

    s1 = cfg_score(params, z, z0, 500, 0, 1.0)
    s2 = cfg_score(params, z, z0, 500, 0, 2.0)
    s4 = cfg_score(params, z, z0, 500, 0, 4.0)
    collin = float(np.max(np.abs(s2 - (s1 + (s4 - s1) / 3.0))))
    ok &= collin < 1e-10

    counts = {}
    for w in (0.0, 3.0):
        ctr = EvalCounter()
        sample(params, SampleRequest(z0=z0, w=w, nfe=10), sched, counter=ctr)
        counts[w] = ctr.n
    ok &= counts[0.0] == 10 and counts[3.0] == 20
    _report("CFG algebra", ok,
            f"w=0 identity, collinearity {collin:.1e} < 1e-10, evals {counts[0.0]}/{counts[3.0]} (10/20)")


def test_tournament_oracle_equivalence():
    """200 random pools (size <= 16): winner == exhaustive argmin, 200/200."""
    rng = np.random.default_rng(99)
    wins = 0
    for trial in range(200):
        n = int(rng.integers(1, 17))
        scores = rng.random(n)
        pool = [
            Candidate(
                image=np.full((2, 2), s), z0=np.zeros((2, 2)), subject="s", slice_id=0,
                checkpoint_id="c", scale=1.0, seed=0, candidate_id=f"c{k}",
            )
            for k, s in enumerate(scores)
        ]
        best = min(pool, key=lambda c: float(c.image[0, 0]))
        rater = Rater(kind="oracle", score_fn=lambda img: float(img[0, 0]))
        rec, log = run_tournament(pool, rater, np.random.default_rng(trial))
        if rec.winner is best and len(log) == n - 1:
            wins += 1
    ok = wins == 200
    _report("tournament oracle equivalence", ok, f"{wins}/200 argmin winners, counts = pool-1")


# ---------------------------------------------------------------------------
# end-to-end phantom run (shared across the trend criteria)


@pytest.fixture(scope="session")
def pipeline():
    import os

    # BRIDGELAB_E2E_CACHE reuses a finished training run during development;
    # phase timings are preserved from the original uncached run.
    cache = os.environ.get("BRIDGELAB_E2E_CACHE") or None
    return run_pipeline(PipelineScale(), verbose=True, cache_dir=cache)


def test_e2e_artifact_reduction(pipeline):
    r = pipeline
    ok = r.arr_ft >= r.arr_prior + 10.0
    _report(
        "e2e (a) artifact reduction rate", ok,
        f"ARR fine-tuned {r.arr_ft:.1f} >= prior {r.arr_prior:.1f} + 10",
    )


def test_e2e_feedback_round_helps(pipeline):
    """Fine-tuning on tournament winners beats the pre-feedback model."""
    r = pipeline
    ok = r.arr_ft >= r.arr_base
    _report(
        "e2e feedback round", ok,
        f"ARR fine-tuned {r.arr_ft:.1f} >= base {r.arr_base:.1f} on held-out bad cases",
    )


def test_e2e_success_rate_not_degraded(pipeline):
    r = pipeline
    ok = r.arsr_ft >= r.arsr_base
    _report(
        "e2e (b) success rate", ok,
        f"ARSR after fine-tune {r.arsr_ft:.1f} >= before {r.arsr_base:.1f}",
    )


def test_e2e_fidelity_preserved(pipeline):
    r = pipeline
    ok = r.rmse_ft_good <= 1.5 * r.rmse_prior_good
    _report(
        "e2e (c) fidelity", ok,
        f"good-case RMSE {r.rmse_ft_good:.4f} <= 1.5 x prior {r.rmse_prior_good:.4f}",
    )


def test_e2e_runtime_budget(pipeline):
    total = pipeline.timings["total"]
    ok = total < 30 * 60
    _report("e2e runtime", ok, f"{total:.0f}s < 1800s")


def test_e2e_grid_shape(pipeline):
    r = pipeline
    expected = len(r.checkpoints) * 6 * r.scale.feedback_groups
    ok = (
        len(r.checkpoints) == 9
        and r.n_candidates == expected
        and r.n_matchups == r.scale.feedback_groups * (9 * 6 - 1)
        and r.n_prefs == r.scale.feedback_groups
    )
    _report(
        "e2e candidate grid", ok,
        f"9 checkpoints x 6 scales x {r.scale.feedback_groups} groups = {r.n_candidates}, "
        f"{r.n_matchups} matchups, {r.n_prefs} winners",
    )


def test_nfe_trend(pipeline):
    r = pipeline
    diff = abs(r.rmse_nfe10 - r.rmse_nfe100)
    direction = "declines" if r.rmse_nfe100 > r.rmse_nfe10 else "improves"
    ok = diff <= 0.05  # 5% of the unit dynamic range
    _report(
        "NFE trend", ok,
        f"|RMSE(10) - RMSE(100)| = {diff:.4f} <= 0.05 "
        f"(fidelity {direction} with more steps; direction reported, not asserted)",
    )


def test_reward_conditioning_sensitive(pipeline):
    """The trained network distinguishes the two preference tokens."""
    r = pipeline
    pair = r.ds.test[0]
    z_t = pair.z0
    out0 = forward(r.params_ft, z_t, Conditioning(z0=pair.z0, t_index=500, r=0))
    out1 = forward(r.params_ft, z_t, Conditioning(z0=pair.z0, t_index=500, r=1))
    ok = not np.array_equal(out0, out1)
    _report("reward conditioning sensitivity", ok,
            f"max |s(r=0) - s(r=1)| = {np.abs(out0 - out1).max():.2e} > 0")


def test_negative_request(pipeline):
    """r=1 requests yield more artifact than r=0 at w=4 (one-sided sign test)."""
    r = pipeline
    r0 = np.array(r.neg_scores_r0)
    r1 = np.array(r.neg_scores_r1)
    n = len(r0)
    wins = int(np.sum(r1 > r0))
    p = binomtest(wins, n, 0.5, alternative="greater").pvalue
    ok = n >= 32 and p < 0.05
    _report(
        "negative preference request", ok,
        f"r=1 scored above r=0 in {wins}/{n} held-out cases (sign test p = {p:.2e} < 0.05)",
    )


# ---------------------------------------------------------------------------
# source-conditioning ablation: the pipeline's base model is the conditioned
# arm; its twin trains with the source channel zeroed, same config and seed


@pytest.fixture(scope="session")
def ablated_model(pipeline):
    import os

    sched = pipeline.sched
    sc = pipeline.scale
    cache = os.environ.get("BRIDGELAB_E2E_CACHE")
    cache_path = None
    if cache:
        from pathlib import Path

        cache_path = Path(cache) / f"ablated_e{sc.epochs}_s{sc.train_seed}.sbsn"
        if cache_path.exists():
            from bridgelab.scorenet import load_params

            return load_params(cache_path).astype("float32")
    cfg_net = ScoreNetConfig(n_steps=sched.n_steps, drop_z0=True)
    params = init_params(cfg_net, np.random.default_rng(sc.train_seed)).astype("float32")
    tcfg = TrainConfig(
        epochs=sc.epochs, batch_size=sc.batch_size, learning_rate=1.5e-3,
        lr_final=1e-4, p_uncond=0.1, t_min_index=50, seed=sc.train_seed,
    )
    result = train(params, pipeline.ds.train, tcfg, sched).params
    if cache_path is not None:
        from bridgelab.scorenet import save_params

        save_params(cache_path, result)
    return result


def test_z0_ablation(pipeline, ablated_model):
    from e2e_pipeline import _sample_many

    ds = pipeline.ds
    sched = pipeline.sched
    cleans = [ds.phantom_for(p).clean for p in ds.test]
    stats = {}
    for tag, params in (("conditioned", pipeline.params_base), ("ablated", ablated_model)):
        outs = _sample_many(params, ds.test, sched, 0.0, 10, seed=3)
        stats[tag] = (
            float(np.mean([rmse(o, c) for o, c in zip(outs, cleans)])),
            float(np.mean([ssim(o, c) for o, c in zip(outs, cleans)])),
        )
    (rm_c, ss_c), (rm_a, ss_a) = stats["conditioned"], stats["ablated"]
    ok = rm_a > rm_c and ss_a < ss_c
    _report(
        "source-conditioning ablation", ok,
        f"ablated rmse {rm_a:.4f} > conditioned {rm_c:.4f}; "
        f"ablated ssim {ss_a:.4f} < conditioned {ss_c:.4f}",
    )
