"""Training loop, conditioning dropout, and incremental fine-tuning."""

import numpy as np
import pytest

from bridgelab.schedule import make_schedule
from bridgelab.scorenet import ScoreNetConfig, init_params, param_names
from bridgelab.training import (
    LabeledPair,
    TrainConfig,
    TrainingDiverged,
    finetune_incremental,
    train,
    write_history,
)

SMALL = ScoreNetConfig(
    widths=(4, 8), time_freqs=8, time_hidden=12, reward_dim=6, reward_hidden=8, n_steps=40
)


@pytest.fixture
def sched():
    return make_schedule(40, 1e-4, 0.3)


@pytest.fixture
def tiny_dataset():
    rng = np.random.default_rng(0)
    pairs = []
    for k in range(16):
        z1 = rng.standard_normal((8, 8)) * 0.2
        z0 = z1 + 0.3 * rng.standard_normal((8, 8))
        pairs.append(LabeledPair(z0=z0, z1=z1, r=k % 2, subject=f"s{k//4}", slice_id=k % 4))
    return pairs


def test_zero_learning_rate_is_identity(sched, tiny_dataset):
    params = init_params(SMALL, np.random.default_rng(1))
    cfg = TrainConfig(epochs=2, batch_size=4, learning_rate=0.0, seed=3)
    res = train(params, tiny_dataset, cfg, sched)
    for k in param_names(SMALL):
        assert np.array_equal(res.params.tensors[k], params.tensors[k])


def test_loss_decreases_over_training(sched, tiny_dataset):
    # ~200 steps on the 16-pair set: endpoint-to-endpoint improvement
    params = init_params(SMALL, np.random.default_rng(2))
    cfg = TrainConfig(epochs=50, batch_size=4, learning_rate=1e-3, seed=5, t_min_index=4)
    res = train(params, tiny_dataset, cfg, sched)
    assert res.history[-1][1] < res.history[0][1]


def test_same_seed_identical_history(sched, tiny_dataset):
    params = init_params(SMALL, np.random.default_rng(3))
    cfg = TrainConfig(epochs=3, batch_size=4, seed=11)
    h1 = train(params, tiny_dataset, cfg, sched).history
    h2 = train(params, tiny_dataset, cfg, sched).history
    assert h1 == h2


def test_empty_dataset_rejected(sched):
    params = init_params(SMALL, np.random.default_rng(4))
    with pytest.raises(ValueError):
        train(params, [], TrainConfig(epochs=1), sched)


def test_null_embedding_untouched_without_dropout(sched, tiny_dataset):
    params = init_params(SMALL, np.random.default_rng(5))
    null_row_before = params.tensors["reward_emb"][2].copy()
    cfg = TrainConfig(epochs=4, batch_size=4, p_uncond=0.0, seed=7)
    res = train(params, tiny_dataset, cfg, sched)
    # the null token is never selected, so its row never moves
    assert np.array_equal(res.params.tensors["reward_emb"][2], null_row_before)
    assert not np.array_equal(res.params.tensors["reward_emb"][0], params.tensors["reward_emb"][0])


def test_checkpoint_cadence(sched, tiny_dataset, tmp_path):
    params = init_params(SMALL, np.random.default_rng(6))
    cfg = TrainConfig(epochs=6, batch_size=4, checkpoint_every=2, seed=1)
    res = train(params, tiny_dataset, cfg, sched, checkpoint_dir=tmp_path)
    assert [e for e, _ in res.checkpoints] == [2, 4, 6]
    assert sorted(p.name for p in tmp_path.glob("*.sbsn")) == [
        "ckpt_2.sbsn", "ckpt_4.sbsn", "ckpt_6.sbsn",
    ]


def test_history_csv(sched, tiny_dataset, tmp_path):
    params = init_params(SMALL, np.random.default_rng(7))
    res = train(params, tiny_dataset, TrainConfig(epochs=2, batch_size=4), sched)
    out = tmp_path / "history.csv"
    write_history(out, res.history)
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "epoch,loss"
    assert len(lines) == 3


def test_divergence_aborts_with_diagnostics(sched, tiny_dataset):
    params = init_params(SMALL, np.random.default_rng(8))
    # a poisoned weight makes the first loss non-finite
    params.tensors["out_b"][0] = np.inf
    cfg = TrainConfig(epochs=1, batch_size=4, seed=2)
    with np.errstate(invalid="ignore"), pytest.raises(TrainingDiverged, match="non-finite"):
        train(params, tiny_dataset, cfg, sched)


class TestFinetune:
    def test_rejects_bad_labels(self, sched, tiny_dataset):
        params = init_params(SMALL, np.random.default_rng(9))
        bad = [LabeledPair(z0=np.zeros((8, 8)), z1=np.zeros((8, 8)), r=1)]
        with pytest.raises(ValueError):
            finetune_incremental(params, tiny_dataset, bad, TrainConfig(epochs=1), sched)

    def test_empty_pref_set_equals_plain_training(self, sched, tiny_dataset):
        params = init_params(SMALL, np.random.default_rng(10))
        cfg = TrainConfig(epochs=2, batch_size=4, seed=13)
        a = finetune_incremental(params, tiny_dataset, [], cfg, sched, lr_decay=1.0)
        b = train(params, tiny_dataset, cfg, sched)
        for k in param_names(SMALL):
            assert np.array_equal(a.params.tensors[k], b.params.tensors[k])

    def test_duplicate_pairs_fine(self, sched, tiny_dataset):
        params = init_params(SMALL, np.random.default_rng(11))
        dup = [p for p in tiny_dataset[:2] if p.r == 0]
        dup = [LabeledPair(z0=p.z0, z1=p.z1, r=0, subject=p.subject, slice_id=p.slice_id) for p in dup]
        cfg = TrainConfig(epochs=1, batch_size=4, seed=17)
        res = finetune_incremental(params, tiny_dataset, dup, cfg, sched)
        assert len(res.history) == 1

    def test_learning_rate_reduced(self, sched, tiny_dataset):
        # lr 0 stays 0 after decay; nonzero decays by the factor
        params = init_params(SMALL, np.random.default_rng(12))
        cfg = TrainConfig(epochs=1, batch_size=4, learning_rate=0.0, seed=19)
        res = finetune_incremental(params, tiny_dataset, [], cfg, sched)
        for k in param_names(SMALL):
            assert np.array_equal(res.params.tensors[k], params.tensors[k])


def test_labeled_pair_validation():
    with pytest.raises(ValueError):
        LabeledPair(z0=np.zeros((4, 4)), z1=np.zeros((5, 5)), r=0)
    with pytest.raises(ValueError):
        LabeledPair(z0=np.zeros((4, 4)), z1=np.zeros((4, 4)), r=2)


def test_zero_loss_is_a_training_fixed_point(sched):
    """Exact-oracle batches (zero residual) never move the parameters."""
    from bridgelab.scorenet import TrainItem, backward, param_names as names
    from bridgelab.training import Adam

    rng = np.random.default_rng(20)
    params = init_params(SMALL, rng)  # zero network
    before = {k: v.copy() for k, v in params.tensors.items()}
    opt = Adam(params, TrainConfig(epochs=1, batch_size=2, learning_rate=1e-2))
    for step in range(10):
        z1 = rng.standard_normal((8, 8))
        # z_t equal to z1 makes the target zero, matching the zero network
        items = [TrainItem(z_t=z1.copy(), z0=z1, z1=z1, t_index=10 + step, r=0)]
        loss, grads = backward(params, items, sched)
        assert loss == 0.0
        opt.step(params, grads)
    for k in names(SMALL):
        assert np.array_equal(params.tensors[k], before[k])
