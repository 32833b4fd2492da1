"""Tournament elimination: counts, oracle equivalence, group iteration."""

import itertools

import numpy as np
import pytest

from bridgelab.sampler import Candidate
from bridgelab.feedback import (
    Matchup,
    Rater,
    collect_preferences,
    group_candidates,
    run_tournament,
)


def _cand(score, subject="s000", slice_id=0, cid=""):
    # encode the oracle score as a constant image so the rater can read it
    img = np.full((4, 4), float(score))
    return Candidate(
        image=img, z0=np.zeros((4, 4)), subject=subject, slice_id=slice_id,
        checkpoint_id="ckpt", scale=1.0, seed=0, candidate_id=cid or f"c{score}",
    )


def _oracle():
    return Rater(kind="oracle", score_fn=lambda img: float(img[0, 0]), rater_id="oracle")


def test_pool_of_one_wins_without_matchups():
    rec, log = run_tournament([_cand(0.5)], _oracle(), np.random.default_rng(0))
    assert rec.winner.image[0, 0] == 0.5
    assert rec.r == 0
    assert log == []


def test_three_candidate_pool_every_seed():
    # total-order oracle: the 0.1-score candidate wins for every pairing order
    for seed in range(25):
        pool = [_cand(0.9), _cand(0.5), _cand(0.1)]
        rec, log = run_tournament(pool, _oracle(), np.random.default_rng(seed))
        assert rec.winner.image[0, 0] == 0.1
        assert len(log) == 2


def test_elimination_count_54():
    pool = [_cand(k / 100, cid=f"c{k}") for k in range(54)]
    rec, log = run_tournament(pool, _oracle(), np.random.default_rng(1))
    assert len(log) == 53
    assert rec.pool_size == 54


def test_no_revivals_and_participants_live():
    pool = [_cand(k / 10, cid=f"c{k}") for k in range(8)]
    rng = np.random.default_rng(2)
    eliminated: set[str] = set()
    rec, log = run_tournament(pool, _oracle(), rng)
    for m in log:
        assert m.left.candidate_id not in eliminated
        assert m.right.candidate_id not in eliminated
        loser = m.right if m.outcome == "left" else m.left
        eliminated.add(loser.candidate_id)
    assert rec.winner.candidate_id not in eliminated


def test_mixed_groups_rejected():
    pool = [_cand(0.1, subject="s000"), _cand(0.2, subject="s001")]
    with pytest.raises(ValueError):
        run_tournament(pool, _oracle(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        run_tournament([], _oracle(), np.random.default_rng(0))


def test_matchup_decide_once():
    m = Matchup(left=_cand(0.1), right=_cand(0.2))
    m.decide("left", "r1")
    assert m.winner.image[0, 0] == 0.1
    with pytest.raises(RuntimeError):
        m.decide("right", "r1")
    with pytest.raises(ValueError):
        Matchup(left=_cand(0.1), right=_cand(0.2)).decide("top", "r1")


def test_oracle_equivalence_exhaustive_small_pools():
    # winner always equals the score argmin, for many pools and seeds
    rng = np.random.default_rng(3)
    for trial in range(50):
        n = int(rng.integers(2, 17))
        scores = rng.permutation(n) / n + 0.01
        pool = [_cand(s, cid=f"c{k}") for k, s in enumerate(scores)]
        best = min(pool, key=lambda c: c.image[0, 0])
        rec, log = run_tournament(pool, _oracle(), np.random.default_rng(trial))
        assert rec.winner is best
        assert len(log) == n - 1


def test_collect_preferences_group_arithmetic():
    grouped = {}
    for subject, slice_id in itertools.product(("s000", "s001", "s002"), range(4)):
        grouped[(subject, slice_id)] = [
            _cand((k + 1) / 60, subject=subject, slice_id=slice_id, cid=f"{subject}-{slice_id}-{k}")
            for k in range(54)
        ]
    records, log = collect_preferences(grouped, _oracle(), np.random.default_rng(5))
    assert len(records) == 12
    assert len(log) == 12 * 53
    # iterated in sorted group order
    keys = [(r.subject, r.slice_id) for r in records]
    assert keys == sorted(keys)


def test_collect_preferences_empty():
    records, log = collect_preferences({}, _oracle(), np.random.default_rng(0))
    assert records == [] and log == []


def test_oracle_winner_independent_of_seed():
    grouped = {
        ("s000", 0): [_cand((k % 7 + 1) / 9 + k * 1e-4, cid=f"a{k}") for k in range(12)]
    }
    winners = set()
    for seed in range(10):
        records, _ = collect_preferences(grouped, _oracle(), np.random.default_rng(seed))
        winners.add(records[0].winner.candidate_id)
    assert len(winners) == 1


def test_group_candidates_partitions():
    cands = [
        _cand(0.1, subject="s000", slice_id=0),
        _cand(0.2, subject="s000", slice_id=1),
        _cand(0.3, subject="s000", slice_id=0),
    ]
    grouped = group_candidates(cands)
    assert set(grouped) == {("s000", 0), ("s000", 1)}
    assert len(grouped[("s000", 0)]) == 2
