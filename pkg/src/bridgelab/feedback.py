"""Sequential pairwise elimination over candidate pools.

While more than one candidate remains, two are drawn uniformly at random,
the rater picks a winner, the loser is removed, the winner stays in. A pool
of n therefore always decides in exactly n - 1 matchups. With a rater
induced by a total score the final winner is the score argmin regardless of
the pairing order. The survivor is recorded with the "good" label for
incremental fine-tuning.

Presentation order (which candidate shows on the left) is randomized per
matchup and recorded, so a rater's side bias cannot correlate with either
candidate's provenance.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .sampler import Candidate


@dataclass
class Rater:
    """Pairwise judge: an automated total-score oracle or a human endpoint."""

    kind: str  # "oracle" | "human"
    score_fn: Callable[[np.ndarray], float] | None = None
    rater_id: str = "oracle"

    def compare(self, a: Candidate, b: Candidate) -> Candidate:
        if self.kind != "oracle" or self.score_fn is None:
            raise RuntimeError("only oracle raters can compare in-process")
        # lower score = fewer artifacts = preferred; ties keep the left draw
        return a if self.score_fn(a.image) <= self.score_fn(b.image) else b


@dataclass(eq=False)
class Matchup:
    left: Candidate
    right: Candidate
    outcome: str | None = None  # "left" | "right"
    rater_id: str = ""
    timestamp: float = 0.0

    def decide(self, outcome: str, rater_id: str) -> None:
        if self.outcome is not None:
            raise RuntimeError("matchup already decided")
        if outcome not in ("left", "right"):
            raise ValueError(f"outcome must be 'left' or 'right', got {outcome!r}")
        self.outcome = outcome
        self.rater_id = rater_id
        self.timestamp = time.time()

    @property
    def winner(self) -> Candidate:
        if self.outcome is None:
            raise RuntimeError("matchup not decided")
        return self.left if self.outcome == "left" else self.right


@dataclass(eq=False)
class PreferenceRecord:
    winner: Candidate
    pool_size: int
    subject: str
    slice_id: int
    r: int = 0  # tournament winners are always labeled good


def run_tournament(
    pool: list[Candidate], rater: Rater, rng: np.random.Generator
) -> tuple[PreferenceRecord, list[Matchup]]:
    """Eliminate down to one winner; exactly len(pool) - 1 matchups."""
    if not pool:
        raise ValueError("empty candidate pool")
    keys = {(c.subject, c.slice_id) for c in pool}
    if len(keys) > 1:
        raise ValueError(f"pool mixes groups: {sorted(keys)}")

    alive = list(pool)
    log: list[Matchup] = []
    while len(alive) > 1:
        ia, ib = rng.choice(len(alive), size=2, replace=False)
        a, b = alive[int(ia)], alive[int(ib)]
        # randomize presentation independent of draw order
        left, right = (a, b) if rng.random() < 0.5 else (b, a)
        m = Matchup(left=left, right=right)
        win = rater.compare(left, right)
        m.decide("left" if win is left else "right", rater.rater_id)
        log.append(m)
        loser = right if win is left else left
        alive.remove(loser)

    winner = alive[0]
    rec = PreferenceRecord(
        winner=winner,
        pool_size=len(pool),
        subject=winner.subject,
        slice_id=winner.slice_id,
    )
    return rec, log


def group_candidates(
    candidates: list[Candidate],
) -> dict[tuple[str, int], list[Candidate]]:
    groups: dict[tuple[str, int], list[Candidate]] = {}
    for c in candidates:
        groups.setdefault((c.subject, c.slice_id), []).append(c)
    return groups


def collect_preferences(
    grouped: dict[tuple[str, int], list[Candidate]],
    rater: Rater,
    rng: np.random.Generator,
) -> tuple[list[PreferenceRecord], list[Matchup]]:
    """One winner per group, iterated in sorted (subject, slice) order."""
    records: list[PreferenceRecord] = []
    full_log: list[Matchup] = []
    for key in sorted(grouped):
        rec, log = run_tournament(grouped[key], rater, rng)
        records.append(rec)
        full_log.extend(log)
    return records, full_log
