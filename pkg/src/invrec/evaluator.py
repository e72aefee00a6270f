"""Leave-one-out ranking metrics: HR@K and NDCG@K over all non-train items."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import SplitBundle
from .errors import DataError
from .recommender import ScoringState, score_items


@dataclass(frozen=True)
class EvalResult:
    """Aggregated ranking quality over the evaluated users."""

    hr: float
    ndcg: float
    k: int
    n_users: int


def rank_of(held_out: int, scores: np.ndarray, candidate_mask: np.ndarray) -> int:
    """1-based rank of the held-out item among candidate items.

    Candidates scoring strictly higher rank above; ties are resolved by
    ascending item id, matching the top-K tie rule.
    """
    if not candidate_mask[held_out]:
        raise DataError(f"held-out item {held_out} excluded by candidate filter")
    s = scores[held_out]
    cand_scores = scores[candidate_mask]
    cand_ids = np.flatnonzero(candidate_mask)
    higher = int(np.sum(cand_scores > s))
    tied_before = int(np.sum((cand_scores == s) & (cand_ids < held_out)))
    return 1 + higher + tied_before


def hr_ndcg_at_k(ranks, k: int) -> EvalResult:
    """Hit ratio and NDCG at cutoff ``k`` from 1-based ranks."""
    if k <= 0:
        raise DataError("k must be positive")
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size == 0:
        raise DataError("no ranks to aggregate")
    if ranks.min() < 1:
        raise DataError("ranks are 1-based")
    hits = ranks <= k
    hr = float(np.mean(hits))
    ndcg = float(np.mean(np.where(hits, 1.0 / np.log2(ranks + 1.0), 0.0)))
    return EvalResult(hr=hr, ndcg=ndcg, k=k, n_users=int(ranks.size))


def evaluate(split: SplitBundle, state: ScoringState, k: int = 10,
             exclude_all_behaviors: bool = False) -> EvalResult:
    """Rank each test user's held-out item against all non-train candidates.

    Candidates are every item except the user's training interactions with
    the target behavior (or with any behavior when ``exclude_all_behaviors``).
    """
    if len(split.test_users) == 0:
        raise DataError("empty test set")
    train = split.train
    if exclude_all_behaviors:
        mask = np.ones(len(train), dtype=bool)
    else:
        mask = train.behaviors == split.target_behavior
    excl_users = train.users[mask]
    excl_items = train.items[mask]
    per_user: dict[int, list[int]] = {}
    for u, i in zip(excl_users.tolist(), excl_items.tolist()):
        per_user.setdefault(u, []).append(i)

    ranks = np.empty(len(split.test_users), dtype=np.int64)
    for t, (u, held) in enumerate(zip(split.test_users.tolist(),
                                      split.test_items.tolist())):
        candidate_mask = np.ones(state.num_items, dtype=bool)
        if u in per_user:
            candidate_mask[per_user[u]] = False
        ranks[t] = rank_of(held, score_items(u, state), candidate_mask)
    return hr_ndcg_at_k(ranks, k)
