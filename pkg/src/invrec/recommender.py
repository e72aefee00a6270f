"""Scoring and top-K ranking from aggregated preferences.

The score of (u, i) is the dot product of the aggregated invariant preference
plus the target-behavior-specific preference with the aggregated item vector.
Ties are broken by ascending item id so rankings are reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .environments import EnvironmentRepresentations, EnvironmentSet
from .errors import DataError
from .vae import VaeParams, generate_bundle


@dataclass(frozen=True)
class ScoringState:
    """Immutable per-user/per-item vectors needed to score recommendations."""

    invariant_agg: np.ndarray   # [U, d] summed invariant preferences
    specific_target: np.ndarray  # [U, d] target-behavior-specific residual
    item_agg: np.ndarray        # [I, d] items summed over singleton envs

    @property
    def num_users(self) -> int:
        return self.invariant_agg.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_agg.shape[0]


def aggregate_invariant(invariants) -> np.ndarray:
    """Sum invariant preferences over all environments ([M, ..., d] -> [..., d])."""
    invariants = np.asarray(invariants)
    return invariants.sum(axis=0)


def aggregate_items(singleton_tables, num_behaviors: int | None = None) -> np.ndarray:
    """Sum item tables from the singleton environments only.

    ``num_behaviors`` guards against passing union-environment tables: when
    given, exactly that many tables are required.
    """
    tables = list(singleton_tables)
    if num_behaviors is not None and len(tables) != num_behaviors:
        raise DataError(f"expected {num_behaviors} singleton item tables, "
                        f"got {len(tables)} (union environments must be excluded)")
    if not tables:
        raise DataError("no item tables to aggregate")
    return np.sum(tables, axis=0)


def singleton_item_tables(reps: EnvironmentRepresentations,
                          env_set: EnvironmentSet) -> list[np.ndarray]:
    """The item tables of the K single-behavior environments, in behavior order."""
    idx = env_set.singleton_index
    return [reps.item_tables[idx[k]] for k in range(env_set.num_behaviors)]


def build_scoring_state(reps: EnvironmentRepresentations, env_set: EnvironmentSet,
                        params: VaeParams, target_behavior: int) -> ScoringState:
    """Run the noise-free encoder/decoder over every environment and aggregate.

    Inference uses the posterior mean (zero noise), so the state is a pure
    function of the representations and parameters.
    """
    inputs = np.stack(reps.user_tables, axis=0)
    bundle, _ = generate_bundle(inputs, params, eps=None)
    invariant_agg = aggregate_invariant(bundle.invariant)
    target_env = env_set.singleton_index[target_behavior]
    specific_target = bundle.specific[target_env]
    item_agg = aggregate_items(singleton_item_tables(reps, env_set),
                               num_behaviors=env_set.num_behaviors)
    return ScoringState(invariant_agg=invariant_agg,
                        specific_target=specific_target, item_agg=item_agg)


def score(u: int, i: int, state: ScoringState) -> float:
    """Predicted affinity of user ``u`` for item ``i``."""
    if not 0 <= u < state.num_users:
        raise DataError(f"unknown user id {u}")
    if not 0 <= i < state.num_items:
        raise DataError(f"unknown item id {i}")
    q = state.item_agg[i]
    return float(state.invariant_agg[u] @ q + state.specific_target[u] @ q)


def score_items(u: int, state: ScoringState) -> np.ndarray:
    """Scores of user ``u`` against every item."""
    if not 0 <= u < state.num_users:
        raise DataError(f"unknown user id {u}")
    user_vec = state.invariant_agg[u] + state.specific_target[u]
    return state.item_agg @ user_vec


def top_k(u: int, k: int, exclusions: Iterable[int], state: ScoringState) -> list[int]:
    """The k highest-scoring items outside ``exclusions``.

    Descending score, ties broken by ascending item id.
    """
    if k <= 0:
        raise DataError("k must be positive")
    scores = score_items(u, state)
    excluded = np.zeros(state.num_items, dtype=bool)
    excl = np.fromiter((int(e) for e in exclusions), dtype=np.int64)
    if excl.size:
        if excl.min() < 0 or excl.max() >= state.num_items:
            raise DataError("exclusion id out of range")
        excluded[excl] = True
    candidates = np.flatnonzero(~excluded)
    if candidates.size == 0:
        return []
    # lexsort: primary key last -> sort by -score, then ascending id.
    order = np.lexsort((candidates, -scores[candidates]))
    return candidates[order[:k]].tolist()
