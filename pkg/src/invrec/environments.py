"""Environment augmentation: all nonempty unions of behavior matrices.

With K behaviors there are 2^K - 1 environments.  The canonical order puts
the K singletons first (in behavior order), then larger subsets by size and
lexicographically, so the full-union environment is always last and singleton
k sits at index k.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import BehaviorMatrix, merge_matrices
from .errors import DataError, NumericError
from .graph import PropagationGraph, aggregate_layers, build_graph, propagate


@dataclass(frozen=True)
class EnvironmentSet:
    """Ordered behavior-subset environments."""

    environments: tuple[frozenset[int], ...]
    num_behaviors: int

    @property
    def size(self) -> int:
        return len(self.environments)

    @property
    def singleton_index(self) -> dict[int, int]:
        """Map behavior id -> environment index (identity under canonical order)."""
        return {next(iter(env)): m
                for m, env in enumerate(self.environments) if len(env) == 1}


@dataclass(frozen=True)
class EnvironmentRepresentations:
    """Per-environment user and item tables (one pair per environment)."""

    user_tables: tuple[np.ndarray, ...]
    item_tables: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.user_tables) != len(self.item_tables):
            raise DataError("user/item table counts differ")
        for t in (*self.user_tables, *self.item_tables):
            if not np.all(np.isfinite(t)):
                raise NumericError("non-finite environment representation")


def enumerate_environments(num_behaviors: int) -> EnvironmentSet:
    """All nonempty behavior subsets in canonical order."""
    if num_behaviors < 1:
        raise DataError("need at least one behavior to build environments")
    envs = [frozenset([k]) for k in range(num_behaviors)]
    for size in range(2, num_behaviors + 1):
        for combo in itertools.combinations(range(num_behaviors), size):
            envs.append(frozenset(combo))
    return EnvironmentSet(environments=tuple(envs), num_behaviors=num_behaviors)


def build_environment_graphs(env_set: EnvironmentSet,
                             matrices: Sequence[BehaviorMatrix],
                             num_users: int, num_items: int) -> list[PropagationGraph]:
    """One propagation graph per environment (cacheable: structure is static)."""
    if len(matrices) != env_set.num_behaviors:
        raise DataError(f"expected {env_set.num_behaviors} behavior matrices, "
                        f"got {len(matrices)}")
    graphs = []
    for env in env_set.environments:
        union = merge_matrices([matrices[k] for k in sorted(env)])
        graphs.append(build_graph(union, num_users, num_items))
    return graphs


def environment_representations(env_set: EnvironmentSet,
                                matrices: Sequence[BehaviorMatrix],
                                user_pre: np.ndarray, item_pre: np.ndarray,
                                num_layers: int,
                                graphs: Sequence[PropagationGraph] | None = None,
                                ) -> EnvironmentRepresentations:
    """Propagate the pretrained embeddings through every environment graph.

    ``user_pre`` / ``item_pre`` are the layer-summed outputs of the pretraining
    pass over the all-behavior union.  Pass ``graphs`` to reuse cached
    structures; otherwise they are built from ``matrices``.
    """
    if graphs is None:
        graphs = build_environment_graphs(env_set, matrices,
                                          user_pre.shape[0], item_pre.shape[0])
    user_tables = []
    item_tables = []
    for g in graphs:
        u_layers, i_layers = propagate(g, user_pre, item_pre, num_layers)
        user_tables.append(aggregate_layers(u_layers))
        item_tables.append(aggregate_layers(i_layers))
    return EnvironmentRepresentations(user_tables=tuple(user_tables),
                                      item_tables=tuple(item_tables))
