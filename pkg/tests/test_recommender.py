"""Aggregation, scoring and top-K ranking behavior."""

import numpy as np
import pytest

from invrec.environments import enumerate_environments
from invrec.errors import DataError
from invrec.recommender import (ScoringState, aggregate_invariant,
                                aggregate_items, score, score_items, top_k)


def state_from(invariant_agg, specific_target, item_agg):
    return ScoringState(invariant_agg=np.asarray(invariant_agg, dtype=float),
                        specific_target=np.asarray(specific_target, dtype=float),
                        item_agg=np.asarray(item_agg, dtype=float))


class TestAggregates:
    def test_single_environment_identity(self, rng):
        x = rng.standard_normal((1, 4, 3))
        np.testing.assert_array_equal(aggregate_invariant(x), x[0])

    def test_sum(self):
        out = aggregate_invariant(np.array([[[1.0, 0.0]], [[0.0, 1.0]]]))
        np.testing.assert_array_equal(out, [[1.0, 1.0]])

    def test_environment_order_irrelevant(self, rng):
        x = rng.standard_normal((5, 3, 4))
        perm = rng.permutation(5)
        np.testing.assert_allclose(aggregate_invariant(x),
                                   aggregate_invariant(x[perm]), atol=1e-12)

    def test_items_single_table_identity(self, rng):
        q = rng.standard_normal((4, 2))
        np.testing.assert_array_equal(aggregate_items([q]), q)

    def test_items_three_tables_of_ones(self):
        tables = [np.ones((5, 2))] * 3
        np.testing.assert_array_equal(aggregate_items(tables, num_behaviors=3),
                                      np.full((5, 2), 3.0))

    def test_items_rejects_union_tables(self, rng):
        # K=2 behaviors but M=3 environment tables offered
        tables = [rng.standard_normal((4, 2)) for _ in range(3)]
        with pytest.raises(DataError):
            aggregate_items(tables, num_behaviors=2)
        env_set = enumerate_environments(2)
        ok = aggregate_items(tables[:2], num_behaviors=env_set.num_behaviors)
        np.testing.assert_array_equal(ok, tables[0] + tables[1])


class TestScore:
    def test_hand_computed(self):
        state = state_from([[1.0, 0.0]], [[0.0, 1.0]], [[1.0, 1.0]])
        assert score(0, 0, state) == pytest.approx(2.0)

    def test_zero_items_zero_scores(self, rng):
        state = state_from(rng.standard_normal((3, 2)),
                           rng.standard_normal((3, 2)), np.zeros((4, 2)))
        for u in range(3):
            for i in range(4):
                assert score(u, i, state) == 0.0

    def test_dropping_components_gives_ablations(self, rng):
        inv = rng.standard_normal((2, 3))
        spe = rng.standard_normal((2, 3))
        q = rng.standard_normal((5, 3))
        both = state_from(inv, spe, q)
        no_spe = state_from(inv, np.zeros_like(spe), q)
        no_inv = state_from(np.zeros_like(inv), spe, q)
        for u in range(2):
            for i in range(5):
                assert score(u, i, both) == pytest.approx(
                    score(u, i, no_spe) + score(u, i, no_inv))

    def test_unknown_ids(self):
        state = state_from([[1.0]], [[0.0]], [[1.0]])
        with pytest.raises(DataError):
            score(5, 0, state)
        with pytest.raises(DataError):
            score(0, 5, state)

    def test_bilinear_in_items(self, rng):
        inv = rng.standard_normal((1, 3))
        spe = rng.standard_normal((1, 3))
        q = rng.standard_normal((4, 3))
        base = state_from(inv, spe, q)
        scaled = state_from(inv, spe, 2.5 * q)
        np.testing.assert_allclose(score_items(0, scaled),
                                   2.5 * score_items(0, base), atol=1e-12)


class TestTopK:
    def test_tie_breaks_by_ascending_id(self):
        state = state_from([[1.0]], [[0.0]], [[2.0], [2.0], [1.0]])
        assert top_k(0, 2, (), state) == [0, 1]

    def test_all_items_excluded(self):
        state = state_from([[1.0]], [[0.0]], [[2.0], [1.0]])
        assert top_k(0, 5, (0, 1), state) == []

    def test_nonpositive_k_rejected(self):
        state = state_from([[1.0]], [[0.0]], [[2.0]])
        with pytest.raises(DataError):
            top_k(0, 0, (), state)

    def test_matches_full_sort_oracle(self, rng):
        for _ in range(25):
            num_items = int(rng.integers(5, 101))
            state = state_from(rng.standard_normal((1, 4)),
                               rng.standard_normal((1, 4)),
                               rng.standard_normal((num_items, 4)))
            excl = set(rng.choice(num_items,
                                  size=int(rng.integers(0, num_items // 2 + 1)),
                                  replace=False).tolist())
            k = int(rng.integers(1, num_items + 1))
            got = top_k(0, k, excl, state)
            scores = score_items(0, state)
            ranked = sorted((i for i in range(num_items) if i not in excl),
                            key=lambda i: (-scores[i], i))
            assert got == ranked[:k]

    def test_prefix_property(self, rng):
        state = state_from(rng.standard_normal((1, 3)),
                           rng.standard_normal((1, 3)),
                           rng.standard_normal((30, 3)))
        full = top_k(0, 30, (), state)
        for k in (1, 5, 12):
            assert top_k(0, k, (), state) == full[:k]

    def test_order_invariant_to_positive_scaling(self, rng):
        inv = rng.standard_normal((1, 3))
        spe = rng.standard_normal((1, 3))
        q = rng.standard_normal((20, 3))
        a = top_k(0, 20, (), state_from(inv, spe, q))
        b = top_k(0, 20, (), state_from(inv, spe, 3.0 * q))
        assert a == b
