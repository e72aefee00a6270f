"""Loading, deduplication, behavior matrices and both split protocols."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invrec.dataset import (COLD_START, LEAVE_ONE_OUT, build_matrix,
                            cold_start_split, deduplicate, leave_one_out_split,
                            load_interactions, load_split, merge_matrices,
                            save_interactions, save_split)
from invrec.errors import DataError, ParseError, SchemaError

from conftest import make_log


def write_tsv(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write("\t".join(str(x) for x in row) + "\n")


class TestLoad:
    def test_counts_forced_by_content(self, tmp_path):
        path = tmp_path / "x.tsv"
        write_tsv(path, [("u1", "i1", "click"), ("u1", "i2", "buy"),
                         ("u2", "i1", "click")])
        log = load_interactions(path)
        assert (log.num_users, log.num_items, log.num_behaviors) == (2, 2, 2)
        assert len(log) == 3
        assert log.order.tolist() == [0, 1, 2]

    def test_empty_file(self, tmp_path):
        path = tmp_path / "x.tsv"
        path.write_text("")
        log = load_interactions(path)
        assert (log.num_users, log.num_items, log.num_behaviors) == (0, 0, 0)
        assert len(log) == 0

    def test_dense_reindex_first_appearance(self, tmp_path):
        path = tmp_path / "x.tsv"
        write_tsv(path, [("900", "77", "a"), ("3", "77", "a"), ("900", "5", "b")])
        log = load_interactions(path)
        assert log.users.tolist() == [0, 1, 0]
        assert log.items.tolist() == [0, 0, 1]
        assert log.user_labels == ("900", "3")
        assert log.item_labels == ("77", "5")

    def test_declared_behavior_schema(self, tmp_path):
        path = tmp_path / "x.tsv"
        write_tsv(path, [("u", "i", "cart")])
        log = load_interactions(path, behaviors=("click", "cart", "buy"))
        assert log.num_behaviors == 3
        assert log.behaviors.tolist() == [1]

    def test_unknown_behavior_label(self, tmp_path):
        path = tmp_path / "x.tsv"
        write_tsv(path, [("u", "i", "wat")])
        with pytest.raises(SchemaError):
            load_interactions(path, behaviors=("click", "buy"))

    def test_malformed_row_reports_line(self, tmp_path):
        path = tmp_path / "x.tsv"
        path.write_text("u\ti\tclick\nbroken row\n")
        with pytest.raises(ParseError, match="line 2"):
            load_interactions(path)

    def test_order_column_sorts_records(self, tmp_path):
        path = tmp_path / "x.tsv"
        write_tsv(path, [("u", "i1", "a", 30), ("u", "i2", "a", 10),
                         ("u", "i3", "a", 20)])
        log = load_interactions(path)
        assert [log.item_labels[i] for i in log.items] == ["i2", "i3", "i1"]
        assert log.order.tolist() == [0, 1, 2]

    def test_paper_scale_shape(self, tmp_path):
        # Taobao-shaped ingest: 48,749 users, 39,493 items, 3 behaviors.
        n_users, n_items = 48_749, 39_493
        path = tmp_path / "big.tsv"
        with open(path, "w", encoding="utf-8") as fh:
            for u in range(n_users):
                fh.write(f"u{u}\ti{u % n_items}\tb{u % 3}\n")
        log = load_interactions(path, behaviors=("b0", "b1", "b2"))
        assert (log.num_users, log.num_items, log.num_behaviors) == (
            n_users, n_items, 3)


class TestDeduplicate:
    def test_keeps_initial_occurrence(self):
        log = make_log([(0, 0, 0), (0, 1, 0), (0, 0, 0)])
        out = deduplicate(log)
        assert len(out) == 2
        assert out.order.tolist() == [0, 1]

    def test_identity_without_duplicates(self):
        log = make_log([(0, 0, 0), (0, 1, 0), (1, 0, 1)])
        out = deduplicate(log)
        assert out.records == log.records

    def test_same_pair_under_two_behaviors_kept(self):
        log = make_log([(0, 0, 0), (0, 0, 1)])
        assert len(deduplicate(log)) == 2

    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3),
                              st.integers(0, 1)), max_size=30))
    def test_idempotent(self, recs):
        log = make_log(recs, num_users=4, num_items=4, num_behaviors=2)
        once = deduplicate(log)
        twice = deduplicate(once)
        assert once.records == twice.records


class TestLeaveOneOut:
    def test_last_target_interaction_held_out(self):
        log = make_log([(0, 0, 1), (0, 1, 1), (0, 2, 1)], num_behaviors=2)
        split = leave_one_out_split(log, target_behavior=1)
        assert split.test == [(0, 2)]
        tgt = split.train.behaviors == 1
        assert sorted(split.train.items[tgt].tolist()) == [0, 1]

    def test_single_target_user_stays_in_train(self):
        log = make_log([(0, 0, 1), (1, 0, 1), (1, 1, 1)], num_behaviors=2)
        split = leave_one_out_split(log, 1)
        assert split.test == [(1, 1)]
        assert 0 in split.train.users[split.train.behaviors == 1]

    def test_zero_target_user_absent_from_test(self):
        log = make_log([(0, 0, 0), (1, 0, 1), (1, 1, 1)], num_behaviors=2)
        split = leave_one_out_split(log, 1)
        assert split.test_users.tolist() == [1]

    def test_target_out_of_range(self):
        log = make_log([(0, 0, 0)])
        with pytest.raises(DataError):
            leave_one_out_split(log, 5)

    @given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4),
                              st.integers(0, 1)), max_size=40))
    @settings(max_examples=50)
    def test_disjoint_and_reconstructs(self, recs):
        log = deduplicate(make_log(recs, num_users=5, num_items=5,
                                   num_behaviors=2))
        split = leave_one_out_split(log, 1)
        tgt_mask = split.train.behaviors == 1
        train_pairs = set(zip(split.train.users[tgt_mask].tolist(),
                              split.train.items[tgt_mask].tolist()))
        test_pairs = set(split.test)
        assert not train_pairs & test_pairs
        orig_mask = log.behaviors == 1
        orig_pairs = set(zip(log.users[orig_mask].tolist(),
                             log.items[orig_mask].tolist()))
        assert train_pairs | test_pairs == orig_pairs


class TestColdStart:
    def _log(self):
        return make_log([(0, 0, 0), (0, 1, 1), (0, 2, 1),
                         (1, 0, 0), (1, 1, 1),
                         (2, 2, 0), (2, 2, 1)], num_behaviors=2)

    def test_removes_target_records_of_sampled_user(self):
        log = make_log([(0, 0, 0), (0, 1, 1), (0, 2, 1)], num_behaviors=2)
        split = cold_start_split(log, 1, n_users=1, seed=0)
        assert split.mode == COLD_START
        assert split.test == [(0, 2)]
        assert not np.any(split.train.behaviors == 1)
        # auxiliary record of a non-test pair stays
        assert (split.train.users.tolist(), split.train.items.tolist()) == ([0], [0])

    def test_aux_records_of_test_pairs_removed(self):
        log = make_log([(0, 2, 0), (0, 1, 1), (0, 2, 1)], num_behaviors=2)
        split = cold_start_split(log, 1, n_users=1, seed=0)
        assert split.test == [(0, 2)]
        assert len(split.train) == 0  # the aux (0,2) pair is in the test set

    def test_same_seed_same_sample(self):
        log = self._log()
        a = cold_start_split(log, 1, n_users=2, seed=9)
        b = cold_start_split(log, 1, n_users=2, seed=9)
        assert a.test_users.tolist() == b.test_users.tolist()
        assert a.test == b.test

    def test_insufficient_eligible_users(self):
        log = self._log()
        with pytest.raises(DataError):
            cold_start_split(log, 1, n_users=10, seed=0)

    def test_protocol_scale_thousand_users(self):
        recs = []
        for u in range(1200):
            recs.append((u, u % 40, 0))
            recs.append((u, (u + 1) % 40, 1))
        log = make_log(recs, num_behaviors=2)
        split = cold_start_split(log, 1, n_users=1000, seed=4)
        assert len(split.test_users) == 1000
        assert len(np.unique(split.test_users)) == 1000


class TestBuildMatrix:
    def test_union_of_two_behaviors(self):
        log = make_log([(0, 0, 0), (0, 1, 1)], num_behaviors=2)
        mat = build_matrix(log, {0, 1})
        assert mat.pairs == {(0, 0), (0, 1)}
        assert mat.behavior_subset == frozenset({0, 1})

    def test_single_behavior(self):
        log = make_log([(0, 0, 0), (0, 1, 1)], num_behaviors=2)
        assert build_matrix(log, {1}).pairs == {(0, 1)}

    def test_overlapping_pairs_collapse(self):
        log = make_log([(0, 0, 0), (0, 0, 1)], num_behaviors=2)
        mat = build_matrix(log, {0, 1})
        assert len(mat) == 1
        assert (0, 0) in mat
        assert (0, 1) not in mat

    def test_empty_subset_rejected(self):
        log = make_log([(0, 0, 0)])
        with pytest.raises(DataError):
            build_matrix(log, set())

    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3),
                              st.integers(0, 2)), max_size=30))
    @settings(max_examples=50)
    def test_union_homomorphism(self, recs):
        log = make_log(recs, num_users=4, num_items=4, num_behaviors=3)
        joint = build_matrix(log, {0, 1, 2})
        parts = [build_matrix(log, {b}) for b in range(3)]
        assert joint.pairs == set().union(*(p.pairs for p in parts))
        assert merge_matrices(parts).pairs == joint.pairs


class TestMaterialization:
    def test_split_round_trip(self, tmp_path):
        log = make_log([(0, 0, 0), (0, 1, 1), (0, 2, 1), (1, 0, 1), (1, 1, 1)],
                       num_behaviors=2)
        split = leave_one_out_split(log, 1)
        save_split(split, tmp_path, extra_meta={"seed": 7})
        loaded = load_split(tmp_path)
        assert loaded.mode == LEAVE_ONE_OUT
        assert loaded.target_behavior == 1
        assert loaded.test == split.test
        assert loaded.train.records == split.train.records

    def test_interactions_round_trip(self, tmp_path):
        log = make_log([(0, 0, 0), (1, 2, 1), (0, 1, 0)], num_behaviors=2)
        path = tmp_path / "out.tsv"
        save_interactions(log, path, behavior_names=("click", "buy"),
                          extra_meta={"seed": 0})
        back = load_interactions(path, behaviors=("click", "buy"))
        # dense ids are reassigned by first appearance; compare in label space
        orig = [(str(u), str(i), b) for u, i, b, _ in log.records]
        got = [(back.user_labels[u], back.item_labels[i], b)
               for u, i, b, _ in back.records]
        assert got == orig
        assert (back.num_users, back.num_items) == (log.num_users, log.num_items)
