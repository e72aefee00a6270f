"""Multi-behavior interaction logs, deduplication, behavior matrices and splits.

Interactions are kept as parallel numpy arrays (user, item, behavior,
order index) with ids densely re-indexed at load time.  All operations here
are pure functions over immutable inputs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, ParseError, SchemaError

LEAVE_ONE_OUT = "leave-one-out"
COLD_START = "cold-start"


@dataclass(frozen=True)
class InteractionLog:
    """Ordered multi-behavior interaction records.

    ``order`` is strictly increasing in record order; it is assigned at load
    time and defines what "last interaction" means everywhere downstream.
    ``user_labels`` / ``item_labels`` map dense ids back to the original ones
    when the log came from a file.
    """

    users: np.ndarray
    items: np.ndarray
    behaviors: np.ndarray
    order: np.ndarray
    num_users: int
    num_items: int
    num_behaviors: int
    user_labels: tuple[str, ...] | None = None
    item_labels: tuple[str, ...] | None = None

    def __post_init__(self):
        n = len(self.users)
        if not (len(self.items) == len(self.behaviors) == len(self.order) == n):
            raise DataError("interaction arrays have mismatched lengths")
        if n:
            if self.users.min() < 0 or self.users.max() >= self.num_users:
                raise DataError("user id out of range")
            if self.items.min() < 0 or self.items.max() >= self.num_items:
                raise DataError("item id out of range")
            if self.behaviors.min() < 0 or self.behaviors.max() >= self.num_behaviors:
                raise DataError("behavior id out of range")
            if np.any(np.diff(self.order) <= 0):
                raise DataError("order index must be strictly increasing")

    def __len__(self):
        return len(self.users)

    @property
    def records(self):
        """Records as (user, item, behavior, order) tuples."""
        return list(zip(self.users.tolist(), self.items.tolist(),
                        self.behaviors.tolist(), self.order.tolist()))

    def take(self, index: np.ndarray) -> "InteractionLog":
        """New log keeping only the rows selected by ``index`` (kept sorted)."""
        idx = np.sort(np.asarray(index, dtype=np.int64))
        return replace(self, users=self.users[idx], items=self.items[idx],
                       behaviors=self.behaviors[idx], order=self.order[idx])


@dataclass(frozen=True)
class BehaviorMatrix:
    """Sparse binary user-item incidence for a union of behaviors.

    Pairs are stored deduplicated and sorted by (user, item); membership
    queries are exact.
    """

    users: np.ndarray
    items: np.ndarray
    behavior_subset: frozenset[int]
    num_users: int
    num_items: int
    _keys: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        keys = self.users.astype(np.int64) * max(self.num_items, 1) + self.items
        if len(np.unique(keys)) != len(keys):
            raise DataError("duplicate (user, item) pairs in behavior matrix")
        object.__setattr__(self, "_keys", keys)

    def __len__(self):
        return len(self.users)

    def __contains__(self, pair) -> bool:
        u, i = pair
        if not (0 <= u < self.num_users and 0 <= i < self.num_items):
            return False
        key = u * max(self.num_items, 1) + i
        pos = np.searchsorted(self._keys, key)
        return pos < len(self._keys) and self._keys[pos] == key

    @property
    def pairs(self) -> set[tuple[int, int]]:
        return set(zip(self.users.tolist(), self.items.tolist()))

    def items_per_user(self) -> list[np.ndarray]:
        """Sorted item array per user (empty array for users without pairs)."""
        out = [np.empty(0, dtype=np.int64) for _ in range(self.num_users)]
        if len(self.users):
            bounds = np.searchsorted(self.users, np.arange(self.num_users + 1))
            for u in range(self.num_users):
                out[u] = self.items[bounds[u]:bounds[u + 1]]
        return out


@dataclass(frozen=True)
class SplitBundle:
    """Train log plus one held-out target-behavior pair per test user."""

    train: InteractionLog
    test_users: np.ndarray
    test_items: np.ndarray
    target_behavior: int
    mode: str

    def __post_init__(self):
        if len(self.test_users) != len(self.test_items):
            raise DataError("test user/item arrays have mismatched lengths")
        if len(np.unique(self.test_users)) != len(self.test_users):
            raise DataError("duplicate user in test set")
        tgt = (self.train.behaviors == self.target_behavior)
        train_keys = set(zip(self.train.users[tgt].tolist(),
                             self.train.items[tgt].tolist()))
        for u, i in zip(self.test_users.tolist(), self.test_items.tolist()):
            if (u, i) in train_keys:
                raise DataError(f"held-out pair ({u}, {i}) leaked into train")

    @property
    def test(self) -> list[tuple[int, int]]:
        return list(zip(self.test_users.tolist(), self.test_items.tolist()))


def _as_log(users, items, behaviors, num_users, num_items, num_behaviors,
            user_labels=None, item_labels=None) -> InteractionLog:
    n = len(users)
    return InteractionLog(
        users=np.asarray(users, dtype=np.int64),
        items=np.asarray(items, dtype=np.int64),
        behaviors=np.asarray(behaviors, dtype=np.int64),
        order=np.arange(n, dtype=np.int64),
        num_users=num_users, num_items=num_items, num_behaviors=num_behaviors,
        user_labels=user_labels, item_labels=item_labels)


def load_interactions(path, behaviors: Sequence[str] | None = None) -> InteractionLog:
    """Load a tab-separated interaction file.

    Rows are ``user<TAB>item<TAB>behavior[<TAB>order]``.  When ``behaviors``
    is given it is the declared ordered label list (last entry is the target
    behavior) and unknown labels raise :class:`SchemaError`; when omitted,
    behavior ids are assigned in order of first appearance.  User and item
    ids are re-indexed densely in order of first appearance; the original
    labels are preserved on the returned log.  An optional numeric fourth
    column gives the temporal order (stable-sorted before order indices are
    assigned); otherwise file order is used.
    """
    raw_users: list[str] = []
    raw_items: list[str] = []
    raw_behaviors: list[str] = []
    raw_order: list[int] = []
    has_order = None
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read interaction file: {exc}") from None
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) not in (3, 4):
                raise ParseError(f"expected 3-4 tab-separated fields, got {len(parts)}",
                                 line=lineno)
            if has_order is None:
                has_order = (len(parts) == 4)
            elif has_order != (len(parts) == 4):
                raise ParseError("inconsistent column count", line=lineno)
            raw_users.append(parts[0])
            raw_items.append(parts[1])
            raw_behaviors.append(parts[2])
            if has_order:
                try:
                    raw_order.append(int(parts[3]))
                except ValueError:
                    raise ParseError(f"order column not an integer: {parts[3]!r}",
                                     line=lineno) from None

    if behaviors is not None:
        behavior_index = {name: k for k, name in enumerate(behaviors)}
        num_behaviors = len(behaviors)
        for label in raw_behaviors:
            if label not in behavior_index:
                raise SchemaError(f"unknown behavior label {label!r} "
                                  f"(declared: {list(behaviors)})")
    else:
        behavior_index = {}
        for label in raw_behaviors:
            behavior_index.setdefault(label, len(behavior_index))
        num_behaviors = len(behavior_index)

    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    for u in raw_users:
        user_index.setdefault(u, len(user_index))
    for i in raw_items:
        item_index.setdefault(i, len(item_index))

    users = np.array([user_index[u] for u in raw_users], dtype=np.int64)
    items = np.array([item_index[i] for i in raw_items], dtype=np.int64)
    bvals = np.array([behavior_index[b] for b in raw_behaviors], dtype=np.int64)
    if has_order:
        perm = np.argsort(np.asarray(raw_order, dtype=np.int64), kind="stable")
        users, items, bvals = users[perm], items[perm], bvals[perm]

    return _as_log(users, items, bvals,
                   num_users=len(user_index), num_items=len(item_index),
                   num_behaviors=num_behaviors,
                   user_labels=tuple(user_index), item_labels=tuple(item_index))


def deduplicate(log: InteractionLog) -> InteractionLog:
    """Keep only the earliest record of each (user, item, behavior) key."""
    if len(log) == 0:
        return log
    keys = np.stack([log.users, log.items, log.behaviors], axis=1)
    _, first = np.unique(keys, axis=0, return_index=True)
    return log.take(first)


def leave_one_out_split(log: InteractionLog, target_behavior: int) -> SplitBundle:
    """Move each user's last target-behavior interaction into the test set.

    Users with fewer than two target-behavior records stay entirely in train
    and do not appear in the test set.
    """
    _check_behavior(log, target_behavior)
    tgt_idx = np.flatnonzero(log.behaviors == target_behavior)
    tgt_users = log.users[tgt_idx]
    counts = np.bincount(tgt_users, minlength=log.num_users)

    # Records are order-sorted, so the last record per user within the
    # target slice is the one with the largest order index.
    last_pos = {}
    for pos, u in zip(tgt_idx.tolist(), tgt_users.tolist()):
        last_pos[u] = pos
    held = sorted(pos for u, pos in last_pos.items() if counts[u] >= 2)

    keep = np.setdiff1d(np.arange(len(log)), np.asarray(held, dtype=np.int64))
    test_users = log.users[held]
    test_items = log.items[held]
    order = np.argsort(test_users)
    return SplitBundle(train=log.take(keep),
                       test_users=test_users[order], test_items=test_items[order],
                       target_behavior=target_behavior, mode=LEAVE_ONE_OUT)


def cold_start_split(log: InteractionLog, target_behavior: int,
                     n_users: int, seed: int) -> SplitBundle:
    """Hold out ``n_users`` whole users for cold-start evaluation.

    The sampled users lose all their target-behavior records from train, the
    held-out (user, item) test pairs are also removed from every auxiliary
    behavior, and each test entry is the user's last target item.
    """
    _check_behavior(log, target_behavior)
    tgt_mask = log.behaviors == target_behavior
    eligible = np.unique(log.users[tgt_mask])
    if len(eligible) < n_users:
        raise DataError(f"cold-start split needs {n_users} users with target "
                        f"interactions, only {len(eligible)} available")
    rng = np.random.default_rng(seed)
    sampled = np.sort(rng.choice(eligible, size=n_users, replace=False))
    sampled_set = set(sampled.tolist())

    last_item = {}
    for u, i in zip(log.users[tgt_mask].tolist(), log.items[tgt_mask].tolist()):
        if u in sampled_set:
            last_item[u] = i  # records are order-sorted; final write wins

    test_users = sampled
    test_items = np.array([last_item[u] for u in sampled.tolist()], dtype=np.int64)
    test_pairs = set(zip(test_users.tolist(), test_items.tolist()))

    drop = np.zeros(len(log), dtype=bool)
    in_sample = np.isin(log.users, sampled)
    drop |= in_sample & tgt_mask
    for pos in np.flatnonzero(in_sample & ~tgt_mask).tolist():
        if (int(log.users[pos]), int(log.items[pos])) in test_pairs:
            drop[pos] = True

    return SplitBundle(train=log.take(np.flatnonzero(~drop)),
                       test_users=test_users, test_items=test_items,
                       target_behavior=target_behavior, mode=COLD_START)


def build_matrix(log: InteractionLog, behaviors: Iterable[int]) -> BehaviorMatrix:
    """Union the distinct (user, item) pairs of the selected behaviors."""
    subset = frozenset(int(b) for b in behaviors)
    if not subset:
        raise DataError("behavior subset must be nonempty")
    for b in subset:
        _check_behavior(log, b)
    mask = np.isin(log.behaviors, np.array(sorted(subset), dtype=np.int64))
    return _matrix_from_pairs(log.users[mask], log.items[mask], subset,
                              log.num_users, log.num_items)


def merge_matrices(matrices: Sequence[BehaviorMatrix]) -> BehaviorMatrix:
    """Union several behavior matrices into one (pair sets and subsets)."""
    if not matrices:
        raise DataError("cannot merge an empty matrix list")
    num_users = matrices[0].num_users
    num_items = matrices[0].num_items
    for m in matrices:
        if (m.num_users, m.num_items) != (num_users, num_items):
            raise DataError("matrices span different user/item universes")
    users = np.concatenate([m.users for m in matrices])
    items = np.concatenate([m.items for m in matrices])
    subset = frozenset().union(*(m.behavior_subset for m in matrices))
    return _matrix_from_pairs(users, items, subset, num_users, num_items)


def _matrix_from_pairs(users, items, subset, num_users, num_items) -> BehaviorMatrix:
    keys = users.astype(np.int64) * max(num_items, 1) + items
    uniq = np.unique(keys)
    return BehaviorMatrix(users=uniq // max(num_items, 1),
                          items=uniq % max(num_items, 1),
                          behavior_subset=frozenset(subset),
                          num_users=num_users, num_items=num_items)


def _check_behavior(log: InteractionLog, behavior: int):
    if not (0 <= behavior < log.num_behaviors):
        raise DataError(f"behavior id {behavior} out of range "
                        f"(num_behaviors={log.num_behaviors})")


def save_interactions(log: InteractionLog, path, behavior_names=None,
                      extra_meta: dict | None = None):
    """Write a log in the ingestion TSV schema (user, item, behavior, order).

    Original labels are used when the log carries them; behaviors fall back
    to ``b<k>`` names unless ``behavior_names`` is given.
    """
    if behavior_names is None:
        behavior_names = [f"b{k}" for k in range(log.num_behaviors)]
    if len(behavior_names) != log.num_behaviors:
        raise DataError(f"need {log.num_behaviors} behavior names, "
                        f"got {len(behavior_names)}")
    users = log.user_labels or [str(u) for u in range(log.num_users)]
    items = log.item_labels or [str(i) for i in range(log.num_items)]
    with open(path, "w", encoding="utf-8") as fh:
        if extra_meta:
            fh.write("# " + " ".join(f"{k}={v}" for k, v in extra_meta.items())
                     + "\n")
        for u, i, b, o in zip(log.users.tolist(), log.items.tolist(),
                              log.behaviors.tolist(), log.order.tolist()):
            fh.write(f"{users[u]}\t{items[i]}\t{behavior_names[b]}\t{o}\n")


# --- split materialization -------------------------------------------------

def save_split(bundle: SplitBundle, out_dir, extra_meta: dict | None = None):
    """Write ``train.tsv`` and ``test.tsv`` under ``out_dir``.

    Both files start with a header line recording counts, the target behavior
    and the split mode, plus any extra metadata supplied by the caller.
    """
    os.makedirs(out_dir, exist_ok=True)
    log = bundle.train
    meta = dict(extra_meta or {})
    meta.update(users=log.num_users, items=log.num_items,
                behaviors=log.num_behaviors, target=bundle.target_behavior,
                mode=bundle.mode)
    header = "# " + " ".join(f"{k}={v}" for k, v in meta.items())

    with open(os.path.join(out_dir, "train.tsv"), "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for u, i, b, o in zip(log.users.tolist(), log.items.tolist(),
                              log.behaviors.tolist(), log.order.tolist()):
            fh.write(f"{u}\t{i}\t{b}\t{o}\n")
    with open(os.path.join(out_dir, "test.tsv"), "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for u, i in zip(bundle.test_users.tolist(), bundle.test_items.tolist()):
            fh.write(f"{u}\t{i}\n")


def load_split(out_dir) -> SplitBundle:
    """Load a split previously written by :func:`save_split`."""
    meta = _read_header(os.path.join(out_dir, "train.tsv"))
    rows = np.loadtxt(os.path.join(out_dir, "train.tsv"), dtype=np.int64,
                      comments="#", ndmin=2)
    if rows.size == 0:
        rows = rows.reshape(0, 4)
    train = InteractionLog(users=rows[:, 0], items=rows[:, 1],
                           behaviors=rows[:, 2], order=rows[:, 3],
                           num_users=int(meta["users"]), num_items=int(meta["items"]),
                           num_behaviors=int(meta["behaviors"]))
    trows = np.loadtxt(os.path.join(out_dir, "test.tsv"), dtype=np.int64,
                       comments="#", ndmin=2)
    if trows.size == 0:
        trows = trows.reshape(0, 2)
    return SplitBundle(train=train, test_users=trows[:, 0], test_items=trows[:, 1],
                       target_behavior=int(meta["target"]), mode=meta["mode"])


def _read_header(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().strip()
    if not first.startswith("# "):
        raise ParseError(f"{path}: missing header line", line=1)
    out = {}
    for tok in first[2:].split():
        k, _, v = tok.partition("=")
        out[k] = v
    return out
