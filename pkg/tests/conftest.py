"""Shared builders for the test suite."""

import numpy as np
import pytest

from invrec.dataset import LEAVE_ONE_OUT, InteractionLog, SplitBundle


def make_log(records, num_users=None, num_items=None, num_behaviors=None):
    """Build a log from (user, item, behavior) tuples in temporal order."""
    records = list(records)
    users = np.array([r[0] for r in records], dtype=np.int64)
    items = np.array([r[1] for r in records], dtype=np.int64)
    behaviors = np.array([r[2] for r in records], dtype=np.int64)
    return InteractionLog(
        users=users, items=items, behaviors=behaviors,
        order=np.arange(len(records), dtype=np.int64),
        num_users=num_users if num_users is not None else int(users.max()) + 1,
        num_items=num_items if num_items is not None else int(items.max()) + 1,
        num_behaviors=(num_behaviors if num_behaviors is not None
                       else int(behaviors.max()) + 1))


def train_only_split(log, target_behavior=None):
    """A bundle with everything in train; handy for trainer-level tests."""
    target = (log.num_behaviors - 1 if target_behavior is None
              else target_behavior)
    return SplitBundle(train=log, test_users=np.empty(0, dtype=np.int64),
                       test_items=np.empty(0, dtype=np.int64),
                       target_behavior=target, mode=LEAVE_ONE_OUT)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
