"""Planted-dataset generator: determinism, densities and invariance structure."""

import numpy as np
import pytest
from scipy.stats import chi2

from invrec.errors import DataError
from invrec.synthgen import SynthSpec, generate, load_truth, save_truth


def spec_with(**kw):
    base = dict(num_users=500, num_items=60, num_behaviors=2, latent_dim=8,
                invariant_strength=0.8, noise_scale=0.1,
                densities=(0.1, 0.1), seed=11)
    base.update(kw)
    return SynthSpec(**base)


def item_sets(log):
    """Per (behavior, user) interacted item sets."""
    sets = [[set() for _ in range(log.num_users)]
            for _ in range(log.num_behaviors)]
    for u, i, b in zip(log.users.tolist(), log.items.tolist(),
                       log.behaviors.tolist()):
        sets[b][u].add(i)
    return sets


def mean_jaccard(log):
    sets = item_sets(log)
    vals = []
    for u in range(log.num_users):
        a, b = sets[0][u], sets[1][u]
        if a or b:
            vals.append(len(a & b) / len(a | b))
    return float(np.mean(vals))


class TestDeterminism:
    def test_same_seed_identical_logs(self):
        log1, truth1 = generate(spec_with())
        log2, truth2 = generate(spec_with())
        np.testing.assert_array_equal(log1.users, log2.users)
        np.testing.assert_array_equal(log1.items, log2.items)
        np.testing.assert_array_equal(log1.behaviors, log2.behaviors)
        np.testing.assert_array_equal(truth1.invariant, truth2.invariant)

    def test_different_seed_differs(self):
        log1, _ = generate(spec_with(seed=1))
        log2, _ = generate(spec_with(seed=2))
        assert (len(log1) != len(log2)
                or not np.array_equal(log1.items, log2.items))


class TestDensities:
    def test_within_ten_percent_of_targets(self):
        spec = spec_with(num_users=1000, num_items=500, num_behaviors=3,
                         densities=(0.03, 0.02, 0.01), latent_dim=16)
        log, _ = generate(spec)
        cells = spec.num_users * spec.num_items
        for k, target in enumerate(spec.densities):
            got = np.sum(log.behaviors == k) / cells
            assert abs(got - target) <= 0.1 * target

    def test_unachievable_density_rejected(self):
        with pytest.raises(DataError, match="unachievable"):
            generate(spec_with(densities=(1e-30, 0.1)))

    def test_invalid_spec_rejected(self):
        with pytest.raises(DataError):
            generate(spec_with(invariant_strength=1.5))
        with pytest.raises(DataError):
            generate(spec_with(densities=(0.1,)))


class TestInvarianceStructure:
    def test_shared_driver_raises_overlap(self):
        # all behaviors driven by one vector vs independent vectors
        high = mean_jaccard(generate(spec_with(invariant_strength=1.0))[0])
        low = mean_jaccard(generate(spec_with(invariant_strength=0.0))[0])
        assert high > low

    def test_overlap_monotone_in_strength(self):
        means = []
        for rho in (0.0, 0.5, 1.0):
            vals = [mean_jaccard(generate(spec_with(invariant_strength=rho,
                                                    seed=s))[0])
                    for s in (1, 2, 3)]
            means.append(np.mean(vals))
        assert means[0] < means[1] < means[2]

    def test_independent_behaviors_pass_chi_square(self):
        """With rho=0 the per-item 2x2 behavior tables look independent;
        with rho=1 they do not."""

        def rejections(rho):
            spec = spec_with(num_users=600, num_items=40,
                             densities=(0.25, 0.25),
                             invariant_strength=rho, seed=21)
            log, _ = generate(spec)
            sets = item_sets(log)
            count = 0
            tested = 0
            for i in range(spec.num_items):
                x = np.array([i in sets[0][u] for u in range(spec.num_users)])
                y = np.array([i in sets[1][u] for u in range(spec.num_users)])
                table = np.array([[np.sum(x & y), np.sum(x & ~y)],
                                  [np.sum(~x & y), np.sum(~x & ~y)]], dtype=float)
                if (table.sum(0) == 0).any() or (table.sum(1) == 0).any():
                    continue
                expected = np.outer(table.sum(1), table.sum(0)) / table.sum()
                stat = float(np.sum((table - expected) ** 2 / expected))
                if chi2.sf(stat, df=1) < 0.01:
                    count += 1
                tested += 1
            return count, tested

    # independent draws: ~1% false rejections; shared driver: widespread
        independent, n_ind = rejections(0.0)
        dependent, n_dep = rejections(1.0)
        assert independent <= max(3, int(0.15 * n_ind))
        assert dependent >= int(0.5 * n_dep)


class TestTruthSidecar:
    def test_round_trip(self, tmp_path):
        _, truth = generate(spec_with(num_users=20, num_items=10))
        path = tmp_path / "truth.bin"
        save_truth(truth, path, meta={"seed": 11})
        back = load_truth(path)
        np.testing.assert_array_equal(back.invariant, truth.invariant)
        np.testing.assert_array_equal(back.specific, truth.specific)
        np.testing.assert_array_equal(back.item_vectors, truth.item_vectors)

    def test_latent_dim_default_matches_model_latent(self):
        # default width 16 = default embedding width 64 divided by 4
        assert SynthSpec(num_users=1, num_items=1, num_behaviors=3).latent_dim == 16
