"""Encoder/decoder shapes, closed-form cases and gradient fidelity."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invrec.errors import DataError, NumericError
from invrec.vae import (GaussianLatent, PreferenceBundle, VaeParams,
                        behavior_specific, decode, encode, generate_bundle,
                        init_params, reparameterize, vae_backward, vae_forward)


def zero_params(d):
    return VaeParams(
        w1=np.zeros((d // 2, d)), b1=np.zeros(d // 2),
        w2=np.zeros((d // 4, d // 2)), b2=np.zeros(d // 4),
        w3=np.zeros((d // 4, d // 2)), b3=np.zeros(d // 4),
        w4=np.zeros((d // 2, d // 4)), b4=np.zeros(d // 2),
        w5=np.zeros((d, d // 2)), b5=np.zeros(d))


class TestEncode:
    def test_widths_for_d64(self, rng):
        params = init_params(64, rng)
        assert params.w1.shape == (32, 64)
        assert params.w2.shape == (16, 32)
        latent = encode(rng.standard_normal(64), params)
        assert latent.mu.shape == (16,)
        assert latent.logvar.shape == (16,)

    def test_zero_weights_constant_mean(self, rng):
        params = zero_params(8)
        params.b2[:] = 3.5
        for _ in range(3):
            latent = encode(rng.standard_normal(8), params)
            np.testing.assert_array_equal(latent.mu, np.full(2, 3.5))

    def test_zero_input_zero_hidden(self):
        params = zero_params(8)
        params.b2[:] = 1.0
        params.b3[:] = -20.0  # clamps at -10
        latent = encode(np.zeros(8), params)
        np.testing.assert_array_equal(latent.mu, np.ones(2))
        np.testing.assert_array_equal(latent.logvar, np.full(2, -10.0))

    def test_nonfinite_input_rejected(self, rng):
        params = init_params(8, rng)
        with pytest.raises(NumericError):
            encode(np.array([np.nan] * 8), params)

    def test_bad_widths_rejected(self):
        params = zero_params(8)
        with pytest.raises(DataError):
            VaeParams(**{**dict(params.named()), "w2": np.zeros((3, 4))})


class TestReparameterize:
    def test_zero_noise_returns_mean(self):
        latent = GaussianLatent(mu=np.array([1.0, -2.0]), logvar=np.zeros(2))
        np.testing.assert_array_equal(reparameterize(latent, np.zeros(2)),
                                      latent.mu)

    def test_unit_variance_adds_noise(self):
        latent = GaussianLatent(mu=np.array([1.0, 1.0]), logvar=np.zeros(2))
        eps = np.array([0.3, -0.7])
        np.testing.assert_allclose(reparameterize(latent, eps), latent.mu + eps)

    def test_sigma_two(self):
        latent = GaussianLatent(mu=np.array([1.0]), logvar=np.array([np.log(4.0)]))
        z = reparameterize(latent, np.array([0.5]))
        np.testing.assert_allclose(z, [2.0])


class TestDecode:
    def test_zero_weights_give_bias(self, rng):
        params = zero_params(8)
        params.b5[:] = rng.standard_normal(8)
        np.testing.assert_array_equal(decode(rng.standard_normal(2), params),
                                      params.b5)

    def test_zero_latent_zero_bias4(self, rng):
        params = zero_params(8)
        params.w4[:] = rng.standard_normal(params.w4.shape)
        params.w5[:] = rng.standard_normal(params.w5.shape)
        params.b5[:] = 2.0
        np.testing.assert_array_equal(decode(np.zeros(2), params), params.b5)

    def test_hand_computed_small_case(self):
        # d=4: z scalar, W4 is 2x1, W5 is 4x2
        params = zero_params(4)
        params.w4[:] = [[2.0], [-1.0]]
        params.b4[:] = [0.0, 3.0]
        params.w5[:] = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-1.0, 0.0]]
        params.b5[:] = [0.0, 0.0, 0.0, 10.0]
        # z=1: h = relu([2, 2]) = [2, 2]; out = [2, 2, 4, 8]
        np.testing.assert_allclose(decode(np.array([1.0]), params),
                                   [2.0, 2.0, 4.0, 8.0])


class TestBehaviorSpecific:
    def test_equal_inputs_zero_residual(self, rng):
        p = rng.standard_normal(6)
        np.testing.assert_array_equal(behavior_specific(p, p), np.zeros(6))

    def test_subtraction(self):
        np.testing.assert_array_equal(
            behavior_specific(np.array([2.0, 0.0]), np.array([1.0, 0.0])),
            np.array([1.0, 0.0]))

    def test_additivity(self, rng):
        p = rng.standard_normal(6)
        p_inv = rng.standard_normal(6)
        np.testing.assert_allclose(behavior_specific(p, p_inv) + p_inv, p)


class TestPipeline:
    @given(st.sampled_from([4, 8, 16, 32, 64]), st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_shape_round_trip(self, d, seed):
        rng = np.random.default_rng(seed)
        params = init_params(d, rng)
        p = rng.standard_normal(d)
        latent = encode(p, params)
        z = reparameterize(latent, rng.standard_normal(d // 4))
        assert decode(z, params).shape == (d,)

    def test_deterministic_with_zero_noise(self, rng):
        params = init_params(8, rng)
        p = rng.standard_normal((5, 8))
        a = decode(reparameterize(encode(p, params), np.zeros((5, 2))), params)
        b = decode(reparameterize(encode(p, params), np.zeros((5, 2))), params)
        np.testing.assert_array_equal(a, b)

    def test_fused_forward_matches_public_ops(self, rng):
        params = init_params(8, rng)
        p = rng.standard_normal((5, 8))
        eps = rng.standard_normal((5, 2))
        cache = vae_forward(p, params, eps)
        expected = decode(reparameterize(encode(p, params), eps), params)
        np.testing.assert_array_equal(cache.invariant, expected)

    def test_generate_bundle_consistency(self, rng):
        params = init_params(8, rng)
        inputs = rng.standard_normal((3, 5, 8))
        bundle, latent = generate_bundle(inputs, params, eps=None)
        assert isinstance(bundle, PreferenceBundle)
        np.testing.assert_array_equal(bundle.specific,
                                      bundle.inputs - bundle.invariant)
        np.testing.assert_array_equal(bundle.invariant,
                                      decode(latent.mu, params))


class TestGradients:
    def test_backward_matches_finite_differences(self, rng):
        """d(decode(reparameterize(encode(p)))) / d(params) via the fused
        backward equals central differences of the public composition."""
        d = 8
        params = init_params(d, rng)
        p = rng.standard_normal((4, d))
        eps = rng.standard_normal((4, d // 4))
        weights = rng.standard_normal((4, d))  # fixed linear readout

        cache = vae_forward(p, params, eps)
        d_inputs, grads = vae_backward(cache, params, weights)

        def loss():
            out = decode(reparameterize(encode(p, params), eps), params)
            return float(np.sum(out * weights))

        h = 1e-6
        for name, arr in params.named():
            flat = arr.reshape(-1)
            g = grads[name].reshape(-1)
            idx = np.random.default_rng(0).choice(flat.size,
                                                  size=min(20, flat.size),
                                                  replace=False)
            for c in idx.tolist():
                keep = flat[c]
                flat[c] = keep + h
                up = loss()
                flat[c] = keep - h
                down = loss()
                flat[c] = keep
                numeric = (up - down) / (2 * h)
                assert abs(numeric - g[c]) <= 1e-4 * max(1.0, abs(g[c])), name

        # input gradient as well
        flat_p = p.reshape(-1)
        gp = d_inputs.reshape(-1)
        for c in range(0, flat_p.size, 7):
            keep = flat_p[c]
            flat_p[c] = keep + h
            up = loss()
            flat_p[c] = keep - h
            down = loss()
            flat_p[c] = keep
            numeric = (up - down) / (2 * h)
            assert abs(numeric - gp[c]) <= 1e-4 * max(1.0, abs(gp[c]))
