"""Shared encoder/decoder producing invariant preference vectors.

One parameter set is shared across every environment and user; the funnel is
d -> d/2 -> d/4 (Gaussian latent) -> d/2 -> d.  The encoder's second output
head is interpreted as log-variance and clamped to [-10, 10] so the standard
deviation is always defined.  Behavior-specific preferences are the residual
input - invariant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0


@dataclass
class VaeParams:
    """Trainable weights; widths are d -> d/2 -> d/4 -> d/2 -> d."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    w4: np.ndarray
    b4: np.ndarray
    w5: np.ndarray
    b5: np.ndarray

    @property
    def dim(self) -> int:
        return self.w1.shape[1]

    def named(self) -> list[tuple[str, np.ndarray]]:
        return [(f, getattr(self, f)) for f in
                ("w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4", "w5", "b5")]

    def copy(self) -> "VaeParams":
        return VaeParams(**{k: v.copy() for k, v in self.named()})

    def astype(self, dtype) -> "VaeParams":
        return VaeParams(**{k: v.astype(dtype) for k, v in self.named()})

    def __post_init__(self):
        d = self.w1.shape[1]
        expected = {
            "w1": (d // 2, d), "b1": (d // 2,),
            "w2": (d // 4, d // 2), "b2": (d // 4,),
            "w3": (d // 4, d // 2), "b3": (d // 4,),
            "w4": (d // 2, d // 4), "b4": (d // 2,),
            "w5": (d, d // 2), "b5": (d,),
        }
        if d % 4 != 0:
            raise DataError(f"embedding width {d} must be divisible by 4")
        for name, arr in self.named():
            if arr.shape != expected[name]:
                raise DataError(f"vae parameter {name} has shape {arr.shape}, "
                                f"expected {expected[name]}")
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"non-finite values in vae parameter {name}")


def init_params(d: int, rng: np.random.Generator, dtype=np.float64) -> VaeParams:
    """Glorot-uniform weights, zero biases."""
    if d % 4 != 0:
        raise DataError(f"embedding width {d} must be divisible by 4")

    def glorot(fan_out, fan_in):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)

    zero = lambda n: np.zeros(n, dtype=dtype)
    return VaeParams(
        w1=glorot(d // 2, d), b1=zero(d // 2),
        w2=glorot(d // 4, d // 2), b2=zero(d // 4),
        w3=glorot(d // 4, d // 2), b3=zero(d // 4),
        w4=glorot(d // 2, d // 4), b4=zero(d // 2),
        w5=glorot(d, d // 2), b5=zero(d),
    )


@dataclass
class GaussianLatent:
    """Diagonal Gaussian over the latent space; logvar is already clamped."""

    mu: np.ndarray
    logvar: np.ndarray


@dataclass(frozen=True)
class PreferenceBundle:
    """Per (environment, user) preference triple, stacked [M, B, d].

    ``specific`` is exactly ``inputs - invariant``.
    """

    inputs: np.ndarray
    invariant: np.ndarray
    specific: np.ndarray

    def __post_init__(self):
        if not (self.inputs.shape == self.invariant.shape == self.specific.shape):
            raise DataError("preference bundle shape mismatch")
        if not (np.all(np.isfinite(self.invariant))
                and np.all(np.isfinite(self.inputs))):
            raise NumericError("non-finite preferences in bundle")
        if not np.array_equal(self.specific, self.inputs - self.invariant):
            raise DataError("specific preferences must equal inputs - invariant")

    @property
    def num_environments(self) -> int:
        return self.inputs.shape[0]


def encode(p: np.ndarray, params: VaeParams) -> GaussianLatent:
    """Map input preference vectors to a diagonal Gaussian latent."""
    p = np.asarray(p)
    if not np.all(np.isfinite(p)):
        raise NumericError("non-finite encoder input")
    h = np.maximum(p @ params.w1.T + params.b1, 0.0)
    mu = h @ params.w2.T + params.b2
    logvar = np.clip(h @ params.w3.T + params.b3, LOGVAR_MIN, LOGVAR_MAX)
    return GaussianLatent(mu=mu, logvar=logvar)


def reparameterize(latent: GaussianLatent, eps: np.ndarray) -> np.ndarray:
    """z = mu + exp(logvar / 2) * eps with caller-supplied noise."""
    return latent.mu + np.exp(0.5 * latent.logvar) * eps


def decode(z: np.ndarray, params: VaeParams) -> np.ndarray:
    """Map latent samples back to invariant preference vectors."""
    h = np.maximum(z @ params.w4.T + params.b4, 0.0)
    return h @ params.w5.T + params.b5


def behavior_specific(p: np.ndarray, p_invariant: np.ndarray) -> np.ndarray:
    """Residual preference: the part of ``p`` not explained as invariant."""
    p = np.asarray(p)
    p_invariant = np.asarray(p_invariant)
    if p.shape != p_invariant.shape:
        raise DataError("input/invariant shape mismatch")
    return p - p_invariant


def generate_bundle(inputs: np.ndarray, params: VaeParams,
                    eps: np.ndarray | None = None
                    ) -> tuple[PreferenceBundle, GaussianLatent]:
    """Encode/decode stacked inputs [M, B, d]; eps=None means posterior mean."""
    latent = encode(inputs, params)
    if eps is None:
        z = latent.mu
    else:
        z = reparameterize(latent, eps)
    invariant = decode(z, params)
    bundle = PreferenceBundle(inputs=inputs, invariant=invariant,
                              specific=inputs - invariant)
    return bundle, latent


# --- fused forward/backward used by the trainer -----------------------------

@dataclass
class VaeForwardCache:
    """Intermediate activations for one batch, kept for the backward pass."""

    inputs: np.ndarray
    h1_pre: np.ndarray
    h1: np.ndarray
    mu: np.ndarray
    logvar_raw: np.ndarray
    logvar: np.ndarray
    sigma: np.ndarray
    eps: np.ndarray
    z: np.ndarray
    h2_pre: np.ndarray
    h2: np.ndarray
    invariant: np.ndarray


def vae_forward(inputs: np.ndarray, params: VaeParams, eps: np.ndarray) -> VaeForwardCache:
    """Forward pass on a [B, d] batch, caching pre-activations."""
    h1_pre = inputs @ params.w1.T + params.b1
    h1 = np.maximum(h1_pre, 0.0)
    mu = h1 @ params.w2.T + params.b2
    logvar_raw = h1 @ params.w3.T + params.b3
    logvar = np.clip(logvar_raw, LOGVAR_MIN, LOGVAR_MAX)
    sigma = np.exp(0.5 * logvar)
    z = mu + sigma * eps
    h2_pre = z @ params.w4.T + params.b4
    h2 = np.maximum(h2_pre, 0.0)
    invariant = h2 @ params.w5.T + params.b5
    return VaeForwardCache(inputs=inputs, h1_pre=h1_pre, h1=h1, mu=mu,
                           logvar_raw=logvar_raw, logvar=logvar, sigma=sigma,
                           eps=eps, z=z, h2_pre=h2_pre, h2=h2, invariant=invariant)


def vae_backward(cache: VaeForwardCache, params: VaeParams,
                 d_invariant: np.ndarray,
                 d_mu: np.ndarray | None = None,
                 d_logvar: np.ndarray | None = None):
    """Backpropagate cotangents through one cached forward pass.

    ``d_mu`` / ``d_logvar`` carry contributions that hit the latent directly
    (the KL term).  Returns ``(d_inputs, grads)`` where ``grads`` maps the
    parameter field names to arrays; the caller accumulates across batches.
    """
    grads = {}
    d_inv = d_invariant
    grads["w5"] = d_inv.T @ cache.h2
    grads["b5"] = d_inv.sum(axis=0)
    d_h2 = (d_inv @ params.w5) * (cache.h2_pre > 0)
    grads["w4"] = d_h2.T @ cache.z
    grads["b4"] = d_h2.sum(axis=0)
    d_z = d_h2 @ params.w4

    d_mu_total = d_z if d_mu is None else d_z + d_mu
    d_sigma = d_z * cache.eps
    d_lv = 0.5 * cache.sigma * d_sigma
    if d_logvar is not None:
        d_lv = d_lv + d_logvar
    clip_mask = (cache.logvar_raw > LOGVAR_MIN) & (cache.logvar_raw < LOGVAR_MAX)
    d_lv_raw = d_lv * clip_mask

    grads["w2"] = d_mu_total.T @ cache.h1
    grads["b2"] = d_mu_total.sum(axis=0)
    grads["w3"] = d_lv_raw.T @ cache.h1
    grads["b3"] = d_lv_raw.sum(axis=0)
    d_h1 = (d_mu_total @ params.w2 + d_lv_raw @ params.w3) * (cache.h1_pre > 0)
    grads["w1"] = d_h1.T @ cache.inputs
    grads["b1"] = d_h1.sum(axis=0)
    d_inputs = d_h1 @ params.w1
    return d_inputs, grads
