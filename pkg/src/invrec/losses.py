"""The five training objectives and their weighted combination.

All losses are batch means (not corpus sums) so the weight grids transfer
across dataset sizes.  Everything is computed from logits with the usual
log-sum-exp stabilization; each loss is nonnegative by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp

from .errors import DataError, NumericError
from .vae import GaussianLatent, PreferenceBundle


@dataclass(frozen=True)
class LossWeights:
    """Multipliers for the auxiliary losses plus the contrastive temperature."""

    lam: float = 0.1     # invariant-risk term
    alpha: float = 0.01  # orthogonality term
    beta: float = 0.1    # contrastive term
    gamma: float = 0.1   # KL term
    tau: float = 0.5     # InfoNCE temperature

    def __post_init__(self):
        for name in ("lam", "alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise DataError(f"loss weight {name} must be >= 0")
        if self.tau <= 0:
            raise DataError("temperature tau must be > 0")


@dataclass(frozen=True)
class LossReport:
    """Per-step scalar loss components and their weighted total."""

    rec: float
    irm: float
    ort: float
    con: float
    kl: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {"rec": self.rec, "irm": self.irm, "ort": self.ort,
                "con": self.con, "kl": self.kl, "total": self.total}


def _softplus(x):
    return np.logaddexp(0.0, x)


def bce_from_logit(logit, label):
    """Stable binary cross-entropy -[r log s(t) + (1-r) log(1 - s(t))]."""
    return _softplus(logit) - label * logit


def flatten_samples(samples):
    """Normalize per-environment (u, i+, i-) triples into flat label arrays.

    Each triple contributes one positive term and one negative term per
    negative item (the third element may be a single id or a sequence).
    Returns a list over environments of (users, items, labels) int/float
    arrays.
    """
    flat = []
    for env_triples in samples:
        users, items, labels = [], [], []
        for u, i_pos, i_neg in env_triples:
            users.append(u)
            items.append(i_pos)
            labels.append(1.0)
            negs = np.atleast_1d(np.asarray(i_neg, dtype=np.int64))
            for j in negs.tolist():
                users.append(u)
                items.append(j)
                labels.append(0.0)
        flat.append((np.asarray(users, dtype=np.int64),
                     np.asarray(items, dtype=np.int64),
                     np.asarray(labels, dtype=np.float64)))
    return flat


def irm_loss(invariant, q_hat: np.ndarray, samples) -> float:
    """Cross-environment risk of invariant preferences.

    ``invariant`` holds one [B, d] table per environment (list or [M, B, d]
    array) for a common user roster; ``samples[n]`` lists (user row, positive
    item, negative item(s)) drawn from environment n's interactions.  Every
    environment's invariant table is scored against every environment's
    samples (all (m, n) pairs, m = n included) with binary cross-entropy on
    the sigmoid of the preference-item dot product.
    """
    invariant = np.asarray(invariant)
    num_envs = invariant.shape[0]
    if len(samples) != num_envs:
        raise DataError(f"expected samples for {num_envs} environments, "
                        f"got {len(samples)}")
    flat = flatten_samples(samples)
    total = 0.0
    count = 0
    for m in range(num_envs):
        for users, items, labels in flat:
            if len(users) == 0:
                continue
            logits = np.einsum("bd,bd->b", invariant[m][users], q_hat[items])
            total += float(np.sum(bce_from_logit(logits, labels)))
            count += len(users)
    if count == 0:
        raise DataError("irm_loss received an empty sample set")
    return total / count


def orthogonal_loss(bundle: PreferenceBundle) -> float:
    """Mean squared correlation between invariant and specific preferences."""
    if bundle.inputs.shape[1] == 0:
        raise DataError("orthogonal_loss received an empty batch")
    dots = np.einsum("mbd,mbd->mb", bundle.specific, bundle.invariant)
    return float(np.mean(dots ** 2))


def infonce(pos_logits: np.ndarray, neg_logits: np.ndarray) -> float:
    """Mean InfoNCE over rows: -log softmax of the positive among negatives.

    ``pos_logits`` is [N]; ``neg_logits`` is [N, J].  Temperature scaling is
    the caller's responsibility.
    """
    pos_logits = np.atleast_1d(np.asarray(pos_logits, dtype=np.float64))
    neg_logits = np.asarray(neg_logits, dtype=np.float64)
    if neg_logits.ndim == 1:
        neg_logits = neg_logits[:, None]
    stacked = np.concatenate([pos_logits[:, None], neg_logits], axis=1)
    return float(np.mean(logsumexp(stacked, axis=1) - pos_logits))


def contrastive_loss(bundle: PreferenceBundle, tau: float) -> float:
    """Pull a user's invariant preferences together across environments.

    Positive pairs are (m, n) with m != n; for anchor environment m the
    negatives pit the anchor against the behavior-specific preferences of
    every environment.  Returns the mean over users and ordered pairs.
    """
    if tau <= 0:
        raise DataError("temperature tau must be > 0")
    num_envs = bundle.num_environments
    if num_envs < 2:
        raise DataError("contrastive_loss needs at least 2 environments")
    inv = bundle.invariant
    spec = bundle.specific
    pos = np.einsum("mbd,nbd->mnb", inv, inv) / tau
    negs = np.einsum("mbd,jbd->mbj", inv, spec) / tau

    total = 0.0
    count = 0
    for m in range(num_envs):
        for n in range(num_envs):
            if m == n:
                continue
            stacked = np.concatenate([pos[m, n][:, None], negs[m]], axis=1)
            total += float(np.sum(logsumexp(stacked, axis=1) - pos[m, n]))
            count += pos.shape[2]
    return total / count


def kl_loss(latent: GaussianLatent) -> float:
    """Mean KL(N(mu, sigma^2) || N(0, 1)) over all latents."""
    var = np.exp(latent.logvar)
    per = 0.5 * np.sum(latent.mu ** 2 + var - 1.0 - latent.logvar, axis=-1)
    return float(np.mean(per))


def bpr_loss(scores) -> float:
    """Pairwise ranking loss: mean of -ln sigmoid(y_pos - y_neg)."""
    arr = np.asarray(scores, dtype=np.float64)
    if arr.size == 0:
        raise DataError("bpr_loss received an empty batch")
    arr = arr.reshape(-1, 2)
    return float(np.mean(_softplus(arr[:, 1] - arr[:, 0])))


def total_loss(rec: float, irm: float, ort: float, con: float, kl: float,
               weights: LossWeights) -> LossReport:
    """Weighted objective: rec + lam*irm + alpha*ort + beta*con + gamma*kl."""
    components = {"rec": rec, "irm": irm, "ort": ort, "con": con, "kl": kl}
    for name, value in components.items():
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss component {name}={value}")
    total = (rec + weights.lam * irm + weights.alpha * ort
             + weights.beta * con + weights.gamma * kl)
    return LossReport(rec=float(rec), irm=float(irm), ort=float(ort),
                      con=float(con), kl=float(kl), total=float(total))


def sigmoid(x):
    """Logistic function on arrays or scalars."""
    return expit(x)
