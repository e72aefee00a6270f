"""Synthetic multi-behavior datasets with planted preference structure.

Each user owns an invariant vector shared by all behaviors plus one specific
vector per behavior; interaction probabilities come from squashing the mixed
preference's affinity with item vectors.  The planted vectors are returned
alongside the log so tests can verify that training recovers the invariant
part; they must never reach the trainer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .arrayio import read_arrays, write_arrays
from .dataset import InteractionLog
from .errors import DataError

TRUTH_MAGIC = b"IVRT"
TRUTH_VERSION = 1


@dataclass(frozen=True)
class SynthSpec:
    """Shape and strength parameters of a planted dataset.

    ``invariant_strength`` (rho) mixes the shared vector against the
    per-behavior vectors: 1.0 means every behavior is driven by the same
    preferences, 0.0 means behaviors are independent.  ``latent_dim`` should
    stay at the model's latent width (embedding width / 4) so the planted
    structure is representable.
    """

    num_users: int
    num_items: int
    num_behaviors: int
    latent_dim: int = 16
    invariant_strength: float = 0.8
    noise_scale: tuple[float, ...] | float = 0.1
    densities: tuple[float, ...] = (0.03, 0.02, 0.01)
    seed: int = 0

    def noise_per_behavior(self) -> tuple[float, ...]:
        if np.isscalar(self.noise_scale):
            return (float(self.noise_scale),) * self.num_behaviors
        return tuple(float(x) for x in self.noise_scale)

    def validate(self):
        if min(self.num_users, self.num_items, self.num_behaviors,
               self.latent_dim) < 1:
            raise DataError("synthetic spec sizes must be positive")
        if not 0.0 <= self.invariant_strength <= 1.0:
            raise DataError("invariant_strength must lie in [0, 1]")
        if len(self.densities) != self.num_behaviors:
            raise DataError(f"need {self.num_behaviors} density targets, "
                            f"got {len(self.densities)}")
        if len(self.noise_per_behavior()) != self.num_behaviors:
            raise DataError("noise scale list length must match behaviors")
        for rho in self.densities:
            if not 0.0 < rho < 1.0:
                raise DataError(f"density target {rho} outside (0, 1)")


@dataclass(frozen=True)
class SynthTruth:
    """Planted vectors: invariant per user, specific per (behavior, user),
    and item vectors."""

    invariant: np.ndarray   # [U, latent_dim]
    specific: np.ndarray    # [K, U, latent_dim]
    item_vectors: np.ndarray  # [I, latent_dim]


def _bisect_bias(logits: np.ndarray, density: float) -> float:
    lo, hi = -60.0, 60.0
    if float(np.mean(expit(logits + lo))) > density:
        raise DataError(f"density {density} unachievable (too low)")
    if float(np.mean(expit(logits + hi))) < density:
        raise DataError(f"density {density} unachievable (too high)")
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if float(np.mean(expit(logits + mid))) < density:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate(spec: SynthSpec) -> tuple[InteractionLog, SynthTruth]:
    """Draw a planted interaction log; deterministic under the spec's seed."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    dt = spec.latent_dim
    rho = spec.invariant_strength
    invariant = rng.standard_normal((spec.num_users, dt))
    specific = rng.standard_normal((spec.num_behaviors, spec.num_users, dt))
    item_vectors = rng.standard_normal((spec.num_items, dt)) / np.sqrt(dt)
    noise = spec.noise_per_behavior()

    all_users: list[np.ndarray] = []
    all_items: list[np.ndarray] = []
    all_behaviors: list[np.ndarray] = []
    cells = spec.num_users * spec.num_items
    for k in range(spec.num_behaviors):
        prefs = rho * invariant + (1.0 - rho) * specific[k]
        logits = prefs @ item_vectors.T
        if noise[k] > 0:
            logits = logits + noise[k] * rng.standard_normal(logits.shape)
        bias = _bisect_bias(logits, spec.densities[k])
        probs = expit(logits + bias)
        hits = rng.random(probs.shape) < probs
        flat = np.flatnonzero(hits)
        target_count = int(round(spec.densities[k] * cells))
        if len(flat) > target_count:  # thin surplus draws back to the target
            flat = np.sort(rng.choice(flat, size=target_count, replace=False))
        all_users.append(flat // spec.num_items)
        all_items.append(flat % spec.num_items)
        all_behaviors.append(np.full(len(flat), k, dtype=np.int64))

    users = np.concatenate(all_users)
    items = np.concatenate(all_items)
    behaviors = np.concatenate(all_behaviors)
    perm = rng.permutation(len(users))  # arbitrary temporal order
    log = InteractionLog(users=users[perm], items=items[perm],
                         behaviors=behaviors[perm],
                         order=np.arange(len(users), dtype=np.int64),
                         num_users=spec.num_users, num_items=spec.num_items,
                         num_behaviors=spec.num_behaviors)
    truth = SynthTruth(invariant=invariant, specific=specific,
                       item_vectors=item_vectors)
    return log, truth


def save_truth(truth: SynthTruth, path, meta: dict | None = None):
    """Write the planted vectors as a versioned binary sidecar."""
    write_arrays(path, TRUTH_MAGIC, TRUTH_VERSION,
                 {str(k): str(v) for k, v in (meta or {}).items()},
                 {"invariant": truth.invariant.astype(np.float64),
                  "specific": truth.specific.astype(np.float64),
                  "item_vectors": truth.item_vectors.astype(np.float64)})


def load_truth(path) -> SynthTruth:
    _, _, arrays = read_arrays(path, TRUTH_MAGIC, TRUTH_VERSION)
    return SynthTruth(invariant=arrays["invariant"], specific=arrays["specific"],
                      item_vectors=arrays["item_vectors"])
