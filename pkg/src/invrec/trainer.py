"""Joint optimization of embeddings and encoder/decoder weights with Adam.

The forward pass composes: pretraining propagation over the all-behavior
union graph -> per-environment propagation -> shared encoder/decoder per
environment -> aggregated scores.  Gradients are hand-derived and flow
through the entire composition end to end; both propagation stages are
self-adjoint linear maps, so their backward pass reuses the forward operator.

Every sampled triple, permutation and noise draw is derived from
(seed, epoch, batch, lane), which makes runs bit-reproducible and lets
interrupted training resume exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .dataset import SplitBundle, build_matrix, leave_one_out_split
from .environments import (EnvironmentRepresentations, EnvironmentSet,
                           build_environment_graphs, enumerate_environments)
from .errors import ConfigError, DataError, NumericError
from .evaluator import EvalResult, evaluate
from .graph import propagate_sum
from .losses import LossReport, LossWeights
from .recommender import ScoringState, build_scoring_state
from .vae import VaeParams, init_params, vae_backward, vae_forward

# RNG stream lanes; never reorder (checkpoints rely on reproducible streams).
LANE_INIT = 0
LANE_PERM = 1
LANE_BPR = 2
LANE_IRM = 3
LANE_EPS = 4
LANE_PAIRS = 5
LANE_PROBE = 6

DEFAULT_GRIDS: dict[str, tuple[float, ...]] = {
    "lam": (0.01, 0.1, 0.5, 1.0),
    "alpha": (1e-4, 1e-3, 1e-2, 0.1, 1.0),
    "beta": (1e-3, 1e-2, 0.1, 0.5, 1.0),
    "gamma": (0.1, 0.3, 0.5, 0.7, 1.0),
    "tau": (0.1, 0.3, 0.5, 0.7, 0.9),
}

COMPONENTS = ("rec", "irm", "ort", "con", "kl")


def stream(seed: int, *path: int) -> np.random.Generator:
    """Deterministic child generator for a (seed, lane, epoch, batch) path."""
    return np.random.default_rng([int(seed)] + [int(p) for p in path])


@dataclass
class TrainConfig:
    """Hyperparameters and sampling knobs for one training run."""

    d: int = 64
    layers: int = 2
    lr: float = 1e-3
    batch: int = 1024
    epochs: int = 100
    seed: int = 0
    neg_k: int = 1
    env_pair_sample: int = 0  # 0 = use all M^2 environment pairs
    weights: LossWeights = field(default_factory=LossWeights)
    grids: dict = field(default_factory=lambda: {k: tuple(v) for k, v
                                                 in DEFAULT_GRIDS.items()})
    dtype: str = "float32"
    exclude_all_behaviors: bool = False  # candidate filter variant
    freeze_pretrain_epochs: int = 0      # keep base embeddings fixed early on
    bypass_vae: bool = False             # degenerate ranking baseline (MF/GCN + BPR)
    validate: bool = False               # carve a validation pair per user
    patience: int = 10                   # early-stop patience (with validate)
    eval_k: int = 10

    def check(self):
        if self.d % 4 != 0 or self.d <= 0:
            raise ConfigError(f"embedding width d={self.d} must be a positive "
                              "multiple of 4")
        if self.lr <= 0:
            raise ConfigError("learning rate must be > 0")
        if self.batch < 1:
            raise ConfigError("batch size must be >= 1")
        if self.layers < 0 or (self.layers == 0 and not self.bypass_vae):
            raise ConfigError("layers must be >= 1 (0 is only meaningful with "
                              "bypass_vae)")
        if self.neg_k < 1:
            raise ConfigError("neg_k must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")


@dataclass
class AdamState:
    """First/second moment accumulators mirroring every parameter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


@dataclass
class ModelState:
    """All learnable parameters plus optimizer accumulators."""

    user_emb: np.ndarray
    item_emb: np.ndarray
    vae: VaeParams
    adam: AdamState | None = None

    def named_params(self) -> list[tuple[str, np.ndarray]]:
        out = [("user_emb", self.user_emb), ("item_emb", self.item_emb)]
        out.extend((f"vae.{k}", v) for k, v in self.vae.named())
        return out

    def param_count(self) -> int:
        return sum(arr.size for _, arr in self.named_params())

    def copy(self) -> "ModelState":
        adam = None
        if self.adam is not None:
            adam = AdamState(m={k: v.copy() for k, v in self.adam.m.items()},
                             v={k: v.copy() for k, v in self.adam.v.items()},
                             step=self.adam.step)
        return ModelState(user_emb=self.user_emb.copy(),
                          item_emb=self.item_emb.copy(),
                          vae=self.vae.copy(), adam=adam)

    def astype(self, dtype) -> "ModelState":
        adam = None
        if self.adam is not None:
            adam = AdamState(m={k: v.astype(dtype) for k, v in self.adam.m.items()},
                             v={k: v.astype(dtype) for k, v in self.adam.v.items()},
                             step=self.adam.step)
        return ModelState(user_emb=self.user_emb.astype(dtype),
                          item_emb=self.item_emb.astype(dtype),
                          vae=self.vae.astype(dtype), adam=adam)

    def assign(self, other: "ModelState"):
        """Copy another state's values into this one's arrays, in place."""
        for (_, dst), (_, src) in zip(self.named_params(), other.named_params()):
            dst[...] = src
        if self.adam is not None and other.adam is not None:
            for k in self.adam.m:
                self.adam.m[k][...] = other.adam.m[k]
                self.adam.v[k][...] = other.adam.v[k]
            self.adam.step = other.adam.step


def vae_param_count(d: int) -> int:
    d2, d4 = d // 2, d // 4
    return (d2 * d + d2) + 2 * (d4 * d2 + d4) + (d2 * d4 + d2) + (d * d2 + d)


def init_model(num_users: int, num_items: int, cfg: TrainConfig) -> ModelState:
    """Fresh parameters: normal(0, 0.01) embeddings, Glorot VAE, zero Adam."""
    cfg.check()
    dtype = np.dtype(cfg.dtype)
    rng = stream(cfg.seed, LANE_INIT)
    user_emb = (0.01 * rng.standard_normal((num_users, cfg.d))).astype(dtype)
    item_emb = (0.01 * rng.standard_normal((num_items, cfg.d))).astype(dtype)
    params = init_params(cfg.d, rng, dtype=dtype)
    state = ModelState(user_emb=user_emb, item_emb=item_emb, vae=params)
    state.adam = init_adam(state)
    expected = (num_users + num_items) * cfg.d + vae_param_count(cfg.d)
    assert state.param_count() == expected, \
        f"parameter count {state.param_count()} != expected {expected}"
    return state


def init_adam(state: ModelState) -> AdamState:
    zeros = {name: np.zeros_like(arr) for name, arr in state.named_params()}
    return AdamState(m=zeros,
                     v={name: np.zeros_like(arr) for name, arr in state.named_params()},
                     step=0)


def adam_step(state: ModelState, grads: dict[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update, in place."""
    if state.adam is None:
        raise DataError("model state has no optimizer accumulators")
    adam = state.adam
    adam.step += 1
    t = adam.step
    for name, param in state.named_params():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
        m = adam.m[name]
        v = adam.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        param -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class FrozenBatch:
    """One step's user roster and all of its frozen randomness."""

    users: np.ndarray                 # [B] global user ids
    eps: np.ndarray                   # [M, B, d/4] noise (zeros at inference)
    bpr: tuple[np.ndarray, np.ndarray, np.ndarray]  # rows, pos items, neg items
    irm: list[list[tuple[int, int, np.ndarray]]]    # per env: (row, pos, negs)
    pair_mask: np.ndarray | None      # [M, M] bool, None = all pairs


class Trainer:
    """Owns the cached graphs and sampling tables for one split + config."""

    def __init__(self, split: SplitBundle, cfg: TrainConfig,
                 env_set: EnvironmentSet | None = None):
        cfg.check()
        self.cfg = cfg
        self.split = split
        self.target = split.target_behavior

        if cfg.validate:
            self.val_bundle = leave_one_out_split(split.train, self.target)
            self.train_log = self.val_bundle.train
        else:
            self.val_bundle = None
            self.train_log = split.train

        log = self.train_log
        self.num_users = log.num_users
        self.num_items = log.num_items
        k = log.num_behaviors
        self.env_set = env_set or enumerate_environments(k)
        if self.env_set.num_behaviors != k:
            raise DataError("environment set does not match the log's behaviors")
        self.num_envs = self.env_set.size
        self.target_env = self.env_set.singleton_index[self.target]

        self.matrices = [build_matrix(log, {b}) for b in range(k)]
        graphs = build_environment_graphs(self.env_set, self.matrices,
                                          self.num_users, self.num_items)
        dtype = np.dtype(cfg.dtype)
        self.env_adj = [g.adj.astype(dtype) for g in graphs]
        # Canonical order puts the all-behavior union last; the pretraining
        # pass runs on exactly that union.
        self.pretrain_adj = self.env_adj[-1]

        per_behavior_items = [m.items_per_user() for m in self.matrices]
        self.env_items: list[list[np.ndarray]] = []
        for env in self.env_set.environments:
            if len(env) == 1:
                self.env_items.append(per_behavior_items[next(iter(env))])
            else:
                self.env_items.append(build_matrix(log, env).items_per_user())
        self.target_items = per_behavior_items[self.target]

    # --- sampling ---------------------------------------------------------

    def _draw_negatives(self, rng, owned: np.ndarray, count: int) -> np.ndarray:
        out = np.empty(count, dtype=np.int64)
        for t in range(count):
            while True:
                j = int(rng.integers(self.num_items))
                pos = np.searchsorted(owned, j)
                if pos >= len(owned) or owned[pos] != j:
                    out[t] = j
                    break
        return out

    def sample_batch(self, epoch: int, batch_idx: int,
                     users: np.ndarray) -> FrozenBatch:
        """Draw the BPR triples, per-environment IRM samples and noise."""
        cfg = self.cfg
        n_users = len(users)
        dtype = np.dtype(cfg.dtype)
        eps = stream(cfg.seed, LANE_EPS, epoch, batch_idx).standard_normal(
            (self.num_envs, n_users, cfg.d // 4)).astype(dtype)

        rng_bpr = stream(cfg.seed, LANE_BPR, epoch, batch_idx)
        rows, pos, neg = [], [], []
        for row, u in enumerate(users.tolist()):
            owned = self.target_items[u]
            if len(owned) == 0 or len(owned) >= self.num_items:
                continue
            rows.append(row)
            pos.append(int(owned[rng_bpr.integers(len(owned))]))
            neg.append(int(self._draw_negatives(rng_bpr, owned, 1)[0]))
        bpr = (np.asarray(rows, dtype=np.int64), np.asarray(pos, dtype=np.int64),
               np.asarray(neg, dtype=np.int64))

        rng_irm = stream(cfg.seed, LANE_IRM, epoch, batch_idx)
        irm: list[list[tuple[int, int, np.ndarray]]] = []
        for n in range(self.num_envs):
            env_samples = []
            items_of = self.env_items[n]
            for row, u in enumerate(users.tolist()):
                owned = items_of[u]
                if len(owned) == 0 or len(owned) >= self.num_items:
                    continue
                p = int(owned[rng_irm.integers(len(owned))])
                negs = self._draw_negatives(rng_irm, owned, cfg.neg_k)
                env_samples.append((row, p, negs))
            irm.append(env_samples)

        pair_mask = None
        m = self.num_envs
        if cfg.env_pair_sample and cfg.env_pair_sample < m * m:
            rng_pairs = stream(cfg.seed, LANE_PAIRS, epoch, batch_idx)
            chosen = rng_pairs.choice(m * m, size=cfg.env_pair_sample,
                                      replace=False)
            pair_mask = np.zeros((m, m), dtype=bool)
            pair_mask[chosen // m, chosen % m] = True
        return FrozenBatch(users=users, eps=eps, bpr=bpr, irm=irm,
                           pair_mask=pair_mask)

    # --- forward / backward ------------------------------------------------

    def _effective_weights(self, component: str) -> dict[str, float]:
        w = self.cfg.weights
        if component == "total":
            return {"rec": 1.0, "irm": w.lam, "ort": w.alpha,
                    "con": w.beta, "kl": w.gamma}
        if component not in COMPONENTS:
            raise ConfigError(f"unknown loss component {component!r}")
        return {name: (1.0 if name == component else 0.0) for name in COMPONENTS}

    def forward_backward(self, state: ModelState, batch: FrozenBatch,
                         component: str = "total", compute_grads: bool = True):
        """Evaluate the objective on a frozen batch; optionally with gradients.

        Returns ``(report, grads)``; ``grads`` is None when not requested,
        otherwise a dict over parameter names.  ``component`` selects the full
        weighted objective or a single unweighted loss term.
        """
        cfg = self.cfg
        w = self._effective_weights(component)
        tau = cfg.weights.tau
        users = batch.users
        n_batch = len(users)
        num_u = self.num_users
        d = cfg.d
        dtype = np.dtype(cfg.dtype)

        x0 = np.vstack([state.user_emb, state.item_emb])
        x_pre = propagate_sum(self.pretrain_adj, x0, cfg.layers)

        if cfg.bypass_vae:
            return self._bypass_forward_backward(state, batch, x_pre, w,
                                                 compute_grads)

        m_envs = self.num_envs
        k = self.env_set.num_behaviors
        env_x = [propagate_sum(self.env_adj[m], x_pre, cfg.layers)
                 for m in range(m_envs)]
        inputs = np.stack([env_x[m][:num_u][users] for m in range(m_envs)])
        q_hat = np.zeros((self.num_items, d), dtype=dtype)
        for m in range(k):  # singletons sit first in the canonical order
            q_hat += env_x[m][num_u:]

        caches = [vae_forward(inputs[m], state.vae, batch.eps[m])
                  for m in range(m_envs)]
        inv = np.stack([c.invariant for c in caches])
        spec = inputs - inv
        p_agg = inv.sum(axis=0)
        user_vec = p_agg + spec[self.target_env]

        d_inv = np.zeros_like(inv)
        d_spec = np.zeros_like(spec)
        d_qhat = np.zeros_like(q_hat)
        d_user_vec = np.zeros_like(user_vec)
        d_mu = np.zeros((m_envs, n_batch, d // 4), dtype=dtype)
        d_lv = np.zeros_like(d_mu)

        # Recommendation loss over sampled BPR triples.
        rows, pos, neg = batch.bpr
        rec = 0.0
        if len(rows):
            q_diff = q_hat[pos] - q_hat[neg]
            s = np.einsum("td,td->t", user_vec[rows], q_diff)
            rec = float(np.mean(np.logaddexp(0.0, -s)))
            if compute_grads and w["rec"]:
                coeff = (-expit(-s) * (w["rec"] / len(rows))).astype(dtype)
                np.add.at(d_user_vec, rows, coeff[:, None] * q_diff)
                uv = coeff[:, None] * user_vec[rows]
                np.add.at(d_qhat, pos, uv)
                np.add.at(d_qhat, neg, -uv)

        # Cross-environment invariant risk.
        flat = []
        for env_samples in batch.irm:
            r, it, lb = [], [], []
            for row, p, negs in env_samples:
                r.append(row)
                it.append(p)
                lb.append(1.0)
                r.extend([row] * len(negs))
                it.extend(negs.tolist())
                lb.extend([0.0] * len(negs))
            flat.append((np.asarray(r, dtype=np.int64),
                         np.asarray(it, dtype=np.int64),
                         np.asarray(lb, dtype=dtype)))
        pair_on = batch.pair_mask
        irm_total = 0.0
        irm_count = 0
        for m in range(m_envs):
            for n in range(m_envs):
                if pair_on is not None and not pair_on[m, n]:
                    continue
                r, it, lb = flat[n]
                if len(r) == 0:
                    continue
                irm_count += len(r)
        for m in range(m_envs):
            for n in range(m_envs):
                if pair_on is not None and not pair_on[m, n]:
                    continue
                r, it, lb = flat[n]
                if len(r) == 0:
                    continue
                logits = np.einsum("td,td->t", inv[m][r], q_hat[it])
                irm_total += float(np.sum(np.logaddexp(0.0, logits) - lb * logits))
                if compute_grads and w["irm"]:
                    coeff = ((expit(logits) - lb) * (w["irm"] / irm_count)).astype(dtype)
                    np.add.at(d_inv[m], r, coeff[:, None] * q_hat[it])
                    np.add.at(d_qhat, it, coeff[:, None] * inv[m][r])
        irm = irm_total / irm_count if irm_count else 0.0

        # Orthogonality between invariant and specific preferences.
        dots = np.einsum("mbd,mbd->mb", spec, inv)
        ort = float(np.mean(dots ** 2))
        if compute_grads and w["ort"]:
            coeff = (2.0 * dots * (w["ort"] / dots.size)).astype(dtype)
            d_spec += coeff[..., None] * inv
            d_inv += coeff[..., None] * spec

        # Contrastive alignment of invariant preferences across environments.
        con = 0.0
        if m_envs >= 2:
            pos_log = np.einsum("mbd,nbd->mnb", inv, inv) / tau
            neg_log = np.einsum("mbd,jbd->mbj", inv, spec) / tau
            n_pairs = m_envs * (m_envs - 1)
            con_total = 0.0
            for m in range(m_envs):
                for n in range(m_envs):
                    if m == n:
                        continue
                    stacked = np.concatenate([pos_log[m, n][:, None],
                                              neg_log[m]], axis=1)
                    peak = stacked.max(axis=1, keepdims=True)
                    lse = peak[:, 0] + np.log(
                        np.sum(np.exp(stacked - peak), axis=1))
                    con_total += float(np.sum(lse - pos_log[m, n]))
                    if compute_grads and w["con"]:
                        soft = np.exp(stacked - lse[:, None])
                        scale = w["con"] / (n_pairs * n_batch * tau)
                        g_pos = ((soft[:, 0] - 1.0) * scale).astype(dtype)
                        g_neg = (soft[:, 1:] * scale).astype(dtype)
                        d_inv[m] += g_pos[:, None] * inv[n]
                        d_inv[n] += g_pos[:, None] * inv[m]
                        d_inv[m] += np.einsum("bj,jbd->bd", g_neg, spec)
                        d_spec += np.einsum("bj,bd->jbd", g_neg, inv[m])
            con = con_total / (n_pairs * n_batch)

        # KL regularizer on the latent posteriors.
        mu = np.stack([c.mu for c in caches])
        logvar = np.stack([c.logvar for c in caches])
        var = np.exp(logvar)
        kl = float(np.mean(0.5 * np.sum(mu ** 2 + var - 1.0 - logvar, axis=-1)))
        if compute_grads and w["kl"]:
            n_latents = m_envs * n_batch
            d_mu += (w["kl"] / n_latents) * mu
            d_lv += (w["kl"] * 0.5 / n_latents) * (var - 1.0)

        report = self._weighted_report(rec, irm, ort, con, kl, w)
        if not compute_grads:
            return report, None

        # Aggregated preferences feed the score of every environment.
        d_p_agg = d_user_vec
        d_spec[self.target_env] += d_user_vec
        d_inv += d_p_agg[None, :, :]

        grads = {name: np.zeros_like(arr) for name, arr in state.named_params()}
        d_xpre = np.zeros_like(x_pre)
        for m in range(m_envs):
            d_inputs_m = d_spec[m].copy()
            d_invariant_m = d_inv[m] - d_spec[m]
            d_in_vae, vae_grads = vae_backward(
                caches[m], state.vae, d_invariant_m,
                d_mu=d_mu[m] if w["kl"] else None,
                d_logvar=d_lv[m] if w["kl"] else None)
            d_inputs_m += d_in_vae
            for key, val in vae_grads.items():
                grads[f"vae.{key}"] += val

            d_xm = np.zeros_like(x_pre)
            d_xm[users] = d_inputs_m
            if m < k:
                d_xm[num_u:] += d_qhat
            d_xpre += propagate_sum(self.env_adj[m], d_xm, cfg.layers)

        d_x0 = propagate_sum(self.pretrain_adj, d_xpre, cfg.layers)
        grads["user_emb"] += d_x0[:num_u]
        grads["item_emb"] += d_x0[num_u:]
        return report, grads

    def _bypass_forward_backward(self, state, batch, x_pre, w, compute_grads):
        """Degenerate path: scores straight from the propagated embeddings."""
        num_u = self.num_users
        user_vec = x_pre[:num_u][batch.users]
        q_hat = x_pre[num_u:]
        rows, pos, neg = batch.bpr
        rec = 0.0
        d_user_vec = np.zeros_like(user_vec)
        d_qhat = np.zeros_like(q_hat)
        if len(rows):
            q_diff = q_hat[pos] - q_hat[neg]
            s = np.einsum("td,td->t", user_vec[rows], q_diff)
            rec = float(np.mean(np.logaddexp(0.0, -s)))
            if compute_grads and w["rec"]:
                coeff = (-expit(-s) * (w["rec"] / len(rows))).astype(x_pre.dtype)
                np.add.at(d_user_vec, rows, coeff[:, None] * q_diff)
                uv = coeff[:, None] * user_vec[rows]
                np.add.at(d_qhat, pos, uv)
                np.add.at(d_qhat, neg, -uv)
        report = self._weighted_report(rec, 0.0, 0.0, 0.0, 0.0, w)
        if not compute_grads:
            return report, None
        grads = {name: np.zeros_like(arr) for name, arr in state.named_params()}
        d_xpre = np.zeros_like(x_pre)
        d_xpre[batch.users] = d_user_vec
        d_xpre[num_u:] += d_qhat
        d_x0 = propagate_sum(self.pretrain_adj, d_xpre, self.cfg.layers)
        grads["user_emb"] += d_x0[:num_u]
        grads["item_emb"] += d_x0[num_u:]
        return report, grads

    @staticmethod
    def _weighted_report(rec, irm, ort, con, kl, w) -> LossReport:
        components = {"rec": rec, "irm": irm, "ort": ort, "con": con, "kl": kl}
        for name, value in components.items():
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss component {name}={value}")
        total = sum(w[name] * components[name] for name in COMPONENTS)
        return LossReport(rec=rec, irm=irm, ort=ort, con=con, kl=kl,
                          total=float(total))

    # --- training loop ------------------------------------------------------

    def step(self, state: ModelState, epoch: int, batch_idx: int,
             users: np.ndarray) -> LossReport:
        batch = self.sample_batch(epoch, batch_idx, users)
        report, grads = self.forward_backward(state, batch)
        if epoch < self.cfg.freeze_pretrain_epochs:
            grads["user_emb"][...] = 0.0
            grads["item_emb"][...] = 0.0
        adam_step(state, grads, self.cfg.lr)
        return report

    def train_epoch(self, state: ModelState, epoch: int) -> LossReport:
        """Run all user batches of one epoch; returns the mean loss report."""
        cfg = self.cfg
        perm = stream(cfg.seed, LANE_PERM, epoch).permutation(self.num_users)
        totals = np.zeros(6, dtype=np.float64)
        n_batches = 0
        for batch_idx, start in enumerate(range(0, self.num_users, cfg.batch)):
            users = perm[start:start + cfg.batch]
            report = self.step(state, epoch, batch_idx, users)
            totals += [report.rec, report.irm, report.ort, report.con,
                       report.kl, report.total]
            n_batches += 1
        mean = totals / max(n_batches, 1)
        return LossReport(rec=mean[0], irm=mean[1], ort=mean[2], con=mean[3],
                          kl=mean[4], total=mean[5])

    def train(self, state: ModelState, epochs: int | None = None,
              start_epoch: int = 0, on_epoch=None) -> list[LossReport]:
        """Train for ``epochs`` epochs with optional early stopping.

        ``on_epoch(epoch, report, val_result_or_None)`` is invoked after each
        epoch.  With ``cfg.validate`` the best-validation snapshot is restored
        into ``state`` before returning.
        """
        cfg = self.cfg
        epochs = cfg.epochs if epochs is None else epochs
        reports = []
        best_hr = -np.inf
        best_state = None
        misses = 0
        for epoch in range(start_epoch, epochs):
            report = self.train_epoch(state, epoch)
            reports.append(report)
            val = None
            if self.val_bundle is not None:
                val = evaluate(self.val_bundle, self.scoring_state(state),
                               k=cfg.eval_k,
                               exclude_all_behaviors=cfg.exclude_all_behaviors)
                if val.hr > best_hr:
                    best_hr = val.hr
                    best_state = state.copy()
                    misses = 0
                else:
                    misses += 1
            if on_epoch is not None:
                on_epoch(epoch, report, val)
            if self.val_bundle is not None and misses >= cfg.patience:
                break
        if best_state is not None:
            state.assign(best_state)
        return reports

    # --- inference ----------------------------------------------------------

    def representations(self, state: ModelState) -> EnvironmentRepresentations:
        """Per-environment tables for every user and item (full roster)."""
        x0 = np.vstack([state.user_emb, state.item_emb])
        x_pre = propagate_sum(self.pretrain_adj, x0, self.cfg.layers)
        user_tables = []
        item_tables = []
        for m in range(self.num_envs):
            xm = propagate_sum(self.env_adj[m], x_pre, self.cfg.layers)
            user_tables.append(xm[:self.num_users])
            item_tables.append(xm[self.num_users:])
        return EnvironmentRepresentations(user_tables=tuple(user_tables),
                                          item_tables=tuple(item_tables))

    def scoring_state(self, state: ModelState) -> ScoringState:
        """Noise-free scoring snapshot for evaluation and recommendation."""
        if self.cfg.bypass_vae:
            x0 = np.vstack([state.user_emb, state.item_emb])
            x_pre = propagate_sum(self.pretrain_adj, x0, self.cfg.layers)
            return ScoringState(
                invariant_agg=x_pre[:self.num_users],
                specific_target=np.zeros_like(x_pre[:self.num_users]),
                item_agg=x_pre[self.num_users:])
        reps = self.representations(state)
        return build_scoring_state(reps, self.env_set, state.vae, self.target)

    def evaluate(self, state: ModelState, k: int | None = None) -> EvalResult:
        """Rank the held-out test items under the current parameters."""
        return evaluate(self.split, self.scoring_state(state),
                        k=k or self.cfg.eval_k,
                        exclude_all_behaviors=self.cfg.exclude_all_behaviors)


def train_epoch(split: SplitBundle, env_set: EnvironmentSet | None,
                state: ModelState, cfg: TrainConfig, epoch: int = 0) -> LossReport:
    """One-shot epoch without cache reuse; prefer :class:`Trainer` for loops."""
    return Trainer(split, cfg, env_set=env_set).train_epoch(state, epoch)


# --- gradient verification ---------------------------------------------------

@dataclass
class GradCheckReport:
    """Max relative error per parameter block from central finite differences."""

    max_rel_err: dict[str, float]
    tolerance: float
    component: str

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.max_rel_err.items() if v >= self.tolerance]

    @property
    def ok(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.max_rel_err, key=self.max_rel_err.get)
        return name, self.max_rel_err[name]


def finite_difference_check(state: ModelState, grads: dict[str, np.ndarray],
                            loss_fn, tolerance: float = 1e-4,
                            max_coords: int = 200, fd_step: float = 1e-5,
                            seed: int = 0, component: str = "total"
                            ) -> GradCheckReport:
    """Compare analytic gradients against central differences of ``loss_fn``.

    ``loss_fn`` must read the (float64) parameter arrays of ``state`` and is
    re-evaluated with individual coordinates nudged by ``fd_step``.  At most
    ``max_coords`` randomly chosen coordinates are probed per block.
    """
    rng = stream(seed, LANE_PROBE)
    errs: dict[str, float] = {}
    for name, param in state.named_params():
        flat = param.reshape(-1)
        n = flat.size
        coords = (np.arange(n) if n <= max_coords
                  else np.sort(rng.choice(n, size=max_coords, replace=False)))
        g_flat = grads[name].reshape(-1)
        worst = 0.0
        for c in coords.tolist():
            keep = flat[c]
            flat[c] = keep + fd_step
            up = loss_fn()
            flat[c] = keep - fd_step
            down = loss_fn()
            flat[c] = keep
            numeric = (up - down) / (2.0 * fd_step)
            analytic = float(g_flat[c])
            denom = max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, abs(analytic - numeric) / denom)
        errs[name] = worst
    return GradCheckReport(max_rel_err=errs, tolerance=tolerance,
                           component=component)


def gradient_check(state: ModelState, split: SplitBundle, cfg: TrainConfig,
                   tolerance: float = 1e-4, component: str = "total",
                   max_coords: int = 200, fd_step: float = 1e-5,
                   seed: int = 0) -> GradCheckReport:
    """Verify the analytic gradients of one loss component (or the total).

    Runs in double precision on the full user roster with frozen noise and
    samples, exactly as the objective is evaluated during training.
    ``component="probe"`` checks the harness itself against the quadratic
    0.5 * sum(theta^2), whose gradient is known exactly.
    """
    cfg64 = replace(cfg, dtype="float64")
    state64 = state.astype(np.float64)
    state64.adam = None

    if component == "probe":
        grads = {name: arr.copy() for name, arr in state64.named_params()}

        def loss_fn():
            return 0.5 * sum(float(np.sum(arr ** 2))
                             for _, arr in state64.named_params())
    else:
        trainer = Trainer(split, cfg64)
        users = np.arange(trainer.num_users, dtype=np.int64)
        batch = trainer.sample_batch(0, 0, users)
        _, grads = trainer.forward_backward(state64, batch, component=component)

        def loss_fn():
            report, _ = trainer.forward_backward(state64, batch,
                                                 component=component,
                                                 compute_grads=False)
            return report.total

    return finite_difference_check(state64, grads, loss_fn, tolerance=tolerance,
                                   max_coords=max_coords, fd_step=fd_step,
                                   seed=seed, component=component)
