"""Configuration files, checkpoint persistence and the command-line interface.

Config files are flat ``key = value`` text with typed parsing; lists use
commas.  A sha256 of the canonical serialization is embedded in every
artifact, together with the format version and seed, so identical runs
produce byte-identical outputs.  Metrics are emitted as single-line JSON
objects on stdout and mirrored to a file.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import dataset as ds
from .arrayio import read_arrays, write_arrays
from .errors import (CheckpointError, ConfigError, DataError, InvrecError,
                     NumericError)
from .losses import LossWeights
from .synthgen import SynthSpec, generate, save_truth
from .trainer import (COMPONENTS, AdamState, ModelState, TrainConfig, Trainer,
                      gradient_check, init_model)
from .vae import VaeParams

FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"IVRC"
COMMANDS = ("ingest", "train", "eval", "recommend", "synth", "gradcheck", "sweep")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


@dataclass
class RunConfig:
    """Everything a command needs; round-trips losslessly through text."""

    data: str = ""
    behaviors: tuple[str, ...] = ()
    split: str = ds.LEAVE_ONE_OUT
    cold_users: int = 1000
    out: str = "out"
    checkpoint: str = ""
    k: int = 10
    force: bool = False
    eval_every: int = 1
    save_every: int = 0
    sweep: str = "lam"
    train: TrainConfig = field(default_factory=TrainConfig)
    synth_users: int = 1000
    synth_items: int = 500
    synth_behaviors: int = 3
    synth_latent: int = 16
    synth_rho: float = 0.8
    synth_noise: float = 0.1
    synth_densities: tuple[float, ...] = (0.03, 0.02, 0.01)

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(num_users=self.synth_users, num_items=self.synth_items,
                         num_behaviors=self.synth_behaviors,
                         latent_dim=self.synth_latent,
                         invariant_strength=self.synth_rho,
                         noise_scale=self.synth_noise,
                         densities=self.synth_densities, seed=self.train.seed)


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_str_list(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _parse_float_list(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(_fmt(v) for v in value)
    return str(value)


# key -> (accessor path, parser).  Paths address RunConfig, its TrainConfig,
# the loss weights and the grids.
_FIELDS: dict[str, tuple[tuple, object]] = {
    "data": (("data",), str),
    "behaviors": (("behaviors",), _parse_str_list),
    "split": (("split",), str),
    "cold_users": (("cold_users",), int),
    "out": (("out",), str),
    "checkpoint": (("checkpoint",), str),
    "k": (("k",), int),
    "force": (("force",), _parse_bool),
    "eval_every": (("eval_every",), int),
    "save_every": (("save_every",), int),
    "sweep": (("sweep",), str),
    "d": (("train", "d"), int),
    "layers": (("train", "layers"), int),
    "lr": (("train", "lr"), float),
    "batch": (("train", "batch"), int),
    "epochs": (("train", "epochs"), int),
    "seed": (("train", "seed"), int),
    "neg_k": (("train", "neg_k"), int),
    "env_pair_sample": (("train", "env_pair_sample"), int),
    "dtype": (("train", "dtype"), str),
    "exclude_all_behaviors": (("train", "exclude_all_behaviors"), _parse_bool),
    "freeze_pretrain_epochs": (("train", "freeze_pretrain_epochs"), int),
    "bypass_vae": (("train", "bypass_vae"), _parse_bool),
    "validate": (("train", "validate"), _parse_bool),
    "patience": (("train", "patience"), int),
    "eval_k": (("train", "eval_k"), int),
    "lam": (("train", "weights", "lam"), float),
    "alpha": (("train", "weights", "alpha"), float),
    "beta": (("train", "weights", "beta"), float),
    "gamma": (("train", "weights", "gamma"), float),
    "tau": (("train", "weights", "tau"), float),
    "grid.lam": (("train", "grids", "lam"), _parse_float_list),
    "grid.alpha": (("train", "grids", "alpha"), _parse_float_list),
    "grid.beta": (("train", "grids", "beta"), _parse_float_list),
    "grid.gamma": (("train", "grids", "gamma"), _parse_float_list),
    "grid.tau": (("train", "grids", "tau"), _parse_float_list),
    "synth.users": (("synth_users",), int),
    "synth.items": (("synth_items",), int),
    "synth.behaviors": (("synth_behaviors",), int),
    "synth.latent": (("synth_latent",), int),
    "synth.rho": (("synth_rho",), float),
    "synth.noise": (("synth_noise",), float),
    "synth.densities": (("synth_densities",), _parse_float_list),
}


def _get_field(cfg: RunConfig, path: tuple):
    obj = cfg
    for part in path[:-1]:
        obj = getattr(obj, part)
    last = path[-1]
    if isinstance(obj, dict):
        return obj[last]
    if last in getattr(obj, "__dict__", {}) or hasattr(obj, last):
        return getattr(obj, last)
    raise KeyError(last)


def _set_field(cfg: RunConfig, path: tuple, value):
    obj = cfg
    for part in path[:-1]:
        nxt = getattr(obj, part)
        if isinstance(nxt, LossWeights):
            # frozen dataclass: rebuild with the updated field
            updated = dataclasses.replace(nxt, **{path[-1]: value})
            setattr(obj, part, updated)
            return
        obj = nxt
    if isinstance(obj, dict):
        obj[path[-1]] = value
    else:
        setattr(obj, path[-1], value)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse flat ``key = value`` lines on top of defaults."""
    cfg = base if base is not None else RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown config field '{key}'")
        path, parser = _FIELDS[key]
        try:
            _set_field(cfg, path, parser(val))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"config field '{key}': {exc}") from None
    return cfg


def config_text(cfg: RunConfig) -> str:
    """Canonical serialization: every known key, registry order."""
    lines = []
    for key, (path, _) in _FIELDS.items():
        lines.append(f"{key} = {_fmt(_get_field(cfg, path))}")
    return "\n".join(lines) + "\n"


# Runtime-only knobs: changing them must not invalidate a checkpoint, so they
# stay out of the content hash (training length, output paths, cadences).
_RUNTIME_KEYS = frozenset({"epochs", "out", "checkpoint", "force", "k",
                           "eval_every", "save_every", "sweep"})


def config_hash(cfg: RunConfig) -> str:
    lines = [f"{key} = {_fmt(_get_field(cfg, path))}"
             for key, (path, _) in _FIELDS.items() if key not in _RUNTIME_KEYS]
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None


# --- checkpoints -------------------------------------------------------------

def save_checkpoint(path, state: ModelState, cfg_hash: str, epoch: int, seed: int):
    """Versioned binary snapshot of all parameters and optimizer moments."""
    meta = {"config_hash": cfg_hash, "epoch": epoch, "seed": seed}
    arrays: dict[str, np.ndarray] = {}
    for name, arr in state.named_params():
        arrays[name] = arr
    if state.adam is not None:
        meta["adam_step"] = state.adam.step
        for name, arr in state.adam.m.items():
            arrays[f"adam.m.{name}"] = arr
        for name, arr in state.adam.v.items():
            arrays[f"adam.v.{name}"] = arr
    write_arrays(path, CHECKPOINT_MAGIC, FORMAT_VERSION, meta, arrays)


def load_checkpoint(path, expect_hash: str | None = None, force: bool = False
                    ) -> tuple[ModelState, dict]:
    """Rebuild a model state; Adam moments are optional (eval-only loads)."""
    _, meta, arrays = read_arrays(path, CHECKPOINT_MAGIC, FORMAT_VERSION)
    if expect_hash is not None and meta.get("config_hash") != expect_hash:
        if not force:
            raise CheckpointError(
                f"{path}: config hash mismatch "
                f"({meta.get('config_hash')} != {expect_hash}); use --force to load")
    vae_arrays = {k.split(".", 1)[1]: v for k, v in arrays.items()
                  if k.startswith("vae.") and not k.startswith("vae.adam")}
    state = ModelState(user_emb=arrays["user_emb"], item_emb=arrays["item_emb"],
                       vae=VaeParams(**vae_arrays))
    m = {k[len("adam.m."):]: v for k, v in arrays.items()
         if k.startswith("adam.m.")}
    if m:
        v = {k[len("adam.v."):]: val for k, val in arrays.items()
             if k.startswith("adam.v.")}
        state.adam = AdamState(m=m, v=v, step=int(meta.get("adam_step", 0)))
    return state, meta


# --- shared command plumbing --------------------------------------------------

class _Emitter:
    """Writes JSON lines to stdout and mirrors them to a file."""

    def __init__(self, path=None, mode="w"):
        self.fh = open(path, mode, encoding="utf-8") if path else None

    def emit(self, obj: dict):
        line = json.dumps(obj, sort_keys=True)
        print(line)
        if self.fh:
            self.fh.write(line + "\n")
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


def _meta_line(cfg: RunConfig) -> dict:
    return {"format_version": FORMAT_VERSION, "config_hash": config_hash(cfg),
            "seed": cfg.train.seed}


def _load_split(cfg: RunConfig) -> ds.SplitBundle:
    if not cfg.data:
        raise ConfigError("config field 'data' is required for this command")
    log = ds.load_interactions(cfg.data, cfg.behaviors or None)
    log = ds.deduplicate(log)
    target = log.num_behaviors - 1
    if cfg.split == ds.LEAVE_ONE_OUT:
        return ds.leave_one_out_split(log, target)
    if cfg.split == ds.COLD_START:
        return ds.cold_start_split(log, target, cfg.cold_users, cfg.train.seed)
    raise ConfigError(f"unknown split mode '{cfg.split}'")


def _checkpoint_path(cfg: RunConfig) -> str:
    return os.path.join(cfg.out, "checkpoint.bin")


# --- commands -----------------------------------------------------------------

def cmd_ingest(cfg: RunConfig) -> int:
    bundle = _load_split(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    ds.save_split(bundle, cfg.out, extra_meta=_meta_line(cfg))
    log = bundle.train
    if log.user_labels is not None:
        with open(os.path.join(cfg.out, "mapping.tsv"), "w", encoding="utf-8") as fh:
            fh.write("# kind\tdense_id\toriginal_id\n")
            for dense, label in enumerate(log.user_labels):
                fh.write(f"user\t{dense}\t{label}\n")
            for dense, label in enumerate(log.item_labels):
                fh.write(f"item\t{dense}\t{label}\n")
    emitter = _Emitter()
    emitter.emit({"command": "ingest", **_meta_line(cfg),
                  "users": log.num_users, "items": log.num_items,
                  "behaviors": log.num_behaviors,
                  "train_records": len(log), "test_users": len(bundle.test_users)})
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    bundle = _load_split(cfg)
    trainer = Trainer(bundle, cfg.train)
    resume_epoch = 0
    if cfg.checkpoint:
        state, meta = load_checkpoint(cfg.checkpoint,
                                      expect_hash=config_hash(cfg),
                                      force=cfg.force)
        resume_epoch = int(meta.get("epoch", -1)) + 1
    else:
        state = init_model(trainer.num_users, trainer.num_items, cfg.train)
    os.makedirs(cfg.out, exist_ok=True)
    metrics_path = os.path.join(cfg.out, "metrics.jsonl")
    emitter = _Emitter(metrics_path, mode="a" if resume_epoch else "w")
    if not resume_epoch:
        emitter.emit(_meta_line(cfg))

    last_epoch = resume_epoch - 1

    def on_epoch(epoch, report, val):
        nonlocal last_epoch
        last_epoch = epoch
        line = {"epoch": epoch, "hr10": None, "ndcg10": None}
        if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            result = trainer.evaluate(state, k=10)
            line["hr10"] = result.hr
            line["ndcg10"] = result.ndcg
        if val is not None:
            line["val_hr"] = val.hr
        line.update(report.as_dict())
        emitter.emit(line)
        if cfg.save_every and (epoch + 1) % cfg.save_every == 0:
            save_checkpoint(_checkpoint_path(cfg), state, config_hash(cfg),
                            epoch, cfg.train.seed)

    try:
        trainer.train(state, epochs=cfg.train.epochs, start_epoch=resume_epoch,
                      on_epoch=on_epoch)
        save_checkpoint(_checkpoint_path(cfg), state, config_hash(cfg),
                        last_epoch, cfg.train.seed)
    finally:
        emitter.close()
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    if not cfg.checkpoint:
        raise ConfigError("eval requires --checkpoint")
    bundle = _load_split(cfg)
    trainer = Trainer(bundle, cfg.train)
    state, meta = load_checkpoint(cfg.checkpoint, expect_hash=config_hash(cfg),
                                  force=cfg.force)
    result = trainer.evaluate(state, k=cfg.k)
    os.makedirs(cfg.out, exist_ok=True)
    emitter = _Emitter(os.path.join(cfg.out, "eval.jsonl"))
    emitter.emit(_meta_line(cfg))
    emitter.emit({"epoch": int(meta.get("epoch", -1)), "mode": bundle.mode,
                  "k": result.k, "hr": result.hr, "ndcg": result.ndcg,
                  "n_users": result.n_users})
    emitter.close()
    return EXIT_OK


def cmd_recommend(cfg: RunConfig) -> int:
    from .recommender import top_k

    if not cfg.checkpoint:
        raise ConfigError("recommend requires --checkpoint")
    bundle = _load_split(cfg)
    trainer = Trainer(bundle, cfg.train)
    state, _ = load_checkpoint(cfg.checkpoint, expect_hash=config_hash(cfg),
                               force=cfg.force)
    scoring = trainer.scoring_state(state)
    train = bundle.train
    user_labels = train.user_labels or tuple(str(u) for u in range(train.num_users))
    item_labels = train.item_labels or tuple(str(i) for i in range(train.num_items))
    if cfg.train.exclude_all_behaviors:
        mask = np.ones(len(train), dtype=bool)
    else:
        mask = train.behaviors == bundle.target_behavior
    excl: dict[int, list[int]] = {}
    for u, i in zip(train.users[mask].tolist(), train.items[mask].tolist()):
        excl.setdefault(u, []).append(i)

    os.makedirs(cfg.out, exist_ok=True)
    meta = _meta_line(cfg)
    path = os.path.join(cfg.out, "recommendations.tsv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
        for u in range(train.num_users):
            items = top_k(u, cfg.k, excl.get(u, ()), scoring)
            scores = [float(scoring.item_agg[i] @ (scoring.invariant_agg[u]
                                                   + scoring.specific_target[u]))
                      for i in items]
            for rank, (i, s) in enumerate(zip(items, scores), start=1):
                fh.write(f"{user_labels[u]}\t{rank}\t{item_labels[i]}\t{s!r}\n")
    _Emitter().emit({"command": "recommend", **meta,
                     "users": train.num_users, "k": cfg.k, "path": path})
    return EXIT_OK


def cmd_synth(cfg: RunConfig) -> int:
    spec = cfg.synth_spec()
    log, truth = generate(spec)
    os.makedirs(cfg.out, exist_ok=True)
    meta = _meta_line(cfg)
    names = (cfg.behaviors if len(cfg.behaviors) == log.num_behaviors else None)
    ds.save_interactions(log, os.path.join(cfg.out, "synthetic.tsv"),
                         behavior_names=names, extra_meta=meta)
    save_truth(truth, os.path.join(cfg.out, "truth.bin"), meta=meta)
    _Emitter().emit({"command": "synth", **meta, "records": len(log),
                     "users": log.num_users, "items": log.num_items,
                     "behaviors": log.num_behaviors})
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    if cfg.data:
        bundle = _load_split(cfg)
        train_cfg = cfg.train
    else:
        # default probe instance: tiny planted dataset, narrow embeddings
        spec = SynthSpec(num_users=4, num_items=6, num_behaviors=2,
                         latent_dim=2, invariant_strength=0.7, noise_scale=0.2,
                         densities=(0.5, 0.4), seed=cfg.train.seed)
        log, _ = generate(spec)
        bundle = ds.SplitBundle(train=log,
                                test_users=np.empty(0, dtype=np.int64),
                                test_items=np.empty(0, dtype=np.int64),
                                target_behavior=log.num_behaviors - 1,
                                mode=ds.LEAVE_ONE_OUT)
        train_cfg = dataclasses.replace(cfg.train, d=8)
    state = init_model(bundle.train.num_users, bundle.train.num_items, train_cfg)
    emitter = _Emitter()
    failed = False
    for component in ("probe",) + COMPONENTS + ("total",):
        report = gradient_check(state, bundle, train_cfg, component=component,
                                seed=cfg.train.seed)
        worst_block, worst = report.worst
        emitter.emit({"component": component, "ok": report.ok,
                      "worst_block": worst_block, "max_rel_err": worst,
                      "tolerance": report.tolerance})
        failed = failed or not report.ok
    if failed:
        raise NumericError("gradient check failed; see per-component report")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    name = cfg.sweep
    if name not in cfg.train.grids:
        raise ConfigError(f"unknown sweep parameter '{name}' "
                          f"(choose from {sorted(cfg.train.grids)})")
    bundle = _load_split(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    emitter = _Emitter(os.path.join(cfg.out, "sweep.jsonl"))
    emitter.emit(_meta_line(cfg))
    rows = []
    for value in cfg.train.grids[name]:
        weights = dataclasses.replace(cfg.train.weights, **{name: value})
        train_cfg = dataclasses.replace(cfg.train, weights=weights)
        trainer = Trainer(bundle, train_cfg)
        state = init_model(trainer.num_users, trainer.num_items, train_cfg)
        reports = trainer.train(state)
        result = trainer.evaluate(state, k=10)
        row = {"param": name, "value": value, "hr10": result.hr,
               "ndcg10": result.ndcg,
               "final_total": reports[-1].total if reports else None}
        rows.append(row)
        emitter.emit(row)
    emitter.close()
    print(f"\nsweep over {name}:")
    print(f"{'value':>10}  {'HR@10':>8}  {'NDCG@10':>8}")
    for row in rows:
        print(f"{row['value']:>10}  {row['hr10']:>8.4f}  {row['ndcg10']:>8.4f}")
    return EXIT_OK


# --- entry point ----------------------------------------------------------------

def run(command: str, cfg: RunConfig) -> int:
    """Dispatch one command; raises package errors for the CLI to map."""
    handlers = {"ingest": cmd_ingest, "train": cmd_train, "eval": cmd_eval,
                "recommend": cmd_recommend, "synth": cmd_synth,
                "gradcheck": cmd_gradcheck, "sweep": cmd_sweep}
    if command not in handlers:
        raise ConfigError(f"unknown command '{command}' "
                          f"(choose from {', '.join(COMMANDS)})")
    return handlers[command](cfg)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="invrec",
        description="Multi-behavior recommender with invariant preference learning")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", metavar="PATH", help="key = value config file")
    parser.add_argument("--seed", type=int, metavar="N")
    parser.add_argument("--out", metavar="DIR")
    parser.add_argument("--checkpoint", metavar="PATH")
    parser.add_argument("--k", type=int, metavar="N")
    parser.add_argument("--force", action="store_true")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
        if args.out:
            cfg.out = args.out
        if args.checkpoint:
            cfg.checkpoint = args.checkpoint
        if args.k is not None:
            cfg.k = args.k
        if args.force:
            cfg.force = True
        return run(args.command, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except InvrecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
