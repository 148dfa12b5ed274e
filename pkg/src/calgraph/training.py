"""Alternating adversarial training: SGD on discriminators, then Adam on
generators, decoders and the shared embedding, one minibatch at a time."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import EvalSplit, MultiDomainDataset, corrupt
from .evaluation import evaluate_model
from .model import (
    CalParams,
    LossBreakdown,
    discriminator_loss_and_grads,
    encode_batch,
    generator_loss_and_grads,
    load_checkpoint,
    save_checkpoint,
)
from .numeric import OptimizerState, RngStream, adam_step, gaussian_sample, make_optimizer, sgd_step

log = logging.getLogger(__name__)

TRAIN_STREAMS = ("shuffle", "corruption", "prior")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr_generator: float = 0.001
    lr_discriminator: float = 0.001
    corruption_q: float = 0.2
    lambda_adv: float = 1.0
    latent_dim: int = 200
    hidden_dim: int | None = None
    d_steps_per_g_step: int = 1
    seed: int = 0
    eval_every: int = 0
    early_stop_patience: int | None = None
    topn: int = 10
    include_embedding: bool = True
    saturating: bool = False
    rescale_corruption: bool = False
    precision: str = "float64"
    target_domain: str | None = None

    def __post_init__(self):
        if self.lr_generator <= 0 or self.lr_discriminator <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0.0 <= self.corruption_q < 1.0:
            raise ValueError("corruption_q must lie in [0, 1)")
        if self.epochs < 0 or self.d_steps_per_g_step < 1:
            raise ValueError("epochs must be >= 0 and d_steps_per_g_step >= 1")
        if self.precision not in ("float64", "float32"):
            raise ValueError("precision must be float64 or float32")

    @property
    def dtype(self):
        return np.dtype(self.precision)


@dataclass
class TrainState:
    params: CalParams
    opt_g: OptimizerState
    opt_d: OptimizerState | None
    streams: dict[str, RngStream]
    epoch: int = 0

    def rng_cursor(self) -> dict:
        return {name: s.cursor for name, s in self.streams.items()}

    def restore_cursor(self, cursor: dict) -> None:
        for name, c in cursor.items():
            self.streams[name].restore(c)


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    path: Path | None = None

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def __len__(self):
        return len(self.records)


def generator_keys(params: CalParams) -> list[str]:
    return params.keys_of("G", "F", "V")


def init_state(params: CalParams, cfg: TrainConfig) -> TrainState:
    root = RngStream(cfg.seed, ("train",))
    opt_g = make_optimizer("adam", cfg.lr_generator, {k: params.arrays[k] for k in generator_keys(params)})
    opt_d = None
    if params.variant.use_adversarial:
        opt_d = make_optimizer("sgd", cfg.lr_discriminator, {k: params.arrays[k] for k in params.keys_of("D")})
    return TrainState(params, opt_g, opt_d, {n: root.split(n) for n in TRAIN_STREAMS})


def _check_finite(values: dict, where: str) -> None:
    for name, v in values.items():
        if not math.isfinite(v):
            raise FloatingPointError(f"non-finite loss term {name} at {where}")


def train_epoch(state: TrainState, data: MultiDomainDataset, cfg: TrainConfig):
    """One pass over the shared entities in shuffled minibatches.

    Every batch carries the same entities' rows from each active domain.
    Returns ``(new_state, epoch_mean_breakdown)``.
    """
    params, opt_g, opt_d = state.params, state.opt_g, state.opt_d
    streams = state.streams
    dtype = params.dtype
    n = data.n_shared
    perm = streams["shuffle"].permutation(n)
    parts = []
    for b, lo in enumerate(range(0, n, cfg.batch_size)):
        where = f"epoch {state.epoch + 1} batch {b}"
        users = perm[lo:lo + cfg.batch_size]
        targets = {d: data[d].dense(users, dtype=dtype) for d in params.domains}
        corrupted = {
            d: corrupt(targets[d], cfg.corruption_q, streams["corruption"], cfg.rescale_corruption)
            for d in params.domains
        }

        adv_d = {}
        if params.variant.use_adversarial:
            z_enc = encode_batch(params, users, corrupted)
            d_keys = params.keys_of("D")
            for _ in range(cfg.d_steps_per_g_step):
                z_prior = {
                    d: gaussian_sample(streams["prior"], (len(users), params.latent_dim), dtype)
                    for d in params.domains
                }
                adv_d, grads = discriminator_loss_and_grads(params, z_enc, z_prior)
                _check_finite({f"adv_d/{d}": v for d, v in adv_d.items()}, where)
                new_arrays, opt_d = sgd_step(opt_d, params.arrays, {k: grads[k] for k in d_keys})
                params = params.with_arrays(new_arrays)

        bd, grads = generator_loss_and_grads(
            params, users, targets, corrupted, cfg.lambda_adv, cfg.saturating
        )
        bd.adv_d = adv_d
        _check_finite(bd.record(), where)
        new_arrays, opt_g = adam_step(opt_g, params.arrays, {k: grads[k] for k in generator_keys(params)})
        params = params.with_arrays(new_arrays)
        parts.append(bd)

    new_state = TrainState(params, opt_g, opt_d, streams, state.epoch + 1)
    return new_state, LossBreakdown.mean(parts)


def target_of(params: CalParams, cfg: TrainConfig) -> str:
    if cfg.target_domain is not None and cfg.target_domain in params.domains:
        return cfg.target_domain
    return params.domains[-1]


def save_train_state(path, state: TrainState, meta: dict | None = None) -> None:
    optimizers = {"g": state.opt_g}
    if state.opt_d is not None:
        optimizers["d"] = state.opt_d
    meta = dict(meta or {})
    meta["epoch"] = state.epoch
    save_checkpoint(path, state.params, optimizers, state.rng_cursor(), meta)


def load_train_state(path, cfg: TrainConfig) -> TrainState:
    params, optimizers, header = load_checkpoint(path)
    state = init_state(params, cfg)
    state.opt_g = optimizers["g"]
    state.opt_d = optimizers.get("d")
    if header.get("rng_state"):
        state.restore_cursor(header["rng_state"])
    state.epoch = int(header["meta"].get("epoch", 0))
    return state


def train(
    params: CalParams,
    data: MultiDomainDataset,
    cfg: TrainConfig,
    split: EvalSplit | None = None,
    log_path=None,
    checkpoint_path=None,
    resume_from=None,
):
    """Run ``cfg.epochs`` epochs; return ``(best_params, TrainLog)``.

    With ``eval_every > 0`` the target domain's HR@N is measured on the
    evaluation split on that schedule; the best-scoring parameters are kept
    and training stops after ``early_stop_patience`` evaluations without
    improvement. Without a schedule the final parameters are returned.
    """
    if cfg.eval_every > 0 and split is None:
        raise ValueError("eval_every > 0 needs an evaluation split")
    state = load_train_state(resume_from, cfg) if resume_from else init_state(params, cfg)
    data = data.select(state.params.domains)
    trainlog = TrainLog(path=Path(log_path) if log_path else None)
    target = target_of(state.params, cfg)
    best, best_hr, stale = state.params, -math.inf, 0

    while state.epoch < cfg.epochs:
        t0 = time.perf_counter()
        state, bd = train_epoch(state, data, cfg)
        record = {
            "epoch": state.epoch,
            "loss": bd.record(),
            "rng_cursor": state.rng_cursor(),
        }
        if cfg.eval_every > 0 and state.epoch % cfg.eval_every == 0:
            report = evaluate_model(state.params, data, split, cfg.topn, cfg.include_embedding)
            record["validation"] = report.to_dict()
            hr = report[target].hr
            if hr > best_hr:
                best, best_hr, stale = state.params.copy(), hr, 0
                if checkpoint_path:
                    save_train_state(checkpoint_path, state, {"best_hr": hr, "target": target})
            else:
                stale += 1
        record["wall_clock"] = time.perf_counter() - t0
        trainlog.append(record)
        log.debug("epoch %d total=%.4f", state.epoch, bd.total)
        if cfg.early_stop_patience is not None and stale >= cfg.early_stop_patience:
            log.info("early stop after epoch %d", state.epoch)
            break

    if cfg.eval_every <= 0:
        best = state.params
        if checkpoint_path:
            save_train_state(checkpoint_path, state)
    return best, trainlog


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
