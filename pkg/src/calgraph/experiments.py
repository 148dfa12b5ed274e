"""Ablation, sparsity, embedding-size and multi-domain experiments.

Every run derives its randomness from one seed: the evaluation split uses
the ``negatives`` stream, sparsification the ``subsample`` stream, and model
initialisation and training their own streams. Runs for different variants
under one seed therefore see identical data.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import replace
from typing import Sequence

from .data import EvalSplit, MultiDomainDataset, leave_one_out_split, subsample_links
from .evaluation import MetricsReport, evaluate_model
from .model import get_variant, build_model
from .numeric import RngStream
from .training import TrainConfig, train

log = logging.getLogger(__name__)

MULTIDOMAIN_COLUMNS = (
    "dataset", "configuration", "domain", "variant", "fraction", "latent_dim", "seed",
    "n_evaluated", "hr", "ndcg", "mrr",
)


def prepare(data: MultiDomainDataset, seed: int, target: str | None = None, fraction: float = 1.0,
            n_negatives: int = 99) -> tuple[MultiDomainDataset, EvalSplit]:
    """Leave-one-out split, then sparsify the target domain's training links."""
    root = RngStream(seed)
    train_data, split = leave_one_out_split(data, n_negatives, root.split("negatives"))
    if fraction < 1.0:
        if target is None:
            raise ValueError("subsampling needs a target domain")
        train_data = subsample_links(train_data, target, fraction, root.split("subsample"))
    return train_data, split


def active_domains(variant, data: MultiDomainDataset, target: str) -> list[str]:
    return [target] if get_variant(variant).single_domain else list(data.names)


def run_variant(train_data: MultiDomainDataset, split: EvalSplit, variant, target: str, cfg: TrainConfig,
                cut_mrr: bool = True, **train_kw) -> MetricsReport:
    """Build, train and evaluate one model. Returns metrics for its domains."""
    names = active_domains(variant, train_data, target)
    sub = train_data.select(names)
    params = build_model(
        variant,
        {d: sub[d].n_items for d in names},
        sub.n_shared,
        cfg.latent_dim,
        cfg.hidden_dim,
        init_seed=cfg.seed,
        dtype=cfg.dtype,
    )
    cfg = replace(cfg, target_domain=target)
    best, _ = train(params, sub, cfg, split.select(names), **train_kw)
    return evaluate_model(best, sub, split, cfg.topn, cfg.include_embedding, cut_mrr)


def sweep_sparsity(data: MultiDomainDataset, variants: Sequence[str], fractions: Sequence[float],
                   seeds: Sequence[int], target: str, cfg: TrainConfig, dataset: str = "") -> list[dict]:
    """One row per (variant, fraction, seed) with target-domain metrics."""
    rows = []
    for seed, fraction in itertools.product(seeds, fractions):
        train_data, split = prepare(data, seed, target, fraction)
        for variant in variants:
            report = run_variant(train_data, split, variant, target, replace(cfg, seed=seed))
            rows.extend(r for r in report.csv_rows(dataset, get_variant(variant).kind, fraction, cfg.latent_dim, seed)
                        if r["domain"] == target)
            log.info("sparsity %s f=%s seed=%s hr=%.4f", variant, fraction, seed, report[target].hr)
    return rows


def sweep_embedding(data: MultiDomainDataset, variants: Sequence[str], dims: Sequence[int],
                    seeds: Sequence[int], target: str, cfg: TrainConfig, fraction: float = 1.0,
                    dataset: str = "", scale_hidden: bool = False) -> list[dict]:
    """One row per (variant, latent_dim, seed) with target-domain metrics.

    The hidden width stays at ``cfg.hidden_dim`` unless ``scale_hidden``
    ties it to the latent width.
    """
    rows = []
    for seed in seeds:
        train_data, split = prepare(data, seed, target, fraction)
        for dim, variant in itertools.product(dims, variants):
            hidden = dim if scale_hidden or cfg.hidden_dim is None else cfg.hidden_dim
            run_cfg = replace(cfg, seed=seed, latent_dim=dim, hidden_dim=hidden)
            report = run_variant(train_data, split, variant, target, run_cfg)
            rows.extend(r for r in report.csv_rows(dataset, get_variant(variant).kind, fraction, dim, seed)
                        if r["domain"] == target)
    return rows


def domain_configurations(names: Sequence[str]) -> list[tuple[str, ...]]:
    """Every pair of domains, then all of them together."""
    pairs = list(itertools.combinations(names, 2))
    return pairs + [tuple(names)]


def multidomain(data: MultiDomainDataset, seeds: Sequence[int], cfg: TrainConfig, sparse_domain: str | None = None,
                fraction: float = 1.0, dataset: str = "") -> list[dict]:
    """Train CAL on every domain pair and on all domains; report each domain.

    Rows for a domain outside a configuration have empty metric cells.
    """
    if len(data.names) < 3:
        raise ValueError(f"multi-domain comparison needs at least 3 domains, got {len(data.names)}")
    rows = []
    for seed in seeds:
        train_data, split = prepare(data, seed, sparse_domain, fraction)
        for conf in domain_configurations(data.names):
            sub = train_data.select(conf)
            target = sparse_domain if sparse_domain in conf else conf[-1]
            report = run_variant(sub, split, "cal", target, replace(cfg, seed=seed))
            label = "+".join(conf)
            for d in data.names:
                row = {
                    "dataset": dataset, "configuration": label, "domain": d, "variant": "cal",
                    "fraction": fraction if d == sparse_domain else 1.0,
                    "latent_dim": cfg.latent_dim, "seed": seed,
                    "n_evaluated": "", "hr": "", "ndcg": "", "mrr": "",
                }
                if d in report.domains:
                    m = report[d]
                    row.update(n_evaluated=m.n_evaluated, hr=m.hr, ndcg=m.ndcg, mrr=m.mrr)
                rows.append(row)
    return rows
