"""Command-line entry point: ``calgraph <subcommand> [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, apply_overrides, load_config
from .data import (
    SynthConfig,
    align_shared_entities,
    format_summary,
    gen_synthetic,
    load_dataset,
    load_interactions,
    load_split,
    save_dataset,
    save_split,
)
from .evaluation import csv_text, evaluate_model
from .experiments import (
    MULTIDOMAIN_COLUMNS,
    active_domains,
    multidomain,
    prepare,
    sweep_embedding,
    sweep_sparsity,
)
from .gradcheck import gradcheck_all
from .model import build_model, get_variant, load_checkpoint
from .training import init_state, save_train_state, train

log = logging.getLogger("calgraph")


def _csv_list(conv):
    return lambda text: tuple(conv(t) for t in text.split(",") if t)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--variant", choices=["cal", "aaepp", "aae", "cdae"])
    common.add_argument("--topn", type=int)
    common.add_argument("--data", help="dataset snapshot (dataset.json)")
    common.add_argument("--target", dest="target_domain", help="target domain (default: last)")
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch-size", dest="batch_size", type=int)
    common.add_argument("--latent-dim", dest="latent_dim", type=int)
    common.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    common.add_argument("--fraction", type=float, help="keep this fraction of target-domain training links")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="calgraph", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="align interaction files into a snapshot")
    p.add_argument("--input", action="append", default=[], metavar="NAME=PATH",
                   help="one interaction file per domain (repeat)")
    p.add_argument("--format", choices=["tsv", "csv"])
    p.add_argument("--threshold", dest="rating_threshold", type=float)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic block-model snapshot")
    p.add_argument("--n-shared", type=int)
    p.add_argument("--domains", dest="n_domains", type=int)
    p.add_argument("--items", dest="items_per_domain", type=_csv_list(int))
    p.add_argument("--clusters", dest="n_clusters", type=int)
    p.add_argument("--p-in", type=float)
    p.add_argument("--p-out", type=float)

    sub.add_parser("train", parents=[common], help="train one variant and evaluate it")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", help="split file written by train (default: regenerate from seed)")
    p.add_argument("--no-embedding", action="store_true", help="score without the shared embedding")
    p.add_argument("--uncut-mrr", action="store_true", help="do not cut MRR at the top-N cutoff")

    p = sub.add_parser("sweep-sparsity", parents=[common], help="metrics versus target-domain link fraction")
    p.add_argument("--fractions", type=_csv_list(float))
    p.add_argument("--variants", type=_csv_list(str))
    p.add_argument("--seeds", type=_csv_list(int))

    p = sub.add_parser("sweep-embedding", parents=[common], help="metrics versus latent size")
    p.add_argument("--dims", type=_csv_list(int))
    p.add_argument("--variants", type=_csv_list(str))
    p.add_argument("--seeds", type=_csv_list(int))

    p = sub.add_parser("multidomain", parents=[common], help="pairwise versus all-domain CAL")
    p.add_argument("--seeds", type=_csv_list(int))

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of all gradients")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for key in ("seed", "out", "variant", "topn", "target_domain", "fraction", "rating_threshold",
                "epochs", "batch_size", "latent_dim", "hidden_dim", "format",
                "variants", "fractions", "dims", "seeds"):
        if hasattr(args, key):
            overrides[key] = getattr(args, key)
    if getattr(args, "data", None):
        if cfg.synth is not None or cfg.paths:
            log.info("--data %s replaces the configured data source", args.data)
            cfg = dataclasses.replace(cfg, synth=None, paths=None)
        overrides["snapshot"] = args.data
    return apply_overrides(cfg, **overrides)


def resolve_data(cfg: RunConfig):
    """Return ``(dataset, name)`` from a snapshot, raw files or the synthetic generator."""
    if cfg.snapshot:
        return load_dataset(cfg.snapshot), cfg.dataset_name or Path(cfg.snapshot).parent.name or "dataset"
    if cfg.paths:
        lists = [load_interactions(p, cfg.format, cfg.rating_threshold) for p in cfg.paths.values()]
        return align_shared_entities(lists, list(cfg.paths)), cfg.dataset_name or "dataset"
    synth = cfg.synth or SynthConfig(seed=cfg.seed)
    return gen_synthetic(synth), cfg.dataset_name or "synthetic"


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _target(cfg: RunConfig, data) -> str:
    target = cfg.target_domain or data.names[-1]
    data.index(target)
    return target


def cmd_ingest(args, cfg: RunConfig) -> int:
    paths = dict(cfg.paths or {})
    for item in args.input:
        name, sep, path = item.partition("=")
        if not sep:
            raise ValueError(f"--input expects NAME=PATH, got {item!r}")
        paths[name] = path
    if len(paths) < 2:
        raise ValueError("ingest needs at least two domain files")
    lists = [load_interactions(p, cfg.format, cfg.rating_threshold) for p in paths.values()]
    data = align_shared_entities(lists, list(paths))
    out = _outdir(cfg)
    save_dataset(data, out / "dataset.json")
    summary = format_summary(data)
    (out / "summary.txt").write_text(summary + "\n", encoding="utf-8")
    print(summary)
    return 0


def cmd_synth(args, cfg: RunConfig) -> int:
    base = cfg.synth or SynthConfig(seed=cfg.seed)
    kw = {k: getattr(args, k) for k in ("n_shared", "n_domains", "items_per_domain", "n_clusters", "p_in", "p_out")
          if getattr(args, k) is not None}
    if "items_per_domain" in kw and len(kw["items_per_domain"]) == 1:
        kw["items_per_domain"] = kw["items_per_domain"][0]
    if args.seed is not None:
        kw["seed"] = args.seed
    synth = SynthConfig(**{**base.__dict__, **kw})
    data = gen_synthetic(synth)
    out = _outdir(cfg)
    save_dataset(data, out / "dataset.json")
    print(format_summary(data))
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    data, name = resolve_data(cfg)
    target = _target(cfg, data)
    tcfg = cfg.train_config()
    train_data, split = prepare(data, cfg.seed, target, cfg.fraction, cfg.n_negatives)
    out = _outdir(cfg)
    save_split(split, out / "split.json")
    names = active_domains(cfg.variant, train_data, target)
    sub = train_data.select(names)
    params = build_model(cfg.variant, {d: sub[d].n_items for d in names}, sub.n_shared,
                         tcfg.latent_dim, tcfg.hidden_dim, init_seed=cfg.seed, dtype=tcfg.dtype)
    log_path = out / "train_log.jsonl"
    log_path.unlink(missing_ok=True)
    ckpt = out / "checkpoint.npz"
    best, trainlog = train(params, sub, tcfg, split.select(names), log_path=log_path, checkpoint_path=ckpt)
    if not ckpt.exists():
        save_train_state(ckpt, init_state(best, tcfg))
    _annotate_checkpoint(ckpt, cfg, target, name)
    report = evaluate_model(best, sub, split, cfg.topn, cfg.include_embedding, cfg.cut_mrr)
    _write_report(out, report, cfg, name, get_variant(cfg.variant).kind, tcfg.latent_dim)
    print(report.to_json())
    return 0


def _annotate_checkpoint(path: Path, cfg: RunConfig, target: str, name: str) -> None:
    """Record how the evaluation split was made so ``eval`` can rebuild it."""
    with np.load(path, allow_pickle=False) as z:
        payload = {k: z[k] for k in z.files}
    header = json.loads(str(payload["__header__"]))
    header["meta"].update(
        seed=cfg.seed, target=target, fraction=cfg.fraction, n_negatives=cfg.n_negatives, dataset=name
    )
    payload["__header__"] = np.array(json.dumps(header))
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def _write_report(out: Path, report, cfg: RunConfig, name: str, variant: str, latent_dim: int) -> None:
    (out / "metrics.json").write_text(report.to_json() + "\n", encoding="utf-8")
    rows = report.csv_rows(name, variant, cfg.fraction, latent_dim, cfg.seed)
    (out / "metrics.csv").write_text(csv_text(rows), encoding="utf-8")


def cmd_eval(args, cfg: RunConfig) -> int:
    params, _, header = load_checkpoint(args.checkpoint)
    meta = header.get("meta", {})
    data, name = resolve_data(cfg)
    seed = meta.get("seed", cfg.seed)
    target = meta.get("target", cfg.target_domain or params.domains[-1])
    fraction = meta.get("fraction", cfg.fraction)
    if args.split:
        train_data, _ = prepare(data, seed, target, fraction, meta.get("n_negatives", cfg.n_negatives))
        split = load_split(args.split)
    else:
        train_data, split = prepare(data, seed, target, fraction, meta.get("n_negatives", cfg.n_negatives))
    report = evaluate_model(params, train_data, split, cfg.topn, not args.no_embedding, not args.uncut_mrr)
    if args.out:
        out = _outdir(cfg)
        _write_report(out, report, apply_overrides(cfg, seed=seed, fraction=fraction),
                      meta.get("dataset", name), params.variant.kind, params.latent_dim)
    print(report.to_json())
    return 0


def _write_rows(path: Path, rows, columns=None) -> None:
    text = csv_text(rows) if columns is None else csv_text(rows, columns)
    path.write_text(text, encoding="utf-8")
    print(f"wrote {len(rows)} rows to {path}")


def cmd_sweep_sparsity(args, cfg: RunConfig) -> int:
    data, name = resolve_data(cfg)
    target = _target(cfg, data)
    rows = sweep_sparsity(data, cfg.variants, cfg.fractions, cfg.seeds, target, cfg.train_config(), name)
    _write_rows(_outdir(cfg) / "sparsity.csv", rows)
    return 0


def cmd_sweep_embedding(args, cfg: RunConfig) -> int:
    data, name = resolve_data(cfg)
    target = _target(cfg, data)
    rows = sweep_embedding(data, cfg.variants, cfg.dims, cfg.seeds, target, cfg.train_config(),
                           cfg.fraction, name)
    _write_rows(_outdir(cfg) / "embedding.csv", rows)
    return 0


def cmd_multidomain(args, cfg: RunConfig) -> int:
    data, name = resolve_data(cfg)
    if len(data.names) < 3:
        raise ValueError(f"multidomain needs a snapshot with at least 3 domains, got {len(data.names)}")
    sparse = cfg.target_domain or (data.names[-1] if cfg.fraction < 1.0 else None)
    rows = multidomain(data, cfg.seeds, cfg.train_config(), sparse, cfg.fraction, name)
    _write_rows(_outdir(cfg) / "multidomain.csv", rows, MULTIDOMAIN_COLUMNS)
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    reports = gradcheck_all(seed=cfg.seed, h=args.step, tol=args.tol)
    ok = True
    for variant, report in reports.items():
        print(f"[{variant}]")
        for line in report.lines():
            print("  " + line)
        for group, coord in report.nonfinite:
            print(f"  {group}: non-finite loss at {coord}")
        ok &= report.passed
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-sparsity": cmd_sweep_sparsity,
    "sweep-embedding": cmd_sweep_embedding,
    "multidomain": cmd_multidomain,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (ValueError, KeyError, IndexError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
