"""Run configuration: a flat ``key = value`` file with one section per concern.

Example::

    [data]
    # either a snapshot / interaction files, or a [synth] section
    snapshot = runs/douban/dataset.json

    [model]
    variant = cal
    latent_dim = 200

    [train]
    epochs = 50
    batch_size = 64

Unknown keys are rejected so typos surface immediately.
"""

from __future__ import annotations

import configparser
import dataclasses
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import SynthConfig
from .model import get_variant
from .training import TrainConfig

log = logging.getLogger(__name__)

SECTIONS = ("data", "synth", "model", "train", "eval", "run", "sweep")


@dataclass
class RunConfig:
    # [data]
    snapshot: str | None = None
    paths: dict[str, str] | None = None
    format: str | None = None
    rating_threshold: float = 0.0
    # [synth]
    synth: SynthConfig | None = None
    # [model]
    variant: str = "cal"
    # [train] (also holds latent_dim / hidden_dim from [model])
    train: TrainConfig = field(default_factory=TrainConfig)
    # [eval]
    topn: int = 10
    n_negatives: int = 99
    include_embedding: bool = True
    cut_mrr: bool = True
    target_domain: str | None = None
    fraction: float = 1.0
    # [run]
    seed: int = 0
    out: str = "runs"
    dataset_name: str = ""
    # [sweep]
    variants: tuple[str, ...] = ("cal", "aaepp", "aae", "cdae")
    fractions: tuple[float, ...] = (1.0, 0.8, 0.6, 0.4, 0.2)
    dims: tuple[int, ...] = (100, 200, 300, 400, 500)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self):
        sources = [self.snapshot is not None or bool(self.paths), self.synth is not None]
        if all(sources):
            raise ValueError("configure either data files/snapshot or a [synth] section, not both")
        get_variant(self.variant)

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(
            self.train,
            seed=self.seed,
            topn=self.topn,
            include_embedding=self.include_embedding,
            target_domain=self.target_domain,
        )


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(conv):
    def parse(text):
        text = text.strip()
        return None if text.lower() in ("", "none", "inf") else conv(text)
    return parse


def _tuple(conv):
    return lambda text: tuple(conv(t.strip()) for t in text.split(",") if t.strip())


def _paths(text: str) -> dict[str, str]:
    out = {}
    for part in text.split(","):
        name, sep, path = part.strip().partition(":")
        if not sep:
            raise ValueError(f"data path entry {part!r} must look like name:path")
        out[name.strip()] = path.strip()
    return out


def _items(text: str):
    vals = _tuple(int)(text)
    return vals[0] if len(vals) == 1 else vals


TRAIN_PARSERS = {
    "epochs": int, "batch_size": int, "lr_generator": float, "lr_discriminator": float,
    "corruption_q": float, "lambda_adv": float, "latent_dim": int, "hidden_dim": _optional(int),
    "d_steps_per_g_step": int, "eval_every": int, "early_stop_patience": _optional(int),
    "saturating": _bool, "rescale_corruption": _bool, "precision": str,
}
SYNTH_PARSERS = {
    "n_shared": int, "n_domains": int, "items_per_domain": _items, "n_clusters": int,
    "p_in": float, "p_out": float, "seed": int,
}
TOP_PARSERS = {
    ("data", "snapshot"): _optional(str),
    ("data", "paths"): _paths,
    ("data", "format"): _optional(str),
    ("data", "rating_threshold"): float,
    ("model", "variant"): str,
    ("eval", "topn"): int,
    ("eval", "n_negatives"): int,
    ("eval", "include_embedding"): _bool,
    ("eval", "cut_mrr"): _bool,
    ("eval", "target_domain"): _optional(str),
    ("eval", "fraction"): float,
    ("run", "seed"): int,
    ("run", "out"): str,
    ("run", "dataset_name"): str,
    ("sweep", "variants"): _tuple(str),
    ("sweep", "fractions"): _tuple(float),
    ("sweep", "dims"): _tuple(int),
    ("sweep", "seeds"): _tuple(int),
}


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.read_string(text, source=source)
    top, train_kw, synth_kw = {}, {}, {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ValueError(f"{source}: unknown section [{section}]")
        for key, raw in parser.items(section):
            try:
                if section == "synth":
                    synth_kw[key] = SYNTH_PARSERS[key](raw)
                elif section == "train" or (section == "model" and key in ("latent_dim", "hidden_dim")):
                    train_kw[key] = TRAIN_PARSERS[key](raw)
                else:
                    top[key] = TOP_PARSERS[(section, key)](raw)
            except KeyError:
                raise ValueError(f"{source}: unknown key {key!r} in [{section}]") from None
            except ValueError as exc:
                raise ValueError(f"{source}: [{section}] {key}: {exc}") from None
    if "synth" in parser.sections():
        top["synth"] = SynthConfig(**synth_kw)
    return RunConfig(train=TrainConfig(**train_kw), **top)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), str(path))


def apply_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    """Replace fields given on the command line, logging each provenance change."""
    top_names = {f.name for f in fields(RunConfig)}
    train_names = {f.name for f in fields(TrainConfig)}
    top, train_kw = {}, {}
    for key, value in overrides.items():
        if value is None:
            continue
        if key in top_names and key != "train":
            old = getattr(cfg, key)
            top[key] = value
        elif key in train_names:
            old = getattr(cfg.train, key)
            train_kw[key] = value
        else:
            raise KeyError(f"unknown override {key!r}")
        if old != value:
            log.info("command line sets %s=%r (config had %r)", key, value, old)
    if train_kw:
        top["train"] = dataclasses.replace(cfg.train, **train_kw)
    return dataclasses.replace(cfg, **top)
