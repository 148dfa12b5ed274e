"""Interaction ingestion, shared-entity alignment, leave-one-out splits,
denoising corruption, link subsampling and synthetic block-model data."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numeric import as_generator

DATASET_FORMAT = "calgraph-dataset"
SPLIT_FORMAT = "calgraph-split"
FORMAT_VERSION = 1


def natural_key(raw: str):
    """Sort numeric ids numerically, everything else lexically after them."""
    try:
        return (0, int(raw), "")
    except ValueError:
        return (1, 0, raw)


# --------------------------------------------------------------------------
# relation matrices


@dataclass(frozen=True, eq=False)
class RelationMatrix:
    """Binary shared-entity x item matrix in compressed-row form."""

    indptr: np.ndarray
    indices: np.ndarray
    n_items: int

    def __post_init__(self):
        indptr = np.asarray(self.indptr, dtype=np.int64)
        indices = np.asarray(self.indices, dtype=np.int64)
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "indices", indices)
        if indptr.ndim != 1 or len(indptr) < 1 or indptr[0] != 0 or indptr[-1] != len(indices):
            raise ValueError("malformed row pointer")
        if np.any(np.diff(indptr) < 0):
            raise ValueError("row pointer must be non-decreasing")
        if len(indices) and (indices.min() < 0 or indices.max() >= self.n_items):
            raise ValueError(f"item index outside [0, {self.n_items})")
        # strictly increasing within each row
        if len(indices) > 1:
            step = np.diff(indices)
            row_start = np.zeros(len(indices), dtype=bool)
            row_start[indptr[:-1][np.diff(indptr) > 0]] = True
            if np.any((step <= 0) & ~row_start[1:]):
                raise ValueError("rows must be strictly sorted without duplicates")

    @classmethod
    def from_rows(cls, rows: Sequence[Iterable[int]], n_items: int) -> "RelationMatrix":
        sorted_rows = [np.unique(np.asarray(list(r), dtype=np.int64)) for r in rows]
        lengths = np.array([len(r) for r in sorted_rows], dtype=np.int64)
        indptr = np.concatenate([[0], np.cumsum(lengths)])
        indices = np.concatenate(sorted_rows) if sorted_rows else np.zeros(0, np.int64)
        return cls(indptr, indices.astype(np.int64), n_items)

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "RelationMatrix":
        dense = np.asarray(dense)
        return cls.from_rows([np.flatnonzero(r) for r in dense], dense.shape[1])

    @property
    def n_shared(self) -> int:
        return len(self.indptr) - 1

    @property
    def nnz(self) -> int:
        return int(self.indptr[-1])

    @property
    def density(self) -> float:
        return self.nnz / (self.n_shared * self.n_items) if self.n_shared and self.n_items else 0.0

    def row(self, u: int) -> np.ndarray:
        return self.indices[self.indptr[u]:self.indptr[u + 1]]

    def row_lengths(self) -> np.ndarray:
        return np.diff(self.indptr)

    def rows(self) -> list[np.ndarray]:
        return [self.row(u) for u in range(self.n_shared)]

    def dense(self, users=None, dtype=np.float64) -> np.ndarray:
        """Materialize the given rows (all rows by default) as a 0/1 array."""
        users = np.arange(self.n_shared) if users is None else np.asarray(users, dtype=np.int64)
        starts = self.indptr[users]
        lengths = self.indptr[users + 1] - starts
        out = np.zeros((len(users), self.n_items), dtype=dtype)
        total = int(lengths.sum())
        if total:
            offsets = np.cumsum(lengths) - lengths
            pos = np.arange(total) - np.repeat(offsets, lengths) + np.repeat(starts, lengths)
            out[np.repeat(np.arange(len(users)), lengths), self.indices[pos]] = 1
        return out

    def __eq__(self, other):
        return (
            isinstance(other, RelationMatrix)
            and self.n_items == other.n_items
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
        )


@dataclass(frozen=True, eq=False)
class MultiDomainDataset:
    names: tuple[str, ...]
    matrices: tuple[RelationMatrix, ...]
    shared_ids: tuple[str, ...]
    item_ids: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "matrices", tuple(self.matrices))
        object.__setattr__(self, "shared_ids", tuple(self.shared_ids))
        object.__setattr__(self, "item_ids", tuple(tuple(ids) for ids in self.item_ids))
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"duplicate domain names in {self.names}")
        if not (len(self.names) == len(self.matrices) == len(self.item_ids)):
            raise ValueError("names, matrices and item vocabularies differ in length")
        for name, m, ids in zip(self.names, self.matrices, self.item_ids):
            if m.n_shared != len(self.shared_ids):
                raise ValueError(
                    f"domain {name!r} has {m.n_shared} rows, expected {len(self.shared_ids)}"
                )
            if m.n_items != len(ids):
                raise ValueError(f"domain {name!r} has {m.n_items} items but {len(ids)} item ids")

    @property
    def n_shared(self) -> int:
        return len(self.shared_ids)

    @property
    def shared_vocab(self) -> dict[str, int]:
        return {raw: i for i, raw in enumerate(self.shared_ids)}

    @property
    def item_vocabs(self) -> dict[str, dict[str, int]]:
        return {n: {raw: i for i, raw in enumerate(ids)} for n, ids in zip(self.names, self.item_ids)}

    @property
    def n_items(self) -> dict[str, int]:
        return {n: m.n_items for n, m in zip(self.names, self.matrices)}

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"no domain named {name!r}; have {list(self.names)}") from None

    def __getitem__(self, name: str) -> RelationMatrix:
        return self.matrices[self.index(name)]

    def replace(self, name: str, matrix: RelationMatrix) -> "MultiDomainDataset":
        i = self.index(name)
        mats = list(self.matrices)
        mats[i] = matrix
        return MultiDomainDataset(self.names, tuple(mats), self.shared_ids, self.item_ids)

    def select(self, names: Sequence[str]) -> "MultiDomainDataset":
        idx = [self.index(n) for n in names]
        return MultiDomainDataset(
            tuple(self.names[i] for i in idx),
            tuple(self.matrices[i] for i in idx),
            self.shared_ids,
            tuple(self.item_ids[i] for i in idx),
        )

    def summary(self) -> list[dict]:
        return [
            {
                "domain": n,
                "users": self.n_shared,
                "items": m.n_items,
                "interactions": m.nnz,
                "density": m.density,
            }
            for n, m in zip(self.names, self.matrices)
        ]

    def __eq__(self, other):
        return (
            isinstance(other, MultiDomainDataset)
            and self.names == other.names
            and self.shared_ids == other.shared_ids
            and self.item_ids == other.item_ids
            and all(a == b for a, b in zip(self.matrices, other.matrices))
        )


def format_summary(data: MultiDomainDataset) -> str:
    lines = [f"{'Domain':<12s} {'Users':>8s} {'Items':>8s} {'Interactions':>13s} {'Density':>9s}"]
    for row in data.summary():
        lines.append(
            f"{row['domain']:<12s} {row['users']:>8d} {row['items']:>8d} "
            f"{row['interactions']:>13d} {100 * row['density']:>8.3f}%"
        )
    return "\n".join(lines)


# --------------------------------------------------------------------------
# ingestion


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_interactions(path, fmt: str | None = None, rating_threshold: float = 0.0) -> list[tuple[str, str]]:
    """Read ``shared_id, item_id, rating[, timestamp]`` records.

    Records rated at or above ``rating_threshold`` become links; repeated
    pairs collapse to one. A first line whose rating field is not numeric is
    treated as a header.
    """
    path = Path(path)
    if fmt is None:
        fmt = "csv" if path.suffix.lower() == ".csv" else "tsv"
    if fmt not in ("tsv", "csv"):
        raise ValueError(f"unknown interaction format {fmt!r}")
    delimiter = "\t" if fmt == "tsv" else ","
    seen: dict[tuple[str, str], None] = {}
    n_records = 0
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, fields in enumerate(csv.reader(fh, delimiter=delimiter), start=1):
            if not fields or all(not f.strip() for f in fields):
                continue
            if len(fields) < 3 or len(fields) > 4:
                raise ValueError(f"{path}:{lineno}: expected 3 or 4 fields, got {len(fields)}")
            sid, iid, rating = (f.strip() for f in fields[:3])
            if not _is_number(rating):
                if n_records == 0 and lineno == 1:
                    continue
                raise ValueError(f"{path}:{lineno}: rating {rating!r} is not a number")
            if not sid or not iid:
                raise ValueError(f"{path}:{lineno}: empty identifier")
            n_records += 1
            if float(rating) >= rating_threshold:
                seen.setdefault((sid, iid), None)
    if n_records == 0:
        raise ValueError(f"{path}: no interaction records")
    return list(seen)


def align_shared_entities(
    per_domain_lists: Sequence[Sequence[tuple[str, str]]], names: Sequence[str] | None = None
) -> MultiDomainDataset:
    """Keep the shared entities present in every domain and index everything."""
    if len(per_domain_lists) < 2:
        raise ValueError("alignment needs at least two domains")
    names = tuple(names) if names is not None else tuple(f"d{i}" for i in range(len(per_domain_lists)))
    if len(names) != len(per_domain_lists):
        raise ValueError("one name per domain required")
    common = set.intersection(*({s for s, _ in pairs} for pairs in per_domain_lists))
    if not common:
        raise ValueError("no shared entity appears in every domain")
    shared_ids = tuple(sorted(common, key=natural_key))
    uidx = {raw: i for i, raw in enumerate(shared_ids)}
    matrices, item_ids = [], []
    for pairs in per_domain_lists:
        kept = [(s, i) for s, i in pairs if s in common]
        items = tuple(sorted({i for _, i in kept}, key=natural_key))
        iidx = {raw: j for j, raw in enumerate(items)}
        rows: list[list[int]] = [[] for _ in shared_ids]
        for s, i in kept:
            rows[uidx[s]].append(iidx[i])
        matrices.append(RelationMatrix.from_rows(rows, len(items)))
        item_ids.append(items)
    return MultiDomainDataset(names, tuple(matrices), shared_ids, tuple(item_ids))


# --------------------------------------------------------------------------
# snapshots


def save_dataset(data: MultiDomainDataset, path) -> None:
    doc = {
        "format": DATASET_FORMAT,
        "version": FORMAT_VERSION,
        "shared_ids": list(data.shared_ids),
        "domains": [
            {
                "name": n,
                "item_ids": list(ids),
                "indptr": m.indptr.tolist(),
                "indices": m.indices.tolist(),
            }
            for n, m, ids in zip(data.names, data.matrices, data.item_ids)
        ],
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":"), sort_keys=True), encoding="utf-8")


def load_dataset(path) -> MultiDomainDataset:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != DATASET_FORMAT:
        raise ValueError(f"{path}: not a dataset snapshot")
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported snapshot version {doc.get('version')}")
    return MultiDomainDataset(
        tuple(d["name"] for d in doc["domains"]),
        tuple(RelationMatrix(d["indptr"], d["indices"], len(d["item_ids"])) for d in doc["domains"]),
        tuple(doc["shared_ids"]),
        tuple(tuple(d["item_ids"]) for d in doc["domains"]),
    )


# --------------------------------------------------------------------------
# leave-one-out evaluation split


@dataclass(frozen=True, eq=False)
class DomainEval:
    users: np.ndarray  # (n_eval,)
    positives: np.ndarray  # (n_eval,)
    negatives: np.ndarray  # (n_eval, n_negatives)

    def __len__(self):
        return len(self.users)

    def __eq__(self, other):
        return (
            isinstance(other, DomainEval)
            and np.array_equal(self.users, other.users)
            and np.array_equal(self.positives, other.positives)
            and np.array_equal(self.negatives, other.negatives)
        )


@dataclass(frozen=True)
class EvalSplit:
    domains: dict[str, DomainEval] = field(default_factory=dict)

    def __getitem__(self, name: str) -> DomainEval:
        return self.domains[name]

    def __contains__(self, name: str) -> bool:
        return name in self.domains

    def select(self, names: Sequence[str]) -> "EvalSplit":
        return EvalSplit({n: self.domains[n] for n in names if n in self.domains})


def save_split(split: EvalSplit, path) -> None:
    doc = {
        "format": SPLIT_FORMAT,
        "version": FORMAT_VERSION,
        "domains": {
            n: {
                "users": d.users.tolist(),
                "positives": d.positives.tolist(),
                "negatives": d.negatives.tolist(),
            }
            for n, d in split.domains.items()
        },
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":"), sort_keys=True), encoding="utf-8")


def load_split(path) -> EvalSplit:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != SPLIT_FORMAT or doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: not a supported split file")
    return EvalSplit(
        {
            n: DomainEval(
                np.asarray(d["users"], dtype=np.int64),
                np.asarray(d["positives"], dtype=np.int64),
                np.asarray(d["negatives"], dtype=np.int64).reshape(len(d["users"]), -1),
            )
            for n, d in doc["domains"].items()
        }
    )


def sample_negatives(rng, n_items: int, exclude: np.ndarray, k: int) -> np.ndarray:
    """``k`` distinct items drawn uniformly from those not in ``exclude``."""
    gen = as_generator(rng)
    available = n_items - len(exclude)
    if available < k:
        raise ValueError(f"only {available} non-interacted items, need {k}")
    if available < 4 * k:
        pool = np.setdiff1d(np.arange(n_items), exclude, assume_unique=True)
        return gen.choice(pool, size=k, replace=False)
    # sequential rejection sampling keeps first-seen order, hence uniformity
    chosen = np.zeros(0, dtype=np.int64)
    while len(chosen) < k:
        draws = gen.integers(0, n_items, size=2 * k)
        draws = draws[~np.isin(draws, exclude, assume_unique=False)]
        merged = np.concatenate([chosen, draws])
        _, first = np.unique(merged, return_index=True)
        chosen = merged[np.sort(first)]
    return chosen[:k]


def leave_one_out_split(data: MultiDomainDataset, n_negatives: int = 99, rng=None):
    """Hold out one random link per entity and domain, plus sampled negatives.

    Entities with a single link in a domain keep it for training and get no
    evaluation entry there. Returns ``(train_data, EvalSplit)``.
    """
    if n_negatives < 1:
        raise ValueError("n_negatives must be at least 1")
    gen = as_generator(rng)
    new_mats, evals = [], {}
    for name, mat in zip(data.names, data.matrices):
        rows = mat.rows()
        users, positives, negatives = [], [], []
        train_rows = []
        for u, row in enumerate(rows):
            if len(row) < 2:
                train_rows.append(row)
                continue
            j = int(gen.integers(len(row)))
            try:
                negs = sample_negatives(gen, mat.n_items, row, n_negatives)
            except ValueError as exc:
                raise ValueError(f"domain {name!r}, entity {data.shared_ids[u]!r}: {exc}") from None
            users.append(u)
            positives.append(row[j])
            negatives.append(negs)
            train_rows.append(np.delete(row, j))
        new_mats.append(RelationMatrix.from_rows(train_rows, mat.n_items))
        evals[name] = DomainEval(
            np.asarray(users, dtype=np.int64),
            np.asarray(positives, dtype=np.int64),
            np.asarray(negatives, dtype=np.int64).reshape(len(users), n_negatives),
        )
    train = MultiDomainDataset(data.names, tuple(new_mats), data.shared_ids, data.item_ids)
    return train, EvalSplit(evals)


# --------------------------------------------------------------------------
# sparsity and corruption


def subsample_links(data: MultiDomainDataset, domain: str, fraction: float, rng=None) -> MultiDomainDataset:
    """Keep ``ceil(fraction * nnz)`` uniformly chosen links of one domain.

    Every link gets one random priority from ``rng`` and the lowest
    priorities survive, so calls with identically seeded streams nest:
    the 0.2 sample is a subset of the 0.4 sample, and so on.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    mat = data[domain]
    priority = as_generator(rng).random(mat.nnz)
    if fraction == 1.0:
        return data
    keep_n = math.ceil(round(fraction * mat.nnz, 9))
    keep = np.zeros(mat.nnz, dtype=bool)
    keep[np.argsort(priority, kind="stable")[:keep_n]] = True
    row_of = np.repeat(np.arange(mat.n_shared), mat.row_lengths())
    counts = np.bincount(row_of[keep], minlength=mat.n_shared)
    indptr = np.concatenate([[0], np.cumsum(counts)])
    return data.replace(domain, RelationMatrix(indptr, mat.indices[keep], mat.n_items))


def corrupt(x: np.ndarray, q: float, rng=None, rescale: bool = False) -> np.ndarray:
    """Drop each nonzero entry independently with probability ``q``."""
    if not 0.0 <= q < 1.0:
        raise ValueError(f"corruption probability must lie in [0, 1), got {q}")
    x = np.asarray(x)
    if q == 0.0:
        return x.copy()
    keep = as_generator(rng).random(x.shape) >= q
    out = x * keep
    if rescale:
        out = out / (1.0 - q)
    return out.astype(x.dtype, copy=False)


# --------------------------------------------------------------------------
# synthetic block-model data


@dataclass(frozen=True)
class SynthConfig:
    n_shared: int = 400
    n_domains: int = 2
    items_per_domain: int | tuple[int, ...] = 300
    n_clusters: int = 4
    p_in: float = 0.3
    p_out: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_out < self.p_in <= 1.0:
            raise ValueError(f"need 0 <= p_out < p_in <= 1, got p_in={self.p_in}, p_out={self.p_out}")
        if self.n_shared < 1 or self.n_domains < 1 or self.n_clusters < 1:
            raise ValueError("n_shared, n_domains and n_clusters must be positive")
        if min(self.item_counts) < 1:
            raise ValueError("every domain needs at least one item")

    @property
    def item_counts(self) -> tuple[int, ...]:
        if isinstance(self.items_per_domain, int):
            return (self.items_per_domain,) * self.n_domains
        counts = tuple(int(c) for c in self.items_per_domain)
        if len(counts) != self.n_domains:
            raise ValueError("items_per_domain must list one count per domain")
        return counts


def balanced_clusters(gen: np.random.Generator, n: int, k: int) -> np.ndarray:
    labels = np.empty(n, dtype=np.int64)
    labels[gen.permutation(n)] = np.arange(n) % k
    return labels


def gen_synthetic(cfg: SynthConfig, return_clusters: bool = False):
    """Stochastic block model over n domains sharing one entity clustering.

    An entity's cluster sets its link probabilities in every domain, which
    is what makes one domain informative about another.
    """
    gen = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    user_cluster = balanced_clusters(gen, cfg.n_shared, cfg.n_clusters)
    names, mats, item_ids, item_clusters = [], [], [], []
    for d, n_items in enumerate(cfg.item_counts):
        ic = balanced_clusters(gen, n_items, cfg.n_clusters)
        prob = np.where(user_cluster[:, None] == ic[None, :], cfg.p_in, cfg.p_out)
        links = gen.random(prob.shape) < prob
        empty = ~links.any(axis=1)
        while empty.any():
            links[empty] = gen.random((int(empty.sum()), n_items)) < prob[empty]
            empty = ~links.any(axis=1)
        names.append(f"d{d}")
        mats.append(RelationMatrix.from_dense(links))
        item_ids.append(tuple(f"i{j}" for j in range(n_items)))
        item_clusters.append(ic)
    data = MultiDomainDataset(
        tuple(names), tuple(mats), tuple(f"u{u}" for u in range(cfg.n_shared)), tuple(item_ids)
    )
    if return_clusters:
        return data, user_cluster, item_clusters
    return data
