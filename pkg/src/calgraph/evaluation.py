"""Leave-one-out ranking metrics: HR@N, NDCG@N and MRR over sampled negatives."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import EvalSplit, MultiDomainDataset
from .model import CalParams, predict

CSV_COLUMNS = (
    "dataset", "domain", "variant", "fraction", "latent_dim", "seed",
    "n_evaluated", "hr", "ndcg", "mrr",
)


def rank_of_positive(pos_score: float, neg_scores) -> int:
    """1-based rank of the positive; ties with negatives count against it."""
    neg_scores = np.asarray(neg_scores, dtype=float)
    if not np.isfinite(pos_score) or not np.all(np.isfinite(neg_scores)):
        raise ValueError("scores must be finite")
    return 1 + int(np.count_nonzero(neg_scores >= pos_score))


def brute_force_rank(pos_score: float, neg_scores) -> int:
    """Reference rank: sort all candidates, positive last among equal scores."""
    items = [(float(s), 0) for s in neg_scores] + [(float(pos_score), 1)]
    # descending score, positive after negatives of the same score
    items.sort(key=lambda t: (-t[0], t[1]))
    return 1 + [flag for _, flag in items].index(1)


def ranks_of_positives(pos_scores: np.ndarray, neg_scores: np.ndarray) -> np.ndarray:
    """Vectorised ``rank_of_positive`` over rows."""
    if not (np.all(np.isfinite(pos_scores)) and np.all(np.isfinite(neg_scores))):
        raise ValueError("scores must be finite")
    return 1 + np.count_nonzero(neg_scores >= pos_scores[:, None], axis=1)


def metrics_at_n(rank, n: int = 10, cut_mrr: bool = True):
    """(hit, ndcg, reciprocal rank) for a 1-based rank or an array of ranks."""
    if n < 1:
        raise ValueError("cutoff must be at least 1")
    r = np.asarray(rank, dtype=np.int64)
    if np.any(r < 1):
        raise ValueError("ranks start at 1")
    inside = r <= n
    hr = inside.astype(float)
    ndcg = np.where(inside, 1.0 / np.log2(r + 1.0), 0.0)
    rr = 1.0 / r
    if cut_mrr:
        rr = np.where(inside, rr, 0.0)
    if r.ndim == 0:
        return float(hr), float(ndcg), float(rr)
    return hr, ndcg, rr


@dataclass
class DomainMetrics:
    n_evaluated: int
    hr: float
    ndcg: float
    mrr: float
    cutoff: int


@dataclass
class MetricsReport:
    domains: dict[str, DomainMetrics] = field(default_factory=dict)

    def __getitem__(self, name: str) -> DomainMetrics:
        return self.domains[name]

    def to_dict(self) -> dict:
        return {n: asdict(m) for n, m in self.domains.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        return cls({n: DomainMetrics(**m) for n, m in doc.items()})

    def csv_rows(self, dataset="", variant="", fraction=1.0, latent_dim="", seed="") -> list[dict]:
        return [
            {
                "dataset": dataset,
                "domain": n,
                "variant": variant,
                "fraction": fraction,
                "latent_dim": latent_dim,
                "seed": seed,
                "n_evaluated": m.n_evaluated,
                "hr": m.hr,
                "ndcg": m.ndcg,
                "mrr": m.mrr,
            }
            for n, m in self.domains.items()
        ]


def write_csv(rows, fh, columns=CSV_COLUMNS) -> None:
    writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="raise", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)


def csv_text(rows, columns=CSV_COLUMNS) -> str:
    buf = io.StringIO()
    write_csv(rows, buf, columns)
    return buf.getvalue()


def domain_metrics(ranks: np.ndarray, n: int = 10, cut_mrr: bool = True) -> DomainMetrics:
    if len(ranks) == 0:
        return DomainMetrics(0, math.nan, math.nan, math.nan, n)
    hr, ndcg, rr = metrics_at_n(ranks, n, cut_mrr)
    if cut_mrr and not (np.all(rr <= ndcg) and np.all(ndcg <= hr)):
        raise RuntimeError("metric ordering rr <= ndcg <= hr violated")
    return DomainMetrics(len(ranks), float(hr.mean()), float(ndcg.mean()), float(rr.mean()), n)


def candidate_ranks(scores: np.ndarray, positives: np.ndarray, negatives: np.ndarray) -> np.ndarray:
    rows = np.arange(len(positives))
    return ranks_of_positives(scores[rows, positives], scores[rows[:, None], negatives])


def evaluate_model(
    params: CalParams,
    data: MultiDomainDataset,
    split: EvalSplit,
    n: int = 10,
    include_embedding: bool = True,
    cut_mrr: bool = True,
    domains=None,
    batch_size: int = 1024,
) -> MetricsReport:
    """Rank each held-out positive among its negatives using the training rows.

    Only domains present in both the model and the split are evaluated
    unless ``domains`` names them explicitly.
    """
    domains = [d for d in params.domains if d in split] if domains is None else list(domains)
    report = MetricsReport()
    for d in domains:
        ev = split[d]
        if len(ev) and ev.users.max() >= data.n_shared:
            raise IndexError(f"split for {d!r} references entities missing from the dataset")
        mat = data[d]
        ranks = np.zeros(len(ev), dtype=np.int64)
        for lo in range(0, len(ev), batch_size):
            users = ev.users[lo:lo + batch_size]
            x = mat.dense(users, dtype=params.dtype)
            scores = predict(params, d, x, users, include_embedding=include_embedding)
            ranks[lo:lo + batch_size] = candidate_ranks(
                scores, ev.positives[lo:lo + batch_size], ev.negatives[lo:lo + batch_size]
            )
        report.domains[d] = domain_metrics(ranks, n, cut_mrr)
    return report
