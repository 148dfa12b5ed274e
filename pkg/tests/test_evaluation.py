import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from calgraph.data import SynthConfig, gen_synthetic, leave_one_out_split
from calgraph.evaluation import (
    CSV_COLUMNS,
    MetricsReport,
    brute_force_rank,
    domain_metrics,
    evaluate_model,
    metrics_at_n,
    rank_of_positive,
    ranks_of_positives,
    write_csv,
)
from calgraph.model import build_model
from calgraph.numeric import RngStream


def test_rank_examples():
    negs = [0.95, 0.5, 0.7] + [0.1] * 96
    assert rank_of_positive(0.9, negs) == 2
    assert rank_of_positive(1.0, [0.2] * 99) == 1
    assert rank_of_positive(0.5, [0.5] * 3 + [0.1] * 96) == 4


def test_rank_rejects_nonfinite():
    with pytest.raises(ValueError):
        rank_of_positive(float("nan"), [0.1])
    with pytest.raises(ValueError):
        rank_of_positive(0.5, [0.1, float("inf")])


def test_brute_force_extremes():
    negs = np.linspace(0.1, 0.9, 99)
    assert brute_force_rank(1.0, negs) == 1
    assert brute_force_rank(0.0, negs) == 100


def test_rank_oracle_equivalence_with_ties():
    rng = np.random.default_rng(0)
    ties = 0
    for k in range(1000):
        if k % 3 == 0:
            # coarse grid forces ties with the positive
            negs = rng.integers(0, 5, 99) / 4
            pos = rng.integers(0, 5) / 4
        else:
            negs = rng.random(99)
            pos = rng.random()
        ties += bool(np.any(negs == pos))
        assert rank_of_positive(pos, negs) == brute_force_rank(pos, negs)
    assert ties >= 100


def test_vectorised_ranks_match_scalar():
    rng = np.random.default_rng(1)
    pos = rng.integers(0, 4, 50) / 3
    negs = rng.integers(0, 4, (50, 99)) / 3
    expected = [rank_of_positive(p, n) for p, n in zip(pos, negs)]
    np.testing.assert_array_equal(ranks_of_positives(pos, negs), expected)


def test_metrics_analytic_values():
    assert metrics_at_n(1) == (1.0, 1.0, 1.0)
    hr, ndcg, rr = metrics_at_n(3)
    assert (hr, ndcg) == (1.0, 0.5) and rr == 1 / 3
    assert metrics_at_n(11, 10) == (0.0, 0.0, 0.0)
    assert metrics_at_n(11, 10, cut_mrr=False) == (0.0, 0.0, 1 / 11)


def test_metrics_reject_bad_input():
    with pytest.raises(ValueError):
        metrics_at_n(0)
    with pytest.raises(ValueError):
        metrics_at_n(1, 0)


def test_metric_ordering_every_rank():
    hr, ndcg, rr = metrics_at_n(np.arange(1, 101), 10)
    assert np.all(rr <= ndcg) and np.all(ndcg <= hr)
    hr, ndcg, rr = metrics_at_n(np.arange(1, 101), 100)
    assert np.all(rr <= ndcg) and np.all(ndcg <= hr)


@given(st.lists(st.floats(0, 1), min_size=99, max_size=99), st.floats(0, 1), st.randoms(use_true_random=False))
def test_rank_permutation_invariant(negs, pos, rnd):
    shuffled = list(negs)
    rnd.shuffle(shuffled)
    assert rank_of_positive(pos, negs) == rank_of_positive(pos, shuffled)


@given(st.lists(st.floats(0, 1), min_size=99, max_size=99), st.floats(0, 1), st.floats(0, 1))
def test_rank_monotone_in_positive_score(negs, a, b):
    lo, hi = sorted((a, b))
    assert rank_of_positive(hi, negs) <= rank_of_positive(lo, negs)


def test_constant_scorer_gets_zero():
    ranks = ranks_of_positives(np.full(20, 0.3), np.full((20, 99), 0.3))
    assert np.all(ranks == 100)
    m = domain_metrics(ranks)
    assert (m.hr, m.ndcg, m.mrr) == (0.0, 0.0, 0.0)


def test_untrained_model_is_near_chance():
    data = gen_synthetic(SynthConfig(n_shared=1000, items_per_domain=(300, 300), seed=11))
    train, split = leave_one_out_split(data, 99, RngStream(11).split("negatives"))
    params = build_model("cal", {d: 300 for d in data.names}, data.n_shared, 16, 16, init_seed=11)
    report = evaluate_model(params, train, split)
    for d in data.names:
        assert report[d].n_evaluated >= 990
        assert abs(report[d].hr - 0.10) <= 3 * math.sqrt(0.09 / report[d].n_evaluated)


def test_evaluate_rejects_foreign_entities():
    data = gen_synthetic(SynthConfig(n_shared=40, items_per_domain=150, seed=0))
    train, split = leave_one_out_split(data, 99, RngStream(0))
    smaller = gen_synthetic(SynthConfig(n_shared=10, items_per_domain=150, seed=0))
    params = build_model("cal", {d: 150 for d in data.names}, 40, 4, 4)
    with pytest.raises(IndexError):
        evaluate_model(params, smaller, split)


def test_evaluate_batching_is_invisible():
    data = gen_synthetic(SynthConfig(n_shared=60, items_per_domain=150, seed=2))
    train, split = leave_one_out_split(data, 99, RngStream(2))
    params = build_model("cal", {d: 150 for d in data.names}, 60, 4, 4)
    a = evaluate_model(params, train, split, batch_size=7)
    b = evaluate_model(params, train, split)
    assert a == b


def test_report_json_and_csv_schema():
    ranks = np.array([1, 3, 11, 50])
    report = MetricsReport({"x": domain_metrics(ranks), "y": domain_metrics(ranks[:2])})
    assert MetricsReport.from_dict(json.loads(report.to_json())) == report
    assert report["x"].hr == 0.5 and report["x"].mrr == pytest.approx((1 + 1 / 3) / 4)
    buf = io.StringIO()
    write_csv(report.csv_rows("syn", "cal", 0.4, 32, 0), buf)
    rows = list(csv.DictReader(io.StringIO(buf.getvalue())))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert [r["domain"] for r in rows] == ["x", "y"]
    assert rows[1]["n_evaluated"] == "2"
