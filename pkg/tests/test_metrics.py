import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import brute_metrics as bm
from grcf.errors import MetricError
from grcf.metrics import (EvalReport, acc_k, corr, evaluate, f1_binary, mae, pairwise_acc,
                          round_half_away, spearman)


def test_pairwise_examples():
    assert pairwise_acc([1, 2, 3], [0.1, 0.2, 0.3]) == 1.0
    assert pairwise_acc([1, 2], [2, 1]) == 0.0
    with pytest.raises(MetricError):
        pairwise_acc([1.0], [1.0])


def test_pairwise_tie_handling():
    # tied labels: literal formula counts the pair correct iff y_hat_i <= y_hat_j
    assert pairwise_acc([1.0, 1.0], [0.0, 1.0]) == 1.0
    assert pairwise_acc([1.0, 1.0], [1.0, 0.0]) == 0.0
    assert pairwise_acc([1.0, 1.0, 2.0], [1.0, 0.0, 5.0], exclude_ties=True) == 1.0


def test_acc_examples():
    assert acc_k([1.0], [1.4], 7) == 1.0
    assert acc_k([3.0], [3.7], 7) == 1.0
    assert round_half_away([0.5, -0.5, 1.5, -2.5]).tolist() == [1.0, -1.0, 2.0, -3.0]
    # zero label excluded from Acc2 and F1
    assert acc_k([0.0, 1.0, -1.0], [5.0, 1.0, -1.0], 2) == 1.0
    rep = evaluate(np.array([0.0, 1.0, -1.0]), np.array([5.0, 1.0, -1.0]))
    assert rep.n_excluded_zero == 1


def test_f1_examples():
    assert f1_binary([1, -1, 2], [1, -1, 2]) == 1.0
    assert f1_binary([1, 2, -1], [-1, -1, -1]) == 0.0
    assert f1_binary([1, 1, -1, -1], [1, -1, 1, -1]) == 0.5


def test_corr_examples():
    y = np.array([0.3, -1.0, 2.0, 0.5])
    assert corr(y, 2 * y + 1) == pytest.approx(1.0, abs=1e-15)
    assert spearman(y, np.exp(y)) == pytest.approx(1.0, abs=1e-15)
    assert mae(y, y) == 0.0
    with pytest.raises(MetricError):
        corr([1.0, 1.0], [0.0, 1.0])


def test_report_serialises_flat():
    rep = evaluate(np.array([-1.0, 0.5, 2.0]), np.array([-0.8, 0.1, 2.5]))
    doc = json.loads(rep.to_json())
    assert set(doc) >= {"pairwise_acc", "acc7", "acc5", "acc3", "acc2", "f1", "mae", "corr", "n_samples"}
    assert all(not isinstance(v, dict) for v in doc.values())
    assert "pairwise_acc" in rep.to_table()
    assert isinstance(rep, EvalReport)


def test_metrics_match_brute_force_on_random_vectors():
    rng = np.random.default_rng(5)
    for _ in range(100):
        # rounded values create label ties, exact zeros and bin-edge hits
        y = np.round(rng.uniform(-3, 3, 50), 1)
        p = np.round(rng.uniform(-3.8, 3.8, 50), 1)
        yl, pl = y.tolist(), p.tolist()
        assert pairwise_acc(y, p) == bm.pairwise_acc(yl, pl)
        assert pairwise_acc(y, p, True) == bm.pairwise_acc(yl, pl, True)
        for k in (7, 5, 3, 2):
            assert acc_k(y, p, k) == bm.acc(yl, pl, k)
        assert f1_binary(y, p) == pytest.approx(bm.f1(yl, pl), abs=1e-12)
        assert mae(y, p) == pytest.approx(bm.mae(yl, pl), abs=1e-12)
        assert corr(y, p) == pytest.approx(bm.pearson(yl, pl), abs=1e-12)
        assert spearman(y, p) == pytest.approx(bm.spearman(yl, pl), abs=1e-12)


vec = arrays(np.float64, 12, elements=st.floats(-3, 3, allow_nan=False))


@settings(max_examples=100, deadline=None)
@given(y=vec, p=vec)
def test_metric_ranges(y, p):
    rep = evaluate(y, p)
    for name in ("pairwise_acc", "acc7", "acc5", "acc3", "acc2", "f1"):
        v = getattr(rep, name)
        assert v is None or 0.0 <= v <= 1.0
    assert rep.mae >= 0
    assert rep.corr is None or -1.0 <= rep.corr <= 1.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-3, 3, allow_nan=False), min_size=2, max_size=15, unique=True),
       st.lists(st.floats(-3, 3, allow_nan=False), min_size=15, max_size=15, unique=True))
def test_pairwise_flip_complement(y, p):
    y = np.array(y)
    p = np.array(p[: len(y)])
    assert pairwise_acc(y, p) + pairwise_acc(y, -p) == pytest.approx(1.0, abs=1e-12)
