import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics import roc_auc_score

from oracles import ap_oracle, auroc_oracle
from tiglab.metrics import auroc, average_precision


def test_ap_worked_example():
    # ranking: p(0.9) n(0.8) p(0.7) n(0.1): precisions 1 and 2/3
    assert average_precision([0.9, 0.7], [0.8, 0.1]) == pytest.approx((1 + 2 / 3) / 2)


def test_ap_ties_put_positives_first():
    assert average_precision([0.5], [0.5]) == 1.0
    assert average_precision([0.5, 0.5], [0.5, 0.5]) == 1.0


def test_ap_perfect_and_worst():
    assert average_precision([3, 2], [1, 0]) == 1.0
    assert average_precision([0], [1, 2]) == pytest.approx(1 / 3)


def test_auroc_worked_example_and_ties():
    assert auroc([0.9, 0.1, 0.8, 0.4], [1, 0, 1, 0]) == 1.0
    assert auroc([0.5, 0.5], [1, 0]) == 0.5
    assert auroc([0.2, 0.6, 0.4], [1, 0, 0]) == 0.0


def test_metrics_reject_degenerate_input():
    with pytest.raises(ValueError):
        average_precision([], [0.1])
    with pytest.raises(ValueError):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        auroc([0.1], [1, 0])


def _instance(rng):
    n = int(rng.integers(2, 51))
    # coarse grid so ties are common
    scores = rng.integers(0, 6, size=n) / 5 if rng.random() < 0.5 else rng.random(n)
    labels = rng.integers(0, 2, size=n)
    labels[0], labels[1] = 1, 0
    return scores, labels


def test_exact_agreement_with_oracles_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        scores, labels = _instance(rng)
        assert average_precision(scores[labels == 1], scores[labels == 0]) == ap_oracle(scores[labels == 1],
                                                                                       scores[labels == 0])
        assert auroc(scores, labels) == auroc_oracle(scores, labels)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=2, max_size=50))
def test_auroc_matches_sklearn(pairs):
    scores = np.array([p[0] for p in pairs])
    labels = np.array([int(p[1]) for p in pairs])
    if labels.min() == labels.max():
        return
    assert auroc(scores, labels) == pytest.approx(roc_auc_score(labels, scores), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=30), st.lists(st.floats(-5, 5), min_size=1, max_size=30))
def test_ap_in_unit_interval_and_scale_invariant(pos, neg):
    ap = average_precision(pos, neg)
    assert 0 < ap <= 1
    assert average_precision(np.array(pos) * 2, np.array(neg) * 2) == ap
