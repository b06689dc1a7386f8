import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from necho.harness.metrics import (accuracy_at_ks, label_frequencies, random_ranking_accuracy,
                                   random_ranking_accuracy_mc, ranking, repeat_previous_scores, topk_accuracy)
from oracles import enumerate_accuracy


def test_examples():
    scores = np.array([0.9, 0.8, 0.7, 0.1, 0.2, 0.05])
    assert topk_accuracy(scores, {0, 1, 2}, 5) == 1.0
    ten = np.arange(20, 0, -1, dtype=float)  # ranking is 0, 1, 2, ...
    truth = {0, 3} | set(range(10, 18))
    assert topk_accuracy(ten, truth, 5) == 2 / 5
    assert topk_accuracy(scores, {3, 5}, 6) == 1.0
    assert topk_accuracy(scores, {3, 5}, 50) == 1.0


def test_ties_break_towards_the_lower_index():
    scores = np.array([0.5, 0.5, 0.5, 0.9])
    np.testing.assert_array_equal(ranking(scores), [3, 0, 1, 2])
    assert topk_accuracy(scores, {1}, 2) == 0.0
    assert topk_accuracy(scores, {0}, 2) == 1.0


def test_errors_and_empty_truth_rows():
    with pytest.raises(ValueError):
        topk_accuracy(np.ones(3), set(), 1)
    with pytest.raises(ValueError):
        topk_accuracy(np.ones(3), {0}, 0)
    acc = accuracy_at_ks(np.array([[0.9, 0.1], [0.2, 0.8]]), [{0}, set()], (1,))
    assert acc == {1: 1.0}
    with pytest.raises(ValueError):
        accuracy_at_ks(np.ones((2, 3)), [{0}], (1,))


def test_exhaustive_enumeration_up_to_eight_labels():
    cases, bad = enumerate_accuracy(8)
    assert cases > 2000
    assert bad == []


def test_monotone_once_k_covers_the_truth():
    # the adopted formula is non-decreasing in k only from k = |truth| on
    for seed in range(200):
        r = np.random.default_rng(seed)
        n = int(r.integers(2, 15))
        scores = r.random(n)
        truth = set(r.choice(n, size=int(r.integers(1, n + 1)), replace=False).tolist())
        accs = [topk_accuracy(scores, truth, k) for k in range(len(truth), n + 1)]
        assert all(a <= b for a, b in zip(accs, accs[1:]))


def test_monotonicity_fails_below_the_truth_size():
    scores = np.array([0.9, 0.8, 0.1])
    truth = {0, 2}
    assert topk_accuracy(scores, truth, 1) == 1.0
    assert topk_accuracy(scores, truth, 2) == 0.5


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_accuracy_lies_in_the_unit_interval(seed):
    r = np.random.default_rng(seed)
    scores = r.random((5, 12))
    truths = [set(r.choice(12, size=int(r.integers(1, 12)), replace=False).tolist()) for _ in range(5)]
    for v in accuracy_at_ks(scores, truths, (1, 5, 12)).values():
        assert 0.0 <= v <= 1.0
    assert accuracy_at_ks(scores, truths, (12,))[12] == 1.0


def test_random_baseline_closed_form_matches_monte_carlo():
    r = np.random.default_rng(0)
    truths = [set(r.choice(120, size=int(r.integers(5, 20)), replace=False).tolist()) for _ in range(60)]
    exact = random_ranking_accuracy(truths, 120, (5, 30))
    mc = random_ranking_accuracy_mc(truths, 120, (5, 30), trials=300, seed=1)
    for k in (5, 30):
        assert abs(exact[k] - mc[k]) < 0.01
    assert random_ranking_accuracy([{0, 1}], 10, (10,))[10] == 1.0


def test_repeat_previous_ranks_the_current_visit_first():
    freq = label_frequencies([{0, 1}, {1}, {1, 2}, {3}], 5)
    np.testing.assert_array_equal(freq, [1, 3, 1, 1, 0])
    scores = repeat_previous_scores([{4}, {0, 3}], freq)
    assert ranking(scores[0])[0] == 4
    assert list(ranking(scores[0])[1:3]) == [1, 0]
    assert set(ranking(scores[1])[:2]) == {0, 3}
