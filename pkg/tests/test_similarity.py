import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from xmd.similarity import (
    balance_weights,
    knn_mask,
    percent_to_k,
    rescale_unit_interval,
    similarity_bundle,
    superpixel_similarity,
    threshold_alpha,
)


def cosine(a, b):
    return sum(x * y for x, y in zip(a, b)) / math.sqrt(sum(x * x for x in a) * sum(y * y for y in b))


def random_symmetric(m, seed, low=-1.0):
    rng = np.random.default_rng(seed)
    a = rng.uniform(low, 1.0, (m, m))
    a = (a + a.T) / 2
    np.fill_diagonal(a, 1.0)
    return a


def test_similarity_examples():
    np.testing.assert_allclose(superpixel_similarity(np.eye(2)), np.eye(2), atol=1e-15)
    np.testing.assert_allclose(superpixel_similarity(np.ones((3, 4))), np.ones((3, 3)), atol=1e-12)
    f = np.random.default_rng(1).standard_normal((6, 8))
    oracle = [[cosine(f[i], f[j]) for j in range(6)] for i in range(6)]
    np.testing.assert_allclose(superpixel_similarity(f), oracle, atol=1e-12)


def test_similarity_needs_two_rows():
    with pytest.raises(ValueError):
        superpixel_similarity(np.ones((1, 3)))


def test_similarity_scale_invariance_and_bounds():
    rng = np.random.default_rng(2)
    f = rng.standard_normal((7, 5))
    a = superpixel_similarity(f)
    g = f * rng.uniform(0.1, 10.0, (7, 1))
    np.testing.assert_allclose(superpixel_similarity(g), a, atol=1e-12)
    np.testing.assert_allclose(np.diag(a), 1.0, atol=1e-12)
    np.testing.assert_allclose(a, a.T, atol=1e-12)
    assert a.min() >= -1 - 1e-12 and a.max() <= 1 + 1e-12


def test_rescale_examples():
    np.testing.assert_array_equal(rescale_unit_interval([[-1.0, 1.0, 0.0]]), [[0.0, 1.0, 0.5]])


@given(arrays(np.float64, (4, 6), elements=st.floats(-1, 1)))
def test_rescale_is_monotone_within_rows(a):
    # rounding may merge near-equal entries but never swaps them
    r = rescale_unit_interval(a)
    for i in range(4):
        order = np.argsort(a[i], kind="stable")
        assert np.all(np.diff(r[i][order]) >= 0)


def test_knn_examples():
    a = random_symmetric(5, 0)
    m0 = knn_mask(a, 0)
    np.testing.assert_array_equal(m0, ~np.eye(5, dtype=bool))
    row = np.array([[1.0, 0.9, 0.1], [0.9, 1.0, 0.2], [0.1, 0.2, 1.0]])
    np.testing.assert_array_equal(knn_mask(row, 1)[0], [False, False, True])


def sort_oracle(alpha, k):
    m = len(alpha)
    out = np.zeros((m, m), dtype=bool)
    for i in range(m):
        others = sorted((j for j in range(m) if j != i), key=lambda j: (-alpha[i][j], j))
        for j in others[k:]:
            out[i, j] = True
    return out


def test_knn_matches_sort_oracle():
    a = random_symmetric(8, 3)
    np.testing.assert_array_equal(knn_mask(a, 2), sort_oracle(a.tolist(), 2))


def test_knn_ties_remove_smaller_column_first():
    a = np.full((4, 4), 0.5)
    np.fill_diagonal(a, 1.0)
    mask = knn_mask(a, 1)
    np.testing.assert_array_equal(mask[0], [False, False, True, True])
    np.testing.assert_array_equal(mask[2], [False, True, False, True])


def test_knn_too_large_k():
    with pytest.raises(ValueError, match="no negatives remain"):
        knn_mask(random_symmetric(4, 0), 3)


@pytest.mark.parametrize("m", [16, 100, 300])
@pytest.mark.parametrize("percent", [1, 5, 10])
def test_knn_row_counts(m, percent):
    a = random_symmetric(m, m)
    k = percent_to_k(percent, m)
    mask = knn_mask(a, k)
    assert np.all(mask.sum(axis=1) == m - 1 - k)
    assert not mask.diagonal().any()


def test_percent_to_k_examples():
    assert percent_to_k(1, 4096) == 40
    assert percent_to_k(5, 100) == 5
    assert percent_to_k(50, 3) == 1
    assert percent_to_k(100, 10) == 8


def test_threshold_examples():
    np.testing.assert_array_equal(threshold_alpha([[0.9, 0.3, 0.6]] * 3, 0.5)[0], [0.9, 0.0, 0.6])
    a = random_symmetric(6, 4, low=0.0)
    np.testing.assert_array_equal(threshold_alpha(a, 0.0), a)
    b = random_symmetric(9, 5)
    got = threshold_alpha(b, 0.5)
    for i in range(9):
        for j in range(9):
            expected = b[i, j] if (i == j or b[i, j] >= 0.5) else 0.0
            assert got[i, j] == expected


def test_balance_identity_is_uniform():
    votes, w, wsum = balance_weights(np.eye(4))
    np.testing.assert_array_equal(w, np.full(4, 0.25))
    assert wsum == 1.0


def test_balance_hand_evaluation_conventional():
    # votes (3, 1.5, 1.5): shifted (1.5, 0, 0), divided by the range 1.5
    alpha = np.array([[1.0, 1.0, 1.0], [1.0, 1.0, -0.5], [1.0, -0.5, 1.0]])
    votes, w, wsum = balance_weights(alpha, "conventional")
    np.testing.assert_allclose(votes, [3.0, 1.5, 1.5])
    np.testing.assert_allclose(w, [0.0, 1.0, 1.0])
    assert wsum == pytest.approx(2.0)


def test_balance_hand_evaluation_raw_max():
    # the literal formula divides the shifted votes by the largest raw vote (3)
    alpha = np.array([[1.0, 1.0, 1.0], [1.0, 1.0, 0.25], [1.0, 0.25, 1.0]])
    votes, w, wsum = balance_weights(alpha, "paper")
    np.testing.assert_allclose(votes, [3.0, 2.25, 2.25])
    np.testing.assert_allclose(w, [0.75, 1.0, 1.0])
    assert wsum == pytest.approx(2.75)


def test_balance_negative_range_errors():
    a = np.array([[-1.0, -1.0, -1.0], [-1.0, -1.0, -1.0], [-1.0, -1.0, 0.5]])
    with pytest.raises(ValueError, match="rescale alpha"):
        balance_weights(a, "paper")


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 30), st.integers(0, 10_000), st.sampled_from(["paper", "conventional"]))
def test_balance_weights_nonincreasing_in_votes(m, seed, mode):
    a = random_symmetric(m, seed, low=0.0)
    votes, w, wsum = balance_weights(a, mode)
    assert w.min() >= 0
    order = np.argsort(votes, kind="stable")
    assert np.all(np.diff(w[order]) <= 1e-12)
    assert wsum == pytest.approx(w.sum())


def test_bundle_shapes():
    f = np.random.default_rng(0).standard_normal((10, 4))
    b = similarity_bundle(f, k=2)
    assert b.alpha.min() >= 0
    assert b.knn_mask.shape == (10, 10)
    assert np.all(b.knn_mask.sum(axis=1) == 7)
    assert b.weights.shape == (10,) and b.weight_sum > 0
