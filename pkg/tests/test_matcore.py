import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from xmd import matcore


def naive_gram(a, b):
    out = np.zeros((len(a), len(b)))
    for i in range(len(a)):
        for j in range(len(b)):
            out[i, j] = sum(a[i][t] * b[j][t] for t in range(len(a[i])))
    return out


def test_normalize_examples():
    out = matcore.l2_normalize_rows([[3.0, 4.0], [1.0, 0.0], [1e-20, 0.0]], eps=1e-12)
    np.testing.assert_allclose(out, [[0.6, 0.8], [1.0, 0.0], [0.0, 0.0]], atol=1e-15)


def test_normalize_requires_columns():
    with pytest.raises(ValueError):
        matcore.l2_normalize_rows(np.zeros((2, 0)))


def test_gram_examples():
    np.testing.assert_array_equal(matcore.gram(np.eye(2), np.eye(2)), np.eye(2))
    np.testing.assert_array_equal(matcore.gram([[1, 2]], [[3, 4]]), [[11]])
    with pytest.raises(ValueError):
        matcore.gram(np.ones((2, 3)), np.ones((2, 4)))


def test_gram_matches_loop():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    np.testing.assert_allclose(matcore.gram(a, b), naive_gram(a.tolist(), b.tolist()), atol=1e-12)


def test_segment_mean_pool():
    np.testing.assert_array_equal(matcore.segment_mean_pool([[2.0], [4.0]], [0, 0], 1), [[3.0]])
    x = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(matcore.segment_mean_pool(x, [0, 1, 2], 3), x)

    rng = np.random.default_rng(0)
    x = rng.standard_normal((10, 4))
    labels = [0, 0, 1, 1, 1, 2, 2, 2, 2, 2]
    expected = np.zeros((3, 4))
    for g in range(3):
        rows = [x[i] for i in range(10) if labels[i] == g]
        expected[g] = [sum(r[t] for r in rows) / len(rows) for t in range(4)]
    np.testing.assert_allclose(matcore.segment_mean_pool(x, labels, 3), expected, atol=1e-12)


def test_segment_mean_pool_empty_group():
    with pytest.raises(ValueError, match="empty"):
        matcore.segment_mean_pool(np.ones((2, 1)), [0, 0], 2)


def test_logsumexp():
    assert matcore.logsumexp_row([0.0, 0.0]) == pytest.approx(math.log(2), abs=1e-15)
    assert matcore.logsumexp_row([1000.0, 1000.0]) == pytest.approx(1000 + math.log(2), abs=1e-12)
    assert matcore.logsumexp_row([-3.5]) == -3.5
    v = np.random.default_rng(7).uniform(-5, 5, 7)
    assert matcore.logsumexp_row(v) == pytest.approx(math.log(sum(math.exp(t) for t in v)), abs=1e-12)
    with pytest.raises(ValueError):
        matcore.logsumexp_row([])


finite_rows = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 5)),
                     elements=st.floats(-1e3, 1e3))


@given(finite_rows)
def test_normalize_idempotent(m):
    once = matcore.l2_normalize_rows(m)
    np.testing.assert_allclose(matcore.l2_normalize_rows(once), once, atol=1e-12)
    norms = np.linalg.norm(once, axis=1)
    assert np.all((np.abs(norms - 1) < 1e-12) | (norms == 0))


@given(finite_rows)
def test_gram_symmetric_unit_diagonal(m):
    g = matcore.gram(m, m)
    np.testing.assert_allclose(g, g.T, atol=1e-12 * max(1.0, np.abs(g).max()))
    n = matcore.l2_normalize_rows(m)
    ok = np.linalg.norm(m, axis=1) >= 1e-6
    np.testing.assert_allclose(np.diag(matcore.gram(n, n))[ok], 1.0, atol=1e-12)


@settings(max_examples=50)
@given(arrays(np.float64, st.integers(1, 10), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_logsumexp_shift(v, c):
    assert matcore.logsumexp_row(v + c) == pytest.approx(matcore.logsumexp_row(v) + c, abs=1e-10)


def test_text_and_binary_roundtrip(tmp_path):
    m = np.random.default_rng(1).standard_normal((3, 4))
    matcore.write_text(tmp_path / "m.txt", m)
    np.testing.assert_array_equal(matcore.read_text(tmp_path / "m.txt"), m)
    matcore.write_binary(tmp_path / "m.xmd", m)
    raw = (tmp_path / "m.xmd").read_bytes()
    assert raw[:4] == b"XMD1"
    assert int.from_bytes(raw[4:12], "little") == 3
    assert int.from_bytes(raw[12:20], "little") == 4
    assert len(raw) == 20 + 12 * 8
    np.testing.assert_array_equal(matcore.read_binary(tmp_path / "m.xmd"), m)


def test_binary_rejects_bad_magic():
    with pytest.raises(ValueError, match="magic"):
        matcore.from_bytes(b"NOPE" + bytes(16))
