import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import special_ortho_group

from xmd.evaluate import (
    ProbeReport,
    linear_probe,
    minority_majority_split,
    stratified_split,
    tolerance,
    uniformity,
)
from xmd.matcore import l2_normalize_rows
from xmd.synth import nuscenes_like_proportions


def blobs(n_per, means, spread, seed):
    rng = np.random.default_rng(seed)
    x = np.vstack([m + spread * rng.standard_normal((n_per, len(m))) for m in means])
    y = np.repeat(np.arange(len(means)), n_per)
    return x, y


def test_separable_blobs_are_perfect():
    x, y = blobs(30, [np.array([1.0, 0, 0]), np.array([0, 1.0, 0])], 0.0, 0)
    rep = linear_probe(x, y)
    assert rep.overall_accuracy == 1.0
    assert rep.per_class_accuracy == {0: 1.0, 1: 1.0}


def test_shuffled_labels_fall_to_chance():
    accs = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((400, 8))
        y = rng.permutation(np.repeat([0, 1, 2, 3], [160, 80, 80, 80]))
        accs.append(linear_probe(x, y, split_seed=seed).overall_accuracy)
    # 80 test rows; chance is at most the 0.4 class prior
    sigma = math.sqrt(0.4 * 0.6 / 80)
    assert np.mean(accs) <= 0.4 + 3 * sigma / math.sqrt(20) + 0.02


def test_infinite_ridge_predicts_a_constant_class():
    x, y = blobs(20, [np.array([1.0, 0]), np.array([0, 1.0]), np.array([-1.0, 0])], 0.1, 1)
    y = np.concatenate([y, [0] * 10])
    x = np.vstack([x, x[:10]])
    rep = linear_probe(x, y, ridge_lambda=math.inf)
    recalls = sorted(rep.per_class_accuracy.values())
    assert recalls == [0.0, 0.0, 1.0]
    assert rep.per_class_accuracy[0] == 1.0


def test_tiny_class_is_dropped():
    x, y = blobs(10, [np.array([1.0, 0]), np.array([0, 1.0])], 0.1, 2)
    x = np.vstack([x, [[5.0, 5.0]]])
    y = np.concatenate([y, [7]])
    rep = linear_probe(x, y)
    assert rep.dropped_classes == [7]
    assert 7 not in rep.per_class_accuracy


def test_probe_needs_two_classes():
    with pytest.raises(ValueError):
        linear_probe(np.ones((5, 2)), np.zeros(5, dtype=int))


def test_probe_rotation_invariant():
    x, y = blobs(40, [np.eye(6)[c] for c in range(4)], 0.6, 3)
    rot = special_ortho_group.rvs(6, random_state=4)
    a = linear_probe(x, y, split_seed=5)
    b = linear_probe(x @ rot, y, split_seed=5)
    assert abs(a.overall_accuracy - b.overall_accuracy) < 1e-9
    assert a.per_class_accuracy == pytest.approx(b.per_class_accuracy, abs=1e-9)


def test_split_is_stratified_and_seeded():
    y = np.repeat([0, 1, 2], [50, 20, 5])
    tr, te = stratified_split(y, 3)
    assert np.intersect1d(tr, te).size == 0 and tr.size + te.size == 75
    assert [int((y[te] == c).sum()) for c in range(3)] == [10, 4, 1]
    tr2, te2 = stratified_split(y, 3)
    assert np.array_equal(te, te2)


def test_minority_majority_examples():
    minority, majority = minority_majority_split(nuscenes_like_proportions())
    assert len(minority) == 11 and len(majority) == 5
    assert minority | majority == set(range(16)) and not minority & majority
    assert minority_majority_split([0.25] * 4) == (set(), {0, 1, 2, 3})
    assert minority_majority_split([0.05, 0.95]) == ({0}, {1})


def test_report_groups_and_json():
    rep = ProbeReport({0: 1.0, 1: 0.5, 2: 0.0}, 0.5).with_groups({0, 1}, {2})
    assert rep.minority_mean == 0.75 and rep.majority_mean == 0.0
    assert '"1": 0.5' in rep.to_json()


def pair_loop_uniformity(x):
    x = l2_normalize_rows(x)
    m = len(x)
    tot = math.fsum(math.exp(-2 * float(np.sum((x[i] - x[j]) ** 2))) for i in range(m) for j in range(m) if i != j)
    return math.log(tot / (m * (m - 1)))


def test_uniformity_examples():
    assert uniformity(np.ones((5, 3))) == pytest.approx(0.0, abs=1e-15)
    assert uniformity([[1.0, 0.0], [-1.0, 0.0]]) == pytest.approx(-8.0, abs=1e-12)
    x = np.random.default_rng(0).standard_normal((50, 8))
    assert uniformity(x) == pytest.approx(pair_loop_uniformity(x), abs=1e-10)
    with pytest.raises(ValueError):
        uniformity(np.ones((1, 3)))


def test_uniformity_decreases_as_two_points_spread():
    angles = np.linspace(0, math.pi, 12)
    vals = [uniformity([[1.0, 0.0], [math.cos(t), math.sin(t)]]) for t in angles]
    assert vals[0] == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.diff(vals) < 0)


def test_tolerance_examples():
    assert tolerance(np.ones((4, 3)), [1, 1, 1, 1]) == pytest.approx(1.0, abs=1e-12)
    x = np.array([[1.0, 0], [1.0, 0], [0, 2.0], [0, 3.0]])
    assert tolerance(x, [0, 0, 1, 1]) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError, match="no same-class pair"):
        tolerance(np.eye(3), [0, 1, 2])


def test_tolerance_matches_pair_loop():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((30, 5))
    y = rng.integers(0, 3, 30)
    xn = l2_normalize_rows(x)
    vals = [float(xn[i] @ xn[j]) for i in range(30) for j in range(30) if i != j and y[i] == y[j]]
    assert tolerance(x, y) == pytest.approx(math.fsum(vals) / len(vals), abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_tolerance_bounded(seed):
    rng = np.random.default_rng(seed)
    t = tolerance(rng.standard_normal((12, 3)), rng.integers(0, 2, 12))
    assert -1 - 1e-12 <= t <= 1 + 1e-12
