"""Metric correctness against brute-force oracles."""

import numpy as np
import pytest

from dance.errors import EmptyCloud, EmptyIndex
from dance.geometry import PointCloud
from dance.metrics import (
    CSV_HEADER,
    NnIndex,
    add_gaussian_noise,
    chamfer,
    density_aware_cd,
    f1_at_threshold,
    metric_report,
    nn_distance,
)


# ---------------------------------------------------------------------------
# exhaustive-search oracles (independent of the tree implementation)
# ---------------------------------------------------------------------------

def brute_nn(queries, targets):
    d2 = ((queries[:, None, :] - targets[None, :, :]) ** 2).sum(axis=2)
    idx = d2.argmin(axis=1)  # argmin returns the lowest index among ties
    return np.sqrt(d2[np.arange(len(queries)), idx]), idx


def brute_chamfer(a, b, variant="l1"):
    da, _ = brute_nn(a, b)
    db, _ = brute_nn(b, a)
    if variant == "l2":
        da, db = da ** 2, db ** 2
    return 0.5 * (da.mean() + db.mean())


def brute_dcd(a, b, alpha=1000.0):
    def side(src, dst):
        d, idx = brute_nn(src, dst)
        counts = np.bincount(idx, minlength=len(dst))
        return (1.0 - np.exp(-alpha * d * d) / counts[idx]).mean()

    return 0.5 * (side(a, b) + side(b, a))


def brute_f1(pred, gt, tau=0.01):
    dp, _ = brute_nn(pred, gt)
    dg, _ = brute_nn(gt, pred)
    p = (dp < tau).mean()
    r = (dg < tau).mean()
    f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return f1, p, r


# ---------------------------------------------------------------------------
# nearest-neighbor index
# ---------------------------------------------------------------------------

def test_nn_trivial_cases():
    idx = NnIndex([[0.0, 0.0, 0.0]])
    assert nn_distance([1.0, 0.0, 0.0], idx) == 1.0
    assert nn_distance([0.0, 0.0, 0.0], idx) == 0.0

    pts = np.random.default_rng(0).normal(size=(40, 3))
    tree = NnIndex(pts)
    for i in (0, 13, 39):
        d, j = tree.query(pts[i])
        assert d == 0.0 and j == i


def test_nn_matches_brute_force_bitwise():
    rng = np.random.default_rng(1)
    for trial in range(30):
        n = int(rng.integers(1, 300))
        targets = rng.uniform(-1, 1, (n, 3))
        queries = rng.uniform(-1.2, 1.2, (50, 3))
        d_tree, i_tree = NnIndex(targets, leaf_size=int(rng.integers(1, 20))).query_many(queries)
        d_ref, i_ref = brute_nn(queries, targets)
        assert np.array_equal(d_tree, d_ref), trial
        assert np.array_equal(i_tree, i_ref), trial


def test_nn_tie_break_takes_lowest_index():
    targets = np.array([[1.0, 1.0, 1.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    d, j = NnIndex(targets, leaf_size=1).query([0.1, 0.0, 0.0])
    assert d == pytest.approx(0.1) and j == 1

    # symmetric pair: query equidistant from rows 0 and 1
    targets = np.array([[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [5.0, 5.0, 5.0]])
    d, j = NnIndex(targets, leaf_size=1).query([0.0, 0.0, 0.0])
    assert d == 1.0 and j == 0

    rng = np.random.default_rng(2)
    pts = rng.uniform(-1, 1, (64, 3))
    pts[41] = pts[7]  # exact duplicate, far apart in index order
    tree = NnIndex(pts, leaf_size=4)
    d, j = tree.query(pts[7] + 1e-3)
    assert j == 7


def test_nn_empty_index_raises():
    with pytest.raises(EmptyIndex):
        NnIndex(np.empty((0, 3))).query([0.0, 0.0, 0.0])


# ---------------------------------------------------------------------------
# chamfer
# ---------------------------------------------------------------------------

def test_chamfer_examples():
    pts = np.random.default_rng(3).normal(size=(30, 3))
    assert chamfer(pts, pts, "l1") == 0.0
    assert chamfer(pts, pts, "l2") == 0.0

    a, b = np.array([[0.0, 0.0, 0.0]]), np.array([[1.0, 0.0, 0.0]])
    assert chamfer(a, b, "l1") == 1.0
    assert chamfer(a, b, "l2") == 1.0

    a = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    b = np.array([[1.0, 0.0, 0.0]])
    assert chamfer(a, b, "l1") == 1.0  # forward mean 1.0, backward 1.0


def test_chamfer_symmetry_and_scale():
    rng = np.random.default_rng(4)
    a = rng.uniform(size=(60, 3))
    b = rng.uniform(size=(45, 3))
    assert chamfer(a, b, "l1") == chamfer(b, a, "l1")
    assert chamfer(a, b, "l2") == chamfer(b, a, "l2")
    for s in (0.3, 1.7, 12.0):
        assert chamfer(s * a, s * b, "l2") == pytest.approx(
            s * s * chamfer(a, b, "l2"), abs=1e-9)


def test_chamfer_rejects_unknown_variant_and_empty():
    a = np.ones((3, 3))
    with pytest.raises(ValueError):
        chamfer(a, a, "linf")
    with pytest.raises(EmptyCloud):
        chamfer(a, np.empty((0, 3)))


def test_chamfer_accepts_point_clouds():
    rng = np.random.default_rng(5)
    a, b = rng.uniform(size=(20, 3)), rng.uniform(size=(25, 3))
    assert chamfer(PointCloud(a), PointCloud(b)) == chamfer(a, b)


# ---------------------------------------------------------------------------
# density-aware chamfer
# ---------------------------------------------------------------------------

def test_dcd_identity_and_hand_value():
    pts = np.random.default_rng(6).uniform(size=(25, 3))
    assert density_aware_cd(pts, pts) == pytest.approx(0.0, abs=1e-12)

    # two sources collapse onto one target: forward side averages 1 - 1/2,
    # backward side is 0, so the total is 0.25
    a = np.zeros((2, 3))
    b = np.zeros((1, 3))
    assert density_aware_cd(a, b) == pytest.approx(0.25, abs=1e-12)


def test_dcd_far_separation_matches_oracle():
    rng = np.random.default_rng(7)
    a = rng.uniform(size=(30, 3))
    b = rng.uniform(size=(20, 3)) + 10.0  # alpha * d^2 >> 50 for every pair
    got = density_aware_cd(a, b)
    assert abs(got - brute_dcd(a, b)) < 1e-9
    assert got > 0.99


def test_dcd_symmetry_and_range():
    rng = np.random.default_rng(8)
    for _ in range(10):
        a = rng.uniform(size=(int(rng.integers(1, 50)), 3))
        b = rng.uniform(size=(int(rng.integers(1, 50)), 3))
        v = density_aware_cd(a, b)
        assert v == density_aware_cd(b, a)
        assert 0.0 <= v <= 1.0
        assert abs(v - brute_dcd(a, b)) < 1e-12


# ---------------------------------------------------------------------------
# f1 at threshold
# ---------------------------------------------------------------------------

def test_f1_examples():
    pts = np.random.default_rng(9).uniform(size=(40, 3))
    assert f1_at_threshold(pts, pts) == (1.0, 1.0, 1.0)

    far = pts + 5.0
    assert f1_at_threshold(pts, far) == (0.0, 0.0, 0.0)

    pred = np.array([[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]])
    gt = np.array([[0.0, 0.0, 0.0]])
    f1, p, r = f1_at_threshold(pred, gt, 0.01)
    assert (p, r) == (0.5, 1.0)
    assert f1 == pytest.approx(2 / 3, abs=1e-12)


def test_f1_strict_threshold_boundary():
    # a point exactly at distance tau does NOT count (strict <)
    pred = np.array([[0.01, 0.0, 0.0]])
    gt = np.array([[0.0, 0.0, 0.0]])
    f1, p, r = f1_at_threshold(pred, gt, 0.01)
    assert p == 0.0 and r == 0.0 and f1 == 0.0


def test_metric_oracle_equivalence_sampled():
    rng = np.random.default_rng(10)
    for _ in range(15):
        a = rng.uniform(-1, 1, (int(rng.integers(1, 120)), 3))
        b = rng.uniform(-1, 1, (int(rng.integers(1, 120)), 3))
        assert abs(chamfer(a, b, "l1") - brute_chamfer(a, b, "l1")) < 1e-9
        assert abs(chamfer(a, b, "l2") - brute_chamfer(a, b, "l2")) < 1e-9
        assert abs(density_aware_cd(a, b) - brute_dcd(a, b)) < 1e-9
        got = f1_at_threshold(a, b, 0.05)
        want = brute_f1(a, b, 0.05)
        assert np.allclose(got, want, atol=1e-9)


def test_metric_report_consistency():
    rng = np.random.default_rng(11)
    a, b = rng.uniform(size=(30, 3)), rng.uniform(size=(35, 3))
    rep = metric_report(a, b)
    assert rep.cd_l1 == chamfer(a, b, "l1")
    assert rep.cd_l2 == chamfer(a, b, "l2")
    assert rep.dcd == density_aware_cd(a, b)
    f1, p, r = f1_at_threshold(a, b)
    assert (rep.f1_at_1pct, rep.precision, rep.recall) == (f1, p, r)


def test_csv_header_layout():
    assert CSV_HEADER == ("sample_id", "cd_l1", "cd_l2", "dcd", "f1", "precision", "recall")


# ---------------------------------------------------------------------------
# noise harness
# ---------------------------------------------------------------------------

def test_noise_sigma_zero_is_identity():
    cloud = PointCloud(np.random.default_rng(12).uniform(size=(50, 3)))
    out = add_gaussian_noise(cloud, 0.0, seed=3)
    assert np.array_equal(out.points, cloud.points)


def test_noise_statistics_and_determinism():
    cloud = PointCloud(np.zeros((10000, 3)))
    noisy = add_gaussian_noise(cloud, 0.01, seed=4)
    sd = noisy.points.std()
    assert abs(sd - 0.01) / 0.01 < 0.05

    again = add_gaussian_noise(cloud, 0.01, seed=4)
    assert np.array_equal(noisy.points, again.points)
    other = add_gaussian_noise(cloud, 0.01, seed=5)
    assert not np.array_equal(noisy.points, other.points)


def test_noise_rejects_negative_sigma():
    with pytest.raises(ValueError):
        add_gaussian_noise(PointCloud(np.zeros((2, 3))), -0.1, seed=0)
