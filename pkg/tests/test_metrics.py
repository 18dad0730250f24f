import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from particle_world import autodiff as ad
from particle_world.errors import InvalidInputError
from particle_world.metrics import (
    LossConfig,
    chamfer_distance,
    chamfer_plus_hausdorff,
    hausdorff_distance,
    hybrid_components,
    hybrid_loss,
    soft_hausdorff,
    tracked_mse,
)


def cloud(rng, n):
    return rng.uniform(-1, 1, size=(n, 3))


# chamfer


def test_chamfer_identical_sets_is_zero():
    a = np.array([[0.0, 0, 0], [1, 0, 0]])
    assert chamfer_distance(a, a.copy()) == 0.0


def test_chamfer_single_points():
    assert chamfer_distance([[0.0, 0, 0]], [[1.0, 0, 0]]) == 2.0


def test_chamfer_two_to_one_matches_brute_force():
    a, b = [[0.0, 0, 0], [2.0, 0, 0]], [[1.0, 0, 0]]
    expected = oracles.chamfer(a, b)
    assert expected == 2.0  # 1.0 mean forward, 1.0 backward
    assert chamfer_distance(np.array(a), np.array(b)) == pytest.approx(expected, abs=1e-15)


def test_chamfer_squared_option():
    a, b = np.array([[0.0, 0, 0]]), np.array([[3.0, 4, 0]])
    assert chamfer_distance(a, b, squared=True) == pytest.approx(50.0)


def test_chamfer_batched_matches_per_item():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(4, 7, 3)), rng.normal(size=(4, 5, 3))
    got = chamfer_distance(a, b)
    assert got.shape == (4,)
    for i in range(4):
        assert got[i] == pytest.approx(oracles.chamfer(a[i], b[i]), abs=1e-12)


# hausdorff


def test_hausdorff_identity_and_345():
    a = np.random.default_rng(2).normal(size=(6, 3))
    assert hausdorff_distance(a, a) == 0.0
    assert hausdorff_distance([[0.0, 0, 0]], [[3.0, 4, 0]]) == 5.0


def test_hausdorff_random_8_vs_6_matches_scan():
    rng = np.random.default_rng(3)
    a, b = cloud(rng, 8), cloud(rng, 6)
    assert hausdorff_distance(a, b) == pytest.approx(oracles.hausdorff(a, b), abs=1e-12)


def test_hausdorff_triangle_inequality():
    rng = np.random.default_rng(4)
    for _ in range(50):
        a, b, c = cloud(rng, 5), cloud(rng, 7), cloud(rng, 4)
        assert hausdorff_distance(a, c) <= hausdorff_distance(a, b) + hausdorff_distance(b, c) + 1e-12


# smooth hausdorff


@pytest.mark.parametrize("beta,tau", [(1.0, 1.0), (50.0, 0.02), (1000.0, 0.001)])
def test_soft_hausdorff_singletons_are_exact(beta, tau):
    assert soft_hausdorff([[0.0, 0, 0]], [[1.0, 0, 0]], beta, tau) == 1.0


@pytest.mark.parametrize("beta,tau", [(1.0, 1.0), (8.0, 0.125), (50.0, 0.02)])
def test_soft_hausdorff_identical_sets_within_smoothing_residue(beta, tau):
    a = np.random.default_rng(5).normal(size=(9, 3))
    bound = tau * math.log(9) + math.log(9) / beta
    value = soft_hausdorff(a, a, beta, tau)
    assert 0.0 <= value <= bound


def test_soft_hausdorff_matches_scalar_oracle():
    rng = np.random.default_rng(6)
    a, b = cloud(rng, 7), cloud(rng, 5)
    for beta, tau in [(3.0, 0.4), (50.0, 0.02)]:
        assert soft_hausdorff(a, b, beta, tau) == pytest.approx(oracles.soft_hausdorff(a, b, beta, tau), abs=1e-12)


def test_soft_hausdorff_decreases_to_exact():
    rng = np.random.default_rng(7)
    a, b = cloud(rng, 10), cloud(rng, 10)
    exact = oracles.hausdorff(a, b)
    gaps = [soft_hausdorff(a, b, 2.0**j, 2.0**-j) - exact for j in range(3, 11)]
    assert all(g >= 0 for g in gaps)
    assert all(later < earlier for earlier, later in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-3


def test_soft_hausdorff_rejects_bad_temperatures():
    with pytest.raises(InvalidInputError):
        soft_hausdorff([[0.0, 0, 0]], [[1.0, 0, 0]], 0.0, 0.1)
    with pytest.raises(InvalidInputError):
        soft_hausdorff([[0.0, 0, 0]], [[1.0, 0, 0]], 1.0, -1.0)


# hybrid and tracked mse


def test_hybrid_loss_boundaries_and_midpoint():
    rng = np.random.default_rng(8)
    pred, gt = cloud(rng, 5), cloud(rng, 5)
    cd = oracles.chamfer(pred, gt)
    shd = oracles.soft_hausdorff(pred, gt, 50.0, 0.02)
    assert hybrid_loss(pred, gt, LossConfig(alpha=1.0)) == chamfer_distance(pred, gt)
    assert hybrid_loss(pred, gt, LossConfig(alpha=0.0)) == soft_hausdorff(pred, gt)
    assert hybrid_loss(pred, gt, LossConfig(alpha=0.5)) == pytest.approx(0.5 * (cd + shd), abs=1e-12)
    loss, c, h = hybrid_components(pred, gt)
    assert (c, h) == pytest.approx((cd, shd), abs=1e-12)


def test_loss_config_validation():
    with pytest.raises(InvalidInputError):
        LossConfig(alpha=1.5)
    with pytest.raises(InvalidInputError):
        LossConfig(beta_max=0.0)


def test_tracked_mse_examples():
    a = np.random.default_rng(9).normal(size=(4, 3))
    assert tracked_mse(a, a) == 0.0
    assert tracked_mse([[0.0, 0, 0]], [[0.1, 0, 0]]) == pytest.approx(0.01, abs=1e-17)


def test_tracked_mse_20_pairs_matches_loop():
    rng = np.random.default_rng(10)
    a, b = rng.normal(size=(20, 3)), rng.normal(size=(20, 3))
    assert tracked_mse(a, b) == pytest.approx(oracles.tracked_mse(a, b), abs=1e-12)


def test_tracked_mse_needs_equal_counts():
    with pytest.raises(InvalidInputError):
        tracked_mse(np.zeros((3, 3)), np.zeros((4, 3)))


@pytest.mark.parametrize("fn", [chamfer_distance, hausdorff_distance, soft_hausdorff, hybrid_loss])
def test_empty_or_malformed_sets_are_rejected(fn):
    with pytest.raises(InvalidInputError):
        fn(np.zeros((0, 3)), np.zeros((2, 3)))
    with pytest.raises(InvalidInputError):
        fn(np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(InvalidInputError):
        fn(np.array([[np.nan, 0, 0]]), np.zeros((1, 3)))


def test_chamfer_plus_hausdorff_sums_the_exact_terms():
    rng = np.random.default_rng(11)
    a, b = cloud(rng, 6), cloud(rng, 8)
    assert chamfer_plus_hausdorff(a, b) == pytest.approx(oracles.chamfer(a, b) + oracles.hausdorff(a, b), abs=1e-12)


# gradients


def test_metric_gradients_match_finite_differences():
    rng = np.random.default_rng(12)
    pred, gt = cloud(rng, 6), cloud(rng, 5)
    cfg = LossConfig(0.3, 20.0, 0.05)
    fns = [
        lambda p: chamfer_distance(p, gt),
        lambda p: soft_hausdorff(p, gt, 20.0, 0.05),
        lambda p: hybrid_loss(p, gt, cfg),
        lambda p: tracked_mse(p, gt[:1].repeat(6, axis=0) + 0.1),
    ]
    for fn in fns:
        assert ad.finite_difference_check(fn, [pred]) < 1e-4


def test_tensor_inputs_return_tensors():
    p = ad.parameter(np.zeros((2, 3)))
    out = chamfer_distance(p, np.ones((2, 3)))
    assert isinstance(out, ad.Tensor)
    ad.backward(out)
    assert p.grad.shape == (2, 3)


# properties

point_sets = st.integers(1, 7).flatmap(
    lambda n: arrays(np.float64, (n, 3), elements=st.floats(-10, 10, allow_nan=False, width=64))
)


@settings(max_examples=60, deadline=None)
@given(point_sets, point_sets)
def test_symmetry_and_nonnegativity(a, b):
    assert chamfer_distance(a, b) == pytest.approx(chamfer_distance(b, a), abs=1e-12)
    assert hausdorff_distance(a, b) == hausdorff_distance(b, a)
    assert chamfer_distance(a, b) >= 0 and hausdorff_distance(a, b) >= 0


@settings(max_examples=60, deadline=None)
@given(point_sets, point_sets, st.randoms(use_true_random=False))
def test_permutation_invariance(a, b, rnd):
    pa = list(range(len(a)))
    pb = list(range(len(b)))
    rnd.shuffle(pa)
    rnd.shuffle(pb)
    assert chamfer_distance(a[pa], b[pb]) == pytest.approx(chamfer_distance(a, b), abs=1e-9)
    assert hausdorff_distance(a[pa], b[pb]) == hausdorff_distance(a, b)
    assert soft_hausdorff(a[pa], b[pb]) == pytest.approx(soft_hausdorff(a, b), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(point_sets, point_sets)
def test_soft_hausdorff_is_an_upper_bound(a, b):
    assert soft_hausdorff(a, b, 50.0, 0.02) >= hausdorff_distance(a, b) - 1e-12
