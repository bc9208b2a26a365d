import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from posedesc import geometry, gradcheck, losses, matcher
from posedesc.autodiff import Tensor
from posedesc.network import FeatureMapPair

F_X = geometry.fundamental_from_pose(np.eye(3), np.eye(3), geometry.RelativePose(np.eye(3), [1.0, 0.0, 0.0]))


def test_epipolar_loss_examples():
    assert losses.epipolar_loss([[0.0, 0.0]], [[10.0, 3.0]], F_X).data == pytest.approx(3.0)
    assert losses.epipolar_loss([[0.0, 5.0]], [[-7.0, 5.0]], F_X).data == 0.0
    # any two points on the same line score the same: the loss cannot pin down the match
    a = losses.epipolar_loss([[1.0, 2.0]], [[40.0, 2.0]], F_X).data
    b = losses.epipolar_loss([[1.0, 2.0]], [[-3.0, 2.0]], F_X).data
    assert a == b == 0.0


def test_epipolar_loss_zero_at_true_matches():
    from conftest import synthetic_two_view

    K1, K2, pose, x1, x2 = synthetic_two_view(np.random.default_rng(0), n=200)
    F = geometry.fundamental_from_pose(K1, K2, pose)
    assert losses.epipolar_distance(x1, x2, F).data.max() < 1e-6


def test_epipolar_degenerate_line_raises():
    F0 = np.diag([0.0, 0.0, 1.0])
    with pytest.raises(geometry.DegenerateLineError):
        losses.epipolar_distance([[1.0, 1.0]], [[0.0, 0.0]], F0)
    with pytest.raises(ValueError):
        losses.QueryBatch.build([[1.0, 1.0]], F0)


def test_query_batch_drops_degenerate_queries():
    # pure x translation: the epipole is at infinity, so make a finite one with a z translation
    F = geometry.fundamental_from_pose(np.eye(3), np.eye(3), geometry.RelativePose(np.eye(3), [0.0, 0.0, 1.0]))
    b = losses.QueryBatch.build([[0.0, 0.0], [3.0, 4.0]], F)
    assert b.n == 1 and list(b.skipped) == [0]
    np.testing.assert_allclose(b.F_backward, F.T)


def test_cycle_loss_examples():
    assert losses.cycle_loss([[2.0, 2.0]], [[2.0, 2.0]]).data == 0.0
    assert losses.cycle_loss([[2.0, 2.0]], [[5.0, 6.0]]).data == pytest.approx(5.0)


def test_supervised_l2_examples():
    assert losses.supervised_l2_loss([[1.0, 1.0]], [[1.0, 1.0]]).data == 0.0
    assert losses.supervised_l2_loss([[4.0, 5.0]], [[1.0, 1.0]]).data == pytest.approx(5.0)


def test_uncertainty_weights_examples():
    np.testing.assert_allclose(losses.uncertainty_weights([1.0, 3.0]), [0.75, 0.25], rtol=1e-15)
    assert losses.uncertainty_weights([123.0])[0] == 1.0
    np.testing.assert_allclose(losses.uncertainty_weights([0.1, 0.2, 0.01]), [1 / 3] * 3)
    with pytest.raises(ValueError):
        losses.uncertainty_weights([])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 50), elements=st.floats(0, 1e6)))
def test_weights_sum_to_one(sigma):
    w = losses.uncertainty_weights(sigma)
    assert abs(w.sum() - 1.0) < 1e-12
    assert np.all(w >= 0)


def test_weighted_pair_loss_uses_lambda_and_weights():
    ep = Tensor(np.array([1.0, 2.0]))
    cy = Tensor(np.array([10.0, 20.0]))
    total, w = losses.weighted_pair_loss(ep, cy, [1.0, 3.0], lam=0.1)
    assert total.data == pytest.approx(0.75 * 2.0 + 0.25 * 4.0)
    total, w = losses.weighted_pair_loss(ep, cy, [1.0, 3.0], lam=0.1, reweight=False)
    assert total.data == pytest.approx(3.0)
    assert losses.LossOptions().lam == 0.1


def test_weights_are_gradient_stopped():
    sigma = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    ep = Tensor(np.array([1.0, 1.0]), requires_grad=True)
    total, _ = losses.weighted_pair_loss(ep, None, sigma.data)
    total.backward()
    assert sigma.grad is None or not np.any(sigma.grad)
    np.testing.assert_allclose(ep.grad, [2 / 3, 1 / 3])


def test_triplet_examples():
    a = np.array([[1.0, 0.0]])
    assert losses.triplet_loss_hard_negative(a, a, np.array([[-1.0, 0.0], [0.0, 1.0]]), 0.5).data == 0.0
    # d(a,p)=1, hardest negative at distance 1, margin 0.5
    p = np.array([[0.0, 0.0]])
    negs = np.array([[2.0, 0.0], [5.0, 0.0]])
    assert losses.triplet_loss_hard_negative(a, p, negs, 0.5).data == pytest.approx(0.5)
    with pytest.raises(ValueError):
        losses.triplet_loss_hard_negative(a, p, np.zeros((0, 2)))


def test_hardest_negative_equals_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(20):
        anchors = rng.normal(size=(6, 3))
        cands = rng.normal(size=(30, 3))
        cand_xy = rng.uniform(0, 20, size=(30, 2))
        pos_xy = rng.uniform(0, 20, size=(6, 2))
        idx = losses.hardest_negative(anchors, cands, cand_xy, pos_xy, radius=4.0)
        for i in range(6):
            best, best_d = -1, np.inf
            for j in range(30):
                if np.linalg.norm(cand_xy[j] - pos_xy[i]) <= 4.0:
                    continue
                d = np.linalg.norm(anchors[i] - cands[j])
                if d < best_d:
                    best, best_d = j, d
            assert idx[i] == best


def test_hardest_negative_all_excluded():
    idx = losses.hardest_negative(np.ones((1, 2)), np.ones((3, 2)), np.zeros((3, 2)), np.zeros((1, 2)), 1.0)
    assert idx[0] == -1


def _toy_maps(rng, c=4):
    m1 = FeatureMapPair(Tensor(rng.normal(size=(c, 4, 4)), requires_grad=True),
                        Tensor(rng.normal(size=(c, 8, 8)), requires_grad=True), 4, 2, (16, 16))
    m2 = FeatureMapPair(Tensor(rng.normal(size=(c, 4, 4)), requires_grad=True),
                        Tensor(rng.normal(size=(c, 8, 8)), requires_grad=True), 4, 2, (16, 16))
    return m1, m2


def test_pair_loss_gradient_two_point_batch():
    rng = np.random.default_rng(7)
    m1, m2 = _toy_maps(rng)
    F = geometry.fundamental_from_pose(np.eye(3), np.eye(3),
                                       geometry.RelativePose(geometry.rotation_about([0, 1, 0], 5), [1.0, 0.2, 0.1]))
    batch = losses.QueryBatch.build(np.array([[3.3, 5.1], [9.7, 2.2]]), F)
    opts = losses.LossOptions(window_fraction=0.5)
    w = losses.pair_objective(m1, m2, batch, opts).weights
    tensors = [m1.coarse, m1.fine, m2.coarse, m2.fine]

    def fn(c1, f1, c2, f2):
        a = FeatureMapPair(c1, f1, 4, 2, (16, 16))
        b = FeatureMapPair(c2, f2, 4, 2, (16, 16))
        return losses.pair_objective(a, b, batch, opts, weights=w).total

    err = gradcheck.check_function(fn, [t.data for t in tensors], rng, max_coords=40)
    assert err < 1e-4


def test_cycle_gradient_reaches_both_hops():
    rng = np.random.default_rng(8)
    m1, m2 = _toy_maps(rng)
    fwd = matcher.match(m1, m2, np.array([[5.0, 6.0]]), True, 0.5)
    back = matcher.match(m2, m1, fwd.fine_pred, True, 0.5).fine_pred
    losses.cycle_loss([[5.0, 6.0]], back).backward()
    # the forward hop only touches maps2 through its correlation; the backward hop samples maps2 at the prediction
    assert np.any(m2.fine.grad) and np.any(m1.fine.grad)


def test_supervised_and_triplet_objectives_run():
    rng = np.random.default_rng(9)
    m1, m2 = _toy_maps(rng)
    F = geometry.fundamental_from_pose(np.eye(3), np.eye(3), geometry.RelativePose(np.eye(3), [1.0, 0.0, 0.0]))
    batch = losses.QueryBatch.build([[3.0, 5.0], [9.0, 2.0]], F, gt=[[4.0, 5.0], [10.0, 2.0]])
    for mode in ("supervised_l2", "triplet"):
        out = losses.pair_objective(m1, m2, batch, losses.LossOptions(mode=mode, window_fraction=0.5))
        assert np.isfinite(out.total.data) and out.total.data >= 0
        out.total.backward()
    with pytest.raises(ValueError):
        losses.pair_objective(m1, m2, losses.QueryBatch.build([[3.0, 5.0]], F),
                              losses.LossOptions(mode="supervised_l2"))


def test_single_scale_triplet_leaves_coarse_map_untouched():
    rng = np.random.default_rng(10)
    m1, m2 = _toy_maps(rng)
    F = geometry.fundamental_from_pose(np.eye(3), np.eye(3), geometry.RelativePose(np.eye(3), [1.0, 0.0, 0.0]))
    batch = losses.QueryBatch.build([[3.0, 5.0], [9.0, 2.0]], F, gt=[[4.0, 5.0], [10.0, 2.0]])
    out = losses.pair_objective(m1, m2, batch, losses.LossOptions(mode="triplet", c2f=False, triplet_margin=2.5))
    out.total.backward()
    assert m1.coarse.grad is None or not np.any(m1.coarse.grad)
    assert np.any(m1.fine.grad)
