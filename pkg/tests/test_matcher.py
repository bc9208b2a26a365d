import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from posedesc import matcher
from posedesc.autodiff import Tensor
from posedesc.network import FeatureMapPair


def dist_from(probs, origin=(0.0, 0.0), stride=1.0):
    probs = np.asarray(probs, float)[None]
    return matcher.MatchDistribution(Tensor(probs), np.array([origin], float), stride)


def test_one_hot_correlation_peaks():
    fmap = np.full((1, 4, 5), -10.0)
    fmap[0, 2, 3] = 10.0
    d = matcher.correlate_softmax(np.array([1.0]), fmap)
    assert d.probs.data[0, 2, 3] > 0.999
    np.testing.assert_array_equal(d.argmax_cells(), [[3, 2]])


def test_constant_map_gives_uniform():
    d = matcher.correlate_softmax(np.ones(3), np.ones((3, 4, 6)))
    np.testing.assert_allclose(d.probs.data, 1.0 / 24, rtol=0, atol=1e-15)


def test_correlate_errors():
    with pytest.raises(matcher.MatchError):
        matcher.correlate_softmax(np.ones(2), np.ones((3, 4, 4)))
    with pytest.raises(matcher.MatchError):
        matcher.correlate_softmax(np.ones(3), np.ones((3, 4, 4)), region=[[0, 0, 0, 2]])
    with pytest.raises(matcher.MatchError):
        matcher.correlate_softmax(np.ones(3), np.ones((3, 4, 4)), region=[[3, 0, 2, 2]])


def test_expectation_closed_forms():
    h, w, s = 4, 6, 2.0
    uniform = dist_from(np.full((h, w), 1.0 / (h * w)), origin=(10, 20), stride=s)
    np.testing.assert_allclose(matcher.expectation(uniform).data, [[10 + s * (w - 1) / 2, 20 + s * (h - 1) / 2]])
    expected_var = s ** 2 * ((w ** 2 - 1) + (h ** 2 - 1)) / 12
    assert matcher.total_variance(uniform).data[0] == pytest.approx(expected_var, rel=1e-12)

    delta = np.zeros((h, w))
    delta[1, 4] = 1.0
    d = dist_from(delta, origin=(10, 20), stride=s)
    np.testing.assert_allclose(matcher.expectation(d).data, [[18, 22]])
    assert abs(matcher.total_variance(d).data[0]) < 1e-12

    bimodal = np.zeros((h, w))
    bimodal[0, 0] = bimodal[0, 4] = 0.5
    d = dist_from(bimodal, stride=s)
    np.testing.assert_allclose(matcher.expectation(d).data, [[4, 0]])
    # separation 8 px along x: variance d^2/4 on that axis, zero on the other
    assert matcher.total_variance(d).data[0] == pytest.approx(8.0 ** 2 / 4)


def test_expectation_equals_brute_force_weighted_sum():
    rng = np.random.default_rng(0)
    for _ in range(100):
        h, w = rng.integers(1, 9, size=2)
        p = rng.random((h, w))
        p /= p.sum()
        origin = rng.normal(size=2) * 10
        stride = float(rng.integers(1, 5))
        d = dist_from(p, origin, stride)
        brute = np.zeros(2)
        for r, c in itertools.product(range(h), range(w)):
            brute += p[r, c] * (origin + stride * np.array([c, r]))
        assert np.abs(matcher.expectation(d).data[0] - brute).max() <= 1e-12 * max(1.0, np.abs(brute).max())


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 4, 5), elements=st.floats(-5, 5)), arrays(np.float64, 3, elements=st.floats(-5, 5)),
       st.floats(0.1, 3.0))
def test_distribution_properties(fmap, q, temperature):
    d = matcher.correlate_softmax(q, fmap, temperature, stride=4.0)
    probs = d.probs.data
    assert np.all(probs >= 0)
    assert abs(probs.sum() - 1.0) < 1e-9
    e = matcher.expectation(d).data[0]
    assert -1e-9 <= e[0] <= 16 + 1e-9 and -1e-9 <= e[1] <= 12 + 1e-9
    assert matcher.total_variance(d).data[0] >= -1e-9


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3, 3), elements=st.floats(-5, 5)), st.floats(-100, 100))
def test_softmax_shift_invariance(fmap, shift):
    # append a constant channel: the query's extra coordinate adds one constant to every score
    q = np.array([0.7, -0.3])
    base = matcher.correlate_softmax(q, fmap).probs.data
    fmap2 = np.concatenate([fmap, np.ones((1, 3, 3))])
    shifted = matcher.correlate_softmax(np.append(q, shift), fmap2).probs.data
    np.testing.assert_allclose(shifted, base, atol=1e-12, rtol=0)


def _maps(coarse, fine, cs=4, fs=2, size=(16, 16)):
    return FeatureMapPair(Tensor(coarse), Tensor(fine), cs, fs, size)


def test_window_clamped_at_image_corners():
    rng = np.random.default_rng(1)
    fine = rng.normal(size=(3, 16, 16))
    for corner in [(0, 0), (3, 0), (0, 3), (3, 3)]:
        coarse = np.full((3, 4, 4), -5.0)
        coarse[:, corner[1], corner[0]] = 5.0
        m1 = _maps(np.ones((3, 4, 4)), fine, size=(32, 32))
        m2 = _maps(coarse, fine, size=(32, 32))
        res = matcher.match_c2f(m1, m2, np.array([[31.0, 31.0], [0.0, 0.0]]), window_fraction=0.5)
        col0, row0, ww, wh = res.window.T
        assert np.all(col0 >= 0) and np.all(row0 >= 0)
        assert np.all(col0 + ww <= 16) and np.all(row0 + wh <= 16)
        assert np.all(ww == 8) and np.all(wh == 8)


def test_fine_pred_inside_window():
    rng = np.random.default_rng(2)
    for _ in range(50):
        m1 = _maps(rng.normal(size=(4, 4, 4)), rng.normal(size=(4, 8, 8)), size=(16, 16))
        m2 = _maps(rng.normal(size=(4, 4, 4)) * 3, rng.normal(size=(4, 8, 8)) * 3, size=(16, 16))
        x1 = rng.uniform(0, 15, size=(10, 2))
        res = matcher.match_c2f(m1, m2, x1, window_fraction=0.5)
        lo = 2.0 * res.window[:, :2]
        hi = 2.0 * (res.window[:, :2] + res.window[:, 2:] - 1)
        pred = res.fine_pred.data
        assert np.all(pred >= lo - 1e-9) and np.all(pred <= hi + 1e-9)
        assert np.all(res.sigma_fine >= 0) and np.all(res.sigma_coarse >= 0)


def test_c2f_argmax_matches_exhaustive_argmax_when_peak_in_window():
    rng = np.random.default_rng(3)
    checked = 0
    for case in range(1000):
        c = 4
        fine2 = rng.normal(size=(c, 16, 16))
        # coarse map built from the fine one, so the coarse peak often sits near the fine peak
        coarse2 = fine2[:, ::4, ::4] + 0.5 * rng.normal(size=(c, 4, 4))
        m1 = _maps(rng.normal(size=(c, 4, 4)), rng.normal(size=(c, 16, 16)), cs=8, fs=2, size=(32, 32))
        m2 = _maps(coarse2, fine2, cs=8, fs=2, size=(32, 32))
        x1 = rng.uniform(0, 31, size=(1, 2))
        res = matcher.match_c2f(m1, m2, x1, window_fraction=0.5)
        flat = matcher.match_flat(m1, m2, x1)
        global_cell = flat.fine_dist.argmax_cells()[0]
        col0, row0, ww, wh = res.window[0]
        if col0 <= global_cell[0] < col0 + ww and row0 <= global_cell[1] < row0 + wh:
            checked += 1
            np.testing.assert_array_equal(res.fine_dist.argmax_pixels(), flat.fine_dist.argmax_pixels())
    assert checked >= 200


def brute_mutual_nn(d1, d2):
    out = []
    for i in range(len(d1)):
        di = [np.linalg.norm(d1[i] - d2[j]) for j in range(len(d2))]
        j = int(np.argmin(di))
        dj = [np.linalg.norm(d1[k] - d2[j]) for k in range(len(d1))]
        if int(np.argmin(dj)) == i:
            out.append((i, j))
    return out


def test_mutual_nn_identity_and_counterexample():
    d = np.random.default_rng(4).normal(size=(10, 5))
    m = matcher.mutual_nn_match(d, d)
    np.testing.assert_array_equal(m[:, 0], np.arange(10))
    np.testing.assert_array_equal(m[:, 1], np.arange(10))
    # a -> y, but y's nearest is b: a's pair is not mutual
    d1 = np.array([[0.0], [1.9]])
    d2 = np.array([[2.0], [10.0]])
    m = matcher.mutual_nn_match(d1, d2)
    assert [tuple(map(int, r[:2])) for r in m] == [(1, 0)]
    with pytest.raises(matcher.MatchError):
        matcher.mutual_nn_match(np.zeros((0, 2)), d2)


def test_mutual_nn_equals_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(30):
        d1 = rng.normal(size=(rng.integers(1, 25), 4))
        d2 = rng.normal(size=(rng.integers(1, 25), 4))
        got = [tuple(map(int, r[:2])) for r in matcher.mutual_nn_match(d1, d2)]
        assert got == brute_mutual_nn(d1, d2)


def test_ratio_test_examples():
    assert matcher.ratio_test_filter([0.5], [1.0], 0.8)[0]
    assert not matcher.ratio_test_filter([0.9], [1.0], 0.8)[0]
    rng = np.random.default_rng(6)
    d1 = rng.random(50)
    d2 = d1 + rng.random(50)
    assert matcher.ratio_test_filter(d1, d2, 1.0).all()
    assert matcher.ratio_test_filter([0.0], [0.0], 0.8)[0]


def test_nearest_two():
    idx, a, b = matcher.nearest_two(np.array([[0.0]]), np.array([[3.0], [1.0], [2.0]]))
    assert idx[0] == 1 and a[0] == 1.0 and b[0] == 2.0
