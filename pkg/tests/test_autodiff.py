import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from posedesc import autodiff as ad
from posedesc import gradcheck
from posedesc.autodiff import Tensor
from posedesc.optim import Adam, AdamState, adam_step


def test_conv2d_all_ones_kernel_centre_is_sum():
    x = np.arange(9.0).reshape(1, 3, 3)
    out = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), padding=1)
    assert out.shape == (1, 3, 3)
    assert out.data[0, 1, 1] == pytest.approx(x.sum())


def test_conv2d_matches_naive_loop():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 9, 7))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    for stride in (1, 2):
        out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=1).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        oh = (9 + 2 - 3) // stride + 1
        ow = (7 + 2 - 3) // stride + 1
        ref = np.zeros((4, oh, ow))
        for o in range(4):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[:, i * stride:i * stride + 3, j * stride:j * stride + 3]
                    ref[o, i, j] = (patch * w[o]).sum() + b[o]
        np.testing.assert_allclose(out, ref, atol=1e-12)


def test_sample_bilinear_integer_coordinates_exact():
    rng = np.random.default_rng(1)
    m = rng.normal(size=(3, 5, 6))
    for x, y in [(0, 0), (5, 4), (2, 3)]:
        np.testing.assert_array_equal(ad.sample_bilinear(Tensor(m), np.array([x, y], float)).data, m[:, y, x])


def test_sample_bilinear_clamps_to_bounds():
    m = np.arange(12.0).reshape(1, 3, 4)
    out = ad.sample_bilinear(Tensor(m), np.array([[-5.0, -5.0], [10.0, 10.0]])).data
    np.testing.assert_array_equal(out[:, 0], [m[0, 0, 0], m[0, 2, 3]])


def test_relu_backward_zero_for_negative_inputs():
    x = Tensor(np.array([-2.0, -0.5, 0.5, 3.0]), requires_grad=True)
    ad.relu(x).sum().backward()
    np.testing.assert_array_equal(x.grad, [0, 0, 1, 1])


def test_sum_backward_all_ones():
    x = Tensor(np.random.default_rng(2).normal(size=(2, 3, 4)), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_product_of_scalars():
    x = Tensor(2.0, requires_grad=True)
    y = Tensor(3.0, requires_grad=True)
    (x * y).backward()
    assert x.grad == 3.0 and y.grad == 2.0


def test_backward_accumulates_without_zeroing():
    x = Tensor(np.ones(3), requires_grad=True)
    (x * 2.0).sum().backward()
    (x * 2.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [4, 4, 4])
    x.zero_grad()
    np.testing.assert_array_equal(x.grad, [0, 0, 0])


def test_backward_requires_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ad.ShapeError):
        (x * 2.0).backward()


def test_shape_mismatch_message_has_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_no_graph_without_requires_grad():
    out = ad.mul(Tensor(np.ones(2)), Tensor(np.ones(2)))
    assert out.is_leaf and not out.requires_grad


def test_shared_subexpression_visited_once():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = x * x
    (y + y).sum().backward()
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_deep_chain_does_not_recurse():
    x = Tensor(np.ones(2), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y + 0.0
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, [1, 1])


@pytest.mark.parametrize("name", sorted(gradcheck.op_cases()))
def test_every_op_matches_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    factory = gradcheck.op_cases()[name]
    for _ in range(3):
        fn, inputs = factory(rng)
        assert gradcheck.check_function(fn, inputs, rng) < 1e-4


def test_upsample_bilinear_grid_alignment():
    x = np.arange(6.0).reshape(1, 2, 3)
    up = ad.upsample_bilinear(Tensor(x), 2).data
    assert up.shape == (1, 4, 6)
    np.testing.assert_array_equal(up[0, ::2, ::2], x[0])
    assert up[0, 0, 1] == pytest.approx(0.5)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)),
                  elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_sum_to_one_and_shift_invariant(a):
    p = ad.softmax(Tensor(a), axis=1).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(ad.softmax(Tensor(a + 7.25), axis=1).data, p, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
                  elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_forward_ops_stay_finite(a):
    t = Tensor(a)
    for out in (ad.relu(t), ad.softmax(t, axis=1), ad.l2_normalize(t, axis=1), ad.vector_norm(t, axis=1),
                ad.absolute(t), ad.exp(ad.scalar_mul(t, 1e-3))):
        assert np.all(np.isfinite(out.data))


def test_adam_zero_gradient_leaves_params():
    params = [np.array([1.0, -2.0])]
    new, _ = adam_step(params, [np.zeros(2)], AdamState(), lr=1e-2)
    np.testing.assert_array_equal(new[0], params[0])


def test_adam_first_step_hand_computed():
    lr, g = 1e-4, 0.3
    new, state = adam_step([np.array([1.0])], [np.array([g])], AdamState(), lr=lr)
    m_hat = (0.1 * g) / (1 - 0.9)
    v_hat = (0.001 * g * g) / (1 - 0.999)
    assert new[0][0] == pytest.approx(1.0 - lr * m_hat / (np.sqrt(v_hat) + 1e-8), abs=1e-15)
    assert state.step == 1


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(5)
        p = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        opt = Adam([p], lr=1e-2)
        for _ in range(20):
            opt.zero_grad()
            (p * p * p).sum().backward()
            opt.step()
        return p.data
    np.testing.assert_array_equal(run(), run())
