import numpy as np
import pytest

from mrfcount.tensor import (Tensor, add, concat, finite_difference_check,
                             matmul, mul, no_grad, reduce_sum, relu, reshape,
                             scale, sub)


def test_add():
    out = add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    np.testing.assert_array_equal(out.data, [4.0, 6.0])


def test_scale():
    out = scale(Tensor([1.0, -2.0]), 0.5)
    np.testing.assert_array_equal(out.data, [0.5, -1.0])


def test_add_zeros_identity():
    x = Tensor(np.random.default_rng(0).normal(0, 1, (3, 4)))
    out = add(x, Tensor(np.zeros_like(x.data)))
    np.testing.assert_array_equal(out.data, x.data)


def test_elementwise_shape_mismatch_reports_both_shapes():
    with pytest.raises(ValueError) as exc:
        add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    assert "(2, 3)" in str(exc.value) and "(3, 2)" in str(exc.value)


def test_sub_and_mul():
    a, b = Tensor([5.0, 1.0]), Tensor([2.0, 4.0])
    np.testing.assert_array_equal(sub(a, b).data, [3.0, -3.0])
    np.testing.assert_array_equal(mul(a, b).data, [10.0, 4.0])


def test_reduce_sum_values():
    assert reduce_sum(Tensor([1.0, 2.0, 3.0])).item() == 6.0
    assert reduce_sum(Tensor(np.zeros((4, 5)))).item() == 0.0


def test_reduce_sum_gradient_is_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    reduce_sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_linear():
    x = Tensor([1.0, 1.0], requires_grad=True)
    loss = reduce_sum(scale(x, 2.0))
    loss.backward()
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_backward_quadratic():
    x = Tensor([3.0], requires_grad=True)
    reduce_sum(mul(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [6.0])


def test_backward_diamond_accumulates():
    x = Tensor([1.0], requires_grad=True)
    y = add(x, x)
    reduce_sum(y).backward()
    np.testing.assert_array_equal(x.grad, [2.0])


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        add(x, x).backward()


def test_backward_twice_rejected():
    x = Tensor([1.0], requires_grad=True)
    loss = reduce_sum(mul(x, x))
    loss.backward()
    with pytest.raises(RuntimeError):
        loss.backward()


def test_backward_deterministic_across_runs():
    rng = np.random.default_rng(1)
    data = rng.normal(0, 1, (4, 4))

    def run():
        x = Tensor(data.copy(), requires_grad=True)
        loss = reduce_sum(mul(relu(x), x))
        loss.backward()
        return x.grad.copy()

    np.testing.assert_array_equal(run(), run())


def test_relu_values():
    np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data,
                                  [0.0, 0.0, 2.0])
    np.testing.assert_array_equal(relu(Tensor([-3.0, -0.5])).data, [0.0, 0.0])


def test_relu_gradient_mask():
    x = Tensor([-2.0, 0.0, 3.0], requires_grad=True)
    reduce_sum(relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_matmul_gradients():
    rng = np.random.default_rng(2)
    a = Tensor(rng.normal(0, 1, (3, 4)), dtype=np.float64)
    b = Tensor(rng.normal(0, 1, (4, 2)), dtype=np.float64)
    err = finite_difference_check(
        lambda t: reduce_sum(mul(matmul(t, b), matmul(t, b))), a)
    assert err < 1e-6
    err = finite_difference_check(
        lambda t: reduce_sum(mul(matmul(a, t), matmul(a, t))), b)
    assert err < 1e-6


def test_matmul_shape_errors():
    with pytest.raises(ValueError):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_reshape_gradient():
    x = Tensor(np.arange(6.0), requires_grad=True)
    y = reshape(x, (2, 3))
    reduce_sum(mul(y, y)).backward()
    np.testing.assert_allclose(x.grad, 2 * np.arange(6.0))


def test_concat_gradient():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(2 * np.ones((2, 3)), requires_grad=True)
    out = concat([a, b], axis=1)
    assert out.shape == (2, 5)
    reduce_sum(mul(out, out)).backward()
    np.testing.assert_array_equal(a.grad, 2 * np.ones((2, 2)))
    np.testing.assert_array_equal(b.grad, 4 * np.ones((2, 3)))


def test_concat_shape_error():
    with pytest.raises(ValueError):
        concat([Tensor(np.zeros((2, 2))), Tensor(np.zeros((3, 2)))], axis=1)


def test_no_grad_skips_recording():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = mul(x, x)
    assert y._backward is None and y.inputs == ()


def test_finite_difference_sum_of_squares():
    x = Tensor(np.random.default_rng(3).normal(0, 1, (2, 3)), dtype=np.float64)
    err = finite_difference_check(lambda t: reduce_sum(mul(t, t)), x)
    assert err < 1e-6


def test_finite_difference_relu_away_from_kink():
    x = Tensor(np.random.default_rng(4).uniform(0.1, 2.0, (3, 3)),
               dtype=np.float64)
    err = finite_difference_check(lambda t: reduce_sum(relu(t)), x)
    assert err < 1e-6


def test_finite_difference_conv_then_sum():
    from mrfcount.layers import Conv2d

    conv = Conv2d(2, 3, 3, stride=1, padding=1, dtype=np.float64,
                  rng=np.random.default_rng(5))
    x = Tensor(np.random.default_rng(6).normal(0, 1, (1, 2, 5, 5)),
               dtype=np.float64)
    err = finite_difference_check(lambda t: reduce_sum(conv(t)), x)
    assert err < 1e-4


def test_finite_difference_requires_float64():
    x = Tensor(np.zeros(3), dtype=np.float32)
    with pytest.raises(ValueError):
        finite_difference_check(lambda t: reduce_sum(t), x)


def test_operations_keep_values_finite():
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(0, 10, (4, 4)), requires_grad=True)
    y = mul(relu(add(x, 1.5)), sub(x, 0.5))
    loss = reduce_sum(y)
    loss.backward()
    assert np.isfinite(y.data).all() and np.isfinite(x.grad).all()


def test_grad_shape_matches_values():
    x = Tensor(np.random.default_rng(8).normal(0, 1, (3, 2, 4)),
               requires_grad=True)
    reduce_sum(mul(x, x)).backward()
    assert x.grad.shape == x.data.shape
