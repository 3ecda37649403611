"""Engine-level tests: primitive values, backward, finite differences."""

import numpy as np
import pytest

from otfusion import autodiff as ad
from otfusion.autodiff import Tape, Tensor, backward, finite_diff_check


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = ad.matmul(a, np.eye(2))
    np.testing.assert_array_equal(out.values, [[1.0, 2.0], [3.0, 4.0]])


def test_sigmoid_at_zero():
    assert ad.sigmoid(Tensor([0.0])).values[0] == 0.5


def test_softmax_uniform_row():
    out = ad.softmax(Tensor([1.0, 1.0, 1.0, 1.0]))
    np.testing.assert_allclose(out.values, [0.25, 0.25, 0.25, 0.25], atol=0)


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 2\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_matmul_matches_naive_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 8)), rng.normal(size=(8, 4))
    naive = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            for k in range(8):
                naive[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(ad.matmul(Tensor(a), Tensor(b)).values, naive, rtol=1e-12)


def test_backward_of_sum_is_ones():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape():
        loss = ad.sum(x)
    backward(loss)
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_of_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape():
        loss = ad.sum(x * x)
    backward(loss)
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0], rtol=1e-12)


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        y = x * x
    with pytest.raises(ValueError, match="scalar"):
        backward(y)


def test_backward_requires_tape():
    x = Tensor([1.0], requires_grad=True)
    loss = ad.sum(x * x)  # no tape active
    with pytest.raises(ValueError, match="tape"):
        backward(loss)


def test_nested_tapes_rejected():
    with Tape():
        with pytest.raises(RuntimeError):
            with Tape():
                pass


def _random_fragment(rng):
    """4x4 pipeline fragment mixing most primitives."""
    a = Tensor(rng.uniform(-1, 1, (4, 4)), requires_grad=True)
    b = Tensor(rng.uniform(-1, 1, (4, 4)), requires_grad=True)
    c = Tensor(rng.uniform(-1, 1, (4, 1)), requires_grad=True)

    def f():
        h = ad.matmul(a, ad.transpose(b))
        h = ad.softmax(h * 0.5, axis=1)
        h = ad.mul(h, ad.sigmoid(c))
        h = ad.concat([h, ad.exp(b * 0.1)], axis=1)
        s = ad.logsumexp(h, axis=1, keepdims=True)
        return ad.mean(ad.sum(s, axis=0))

    return f, [a, b, c]


def test_fragment_gradients_match_finite_differences():
    f, params = _random_fragment(np.random.default_rng(18))
    assert finite_diff_check(f, params, h=1e-5) < 1e-5


def test_every_primitive_matches_central_differences():
    report = ad.primitive_gradient_checks()
    for name, err in report.items():
        assert err < 1e-6, f"{name}: {err}"


def test_backward_is_deterministic():
    def run():
        rng = np.random.default_rng(11)
        f, params = _random_fragment(rng)
        for p in params:
            p.grad = None
        with Tape():
            loss = f()
        backward(loss)
        return [p.grad.copy() for p in params]

    first, second = run(), run()
    for g1, g2 in zip(first, second):
        assert np.array_equal(g1, g2)


def test_double_backward_accumulates_additively():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        loss = ad.sum(x * x)
    backward(loss)
    once = x.grad.copy()
    backward(loss)
    np.testing.assert_array_equal(x.grad, 2.0 * once)


def test_finite_diff_quadratic():
    x = Tensor([3.0], requires_grad=True)

    def f():
        return ad.sum(x * x)

    assert finite_diff_check(f, [x], h=1e-5) < 1e-8


def test_finite_diff_constant_function():
    x = Tensor([1.0, -2.0], requires_grad=True)
    c = Tensor([5.0])

    def f():
        return ad.sum(c)

    assert finite_diff_check(f, [x], h=1e-5) == 0.0


def test_logsumexp_handles_minus_inf_rows():
    v = np.array([[0.0, -np.inf], [-np.inf, -np.inf]])
    out = ad.logsumexp(Tensor(v), axis=1, keepdims=True)
    assert out.values[0, 0] == 0.0
    assert out.values[1, 0] == -np.inf


def test_take_rows_accumulates_duplicate_indices():
    t = Tensor(np.zeros((3, 2)), requires_grad=True)
    with Tape():
        loss = ad.sum(ad.take_rows(t, np.array([1, 1, 2])))
    backward(loss)
    np.testing.assert_array_equal(t.grad, [[0.0, 0.0], [2.0, 2.0], [1.0, 1.0]])


def test_clamp_blocks_gradient_outside_range():
    x = Tensor([-2.0, 0.0, 2.0], requires_grad=True)
    with Tape():
        loss = ad.sum(ad.clamp(x, -1.0, 1.0))
    backward(loss)
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_no_tape_means_no_recording():
    x = Tensor([1.0], requires_grad=True)
    y = x * x
    assert not y.requires_grad and y.op is None
