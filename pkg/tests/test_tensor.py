import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dremlab import tensor as T
from dremlab.tensor import Tensor

from conftest import assert_grads_close, numeric_grad, tracked


def fd_check(fn, *shapes, rng, positive=False):
    xs = [tracked(rng, s) for s in shapes]
    if positive:
        for x in xs:
            x.data = np.abs(x.data) + 0.5
    out = fn(*xs)
    T.tsum(out * Tensor(np.linspace(0.5, 1.5, out.size).reshape(out.shape))).backward()
    weights = np.linspace(0.5, 1.5, out.size).reshape(out.shape)

    def value():
        with T.no_grad():
            return float(np.sum(fn(*xs).data * weights))

    assert_grads_close([x.grad for x in xs], numeric_grad(value, [x.data for x in xs]))


def test_square_gradient_at_three():
    x = Tensor(np.array(3.0), requires_grad=True)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)


@pytest.mark.parametrize(
    "fn",
    [
        lambda a, b: a + b,
        lambda a, b: a - b,
        lambda a, b: a * b,
        lambda a, b: a / (b * b + 1.0),
        lambda a, b: T.minimum(a, b),
        lambda a, b: T.concat([a, b], axis=-1),
    ],
    ids=["add", "sub", "mul", "div", "minimum", "concat"],
)
def test_binary_ops_match_finite_differences(fn, rng):
    fd_check(fn, (3, 4), (3, 4), rng=rng)


def test_broadcast_add_reduces_gradient(rng):
    fd_check(lambda a, b: a * b + b, (5, 3), (3,), rng=rng)


def test_matmul_gradient(rng):
    fd_check(lambda a, b: a @ b, (4, 3), (3, 2), rng=rng)


def test_matmul_rejects_non_2d():
    with pytest.raises(T.ShapeError):
        T.matmul(Tensor(np.ones((2, 2, 2))), Tensor(np.ones((2, 2))))


@pytest.mark.parametrize(
    "fn",
    [T.exp, T.tanh, T.sigmoid, T.softplus, T.relu, lambda a: a**3, lambda a: T.clip(a, -0.5, 0.5)],
    ids=["exp", "tanh", "sigmoid", "softplus", "relu", "pow", "clip"],
)
def test_unary_ops_match_finite_differences(fn, rng):
    fd_check(fn, (4, 5), rng=rng)


@pytest.mark.parametrize("fn", [T.log, T.sqrt], ids=["log", "sqrt"])
def test_positive_domain_ops(fn, rng):
    fd_check(fn, (3, 3), rng=rng, positive=True)


@pytest.mark.parametrize(
    "fn",
    [
        lambda a: T.tsum(a, axis=1),
        lambda a: T.mean(a, axis=0, keepdims=True),
        lambda a: a.reshape(6, 2),
        lambda a: T.transpose(a, (1, 0)),
        lambda a: a[np.array([0, 2, 2]), 1:],
    ],
    ids=["sum", "mean", "reshape", "transpose", "gather"],
)
def test_shape_ops(fn, rng):
    fd_check(fn, (3, 4), rng=rng)


def test_bce_with_logits_gradient_and_value(rng):
    z = tracked(rng, (2, 3))
    t = rng.uniform(0, 1, (2, 3))
    T.bce_with_logits(z, t).backward()
    p = 1 / (1 + np.exp(-z.data))
    expect = np.mean(-(t * np.log(p) + (1 - t) * np.log(1 - p)))
    assert float(T.bce_with_logits(z, t).data) == pytest.approx(expect, rel=1e-12)
    num = numeric_grad(lambda: float(T.bce_with_logits(Tensor(z.data), t).data), [z.data])
    assert_grads_close([z.grad], num)


@pytest.mark.parametrize(
    "kernel,stride,padding,size",
    [(2, 2, 0, 4), (3, 1, 1, 5), (3, 2, 0, 7), (2, 1, 0, 3)],
)
def test_conv2d_gradients(kernel, stride, padding, size, rng):
    fd_check(
        lambda x, w, b: T.conv2d(x, w, b, stride=stride, padding=padding),
        (2, size, size, 2),
        (kernel, kernel, 2, 3),
        (3,),
        rng=rng,
    )


def test_conv2d_matches_direct_loop(rng):
    x = rng.normal(size=(1, 5, 5, 2))
    w = rng.normal(size=(3, 3, 2, 4))
    out = T.conv2d(Tensor(x), Tensor(w), stride=2).data
    ref = np.zeros((1, 2, 2, 4))
    for i in range(2):
        for j in range(2):
            patch = x[0, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
            ref[0, i, j] = np.einsum("hwc,hwco->o", patch, w)
    np.testing.assert_allclose(out, ref, rtol=1e-12)


@pytest.mark.parametrize("kernel,stride,padding", [(2, 2, 0), (3, 2, 1), (3, 1, 0)])
def test_conv_transpose2d_gradients(kernel, stride, padding, rng):
    fd_check(
        lambda x, w, b: T.conv_transpose2d(x, w, b, stride=stride, padding=padding),
        (2, 3, 3, 2),
        (kernel, kernel, 2, 2),
        (2,),
        rng=rng,
    )


def test_conv_transpose2d_is_adjoint_of_conv2d(rng):
    # <conv(x), y> == <x, conv_T(y)> for matching geometry
    x = rng.normal(size=(1, 6, 6, 2))
    w = rng.normal(size=(2, 2, 2, 3))
    y = rng.normal(size=(1, 3, 3, 3))
    lhs = np.sum(T.conv2d(Tensor(x), Tensor(w), stride=2).data * y)
    wt = np.transpose(w, (0, 1, 3, 2))
    rhs = np.sum(x * T.conv_transpose2d(Tensor(y), Tensor(wt), stride=2).data)
    assert lhs == pytest.approx(rhs, rel=1e-10)


@pytest.mark.parametrize("dilation", [1, 2, 4])
def test_causal_conv1d_gradients(dilation, rng):
    fd_check(lambda x, w, b: T.causal_conv1d(x, w, b, dilation=dilation), (2, 8, 3), (2, 3, 4), (4,), rng=rng)


@pytest.mark.parametrize("dilation", [1, 2, 4])
def test_causal_conv1d_ignores_future_inputs(dilation, rng):
    x = rng.normal(size=(1, 8, 3))
    w = Tensor(rng.normal(size=(2, 3, 4)))
    base = T.causal_conv1d(Tensor(x), w, dilation=dilation).data
    for k in range(8):
        pert = x.copy()
        pert[:, k + 1 :] += rng.normal(size=pert[:, k + 1 :].shape)
        out = T.causal_conv1d(Tensor(pert), w, dilation=dilation).data
        np.testing.assert_array_equal(out[:, : k + 1], base[:, : k + 1])


@pytest.mark.parametrize("stride,kernel", [(2, 2), (1, 1), (2, 3)])
def test_conv_transpose1d_gradients(stride, kernel, rng):
    fd_check(lambda x, w, b: T.conv_transpose1d(x, w, b, stride=stride), (2, 3, 2), (kernel, 2, 3), (3,), rng=rng)


def test_conv_transpose1d_output_length():
    out = T.conv_transpose1d(Tensor(np.ones((1, 4, 2))), Tensor(np.ones((2, 2, 1))), stride=2)
    assert out.shape == (1, 8, 1)


def test_gradients_accumulate_over_reused_nodes(rng):
    x = tracked(rng, (3,))
    y = x * 2.0
    T.tsum(y * y + y).backward()
    np.testing.assert_allclose(x.grad, 8 * x.data + 2)


def test_backward_on_untracked_graph_raises():
    with pytest.raises(T.UsageError):
        T.tsum(Tensor(np.ones(3)) * 2.0).backward()


def test_backward_requires_scalar_without_grad(rng):
    with pytest.raises(T.UsageError):
        (tracked(rng, (3,)) * 2.0).backward()


def test_no_grad_disables_tracking(rng):
    x = tracked(rng, (2,))
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad
    assert T.is_grad_enabled()


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50)))
def test_softplus_and_sigmoid_are_finite(a):
    assert np.all(np.isfinite(T.softplus(Tensor(a)).data))
    s = T.sigmoid(Tensor(a)).data
    assert np.all((s >= 0) & (s <= 1))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 4, 4, 1), elements=st.floats(-5, 5)))
def test_space_to_depth_fast_path_matches_general_path(x):
    w = np.arange(8, dtype=np.float64).reshape(2, 2, 1, 2) / 7.0
    fast = T.conv2d(Tensor(x), Tensor(w), stride=2).data
    # same geometry through the overlapping-window path: pad by one then crop the extra output row/col
    xp = np.pad(x, ((0, 0), (0, 1), (0, 1), (0, 0)))
    slow = T.conv2d(Tensor(xp), Tensor(w), stride=2).data[:, :2, :2]
    np.testing.assert_allclose(fast, slow, atol=1e-12)
