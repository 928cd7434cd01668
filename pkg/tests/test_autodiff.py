"""Gradient correctness of the autodiff engine against finite differences."""

from __future__ import annotations

import numpy as np

from onshap.nn import (
    Tensor,
    cross_entropy,
    finite_difference_check,
    forward_tensor,
    init_dense_net,
    logsumexp,
    mean_squared_error,
    net_params,
    one_hot,
    softmax,
    stack_logsumexp,
)


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(x)
        flat[i] = orig - eps
        down = f(x)
        flat[i] = orig
        gf[i] = (up - down) / (2 * eps)
    return g


def check_op(build, x0, rtol=1e-6):
    t = Tensor(x0.copy(), requires_grad=True)
    out = build(t)
    out.backward()
    analytic = t.grad

    def scalar(arr):
        return build(Tensor(arr)).item()

    numeric = numeric_grad(scalar, x0.copy())
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=1e-7)


def test_elementwise_ops():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 3))
    check_op(lambda t: (t * 2.0 + 1.0).square().sum(), x)
    check_op(lambda t: (t.exp() + t.relu()).sum(), x)
    check_op(lambda t: t.sigmoid().mean(), x)
    check_op(lambda t: t.softplus().sum(), x)
    check_op(lambda t: (t.abs() + 0.5).log().sum(), x + 3.0)
    check_op(lambda t: (t / 3.0 - t**2).sum(), x)


def test_broadcasting_bias_grad():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 4))
    b0 = rng.normal(size=4)
    b = Tensor(b0.copy(), requires_grad=True)
    out = (Tensor(x) + b).square().sum()
    out.backward()

    def scalar(arr):
        return float(((x + arr) ** 2).sum())

    np.testing.assert_allclose(b.grad, numeric_grad(scalar, b0.copy()), rtol=1e-6)


def test_matmul_grad():
    rng = np.random.default_rng(2)
    a0 = rng.normal(size=(3, 4))
    w0 = rng.normal(size=(4, 2))
    w = Tensor(w0.copy(), requires_grad=True)
    (Tensor(a0) @ w).square().sum().backward()

    def scalar(arr):
        return float(((a0 @ arr) ** 2).sum())

    np.testing.assert_allclose(w.grad, numeric_grad(scalar, w0.copy()), rtol=1e-6)


def test_getitem_grad():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 6))
    check_op(lambda t: t[:, 1:4].square().sum() + t[:, 0].sum(), x)


def test_logsumexp_and_softmax():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(5, 3)) * 10
    check_op(lambda t: logsumexp(t, axis=1).sum(), x)
    check_op(lambda t: (softmax(t, axis=1) * np.arange(3)).sum(), x)
    probs = softmax(Tensor(x), axis=1).data
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)


def test_stack_logsumexp_matches_dense():
    rng = np.random.default_rng(5)
    a, b, c = (rng.normal(size=7) for _ in range(3))
    got = stack_logsumexp([Tensor(a), Tensor(b), Tensor(c)]).data
    want = np.log(np.exp(a) + np.exp(b) + np.exp(c))
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_reused_node_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x + x * 3.0  # dy/dx = 2x + 3 = 7
    y.sum().backward()
    np.testing.assert_allclose(x.grad, [7.0])


def test_quadratic_loss_analytic():
    # |w*x - y|^2 at w=0, x=1, y=1: dL/dw = -2
    w = Tensor(np.array([0.0]), requires_grad=True)
    loss = (w * 1.0 - 1.0).square().sum()
    loss.backward()
    np.testing.assert_allclose(w.grad, [-2.0])


def test_constant_loss_zero_grad():
    w = Tensor(np.array([1.5]), requires_grad=True)
    loss = (w - w + 4.0).sum()
    loss.backward()
    np.testing.assert_allclose(w.grad, [0.0])


def test_network_loss_gradient_check():
    rng = np.random.default_rng(6)
    net = init_dense_net([3, 8, 8, 2], output_activation="softmax", seed=11)
    params = net_params(net)
    xb = rng.normal(size=(16, 3))
    yb = one_hot(rng.integers(0, 2, size=16), 2)

    worst_ce = finite_difference_check(
        lambda: cross_entropy(forward_tensor(params, xb), yb), params, n_coords=100
    )
    assert worst_ce < 1e-3

    target = rng.uniform(size=(16, 2))
    worst_mse = finite_difference_check(
        lambda: mean_squared_error(softmax(forward_tensor(params, xb), axis=1), target),
        params,
        n_coords=100,
    )
    assert worst_mse < 1e-3
