import numpy as np
import pytest

from fairloop.nets import (
    Adam,
    Net,
    NetError,
    backward,
    finite_difference_grad,
    forward,
    forward_cached,
    init_net,
    net_from_params,
    prob,
    sigmoid,
)


def test_zero_params_give_half_probability():
    net = Net("linear", [(4, 1)])
    x = np.random.default_rng(0).normal(size=(8, 4))
    assert np.allclose(prob(net, x), 0.5)


def test_linear_predictor_matches_closed_form():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(5, 1))
    b = rng.normal(size=1)
    net = net_from_params("linear", [w], [b])
    x = rng.normal(size=(20, 5))
    expected = 1.0 / (1.0 + np.exp(-(x @ w[:, 0] + b[0])))
    assert np.allclose(prob(net, x), expected, atol=1e-12)


@pytest.mark.parametrize("kind", ["tanh64", "relu64"])
def test_outputs_finite_on_bounded_inputs(kind):
    rng = np.random.default_rng(2)
    net = init_net(kind, 6, rng)
    x = rng.uniform(-10, 10, size=(64, 6))
    out = forward(net, x)
    assert np.isfinite(out).all()
    p = prob(net, x)
    assert ((p > 0) & (p < 1)).all()


def test_dimension_mismatch_raises():
    net = init_net("tanh64", 6, np.random.default_rng(0))
    with pytest.raises(NetError):
        forward(net, np.zeros((4, 7)))


def test_quadratic_loss_gradient_matches_closed_form():
    # 0.5 * sum((w.x + b - t)^2) on a bare affine layer
    rng = np.random.default_rng(3)
    net = init_net("linear", 4, rng)
    net.theta[...] = rng.normal(size=net.theta.size)
    x = rng.normal(size=(12, 4))
    t = rng.normal(size=12)
    out, acts = forward_cached(net, x)
    grad = backward(net, acts, out - t)
    expected_w = x.T @ (out - t)
    expected_b = (out - t).sum()
    assert np.allclose(grad[:4], expected_w, atol=1e-12)
    assert np.allclose(grad[4], expected_b, atol=1e-12)


@pytest.mark.parametrize("kind", ["tanh64", "relu64", "linear"])
def test_backward_matches_finite_differences(kind):
    rng = np.random.default_rng(4)
    net = init_net(kind, 5, rng, head_scale=0.5)
    if kind == "linear":
        net.theta[...] = rng.normal(scale=0.5, size=net.theta.size)
    x = rng.normal(size=(10, 5))
    t = rng.normal(size=10)

    def loss_of(n):
        return 0.5 * float(np.sum((forward(n, x) - t) ** 2))

    out, acts = forward_cached(net, x)
    analytic = backward(net, acts, out - t)
    numeric = finite_difference_grad(net, loss_of)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    assert np.mean(rel <= 1e-4) >= 0.95


def test_constant_loss_zero_gradient():
    net = init_net("tanh64", 3, np.random.default_rng(5))
    out, acts = forward_cached(net, np.zeros((4, 3)))
    grad = backward(net, acts, np.zeros(4))
    assert np.all(grad == 0.0)


def test_adam_zero_gradient_leaves_params():
    net = init_net("tanh64", 3, np.random.default_rng(6))
    before = net.flat()
    opt = Adam(lr=0.1)
    opt.step(net, np.zeros_like(net.theta))
    assert np.max(np.abs(net.flat() - before)) < 1e-12


def test_adam_descends_scalar_quadratic():
    net = Net("linear", [(1, 1)])
    net.theta[...] = [1.0, 0.0]
    opt = Adam(lr=0.05)
    # f(theta) = theta^2 / 2 on the weight entry
    opt.step(net, np.array([net.theta[0], 0.0]))
    assert 0.5 * net.theta[0] ** 2 < 0.5


def test_adam_converges_on_convex_quadratic():
    a = np.array([[3.0, 0.4, 0.0], [0.4, 1.2, 0.1], [0.0, 0.1, 2.0]])
    net = Net("linear", [(2, 1)])  # three parameters total
    net.theta[...] = [2.0, -1.5, 0.8]
    opt = Adam(lr=0.08)
    for _ in range(200):
        grad = a @ net.theta
        opt.step(net, grad)
    assert np.linalg.norm(a @ net.theta) < 1e-3


def test_adam_rejects_non_finite_gradient():
    net = init_net("linear", 2, np.random.default_rng(0))
    with pytest.raises(NetError):
        Adam(lr=0.1).step(net, np.array([np.nan, 0.0, 0.0]))


def test_init_deterministic_per_seed():
    a = init_net("tanh64", 7, np.random.default_rng(42))
    b = init_net("tanh64", 7, np.random.default_rng(42))
    assert np.array_equal(a.flat(), b.flat())


def test_sigmoid_stable_at_extremes():
    v = sigmoid(np.array([-800.0, 0.0, 800.0]))
    assert v[0] == 0.0 and v[1] == 0.5 and v[2] == 1.0
