import numpy as np
import pytest

from imgnav import nn
from imgnav.errors import NumericalFailureError
from oracles import central_fd


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def test_conv_backward_matches_fd(rng):
    x = rng.normal(size=(2, 3, 7, 7))
    W = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    up = rng.normal(size=nn.conv2d(x, W, b)[0].shape)

    def loss_w(w):
        return float(np.sum(nn.conv2d(x, w, b)[0] * up))

    def loss_x(xx):
        return float(np.sum(nn.conv2d(xx, W, b)[0] * up))

    _, cache = nn.conv2d(x, W, b)
    grads = {}
    dx = nn.conv2d_backward(up, cache, W, grads, "c")
    assert nn.relative_error(grads["c.W"], central_fd(loss_w, W.copy())) < 1e-7
    assert nn.relative_error(dx, central_fd(loss_x, x.copy())) < 1e-7
    np.testing.assert_allclose(grads["c.b"], up.sum(axis=(0, 2, 3)))


def test_conv_output_shape_and_stride():
    out, _ = nn.conv2d(np.zeros((1, 4, 32, 32)), np.zeros((8, 4, 3, 3)), np.zeros(8))
    assert out.shape == (1, 8, 16, 16)
    out, _ = nn.conv2d(np.zeros((1, 8, 16, 16)), np.zeros((16, 8, 3, 3)), np.zeros(16))
    assert out.shape == (1, 16, 8, 8)


def test_siamese_backward_matches_fd(rng):
    p = nn.init_siamese(rng, "s", 6, 5, 4)
    cur, goal = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
    up = rng.normal(size=(3, 4))

    def loss(vec):
        q = nn.unflatten(vec, p)
        return float(np.sum(nn.siamese_forward(q, "s", cur, goal)[0] * up))

    _, cache = nn.siamese_forward(p, "s", cur, goal)
    grads = {}
    nn.siamese_backward(p, "s", up, cache, grads)
    numeric = central_fd(loss, nn.flatten(p), eps=1e-6)
    assert nn.relative_error(nn.flatten(grads), numeric) < 1e-6


def test_sigmoid_stays_finite_at_extremes():
    z = np.array([-1000.0, -30.0, 0.0, 30.0, 1000.0])
    s = nn.sigmoid(z)
    assert np.all(np.isfinite(s))
    assert s[0] == 0.0 and s[-1] == 1.0 and s[2] == 0.5


def test_adam_first_step_moves_by_lr():
    # with bias correction the first step is lr * sign(g) (up to eps)
    p = {"w": np.array([1.0, -2.0, 0.5])}
    g = {"w": np.array([0.3, -4.0, 1e-3])}
    state = nn.AdamState(lr=0.01, eps=1e-12)
    new = nn.adam_step(p, g, state)
    np.testing.assert_allclose(new["w"], p["w"] - 0.01 * np.sign(g["w"]), rtol=1e-9)
    assert state.t == 1


def test_adam_leaves_params_without_grads():
    p = {"a": np.ones(2), "b": np.ones(2)}
    new = nn.adam_step(p, {"a": np.ones(2)}, nn.AdamState(lr=0.1))
    assert np.array_equal(new["b"], p["b"])
    assert np.all(new["a"] < 1.0)


def test_global_norm_clip():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert nn.global_norm(g) == 5.0
    clipped = nn.clip_by_global_norm(g, 1.0)
    assert nn.global_norm(clipped) == pytest.approx(1.0)
    assert nn.clip_by_global_norm(g, 10.0) is g
    assert nn.clip_by_global_norm(g, None) is g


def test_flatten_roundtrip(rng):
    p = {"z": rng.normal(size=(2, 3)), "a": rng.normal(size=4)}
    q = nn.unflatten(nn.flatten(p), p)
    assert set(q) == set(p)
    for k in p:
        assert np.array_equal(p[k], q[k])


def test_check_finite_raises():
    nn.check_finite(np.ones(3))
    with pytest.raises(NumericalFailureError):
        nn.check_finite(np.array([1.0, np.nan]))
