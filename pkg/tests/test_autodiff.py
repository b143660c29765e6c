import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcheck import fd_probes, worst
from softaug.nets import autodiff as ad
from softaug.nets.autodiff import NumericalError, Tensor, no_grad
from softaug.nets.params import grad, value_and_grad


def naive_conv(x, w, b, stride):
    """Quadruple loop reference for (N, H, W, C) x (O, kh, kw, C)."""
    n, h, wd, c = x.shape
    o, kh, kw, _ = w.shape
    ho, wo = (h - kh) // stride + 1, (wd - kw) // stride + 1
    y = np.zeros((n, ho, wo, o))
    for i in range(ho):
        for j in range(wo):
            patch = x[:, i * stride : i * stride + kh, j * stride : j * stride + kw, :]
            y[:, i, j, :] = np.einsum("nabc,oabc->no", patch, w) + b
    return y


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_matches_loop(stride):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 7, 7, 3))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    y = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride).data
    np.testing.assert_allclose(y, naive_conv(x, w, b, stride), rtol=1e-12, atol=1e-12)


def test_linear_half_squared_norm_gradient():
    rng = np.random.default_rng(2)
    W = rng.normal(size=(3, 4))
    x = rng.normal(size=(4, 1))
    g = grad(lambda p: 0.5 * ((p["W"] @ Tensor(x)) ** 2).sum(), {"W": W})
    np.testing.assert_allclose(g["W"], (W @ x) @ x.T, rtol=1e-12)


def test_constant_loss_has_zero_gradient():
    W = np.ones((2, 2))
    g = grad(lambda p: Tensor(np.array(3.0)) + 0.0 * p["W"].sum(), {"W": W})
    assert np.all(g["W"] == 0)


def test_non_finite_loss_raises():
    with pytest.raises(NumericalError):
        value_and_grad(lambda p: ad.log(p["w"]).sum(), {"w": np.array([-1.0])})


def test_no_grad_builds_no_graph():
    w = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (w * 2.0).sum()
    assert not y.requires_grad


def test_broadcast_gradients_sum_back():
    a = np.arange(6.0).reshape(2, 3)
    b = np.array([1.0, 2.0, 3.0])
    g = grad(lambda p: (p["a"] * p["b"]).sum(), {"a": a, "b": b})
    np.testing.assert_allclose(g["b"], a.sum(axis=0))
    np.testing.assert_allclose(g["a"], np.broadcast_to(b, a.shape))


def test_batch_norm_training_needs_two_rows():
    x = Tensor(np.ones((1, 3)))
    with pytest.raises(ValueError):
        ad.batch_norm(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), training=True)


def test_batch_norm_running_stats_update():
    x = np.array([[1.0, 2.0], [3.0, 6.0]])
    rm, rv = np.zeros(2), np.ones(2)
    ad.batch_norm(Tensor(x), np.ones(2), np.zeros(2), rm, rv, training=True, momentum=0.5)
    np.testing.assert_allclose(rm, 0.5 * x.mean(axis=0))
    np.testing.assert_allclose(rv, 0.5 + 0.5 * x.var(axis=0, ddof=1))


def test_float32_graph_stays_float32():
    w = np.ones((2, 2), dtype=np.float32)
    y = ad.tanh(Tensor(w) * 0.5 + 1.0) / 3.0 - 2.0
    assert y.data.dtype == np.float32


# -- finite differences on each layer type -----------------------------------

LAYER_CASES = {
    "conv": lambda p: ad.tanh(ad.conv2d(Tensor(X_IMG), p["w"], p["b"], 2)).sum(),
    "linear": lambda p: (ad.tanh(ad.linear(Tensor(X_VEC), p["w"], p["b"])) ** 2).sum(),
    "layer_norm": lambda p: (ad.layer_norm(ad.linear(Tensor(X_VEC), p["w"], p["b"]), p["g"], p["be"]) * COEF).sum(),
    "batch_norm": lambda p: (
        ad.batch_norm(ad.linear(Tensor(X_VEC), p["w"], p["b"]), p["g"], p["be"], np.zeros(3), np.ones(3), True) * COEF
    ).sum(),
    "softplus": lambda p: ad.softplus(ad.linear(Tensor(X_VEC), p["w"], p["b"])).sum(),
    "exp_log_sqrt": lambda p: (ad.log(ad.exp(p["b"]) + 1.0) + ad.sqrt(p["g"])).sum(),
    "minimum_concat": lambda p: ad.minimum(
        ad.linear(Tensor(X_VEC), p["w"], p["b"]), ad.concat([p["g"][:1] * 3.0, p["g"][1:]], 0)
    ).sum(),
}
_rng = np.random.default_rng(3)
X_IMG = _rng.normal(size=(2, 7, 7, 2))
X_VEC = _rng.normal(size=(5, 4))
COEF = _rng.normal(size=(5, 3))


def _layer_params(case):
    rng = np.random.default_rng(4)
    if case == "conv":
        return {"w": rng.normal(size=(3, 3, 3, 2)), "b": rng.normal(size=3)}
    return {"w": rng.normal(size=(3, 4)), "b": rng.normal(size=3), "g": rng.uniform(0.5, 2, 3), "be": rng.normal(size=3)}


@pytest.mark.parametrize("case", sorted(LAYER_CASES))
def test_layer_gradients_match_finite_differences(case):
    params = _layer_params(case)
    fn = LAYER_CASES[case]
    res = fd_probes(fn, params, list(params), n_probes=30, seed=5)
    assert worst(res).rel_error < 1e-3, worst(res)


@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)))
def test_tanh_matches_rescaled_sigmoid(x):
    t = ad.tanh(Tensor(x)).data
    s = ad.sigmoid(Tensor(2 * x)).data
    np.testing.assert_allclose(t, 2 * s - 1, atol=1e-12)
