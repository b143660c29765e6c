import numpy as np
import pytest

from conftest import tiny_shapes
from softaug.nets import layers as L
from softaug.nets.layers import NetworkShapes


def test_desk_default_feature_map():
    # 84 -> 41 -> 20 -> 9 -> 7 with 3x3 valid convs and strides 2,2,2,1
    shapes = NetworkShapes()
    sizes = [84]
    for s in shapes.strides:
        sizes.append((sizes[-1] - 3) // s + 1)
    assert shapes.feature_map() == (32, sizes[-1], sizes[-1])
    assert shapes.feature_map() == (32, 7, 7)


def test_feature_map_matches_forward_pass():
    shapes = NetworkShapes(obs_size=40, encoder_depth=2, filters=4, strides=(2, 2))
    params = L.init_encoder(np.random.default_rng(0), shapes)
    feat = L.encode(params, np.zeros((1, 9, 40, 40), dtype=np.float32), shapes)
    c, h, w = shapes.feature_map()
    assert feat.shape == (1, h, w, c)


def test_projection_dim_must_be_small():
    with pytest.raises(ValueError):
        NetworkShapes(obs_size=7, encoder_depth=1, filters=2, strides=(2,), projection_dim=5).validate()
    tiny_shapes().validate()


def test_zero_encoder_gives_zero_features():
    shapes = tiny_shapes()
    params = {k: np.zeros_like(v) for k, v in L.init_encoder(np.random.default_rng(0), shapes).items()}
    obs = np.random.default_rng(1).random((2, 3, 7, 7))
    assert np.all(L.encode(params, obs, shapes).data == 0)


def test_encode_is_deterministic():
    shapes = tiny_shapes()
    params = L.init_encoder(np.random.default_rng(0), shapes)
    obs = np.random.default_rng(1).random((2, 3, 7, 7)).astype(np.float32)
    a = L.encode(params, obs, shapes).data
    b = L.encode(params, obs, shapes).data
    assert a.tobytes() == b.tobytes()


def test_encode_rejects_wrong_shape():
    shapes = tiny_shapes()
    params = L.init_encoder(np.random.default_rng(0), shapes)
    with pytest.raises(ValueError):
        L.encode(params, np.zeros((1, 3, 8, 8)), shapes)


def test_uniform_init_bounds():
    shapes = tiny_shapes()
    p = L.init_critic(np.random.default_rng(0), shapes)
    bound = 1 / np.sqrt(shapes.flat_dim)
    assert np.abs(p["critic.head.weight"]).max() <= bound
    assert np.all(p["critic.head.bias"] == 0)


@pytest.mark.parametrize("c_in,filters", [(9, 16), (16, 16), (32, 8)])
def test_delta_orthogonal_init_is_an_orthogonal_centre_tap(c_in, filters):
    shapes = NetworkShapes(obs_channels=c_in, obs_size=20, encoder_depth=1, filters=filters,
                           strides=(1,), conv_init="delta_orthogonal")
    w = L.init_encoder(np.random.default_rng(0), shapes)["encoder.conv0.weight"].astype(np.float64)
    centre = w[:, 1, 1, :]
    off = w.copy()
    off[:, 1, 1, :] = 0
    assert not off.any()
    gram = centre.T @ centre if filters >= c_in else centre @ centre.T
    np.testing.assert_allclose(gram, 2.0 * np.eye(min(c_in, filters)), atol=1e-5)


def test_unknown_conv_init_is_rejected():
    with pytest.raises(ValueError):
        NetworkShapes(obs_size=40, encoder_depth=2, filters=4, strides=(2, 2), conv_init="he").validate()


def test_project_without_normalization_is_flatten_then_linear():
    # 2x2x2 feature map; hidden layer identity, normalization bypassed in eval
    # mode with mean 0 / var 1 - eps, relu sees only positive values
    feat = np.arange(1.0, 9.0).reshape(1, 2, 2, 2)
    W0 = np.eye(8)
    W1 = np.arange(24.0).reshape(3, 8) / 10
    eps = 1e-5
    params = {
        "proj.l0.weight": W0, "proj.l0.bias": np.zeros(8),
        "proj.bn0.gamma": np.ones(8), "proj.bn0.beta": np.zeros(8),
        "proj.bn0.running_mean": np.zeros(8), "proj.bn0.running_var": np.full(8, 1 - eps),
        "proj.l1.weight": W1, "proj.l1.bias": np.zeros(3),
    }
    z = L.project(params, L.ad.as_tensor(feat), training=False).data
    hand = [sum(W1[r, c] * feat.reshape(-1)[c] for c in range(8)) for r in range(3)]
    np.testing.assert_allclose(z[0], hand, rtol=1e-12)


def test_project_output_dim_is_k():
    shapes = tiny_shapes()
    rng = np.random.default_rng(0)
    p = {**L.init_encoder(rng, shapes), **L.init_projector(rng, shapes), **L.init_predictor(rng, shapes)}
    feat = L.encode(p, rng.random((5, 3, 7, 7)), shapes)
    z = L.project(p, feat)
    assert z.shape == (5, shapes.projection_dim)
    assert L.predict(p, z).shape == (5, shapes.projection_dim)


def test_project_train_mode_needs_batch_of_two():
    shapes = tiny_shapes()
    rng = np.random.default_rng(0)
    p = {**L.init_encoder(rng, shapes), **L.init_projector(rng, shapes)}
    feat = L.encode(p, rng.random((1, 3, 7, 7)), shapes)
    with pytest.raises(ValueError):
        L.project(p, feat, training=True)


def test_eval_mode_rows_are_independent():
    shapes = tiny_shapes()
    rng = np.random.default_rng(0)
    p = {**L.init_encoder(rng, shapes), **L.init_projector(rng, shapes)}
    obs = rng.random((4, 3, 7, 7))
    full = L.project(p, L.encode(p, obs, shapes), training=False).data
    alone = L.project(p, L.encode(p, obs[:1], shapes), training=False).data
    np.testing.assert_allclose(full[:1], alone, rtol=1e-12)


def test_squashed_gaussian_log_density_matches_change_of_variables():
    rng = np.random.default_rng(3)
    mu = rng.normal(size=(6, 2))
    log_std = rng.uniform(-1, 0.5, size=(6, 2))
    noise = rng.normal(size=(6, 2))
    a, logp = L.squashed_gaussian(L.ad.as_tensor(mu), L.ad.as_tensor(log_std), noise)
    u = mu + np.exp(log_std) * noise
    gauss = -0.5 * noise**2 - log_std - 0.5 * np.log(2 * np.pi)
    ref = (gauss - np.log(1 - np.tanh(u) ** 2)).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(a.data, np.tanh(u))
    np.testing.assert_allclose(logp.data, ref, rtol=1e-9)


def test_actor_log_std_is_bounded():
    shapes = tiny_shapes()
    rng = np.random.default_rng(0)
    p = {**L.init_encoder(rng, shapes), **L.init_actor(rng, shapes)}
    p["actor.l2.weight"] *= 1e4
    feat = L.encode(p, rng.random((3, 3, 7, 7)), shapes)
    _, log_std = L.actor_outputs(p, feat, shapes, (-10.0, 2.0))
    assert np.all(log_std.data >= -10.0) and np.all(log_std.data <= 2.0)
