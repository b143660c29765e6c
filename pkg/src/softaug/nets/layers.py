"""Encoder, projector, predictor, critic and actor as pure functions of a ParamSet.

Observations enter channels-first ``(N, C, H, W)``; the conv stack runs
channels-last internally, so feature maps are ``(N, H', W', C')``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from softaug.nets import autodiff as ad
from softaug.nets.autodiff import Tensor, conv_output_size


CONV_INITS = ("uniform", "delta_orthogonal")


@dataclass(frozen=True)
class NetworkShapes:
    obs_channels: int = 9
    obs_size: int = 84
    encoder_depth: int = 4
    filters: int = 32
    strides: tuple[int, ...] = (2, 2, 2, 1)
    kernel_size: int = 3
    feature_dim: int = 50
    hidden_dim: int = 256
    projection_dim: int = 100
    projection_hidden: int = 256
    action_dim: int = 2
    conv_init: str = "uniform"

    def stride(self, layer: int) -> int:
        # layers beyond the listed strides use stride 1
        return self.strides[layer] if layer < len(self.strides) else 1

    def feature_map(self) -> tuple[int, int, int]:
        """(C', H', W') produced by the conv stack."""
        size = self.obs_size
        for i in range(self.encoder_depth):
            size = conv_output_size(size, self.kernel_size, self.stride(i))
        return (self.filters, size, size)

    @property
    def flat_dim(self) -> int:
        c, h, w = self.feature_map()
        return c * h * w

    def validate(self) -> NetworkShapes:
        if self.encoder_depth < 1 or self.filters < 1:
            raise ValueError("encoder needs at least one layer and one filter")
        if self.conv_init not in CONV_INITS:
            raise ValueError(f"conv_init must be one of {CONV_INITS}, got {self.conv_init!r}")
        if not self.projection_dim < self.flat_dim / 4:
            raise ValueError(
                f"projection_dim {self.projection_dim} must be well below the flattened "
                f"feature size {self.flat_dim} (< 1/4)"
            )
        return self


def _uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _linear_params(rng, prefix: str, n_in: int, n_out: int, dtype) -> dict:
    return {
        f"{prefix}.weight": _uniform(rng, (n_out, n_in), n_in, dtype),
        f"{prefix}.bias": np.zeros(n_out, dtype=dtype),
    }


def _norm_params(prefix: str, n: int, dtype, batch: bool) -> dict:
    p = {f"{prefix}.gamma": np.ones(n, dtype=dtype), f"{prefix}.beta": np.zeros(n, dtype=dtype)}
    if batch:
        p[f"{prefix}.running_mean"] = np.zeros(n, dtype=dtype)
        p[f"{prefix}.running_var"] = np.ones(n, dtype=dtype)
    return p


def _delta_orthogonal(rng, shape, dtype) -> np.ndarray:
    """Zero kernel except an orthogonal centre tap scaled by the ReLU gain sqrt(2)."""
    out, k, _, c_in = shape
    a = rng.standard_normal((max(out, c_in), min(out, c_in)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    centre = q if out >= c_in else q.T
    w = np.zeros(shape)
    w[:, k // 2, k // 2, :] = math.sqrt(2.0) * centre
    return w.astype(dtype)


def init_encoder(rng: np.random.Generator, shapes: NetworkShapes, dtype=np.float32) -> dict:
    params = {}
    c_in, k = shapes.obs_channels, shapes.kernel_size
    for i in range(shapes.encoder_depth):
        fan_in = c_in * k * k
        shape = (shapes.filters, k, k, c_in)
        if shapes.conv_init == "delta_orthogonal":
            params[f"encoder.conv{i}.weight"] = _delta_orthogonal(rng, shape, dtype)
        else:
            params[f"encoder.conv{i}.weight"] = _uniform(rng, shape, fan_in, dtype)
        params[f"encoder.conv{i}.bias"] = np.zeros(shapes.filters, dtype=dtype)
        c_in = shapes.filters
    return params


def init_critic(rng: np.random.Generator, shapes: NetworkShapes, dtype=np.float32) -> dict:
    p = _linear_params(rng, "critic.head", shapes.flat_dim, shapes.feature_dim, dtype)
    p.update(_norm_params("critic.ln", shapes.feature_dim, dtype, batch=False))
    for q in ("q1", "q2"):
        p.update(_linear_params(rng, f"critic.{q}.l0", shapes.feature_dim + shapes.action_dim, shapes.hidden_dim, dtype))
        p.update(_linear_params(rng, f"critic.{q}.l1", shapes.hidden_dim, shapes.hidden_dim, dtype))
        p.update(_linear_params(rng, f"critic.{q}.l2", shapes.hidden_dim, 1, dtype))
    return p


def init_actor(rng: np.random.Generator, shapes: NetworkShapes, dtype=np.float32) -> dict:
    p = _linear_params(rng, "actor.head", shapes.flat_dim, shapes.feature_dim, dtype)
    p.update(_norm_params("actor.ln", shapes.feature_dim, dtype, batch=False))
    p.update(_linear_params(rng, "actor.l0", shapes.feature_dim, shapes.hidden_dim, dtype))
    p.update(_linear_params(rng, "actor.l1", shapes.hidden_dim, shapes.hidden_dim, dtype))
    p.update(_linear_params(rng, "actor.l2", shapes.hidden_dim, 2 * shapes.action_dim, dtype))
    return p


def init_projector(rng: np.random.Generator, shapes: NetworkShapes, dtype=np.float32) -> dict:
    p = _linear_params(rng, "proj.l0", shapes.flat_dim, shapes.projection_hidden, dtype)
    p.update(_norm_params("proj.bn0", shapes.projection_hidden, dtype, batch=True))
    p.update(_linear_params(rng, "proj.l1", shapes.projection_hidden, shapes.projection_dim, dtype))
    return p


def init_predictor(rng: np.random.Generator, shapes: NetworkShapes, dtype=np.float32) -> dict:
    p = _linear_params(rng, "pred.l0", shapes.projection_dim, shapes.projection_hidden, dtype)
    p.update(_norm_params("pred.bn0", shapes.projection_hidden, dtype, batch=True))
    p.update(_linear_params(rng, "pred.l1", shapes.projection_hidden, shapes.projection_dim, dtype))
    return p


# -- forward passes ----------------------------------------------------------


def encode(params, obs, shapes: NetworkShapes) -> Tensor:
    """Conv stack f: (N, C, H, W) in [0, 1] -> (N, H', W', C')."""
    x = obs.data if isinstance(obs, Tensor) else obs
    if x.ndim != 4 or x.shape[1:] != (shapes.obs_channels, shapes.obs_size, shapes.obs_size):
        raise ValueError(
            f"observation shape {x.shape[1:]} does not match "
            f"{(shapes.obs_channels, shapes.obs_size, shapes.obs_size)}"
        )
    h = Tensor(np.ascontiguousarray(x.transpose(0, 2, 3, 1)))
    for i in range(shapes.encoder_depth):
        h = ad.relu(ad.conv2d(h, params[f"encoder.conv{i}.weight"], params[f"encoder.conv{i}.bias"], shapes.stride(i)))
    return h


def flatten(feat: Tensor) -> Tensor:
    return feat.reshape(feat.shape[0], -1)


def _lin(params, prefix: str, x: Tensor) -> Tensor:
    return ad.linear(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"])


def _bn(params, prefix: str, x: Tensor, training: bool, update_stats: bool) -> Tensor:
    return ad.batch_norm(
        x,
        params[f"{prefix}.gamma"],
        params[f"{prefix}.beta"],
        _raw(params[f"{prefix}.running_mean"]),
        _raw(params[f"{prefix}.running_var"]),
        training=training,
        update_stats=update_stats,
    )


def _raw(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else x


def trunk(params, prefix: str, feat: Tensor) -> Tensor:
    """Linear -> LayerNorm -> tanh bottleneck used by actor and critic heads."""
    h = _lin(params, f"{prefix}.head", flatten(feat))
    return ad.tanh(ad.layer_norm(h, params[f"{prefix}.ln.gamma"], params[f"{prefix}.ln.beta"]))


def q_values(params, feat: Tensor, action) -> tuple[Tensor, Tensor]:
    h = ad.concat([trunk(params, "critic", feat), ad.as_tensor(action)], axis=1)
    outs = []
    for q in ("q1", "q2"):
        z = ad.relu(_lin(params, f"critic.{q}.l0", h))
        z = ad.relu(_lin(params, f"critic.{q}.l1", z))
        outs.append(_lin(params, f"critic.{q}.l2", z))
    return outs[0], outs[1]


def actor_outputs(params, feat: Tensor, shapes: NetworkShapes, log_std_bounds=(-10.0, 2.0)) -> tuple[Tensor, Tensor]:
    """Gaussian mean and log-std (squashed into ``log_std_bounds``)."""
    h = trunk(params, "actor", feat)
    h = ad.relu(_lin(params, "actor.l0", h))
    h = ad.relu(_lin(params, "actor.l1", h))
    out = _lin(params, "actor.l2", h)
    d = shapes.action_dim
    mu = out[:, :d]
    lo, hi = log_std_bounds
    log_std = ad.tanh(out[:, d:]) * (0.5 * (hi - lo)) + (lo + 0.5 * (hi - lo))
    return mu, log_std


LOG_2PI = math.log(2.0 * math.pi)
LOG_2 = math.log(2.0)


def squashed_gaussian(mu: Tensor, log_std: Tensor, noise: np.ndarray) -> tuple[Tensor, Tensor]:
    """Reparameterized ``tanh(mu + std * noise)`` and its log-density.

    Uses ``log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))``.
    """
    u = mu + ad.exp(log_std) * noise
    action = ad.tanh(u)
    gauss = (log_std * -1.0 - (0.5 * noise * noise + 0.5 * LOG_2PI)).sum(axis=1, keepdims=True)
    correction = (2.0 * (LOG_2 - u - ad.softplus(u * -2.0))).sum(axis=1, keepdims=True)
    return action, gauss - correction


def project(params, feat: Tensor, training: bool = True, update_stats: bool = True) -> Tensor:
    """Projector g: flattened feature map -> R^K."""
    h = _lin(params, "proj.l0", flatten(feat))
    h = ad.relu(_bn(params, "proj.bn0", h, training, update_stats))
    return _lin(params, "proj.l1", h)


def predict(params, z: Tensor, training: bool = True, update_stats: bool = True) -> Tensor:
    """Predictor h: R^K -> R^K; normalization on the hidden layer only."""
    h = _lin(params, "pred.l0", z)
    h = ad.relu(_bn(params, "pred.bn0", h, training, update_stats))
    return _lin(params, "pred.l1", h)
