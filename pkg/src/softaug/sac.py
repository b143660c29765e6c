"""Soft Actor-Critic from pixels: replay buffer, agent, and the three losses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from softaug.augment import ObsBatch, center_crop_batch, to_unit
from softaug.envsim import ConfigurationError, UsageError
from softaug.nets import autodiff as ad
from softaug.nets import layers as L
from softaug.nets.autodiff import Tensor, no_grad
from softaug.nets.params import Adam, TargetPair, ema_update, trainable_keys, value_and_grad


class ContractViolation(RuntimeError):
    """A batch reached an update stream it is not allowed to enter."""


# -- replay ------------------------------------------------------------------


@dataclass
class Batch:
    obs: np.ndarray       # uint8 (N, C, H, W), full render size
    action: np.ndarray    # float32 (N, d)
    reward: np.ndarray    # float32 (N, 1)
    next_obs: np.ndarray
    not_done: np.ndarray  # float32 (N, 1)

    def __len__(self) -> int:
        return len(self.obs)


class ReplayBuffer:
    """FIFO ring of transitions; observations are stored as uint8.

    Storage grows geometrically up to ``capacity`` so small runs with a large
    nominal capacity do not reserve it all up front.
    """

    def __init__(self, capacity: int, obs_shape: tuple[int, ...], action_dim: int, rng: np.random.Generator):
        if capacity < 1:
            raise ConfigurationError(f"buffer capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.obs_shape = tuple(obs_shape)
        self.action_dim = action_dim
        self.rng = rng
        self._alloc = 0
        self._arrays: dict[str, np.ndarray] = {}
        self._grow(min(capacity, 1024))
        self.idx = 0
        self.size = 0

    def _grow(self, n: int) -> None:
        spec = {
            "obs": (self.obs_shape, np.uint8),
            "next_obs": (self.obs_shape, np.uint8),
            "action": ((self.action_dim,), np.float32),
            "reward": ((1,), np.float32),
            "not_done": ((1,), np.float32),
        }
        for name, (shape, dtype) in spec.items():
            new = np.zeros((n, *shape), dtype=dtype)
            if name in self._arrays:
                new[: self._alloc] = self._arrays[name]
            self._arrays[name] = new
        self._alloc = n

    def __len__(self) -> int:
        return self.size

    @staticmethod
    def _pixels(obs: np.ndarray) -> np.ndarray:
        if obs.dtype == np.uint8:
            return obs
        return np.rint(np.asarray(obs) * 255.0).astype(np.uint8)

    def add(self, obs, action, reward: float, next_obs, done: bool) -> None:
        if not math.isfinite(reward):
            raise UsageError(f"non-finite reward {reward}")
        if self.idx >= self._alloc:
            self._grow(min(self.capacity, 2 * self._alloc))
        a = self._arrays
        i = self.idx
        a["obs"][i] = self._pixels(obs)
        a["next_obs"][i] = self._pixels(next_obs)
        a["action"][i] = action
        a["reward"][i] = reward
        a["not_done"][i] = 0.0 if done else 1.0
        self.idx = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
        if self.size == 0:
            raise UsageError("cannot sample from an empty replay buffer")
        return (rng or self.rng).integers(0, self.size, size=n)

    def sample(self, n: int) -> Batch:
        i = self.sample_indices(n)
        a = self._arrays
        return Batch(a["obs"][i], a["action"][i], a["reward"][i], a["next_obs"][i], a["not_done"][i])

    def sample_obs(self, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
        """Observations only, optionally drawn with a caller-owned generator."""
        return self._arrays["obs"][self.sample_indices(n, rng)]


# -- agent -------------------------------------------------------------------


@dataclass(frozen=True)
class SACConfig:
    discount: float = 0.99
    lr_rl: float = 1e-3
    lr_alpha: float = 1e-4
    alpha_beta1: float = 0.5
    batch_rl: int = 128
    actor_update_freq: int = 2
    critic_update_freq: int = 1
    critic_target_tau: float = 0.01
    target_entropy: float | None = None  # None -> -action_dim
    init_temperature: float = 0.1
    buffer_capacity: int = 100_000
    warmup_steps: int = 1000
    actor_detach_encoder: bool = True
    log_std_min: float = -10.0
    log_std_max: float = 2.0

    def validate(self) -> SACConfig:
        if not 0.0 < self.discount < 1.0:
            raise ConfigurationError(f"sac.discount must lie in (0, 1), got {self.discount}")
        for name in ("lr_rl", "lr_alpha", "init_temperature"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"sac.{name} must be positive")
        for name in ("batch_rl", "actor_update_freq", "critic_update_freq", "buffer_capacity"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"sac.{name} must be at least 1")
        if not 0.0 < self.critic_target_tau <= 1.0:
            raise ConfigurationError("sac.critic_target_tau must lie in (0, 1]")
        if self.warmup_steps < 0:
            raise ConfigurationError("sac.warmup_steps must be non-negative")
        return self


def check_rl_batch(batch: ObsBatch, allow_strong: bool) -> None:
    if batch.strong and not allow_strong:
        raise ContractViolation(f"RL update received strongly augmented observations (tags {sorted(batch.tags)})")


@dataclass
class UpdateCounters:
    critic: int = 0
    actor: int = 0
    alpha: int = 0
    calls: int = 0


class SACAgent:
    """Pixel SAC with a shared conv encoder.

    ``params`` is the single online ParamSet θ; other learners (the SODA
    projector/predictor) may add their own entries to it. Critic targets are
    an EMA copy of the encoder and critic entries.
    """

    def __init__(self, shapes: L.NetworkShapes, config: SACConfig, rng: np.random.Generator):
        self.shapes = shapes
        self.config = config.validate()
        self.rng = rng
        p: dict = {}
        p.update(L.init_encoder(rng, shapes))
        p.update(L.init_critic(rng, shapes))
        p.update(L.init_actor(rng, shapes))
        p["log_alpha"] = np.array(math.log(config.init_temperature), dtype=np.float32)
        self.params = p
        self.critic_target = TargetPair.track(p, ("encoder.", "critic."), config.critic_target_tau)
        self.target_entropy = float(-shapes.action_dim if config.target_entropy is None else config.target_entropy)
        self.critic_keys = trainable_keys(p, ("encoder.", "critic."))
        actor_prefixes = ("actor.",) if config.actor_detach_encoder else ("actor.", "encoder.")
        self.actor_keys = trainable_keys(p, actor_prefixes)
        self.critic_opt = Adam(self.critic_keys, config.lr_rl)
        self.actor_opt = Adam(self.actor_keys, config.lr_rl)
        self.alpha_opt = Adam(["log_alpha"], config.lr_alpha, betas=(config.alpha_beta1, 0.999))
        self.counters = UpdateCounters()

    @property
    def alpha(self) -> float:
        return float(np.exp(self.params["log_alpha"]))

    def _policy(self, params, feat: Tensor, noise: np.ndarray | None):
        cfg = self.config
        mu, log_std = L.actor_outputs(params, feat, self.shapes, (cfg.log_std_min, cfg.log_std_max))
        if noise is None:
            return ad.tanh(mu), None
        return L.squashed_gaussian(mu, log_std, noise)

    def _noise(self, n: int) -> np.ndarray:
        return self.rng.standard_normal((n, self.shapes.action_dim)).astype(np.float32)

    def select_action(self, obs: np.ndarray, deterministic: bool = True) -> np.ndarray:
        """Actions for a batch ``(N, C, H, W)`` or a single observation.

        Full-size frames are center-cropped to the encoder input size.
        """
        single = obs.ndim == 3
        x = to_unit(obs[None] if single else obs)
        if x.shape[-1] != self.shapes.obs_size:
            x = center_crop_batch(x, self.shapes.obs_size)
        with no_grad():
            feat = L.encode(self.params, x, self.shapes)
            noise = None if deterministic else self._noise(len(x))
            action, _ = self._policy(self.params, feat, noise)
        out = action.data.astype(np.float64)
        return out[0] if single else out

    # -- losses ----------------------------------------------------------

    def bellman_target(self, next_obs: ObsBatch, reward: np.ndarray, not_done: np.ndarray,
                       noise: np.ndarray | None = None) -> np.ndarray:
        """``r + gamma * (1 - done) * (min target Q(s', a') - alpha log pi(a'|s'))``."""
        if noise is None:
            noise = self._noise(len(next_obs))
        tgt = self.critic_target.target
        with no_grad():
            feat = L.encode(self.params, next_obs.data, self.shapes)
            a_next, logp = self._policy(self.params, feat, noise)
            tfeat = L.encode(tgt, next_obs.data, self.shapes)
            q1, q2 = L.q_values(tgt, tfeat, a_next.data)
            soft_v = np.minimum(q1.data, q2.data) - self.alpha * logp.data
        return (reward + self.config.discount * not_done * soft_v).astype(np.float32)

    def critic_loss(self, params, obs: ObsBatch, action: np.ndarray, target_q: np.ndarray) -> Tensor:
        q1, q2 = L.q_values(params, L.encode(params, obs.data, self.shapes), action)
        d1, d2 = q1 - target_q, q2 - target_q
        return (d1 * d1).mean() + (d2 * d2).mean()

    def actor_loss(self, params, obs: ObsBatch, noise: np.ndarray, alpha: float):
        feat = L.encode(params, obs.data, self.shapes)
        if self.config.actor_detach_encoder:
            feat = feat.detach()
        action, logp = self._policy(params, feat, noise)
        # critic weights are plain arrays here, so only the action and (when
        # attached) the encoder receive gradient through Q
        q1, q2 = L.q_values(params, feat, action)
        loss = (logp * alpha - ad.minimum(q1, q2)).mean()
        return loss, logp.data

    def alpha_loss(self, params, logp: np.ndarray) -> Tensor:
        log_alpha = ad.as_tensor(params["log_alpha"])
        return (ad.exp(log_alpha) * (-logp - self.target_entropy)).mean()

    # -- updates ---------------------------------------------------------

    def critic_update(self, obs: ObsBatch, action, reward, next_obs: ObsBatch, not_done, allow_strong=False) -> float:
        check_rl_batch(obs, allow_strong)
        check_rl_batch(next_obs, allow_strong)
        y = self.bellman_target(next_obs, reward, not_done)
        loss, grads = value_and_grad(
            lambda p: self.critic_loss(p, obs, action, y), self.params, wrt=self.critic_keys
        )
        self.critic_opt.step(self.params, grads)
        ema_update(self.critic_target)
        self.counters.critic += 1
        return loss

    def actor_update(self, obs: ObsBatch, allow_strong=False) -> tuple[float, np.ndarray]:
        check_rl_batch(obs, allow_strong)
        noise = self._noise(len(obs))
        alpha = self.alpha
        (loss, logp), grads = value_and_grad(
            lambda p: self.actor_loss(p, obs, noise, alpha), self.params, wrt=self.actor_keys, has_aux=True
        )
        self.actor_opt.step(self.params, grads)
        self.counters.actor += 1
        return loss, logp

    def alpha_update(self, logp: np.ndarray) -> float:
        loss, grads = value_and_grad(lambda p: self.alpha_loss(p, logp), self.params, wrt=["log_alpha"])
        self.alpha_opt.step(self.params, grads)
        self.counters.alpha += 1
        return loss

    def update(self, obs: ObsBatch, action, reward, next_obs: ObsBatch, not_done, allow_strong=False) -> dict:
        """One RL update honoring the critic/actor frequencies."""
        cfg = self.config
        c = self.counters
        row: dict = {}
        if c.calls % cfg.critic_update_freq == 0:
            row["critic_loss"] = self.critic_update(obs, action, reward, next_obs, not_done, allow_strong)
        if c.calls % cfg.actor_update_freq == 0:
            row["actor_loss"], logp = self.actor_update(obs, allow_strong)
            row["alpha_loss"] = self.alpha_update(logp)
            row["alpha"] = self.alpha
        c.calls += 1
        return row


__all__ = [
    "Batch",
    "ContractViolation",
    "ReplayBuffer",
    "SACAgent",
    "SACConfig",
    "check_rl_batch",
]
