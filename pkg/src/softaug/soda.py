"""Soft data augmentation: consistency objective, EMA targets and the update schedule.

Strong augmentations feed only the auxiliary branch. The online encoder,
projector and predictor learn to map a strongly augmented view onto the EMA
target's projection of the crop-only view of the same window.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from softaug.augment import STRONG_KINDS, BatchAugmenter
from softaug.envsim import ConfigurationError
from softaug.nets import layers as L
from softaug.nets.autodiff import Tensor, no_grad
from softaug.nets.params import Adam, TargetPair, ema_update, l2_normalize, param_distance, trainable_keys, value_and_grad
from softaug.sac import ContractViolation, ReplayBuffer, SACAgent


@dataclass(frozen=True)
class SODAConfig:
    omega: int = 2
    tau: float = 0.005
    batch_soda: int = 256
    lr_soda: float = 3e-4
    kind: str = "overlay"
    use_predictor: bool = True

    def validate(self) -> SODAConfig:
        if self.omega < 1:
            raise ConfigurationError(f"soda.omega must be at least 1, got {self.omega}")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigurationError(f"soda.tau must lie in (0, 1], got {self.tau}")
        if self.batch_soda < 2:
            raise ConfigurationError("soda.batch_soda must be at least 2 (batch normalization)")
        if self.lr_soda <= 0:
            raise ConfigurationError("soda.lr_soda must be positive")
        if self.kind not in STRONG_KINDS:
            raise ConfigurationError(f"soda.kind must be one of {sorted(STRONG_KINDS)}, got {self.kind!r}")
        return self


def consistency_loss(z_hat, z_star) -> Tensor:
    """Batch mean of ``||normalize(z_hat) - normalize(z_star)||^2``; lies in [0, 4]."""
    if z_hat.shape != z_star.shape:
        raise ValueError(f"shape mismatch {z_hat.shape} vs {z_star.shape}")
    if not isinstance(z_hat, Tensor):
        z_hat = Tensor(np.asarray(z_hat, dtype=np.float64))
    target = l2_normalize(z_star.data if isinstance(z_star, Tensor) else np.asarray(z_star))
    diff = l2_normalize(z_hat) - target
    return (diff * diff).sum(axis=1).mean()


class SODALearner:
    """Projector/predictor heads attached to an agent's encoder, plus targets ψ.

    The heads are added to ``agent.params`` so the encoder is shared with the
    critic. ψ tracks the encoder and projector only. ``rng`` initializes the
    heads and then draws SODA batches; together with a dedicated augmenter
    this keeps the RL random streams untouched by SODA.
    """

    def __init__(self, agent: SACAgent, config: SODAConfig, rng: np.random.Generator, augmenter: BatchAugmenter):
        self.agent = agent
        self.rng = rng
        self.augmenter = augmenter
        self.config = config.validate()
        shapes = agent.shapes.validate()
        params = agent.params
        params.update(L.init_projector(rng, shapes))
        if config.use_predictor:
            params.update(L.init_predictor(rng, shapes))
        self.target = TargetPair.track(params, ("encoder.", "proj."), config.tau)
        prefixes = ("encoder.", "proj.", "pred.") if config.use_predictor else ("encoder.", "proj.")
        self.keys = trainable_keys(params, prefixes)
        self.opt = Adam(self.keys, config.lr_soda)
        self.updates = 0

    def online_prediction(self, params, obs: np.ndarray) -> Tensor:
        shapes = self.agent.shapes
        z = L.project(params, L.encode(params, obs, shapes))
        return L.predict(params, z) if self.config.use_predictor else z

    def target_projection(self, obs: np.ndarray) -> np.ndarray:
        tgt = self.target.target
        with no_grad():
            z = L.project(tgt, L.encode(tgt, obs, self.agent.shapes), training=True, update_stats=False)
        return z.data

    def loss_and_grads(self, aug: np.ndarray, clean: np.ndarray):
        z_star = self.target_projection(clean)
        loss, grads = value_and_grad(
            lambda p: consistency_loss(self.online_prediction(p, aug), z_star), self.agent.params, wrt=self.keys
        )
        return loss, grads, z_star

    def update(self, buffer: ReplayBuffer, step: int = 0) -> dict:
        """One SODA step: sample, augment, Adam on θ, then EMA on ψ."""
        augmenter = self.augmenter
        obs = buffer.sample_obs(self.config.batch_soda, self.rng)
        offsets = augmenter.crop_offsets(len(obs), obs.shape[-1])
        aug = augmenter.crop_strong(obs, self.config.kind, offsets)
        clean = augmenter.crop(obs, offsets)
        if not aug.strong:
            raise ContractViolation("SODA batch is missing its strong augmentation")
        loss, grads, z_star = self.loss_and_grads(aug.data, clean.data)
        self.opt.step(self.agent.params, grads)
        ema_update(self.target)
        self.updates += 1
        z_unit = l2_normalize(z_star.astype(np.float64))
        return {
            "step": step,
            "L_SODA": loss,
            "z_star_std": float(np.mean(np.std(z_unit, axis=0))),
            "target_distance": param_distance(self.target.target, self.agent.params),
            "tags": sorted(aug.tags),
        }


def soda_update(learner: SODALearner, buffer: ReplayBuffer, step: int = 0) -> float:
    return learner.update(buffer, step)["L_SODA"]


# -- alternating schedule ----------------------------------------------------


class TrainingLoop(Protocol):
    buffer: ReplayBuffer
    env_steps: int

    def env_step(self) -> None: ...

    def rl_update(self) -> dict: ...


@dataclass
class Interleave:
    """Counts RL and SODA updates and enforces the omega:1 ratio."""

    omega: int
    rl: int = 0
    soda: int = 0

    def record_rl(self) -> None:
        self.rl += 1

    def record_soda(self) -> None:
        if self.rl != self.omega * (self.soda + 1):
            raise ContractViolation(f"SODA update after {self.rl} RL updates breaks the {self.omega}:1 schedule")
        self.soda += 1


def train_iteration(loop: TrainingLoop, learner: SODALearner, counter: Interleave) -> dict:
    """omega (env step, RL update) pairs, then one SODA update."""
    rl_rows = []
    for _ in range(counter.omega):
        loop.env_step()
        rl_rows.append(loop.rl_update())
        counter.record_rl()
    row = learner.update(loop.buffer, loop.env_steps)
    counter.record_soda()
    row["rl"] = rl_rows
    return row


__all__ = [
    "Interleave",
    "SODAConfig",
    "SODALearner",
    "consistency_loss",
    "soda_update",
    "train_iteration",
]
