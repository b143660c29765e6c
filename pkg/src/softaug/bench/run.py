"""Training orchestration and generalization evaluation."""

from __future__ import annotations

import dataclasses
import json
from collections import Counter
from pathlib import Path

import numpy as np

from softaug.augment import BatchAugmenter, ImagePool, build_image_pool
from softaug.bench.config import RunConfig, dump_config, load_config
from softaug.bench.metrics import EvalReport, MetricsWriter
from softaug.envsim import ACTION_DIM, ConfigurationError, EnvConfig, PixelControlEnv, make_test_variant
from softaug.nets.params import load_checkpoint, save_checkpoint
from softaug.sac import ReplayBuffer, SACAgent
from softaug.soda import Interleave, SODALearner, train_iteration

# eval episodes use env seeds far from any training seed
EVAL_SEED_OFFSET = 1_000_003


def _tag_key(tags) -> str:
    return "+".join(sorted(tags))


class Trainer:
    """Owns one run's environment, buffer, agent and optional SODA learner."""

    def __init__(self, cfg: RunConfig, metrics: MetricsWriter | None = None, pool: ImagePool | None = None):
        self.cfg = cfg = cfg.validate()
        self.metrics = metrics
        ss = np.random.SeedSequence(cfg.seed)
        env_ss, agent_ss, soda_ss, buf_ss, aug_ss, soda_aug_ss, act_ss, dr_ss = ss.spawn(8)
        self.env_cfg = dataclasses.replace(cfg.env, seed=int(env_ss.generate_state(1)[0]))
        self.env = PixelControlEnv(self.env_cfg)
        self.shapes = cfg.shapes()
        self.agent = SACAgent(self.shapes, cfg.sac, np.random.default_rng(agent_ss))
        wiring = cfg.wiring
        if pool is None and "overlay" in (wiring.rl_augment, wiring.soda_kind):
            pool = make_pool(cfg)
        self.pool = pool
        crop = cfg.env.crop_size
        self.augmenter = BatchAugmenter(np.random.default_rng(aug_ss), crop, pool, cfg.overlay_alpha)
        self.soda = None
        self.interleave = None
        if cfg.soda is not None:
            soda_aug = BatchAugmenter(np.random.default_rng(soda_aug_ss), crop, pool, cfg.overlay_alpha)
            self.soda = SODALearner(self.agent, cfg.soda, np.random.default_rng(soda_ss), soda_aug)
            self.interleave = Interleave(cfg.soda.omega)
        self.buffer = ReplayBuffer(cfg.sac.buffer_capacity, self.env.obs_shape, ACTION_DIM, np.random.default_rng(buf_ss))
        self.action_rng = np.random.default_rng(act_ss)
        self.dr_rng = np.random.default_rng(dr_ss)
        self.audit: dict[str, Counter] = {"rl": Counter(), "soda": Counter()}
        self.env_steps = 0
        self.episodes = 0
        self.rl_updates = 0
        self._episode_return = 0.0
        self._episode_len = 0
        self._next_eval = cfg.eval_every
        self.eval_history: list[dict] = []
        self.obs = self._reset()

    # -- environment -----------------------------------------------------

    def _reset(self) -> np.ndarray:
        factors = None
        if self.cfg.wiring.domain_randomization:
            factors = make_test_variant(self.env_cfg, "color_hard", int(self.dr_rng.integers(2**62)))
        return self.env.reset(factors)

    def _log(self, type_: str, **fields) -> None:
        if self.metrics is not None:
            self.metrics.write(type_, self.env_steps, **fields)

    def env_step(self) -> None:
        """One agent decision: act, step, store, handle episode end and evaluation."""
        if self.env_steps < self.cfg.sac.warmup_steps:
            action = self.action_rng.uniform(-1.0, 1.0, size=ACTION_DIM)
        else:
            action = self.agent.select_action(self.obs, deterministic=False)
        res = self.env.step(action)
        self.env_steps = int(res.info["env_steps"]) + self.episodes * self.env_cfg.episode_steps
        # episodes end only by time limit, so the transition is bootstrapped
        self.buffer.add(self.obs, action, res.reward, res.observation, done=False)
        self._episode_return += res.reward
        self._episode_len += 1
        self.obs = res.observation
        if res.done:
            self._log("episode", **{"return": self._episode_return, "length": self._episode_len})
            self.episodes += 1
            self._episode_return, self._episode_len = 0.0, 0
            self.obs = self._reset()
        while self.env_steps >= self._next_eval:
            self._periodic_eval(self._next_eval)
            self._next_eval += self.cfg.eval_every

    def _decisions_left(self) -> int:
        left = self.cfg.total_env_steps - self.env_steps
        return -(-left // self.env_cfg.action_repeat)

    @property
    def learning(self) -> bool:
        return self.env_steps >= self.cfg.sac.warmup_steps

    # -- updates ---------------------------------------------------------

    def rl_update(self) -> dict:
        cfg = self.cfg
        batch = self.buffer.sample(cfg.sac.batch_rl)
        kind = cfg.wiring.rl_augment
        aug = self.augmenter
        if kind is None:
            obs, next_obs = aug.crop(batch.obs), aug.crop(batch.next_obs)
        else:
            obs, next_obs = aug.crop_strong(batch.obs, kind), aug.crop_strong(batch.next_obs, kind)
        self.audit["rl"][_tag_key(obs.tags)] += 1
        row = self.agent.update(obs, batch.action, batch.reward, next_obs, batch.not_done,
                                allow_strong=kind is not None)
        self.rl_updates += 1
        self._log("rl_update", **row)
        return row

    def _soda_iteration(self) -> None:
        row = train_iteration(self, self.soda, self.interleave)
        self.audit["soda"][_tag_key(row.pop("tags"))] += 1
        row.pop("rl")
        row.pop("step")
        self._log("soda_update", **row)

    def train(self) -> None:
        total = self.cfg.total_env_steps
        while self.env_steps < total:
            if not self.learning:
                self.env_step()
                continue
            if self.soda is not None and self._decisions_left() >= self.interleave.omega:
                self._soda_iteration()
            else:
                self.env_step()
                self.rl_update()

    # -- evaluation ------------------------------------------------------

    def _periodic_eval(self, step: int) -> None:
        for variant in self.cfg.eval_variants:
            returns = evaluate_policy(self.agent, self.env_cfg, variant, self.cfg.eval_episodes, self.cfg.seed)
            mean = float(np.mean(returns))
            self.eval_history.append({"step": step, "variant": variant, "mean_return": mean})
            if self.metrics is not None:
                self.metrics.write("eval", step, variant=variant, mean_return=mean, returns=returns)

    def final_report(self) -> EvalReport:
        report = EvalReport(self.cfg.method)
        for variant in self.cfg.final_variants:
            returns = evaluate_policy(self.agent, self.env_cfg, variant, self.cfg.eval_episodes, self.cfg.seed)
            report.add(variant, self.cfg.seed, returns)
        return report

    def state_dict(self) -> dict:
        out = dict(self.agent.params)
        if self.soda is not None:
            out.update({f"target.{k}": v for k, v in self.soda.target.target.items()})
        return out


def make_pool(cfg: RunConfig) -> ImagePool:
    source = "directory" if cfg.pool_dir else "procedural"
    return build_image_pool(source, cfg.pool_size, cfg.seed, image_size=cfg.env.render_size, directory=cfg.pool_dir)


def evaluate_policy(agent: SACAgent, env_cfg: EnvConfig, variant: str, episodes: int, seed: int) -> list[float]:
    """Deterministic-policy returns of ``episodes`` lockstep episodes on ``variant``.

    Episode ``i`` uses env seed ``seed + EVAL_SEED_OFFSET + i`` and its own
    factor draw, independent of training progress.
    """
    envs = []
    for i in range(episodes):
        ecfg = dataclasses.replace(env_cfg, seed=seed * 7919 + EVAL_SEED_OFFSET + i)
        factors = make_test_variant(ecfg, variant, draw_seed=seed * 7919 + EVAL_SEED_OFFSET + i)
        envs.append(PixelControlEnv(ecfg, factors))
    obs = np.stack([e.reset() for e in envs])
    returns = np.zeros(episodes)
    done = np.zeros(episodes, dtype=bool)
    while not done.all():
        active = np.flatnonzero(~done)
        actions = agent.select_action(obs[active], deterministic=True)
        for a, i in zip(actions, active):
            res = envs[i].step(a)
            returns[i] += res.reward
            obs[i] = res.observation
            done[i] = res.done
    return [float(r) for r in returns]


def run_training(cfg: RunConfig, pool: ImagePool | None = None) -> EvalReport:
    """Train, writing ``metrics.jsonl``, ``audit.json``, ``model.ckpt``, ``summary.csv``."""
    cfg = cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    with MetricsWriter(out / "metrics.jsonl") as metrics:
        trainer = Trainer(cfg, metrics, pool)
        trainer.train()
        report = trainer.final_report()
        for (variant, seed), mean in report.cells.items():
            metrics.write("final_eval", trainer.env_steps, variant=variant, seed=seed, mean_return=mean,
                          returns=report.episodes[(variant, seed)])
        metrics.write(
            "summary",
            trainer.env_steps,
            env_steps=trainer.env_steps,
            episodes=trainer.episodes,
            rl_updates=trainer.rl_updates,
            soda_updates=trainer.soda.updates if trainer.soda else 0,
        )
    audit = {k: dict(sorted(v.items())) for k, v in trainer.audit.items()}
    (out / "audit.json").write_text(json.dumps(audit, indent=1, sort_keys=True) + "\n")
    save_checkpoint(out / "model.ckpt", trainer.state_dict(), {"method": cfg.method, "seed": cfg.seed})
    report.write_csv(out / "summary.csv")
    return report


def load_run(run_dir: str | Path) -> tuple[RunConfig, SACAgent]:
    """Rebuild the agent stored in a run directory."""
    run_dir = Path(run_dir)
    cfg_path, ckpt_path = run_dir / "config.txt", run_dir / "model.ckpt"
    for p in (cfg_path, ckpt_path):
        if not p.exists():
            raise FileNotFoundError(f"missing run artifact {p}")
    cfg = load_config(cfg_path).validate()
    params, _ = load_checkpoint(ckpt_path)
    agent = SACAgent(cfg.shapes(), cfg.sac, np.random.default_rng(0))
    for k in agent.params:
        if k not in params:
            raise ConfigurationError(f"checkpoint {ckpt_path} lacks tensor {k}")
        agent.params[k] = params[k]
    return cfg, agent


def evaluate_generalization(run_dir: str | Path, variants, episodes: int, seeds) -> EvalReport:
    """Deterministic-policy report for a saved run over ``variants`` x ``seeds``."""
    cfg, agent = load_run(run_dir)
    report = EvalReport(cfg.method)
    for v in variants:
        make_test_variant(cfg.env, v, 0)  # validates the name up front
    for v in variants:
        for s in seeds:
            report.add(v, int(s), evaluate_policy(agent, cfg.env, v, episodes, int(s)))
    return report


__all__ = ["Trainer", "evaluate_generalization", "evaluate_policy", "load_run", "make_pool", "run_training"]
