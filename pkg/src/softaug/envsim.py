"""Procedural 2-D pixel-control tasks with controllable visual factors.

Two damped point-mass tasks are provided:

* ``point_goal``: steer the agent onto a goal marker.
* ``push_box``: push a box onto the goal marker.

Frames are rasterized from axis-aligned shapes without antialiasing, so a
(seed, factors, action sequence) triple reproduces every pixel bit-exactly.
Visual factors can be resampled from held-out test distributions
(``color_easy``, ``color_hard``, ``video_easy``, ``video_hard``,
``camera_light_texture``) to measure generalization.
"""

from __future__ import annotations

import dataclasses
import functools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ConfigurationError(ValueError):
    """An invalid or inconsistent configuration value."""


class UsageError(RuntimeError):
    """An operation was called in an invalid state."""


TASKS = ("point_goal", "push_box")
DISTRIBUTIONS = (
    "training",
    "color_easy",
    "color_hard",
    "video_easy",
    "video_hard",
    "camera_light_texture",
)
FLOOR_PATTERNS = ("solid", "checker", "stripes")

# defaults per task: (episode_steps, action_repeat)
TASK_DEFAULTS = {"point_goal": (200, 4), "push_box": (50, 1)}

ACTION_DIM = 2
BORDER_FRACTION = 0.08
GOAL_RADIUS = 0.08
DISTANCE_PENALTY = 0.1
REWARD_MARGIN = 0.6
AGENT_HALF = 0.07
BOX_HALF = 0.07
VELOCITY_KEEP = 0.6
ACCEL_GAIN = 0.008
COLOR_EASY_RANGE = 0.15
ARENA_DIAGONAL = math.sqrt(2.0)


@dataclass(frozen=True)
class EnvConfig:
    task_id: str = "point_goal"
    episode_steps: int | None = None
    action_repeat: int | None = None
    frame_stack: int = 3
    render_size: int = 100
    crop_size: int = 84
    seed: int = 0

    def resolved(self) -> EnvConfig:
        """Fill task-dependent defaults and validate."""
        if self.task_id not in TASKS:
            raise ConfigurationError(f"unknown task_id {self.task_id!r}; expected one of {TASKS}")
        steps, repeat = TASK_DEFAULTS[self.task_id]
        cfg = dataclasses.replace(
            self,
            episode_steps=steps if self.episode_steps is None else self.episode_steps,
            action_repeat=repeat if self.action_repeat is None else self.action_repeat,
        )
        for name in ("episode_steps", "action_repeat", "frame_stack", "render_size", "crop_size"):
            if getattr(cfg, name) < 1:
                raise ConfigurationError(f"env.{name} must be positive, got {getattr(cfg, name)}")
        if cfg.render_size < cfg.crop_size:
            raise ConfigurationError(
                f"render_size {cfg.render_size} smaller than crop_size {cfg.crop_size}"
            )
        return cfg

    @property
    def obs_shape(self) -> tuple[int, int, int]:
        return (3 * self.frame_stack, self.render_size, self.render_size)

    @property
    def decisions_per_episode(self) -> int:
        cfg = self.resolved()
        return math.ceil(cfg.episode_steps / cfg.action_repeat)


@dataclass(frozen=True)
class VisualFactors:
    background_color: tuple[float, float, float] = (0.20, 0.28, 0.45)
    floor_color: tuple[float, float, float] = (0.58, 0.58, 0.55)
    floor_pattern: str = "checker"
    agent_color: tuple[float, float, float] = (0.85, 0.22, 0.18)
    goal_color: tuple[float, float, float] = (0.22, 0.80, 0.30)
    box_color: tuple[float, float, float] = (0.92, 0.80, 0.20)
    background_mode: str = "static_color"
    animate_floor: bool = False
    animation_seed: int = 0
    camera_jitter: tuple[int, int] = (0, 0)
    light_gain: float = 1.0

    def colors(self) -> dict[str, tuple[float, float, float]]:
        return {
            "background_color": self.background_color,
            "floor_color": self.floor_color,
            "agent_color": self.agent_color,
            "goal_color": self.goal_color,
            "box_color": self.box_color,
        }


TRAINING_FACTORS = VisualFactors()


@dataclass
class EnvState:
    agent: np.ndarray
    velocity: np.ndarray
    goal: np.ndarray
    box: np.ndarray | None = None
    t: int = 0


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    info: dict[str, float] = field(default_factory=dict)


# -- visual factor distributions ---------------------------------------------


def _differs_from_training(color: np.ndarray, reference: tuple) -> bool:
    return bool(np.any(np.abs(color - np.asarray(reference)) > COLOR_EASY_RANGE))


def _sample_hard_color(rng: np.random.Generator, reference: tuple) -> tuple:
    while True:
        c = rng.uniform(0.0, 1.0, size=3)
        if _differs_from_training(c, reference):
            return tuple(float(v) for v in c)


def make_test_variant(base: EnvConfig, distribution: str, draw_seed: int) -> VisualFactors:
    """Sample visual factors from a named test distribution.

    ``training`` is a point mass on :data:`TRAINING_FACTORS`. ``color_hard``
    rejects draws within +-0.15 of the training color in every channel, so
    its colors are never seen in training.
    """
    base.resolved()
    if distribution not in DISTRIBUTIONS:
        raise ConfigurationError(f"unknown distribution {distribution!r}; expected one of {DISTRIBUTIONS}")
    train = TRAINING_FACTORS
    if distribution == "training":
        return train
    rng = np.random.default_rng([int(draw_seed) & 0xFFFFFFFFFFFFFFFF, DISTRIBUTIONS.index(distribution)])
    if distribution == "color_easy":
        colors = {
            k: tuple(float(v) for v in np.clip(np.asarray(c) + rng.uniform(-COLOR_EASY_RANGE, COLOR_EASY_RANGE, 3), 0, 1))
            for k, c in train.colors().items()
        }
        return dataclasses.replace(train, **colors)
    if distribution in ("color_hard", "camera_light_texture"):
        colors = {k: _sample_hard_color(rng, c) for k, c in train.colors().items()}
        factors = dataclasses.replace(train, **colors)
        if distribution == "color_hard":
            return factors
        jitter = tuple(int(v) for v in rng.integers(-4, 5, size=2))
        return dataclasses.replace(
            factors,
            camera_jitter=jitter,
            light_gain=float(rng.uniform(0.7, 1.3)),
            floor_pattern=FLOOR_PATTERNS[int(rng.integers(len(FLOOR_PATTERNS)))],
        )
    anim_seed = int(rng.integers(0, 2**63 - 1))
    return dataclasses.replace(
        train,
        background_mode="animated_pattern",
        animate_floor=distribution == "video_hard",
        animation_seed=anim_seed,
    )


# -- procedural textures -----------------------------------------------------


def value_noise(size: int, rng: np.random.Generator, octaves: int = 3, base_cells: int = 4) -> np.ndarray:
    """Tileable multi-octave value noise in [0, 1], shape (size, size)."""
    out = np.zeros((size, size))
    amp, total = 1.0, 0.0
    coords = np.arange(size) / size
    for o in range(octaves):
        cells = base_cells * 2**o
        lattice = rng.random((cells, cells))
        x = coords * cells
        i0 = np.floor(x).astype(int) % cells
        i1 = (i0 + 1) % cells
        f = x - np.floor(x)
        f = f * f * (3 - 2 * f)
        rows = lattice[i0][:, i0] * (1 - f)[None, :] + lattice[i0][:, i1] * f[None, :]
        rows1 = lattice[i1][:, i0] * (1 - f)[None, :] + lattice[i1][:, i1] * f[None, :]
        out += amp * (rows * (1 - f)[:, None] + rows1 * f[:, None])
        total += amp
        amp *= 0.5
    return out / total


def colorize(noise: np.ndarray, rng: np.random.Generator, n_stops: int = 4) -> np.ndarray:
    """Map scalar noise through a random piecewise-linear color gradient."""
    stops = rng.random((n_stops, 3))
    pos = np.linspace(0.0, 1.0, n_stops)
    return np.stack([np.interp(noise, pos, stops[:, c]) for c in range(3)], axis=-1)


@functools.lru_cache(maxsize=64)
def _animation_texture(seed: int, size: int) -> tuple[np.ndarray, tuple[int, int]]:
    rng = np.random.default_rng(seed)
    tex = colorize(value_noise(2 * size, rng, octaves=4, base_cells=3), rng)
    vel = tuple(int(v) for v in rng.integers(1, 3, size=2) * rng.choice([-1, 1], size=2))
    tex.setflags(write=False)
    return tex, vel


def animated_frame(seed: int, size: int, t: int) -> np.ndarray:
    """Frame ``t`` of the scrolling procedural background for ``seed``."""
    tex, (vy, vx) = _animation_texture(seed, size)
    n = tex.shape[0]
    rows = (np.arange(size) + t * vy) % n
    cols = (np.arange(size) + t * vx) % n
    return tex[rows][:, cols]


# -- rendering ---------------------------------------------------------------


def _arena_geometry(size: int) -> tuple[int, int]:
    border = int(round(BORDER_FRACTION * size))
    return border, size - 2 * border


def _to_pixels(pos: np.ndarray, border: int, arena: int) -> np.ndarray:
    return border + pos * arena


def _rect_bounds(center_px: np.ndarray, half_px: float, size: int) -> tuple[int, int, int, int]:
    y0 = int(math.floor(center_px[1] - half_px + 0.5))
    y1 = int(math.floor(center_px[1] + half_px + 0.5))
    x0 = int(math.floor(center_px[0] - half_px + 0.5))
    x1 = int(math.floor(center_px[0] + half_px + 0.5))
    y1, x1 = max(y1, y0 + 1), max(x1, x0 + 1)
    return max(y0, 0), min(y1, size), max(x0, 0), min(x1, size)


def _fill_rect(img: np.ndarray, center_px: np.ndarray, half_px: float, color) -> None:
    y0, y1, x0, x1 = _rect_bounds(center_px, half_px, img.shape[0])
    img[y0:y1, x0:x1] = color


def _scene_base(factors: VisualFactors, size: int, t: int) -> np.ndarray:
    border, arena = _arena_geometry(size)
    if factors.background_mode == "animated_pattern":
        img = animated_frame(factors.animation_seed, size, t).copy()
        if factors.animate_floor:
            return img
    else:
        img = np.empty((size, size, 3))
        img[:] = factors.background_color
    floor = np.empty((arena, arena, 3))
    floor[:] = factors.floor_color
    cell = max(arena // 6, 1)
    idx = np.arange(arena) // cell
    dark = np.asarray(factors.floor_color) * 0.8
    if factors.floor_pattern == "checker":
        floor[(idx[:, None] + idx[None, :]) % 2 == 1] = dark
    elif factors.floor_pattern == "stripes":
        floor[idx % 2 == 1, :] = dark
    img[border : border + arena, border : border + arena] = floor
    return img


def rasterize(state: EnvState, factors: VisualFactors, size: int) -> np.ndarray:
    """Unquantized RGB frame (size, size, 3) with values in [0, 1].

    Draw order: background, floor, goal ring, box, agent; then camera shift
    and light gain.
    """
    border, arena = _arena_geometry(size)
    base = _scene_base(factors, size, state.t)
    img = base.copy()

    goal_px = _to_pixels(state.goal, border, arena)
    outer = GOAL_RADIUS * arena
    _fill_rect(img, goal_px, outer, factors.goal_color)
    inner = outer - max(1.0, 0.35 * outer)
    if inner >= 0.5:
        y0, y1, x0, x1 = _rect_bounds(goal_px, inner, size)
        img[y0:y1, x0:x1] = base[y0:y1, x0:x1]
    if state.box is not None:
        _fill_rect(img, _to_pixels(state.box, border, arena), BOX_HALF * arena, factors.box_color)
    _fill_rect(img, _to_pixels(state.agent, border, arena), AGENT_HALF * arena, factors.agent_color)

    dy, dx = factors.camera_jitter
    if dy or dx:
        shifted = np.empty_like(img)
        shifted[:] = factors.background_color
        ys, yd = (slice(0, size - dy), slice(dy, size)) if dy >= 0 else (slice(-dy, size), slice(0, size + dy))
        xs, xd = (slice(0, size - dx), slice(dx, size)) if dx >= 0 else (slice(-dx, size), slice(0, size + dx))
        shifted[yd, xd] = img[ys, xs]
        img = shifted
    if factors.light_gain != 1.0:
        img = np.clip(factors.light_gain * img, 0.0, 1.0)
    return img


def quantize(frame: np.ndarray) -> np.ndarray:
    """8-bit camera quantization; returns uint8 (H, W, 3)."""
    return np.rint(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)


def render(state: EnvState, factors: VisualFactors, size: int) -> np.ndarray:
    """Channels-first float32 frame (3, size, size) on the 8-bit grid in [0, 1]."""
    return quantize(rasterize(state, factors, size)).transpose(2, 0, 1).astype(np.float32) / 255.0


# -- dynamics ----------------------------------------------------------------


def _shaped_reward(distance: float) -> float:
    if distance <= GOAL_RADIUS:
        return 1.0
    return max(0.0, 1.0 - (distance - GOAL_RADIUS) / REWARD_MARGIN)


def _push_reward(distance: float) -> float:
    if distance <= GOAL_RADIUS:
        return 1.0
    return -DISTANCE_PENALTY * distance


def _resolve_push(agent: np.ndarray, box: np.ndarray) -> None:
    """Move the box out of the agent along the axis of least penetration."""
    reach = AGENT_HALF + BOX_HALF
    delta = box - agent
    pen = reach - np.abs(delta)
    if np.all(pen > 0):
        axis = int(np.argmin(pen))
        sign = 1.0 if delta[axis] >= 0 else -1.0
        box[axis] += sign * pen[axis]
        lo, hi = BOX_HALF, 1.0 - BOX_HALF
        if box[axis] < lo or box[axis] > hi:
            clipped = min(max(box[axis], lo), hi)
            agent[axis] -= box[axis] - clipped
            box[axis] = clipped


class PixelControlEnv:
    """A single, non-shareable environment instance.

    All randomness flows through the instance generator seeded from
    ``config.seed``; ``reset`` draws the next initial state from it.
    """

    def __init__(self, config: EnvConfig, factors: VisualFactors = TRAINING_FACTORS):
        self.config = config.resolved()
        self.factors = factors
        self._rng = np.random.default_rng(self.config.seed)
        self.state: EnvState | None = None
        self._frames: list[np.ndarray] = []
        self._steps = 0
        self._done = True

    @property
    def obs_shape(self) -> tuple[int, int, int]:
        return self.config.obs_shape

    def _initial_state(self) -> EnvState:
        rng = self._rng
        goal = rng.uniform(0.15, 0.85, size=2)
        if self.config.task_id == "point_goal":
            while True:
                agent = rng.uniform(0.15, 0.85, size=2)
                if np.linalg.norm(agent - goal) >= 0.2:
                    break
            return EnvState(agent=agent, velocity=np.zeros(2), goal=goal)
        while True:
            box = rng.uniform(0.3, 0.7, size=2)
            if np.linalg.norm(box - goal) >= 0.15:
                break
        while True:
            agent = rng.uniform(AGENT_HALF, 1 - AGENT_HALF, size=2)
            if np.any(np.abs(agent - box) >= AGENT_HALF + BOX_HALF + 0.02):
                break
        return EnvState(agent=agent, velocity=np.zeros(2), goal=goal, box=box)

    def reset(self, factors: VisualFactors | None = None) -> np.ndarray:
        if factors is not None:
            self.factors = factors
        self.state = self._initial_state()
        self._steps = 0
        self._done = False
        frame = self.render()
        self._frames = [frame] * self.config.frame_stack
        return self._observation()

    def render(self) -> np.ndarray:
        return render(self.state, self.factors, self.config.render_size)

    def _observation(self) -> np.ndarray:
        return np.concatenate(self._frames, axis=0)

    def distance_to_goal(self) -> float:
        s = self.state
        obj = s.box if s.box is not None else s.agent
        return float(np.linalg.norm(obj - s.goal))

    def _physics_substep(self, action: np.ndarray) -> float:
        s = self.state
        s.velocity = VELOCITY_KEEP * s.velocity + ACCEL_GAIN * action
        s.agent = s.agent + s.velocity
        for ax in range(2):
            if s.agent[ax] < AGENT_HALF or s.agent[ax] > 1 - AGENT_HALF:
                s.agent[ax] = min(max(s.agent[ax], AGENT_HALF), 1 - AGENT_HALF)
                s.velocity[ax] = 0.0
        s.t += 1
        if s.box is not None:
            _resolve_push(s.agent, s.box)
            return _push_reward(self.distance_to_goal())
        return _shaped_reward(self.distance_to_goal())

    def step(self, action) -> StepResult:
        if self.state is None or self._done:
            raise UsageError("step() called before reset() or after the episode finished")
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (ACTION_DIM,):
            raise UsageError(f"action must have shape ({ACTION_DIM},), got {action.shape}")
        if not np.all(np.isfinite(action)):
            raise UsageError("action contains NaN or inf")
        action = np.clip(action, -1.0, 1.0)
        reward = 0.0
        for _ in range(self.config.action_repeat):
            if self._steps >= self.config.episode_steps:
                break
            reward += self._physics_substep(action)
            self._steps += 1
        self._done = self._steps >= self.config.episode_steps
        self._frames = self._frames[1:] + [self.render()]
        return StepResult(
            observation=self._observation(),
            reward=reward,
            done=self._done,
            info={"distance_to_goal": self.distance_to_goal(), "env_steps": float(self._steps)},
        )


# -- debug output ------------------------------------------------------------


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Write an RGB image as binary PPM (P6, 8-bit).

    Accepts (H, W, 3) or channels-first (3, H, W) arrays, float in [0, 1] or uint8.
    """
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[0] == 3 and img.shape[-1] != 3:
        img = img.transpose(1, 2, 0)
    if img.dtype != np.uint8:
        img = quantize(img)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a binary P6 PPM into a uint8 (H, W, 3) array."""
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit P6 PPM")
    w, h = int(tokens[1]), int(tokens[2])
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return pixels.reshape(h, w, 3).copy()


def dump_frames(env: PixelControlEnv, out_dir: str | Path, prefix: str = "frame") -> list[Path]:
    """Dump each frame of the current frame stack as PPM files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(env._frames):
        p = out / f"{prefix}_{i}.ppm"
        write_ppm(p, frame)
        paths.append(p)
    return paths
