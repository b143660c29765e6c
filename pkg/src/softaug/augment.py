"""Seeded image augmentations for frame-stacked observations.

Weak: temporally consistent random crop. Strong: random convolution and
random overlay. Every draw is described by an :class:`AugmentationSpec`
that can be serialized to one text line and replayed bit-exactly.

Observations are channels-first float arrays ``(3k, H, W)`` in [0, 1];
batched variants take ``(N, 3k, H, W)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import as_strided, sliding_window_view

from softaug.envsim import ConfigurationError, UsageError, colorize, read_ppm, value_noise

KINDS = ("crop", "conv", "overlay", "identity")
STRONG_KINDS = frozenset({"conv", "overlay"})
DEFAULT_OVERLAY_ALPHA = 0.5
CONV_FAN_IN = 3 * 3 * 3


@dataclass(frozen=True)
class ObsBatch:
    """A batch of observations plus the augmentation kinds applied to it."""

    data: np.ndarray
    tags: frozenset = frozenset()

    @property
    def strong(self) -> bool:
        return bool(self.tags & STRONG_KINDS)

    def __len__(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class AugmentationSpec:
    kind: str
    seed: int = 0
    crop_offset: tuple[int, int] = (0, 0)
    conv_weights: np.ndarray | None = field(default=None, compare=False)
    overlay_alpha: float = DEFAULT_OVERLAY_ALPHA
    overlay_image_id: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown augmentation kind {self.kind!r}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, AugmentationSpec):
            return NotImplemented
        return self.to_record() == other.to_record()

    def __hash__(self) -> int:
        return hash(self.to_record())

    def to_record(self) -> str:
        """One tab-separated line: kind, seed, then the active kind's parameters."""
        fields = [self.kind, f"seed={self.seed}"]
        if self.kind == "crop":
            fields.append(f"offset={self.crop_offset[0]},{self.crop_offset[1]}")
        elif self.kind == "conv":
            w = np.asarray(self.conv_weights, dtype=np.float64).ravel()
            fields.append("weights=" + ",".join(repr(float(v)) for v in w))
        elif self.kind == "overlay":
            fields.append(f"alpha={self.overlay_alpha!r}")
            fields.append(f"image={self.overlay_image_id}")
        return "\t".join(fields)

    @classmethod
    def from_record(cls, line: str) -> AugmentationSpec:
        parts = line.rstrip("\n").split("\t")
        kind, kv = parts[0], dict(p.split("=", 1) for p in parts[1:])
        kwargs: dict = {"kind": kind, "seed": int(kv.get("seed", 0))}
        if kind == "crop":
            dy, dx = (int(v) for v in kv["offset"].split(","))
            kwargs["crop_offset"] = (dy, dx)
        elif kind == "conv":
            w = np.array([float(v) for v in kv["weights"].split(",")], dtype=np.float64)
            kwargs["conv_weights"] = w.reshape(3, 3, 3, 3)
        elif kind == "overlay":
            kwargs["overlay_alpha"] = float(kv["alpha"])
            kwargs["overlay_image_id"] = int(kv["image"])
        return cls(**kwargs)


@dataclass(frozen=True)
class ImagePool:
    """Distractor images ``(M, S, S, 3)`` float32 in [0, 1]."""

    images: np.ndarray
    source: str = "procedural"

    def __post_init__(self):
        if len(self.images) == 0:
            raise ConfigurationError("image pool is empty")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_size(self) -> int:
        return self.images.shape[1]


# -- pool construction -------------------------------------------------------


def _procedural_image(rng: np.random.Generator, size: int) -> np.ndarray:
    noise = colorize(value_noise(size, rng, octaves=int(rng.integers(2, 5)), base_cells=int(rng.integers(2, 6))), rng)
    theta = rng.uniform(0, 2 * math.pi)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    ramp = (np.cos(theta) * xx + np.sin(theta) * yy)
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)
    c0, c1 = rng.random(3), rng.random(3)
    gradient = c0 + ramp[..., None] * (c1 - c0)
    mix = rng.uniform(0.3, 0.7)
    return (mix * noise + (1 - mix) * gradient).astype(np.float32)


def _load_image(path: Path, size: int) -> np.ndarray:
    if path.suffix.lower() == ".ppm":
        arr = read_ppm(path)
        if arr.shape[:2] != (size, size):
            idx_y = np.arange(size) * arr.shape[0] // size
            idx_x = np.arange(size) * arr.shape[1] // size
            arr = arr[idx_y][:, idx_x]
        return arr.astype(np.float32) / 255.0
    from PIL import Image  # optional dependency for non-PPM inputs

    with Image.open(path) as im:
        im = im.convert("RGB").resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


IMAGE_SUFFIXES = (".ppm", ".png", ".jpg", ".jpeg", ".bmp")


def build_image_pool(
    source: str = "procedural",
    size: int = 100,
    seed: int = 0,
    image_size: int = 100,
    directory: str | Path | None = None,
) -> ImagePool:
    """Build ``size`` distractor images.

    ``procedural`` layers colorized value noise over a random two-color
    gradient; ``directory`` loads and resizes every readable image file
    (sorted by name, truncated to ``size``).
    """
    if size < 1:
        raise ConfigurationError("image pool size must be at least 1")
    if source == "procedural":
        root = np.random.SeedSequence(seed)
        imgs = [_procedural_image(np.random.default_rng(s), image_size) for s in root.spawn(size)]
        return ImagePool(np.stack(imgs), source="procedural")
    if source != "directory":
        raise ConfigurationError(f"unknown image pool source {source!r}")
    if directory is None:
        raise ConfigurationError("directory image pool needs a directory")
    root_dir = Path(directory)
    if not root_dir.is_dir():
        raise OSError(f"image directory {root_dir} is not readable")
    imgs = []
    for p in sorted(root_dir.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        try:
            imgs.append(_load_image(p, image_size))
        except (OSError, ValueError):
            continue
        if len(imgs) >= size:
            break
    if not imgs:
        raise OSError(f"no readable images in {root_dir}")
    return ImagePool(np.stack(imgs), source="directory")


# -- sampling ----------------------------------------------------------------


def sample_augmentation(
    kind: str,
    rng: np.random.Generator,
    pool: ImagePool | None = None,
    max_offset: int = 16,
    overlay_alpha: float = DEFAULT_OVERLAY_ALPHA,
) -> AugmentationSpec:
    """Draw a fresh spec of ``kind``.

    Conv weights are i.i.d. normal with std ``1/sqrt(27)``; overlay images
    are uniform over the pool; crop offsets are uniform on {0..max_offset}^2.
    """
    seed = int(rng.integers(0, 2**63 - 1))
    if kind == "conv":
        w = rng.normal(0.0, 1.0 / math.sqrt(CONV_FAN_IN), size=(3, 3, 3, 3))
        return AugmentationSpec("conv", seed=seed, conv_weights=w)
    if kind == "overlay":
        if pool is None:
            raise ConfigurationError("overlay augmentation needs an image pool")
        return AugmentationSpec(
            "overlay", seed=seed, overlay_alpha=overlay_alpha, overlay_image_id=int(rng.integers(len(pool)))
        )
    if kind == "crop":
        dy, dx = (int(v) for v in rng.integers(0, max_offset + 1, size=2))
        return AugmentationSpec("crop", seed=seed, crop_offset=(dy, dx))
    if kind == "identity":
        return AugmentationSpec("identity", seed=seed)
    raise ConfigurationError(f"unknown augmentation kind {kind!r}")


# -- transforms --------------------------------------------------------------


def random_crop_batch(obs: np.ndarray, offsets: np.ndarray, crop_size: int) -> np.ndarray:
    """Crop every frame of item ``n`` at ``offsets[n] = (dy, dx)``."""
    n, c, h, w = obs.shape
    offsets = np.asarray(offsets, dtype=np.int64).reshape(n, 2)
    if np.any(offsets < 0) or np.any(offsets[:, 0] > h - crop_size) or np.any(offsets[:, 1] > w - crop_size):
        raise UsageError(f"crop offset out of range for {h}x{w} -> {crop_size}")
    windows = sliding_window_view(obs, (crop_size, crop_size), axis=(2, 3))
    return windows[np.arange(n), :, offsets[:, 0], offsets[:, 1]]


def random_crop_stack(obs: np.ndarray, spec: AugmentationSpec, crop_size: int = 84) -> np.ndarray:
    """Crop all frames of one stack with the same window."""
    return random_crop_batch(obs[None], np.asarray([spec.crop_offset]), crop_size)[0]


def center_crop_batch(obs: np.ndarray, crop_size: int) -> np.ndarray:
    h = obs.shape[-1]
    o = (h - crop_size) // 2
    return obs[..., o : o + crop_size, o : o + crop_size]


_CONV_CHUNK = 32  # items per patch matrix; larger batches spill out of cache


def _conv_valid(xp: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Per-item 3x3 RGB conv of already padded frames, then ``(tanh(y) + 1) / 2``."""
    n, c, hp, wp = xp.shape
    if n > _CONV_CHUNK:
        out = channels_last_empty((n, c, hp - 2, wp - 2), xp.dtype)
        for i in range(0, n, _CONV_CHUNK):
            out[i : i + _CONV_CHUNK] = _conv_valid(xp[i : i + _CONV_CHUNK], weights[i : i + _CONV_CHUNK])
        return out
    h, w, k = hp - 2, wp - 2, c // 3
    # (N, 27, k*H*W) patches ordered (in-channel, kH, kW) to match the weight layout
    sn, sc, sh, sw = xp.strides
    cols = as_strided(xp, (n, 3, 3, 3, k, h, w), (sn, sc, sh, sw, 3 * sc, sh, sw)).reshape(n, 27, k * h * w)
    y = np.matmul(np.asarray(weights, dtype=xp.dtype).reshape(n, 3, 27), cols)
    np.tanh(y, out=y)
    y += 1
    y *= 0.5
    out = np.empty((n, h, w, k, 3), dtype=xp.dtype)
    out[...] = y.reshape(n, 3, k, h, w).transpose(0, 3, 4, 2, 1)
    return out.reshape(n, h, w, c).transpose(0, 3, 1, 2)


def _reflect_pad(obs: np.ndarray) -> np.ndarray:
    return np.pad(obs, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="reflect")


def random_conv_batch(obs: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Apply per-item 3x3 RGB convolutions, shared across the item's frames.

    weights: (N, 3, 3, 3, 3) as (out, in, kH, kW). Reflect padding, stride 1,
    then ``(tanh(y) + 1) / 2``.
    """
    return _conv_valid(_reflect_pad(obs), weights)


def random_conv(obs: np.ndarray, spec: AugmentationSpec) -> np.ndarray:
    return random_conv_batch(obs[None], np.asarray(spec.conv_weights)[None])[0]


def random_overlay_batch(obs: np.ndarray, images: np.ndarray, alpha: float) -> np.ndarray:
    """``(1 - alpha) * obs + alpha * image``, one image per item shared by its frames.

    images: (N, H, W, 3) float in [0, 1].
    """
    if not 0.0 <= alpha < 1.0:
        raise UsageError(f"overlay alpha must lie in [0, 1), got {alpha}")
    n, c, h, w = obs.shape
    eps = np.asarray(images, dtype=obs.dtype).transpose(0, 3, 1, 2)
    eps = np.tile(eps, (1, c // 3, 1, 1))
    a = obs.dtype.type(alpha)
    out = channels_last_empty(obs.shape, obs.dtype)
    np.multiply(1 - a, obs, out=out)
    out += a * eps
    return out


def random_overlay(obs: np.ndarray, pool: ImagePool, spec: AugmentationSpec) -> np.ndarray:
    if len(pool) == 0:
        raise ConfigurationError("image pool is empty")
    img = pool.images[spec.overlay_image_id]
    return random_overlay_batch(obs[None], img[None], spec.overlay_alpha)[0]


def apply_spec(obs: np.ndarray, spec: AugmentationSpec, pool: ImagePool | None = None, crop_size: int = 84) -> np.ndarray:
    """Replay a single spec on one observation."""
    if spec.kind == "crop":
        return random_crop_stack(obs, spec, crop_size)
    if spec.kind == "conv":
        return random_conv(obs, spec)
    if spec.kind == "overlay":
        if pool is None:
            raise ConfigurationError("overlay replay needs an image pool")
        return random_overlay(obs, pool, spec)
    return obs.copy()


def channels_last_empty(shape, dtype=np.float32) -> np.ndarray:
    """Uninitialized ``(N, C, H, W)`` array whose memory is laid out ``(N, H, W, C)``.

    The encoder runs channels-last, so batches built this way reach it
    without a transpose copy.
    """
    n, c, h, w = shape
    return np.empty((n, h, w, c), dtype=dtype).transpose(0, 3, 1, 2)


def to_unit(obs: np.ndarray) -> np.ndarray:
    """uint8 pixels -> float32 in [0, 1]; float input passes through."""
    if obs.dtype != np.uint8:
        return obs
    if obs.ndim != 4:
        return obs.astype(np.float32) / np.float32(255)
    out = channels_last_empty(obs.shape)
    np.divide(obs, np.float32(255), out=out, dtype=np.float32)
    return out


class BatchAugmenter:
    """Draws and applies per-item augmentations to whole batches.

    Each item gets its own crop offset and, for strong kinds, its own conv
    kernel or overlay image. Returned batches carry the applied kinds as tags.
    """

    def __init__(self, rng: np.random.Generator, crop_size: int, pool: ImagePool | None = None,
                 overlay_alpha: float = DEFAULT_OVERLAY_ALPHA):
        self.rng = rng
        self.crop_size = crop_size
        self.pool = pool
        self.overlay_alpha = overlay_alpha

    def crop_offsets(self, n: int, size: int) -> np.ndarray:
        return self.rng.integers(0, size - self.crop_size + 1, size=(n, 2))

    def draw(self, kind: str, n: int) -> np.ndarray:
        """Per-item parameters: conv weights (N, 3, 3, 3, 3) or overlay image ids (N,)."""
        if kind == "conv":
            return self.rng.normal(0.0, 1.0 / math.sqrt(CONV_FAN_IN), size=(n, 3, 3, 3, 3))
        if kind == "overlay":
            if self.pool is None:
                raise ConfigurationError("overlay augmentation needs an image pool")
            return self.rng.integers(0, len(self.pool), size=n)
        raise ConfigurationError(f"{kind!r} is not a strong augmentation")

    def apply_strong(self, obs: np.ndarray, kind: str, draws: np.ndarray) -> np.ndarray:
        """Full-size strong transform with explicit per-item parameters."""
        obs = to_unit(obs)
        if kind == "conv":
            return random_conv_batch(obs, draws)
        return random_overlay_batch(obs, self.pool.images[draws], self.overlay_alpha)

    def strong(self, obs: np.ndarray, kind: str) -> np.ndarray:
        return self.apply_strong(obs, kind, self.draw(kind, len(obs)))

    def crop(self, obs: np.ndarray, offsets: np.ndarray | None = None) -> ObsBatch:
        if offsets is None:
            offsets = self.crop_offsets(len(obs), obs.shape[-1])
        return ObsBatch(to_unit(random_crop_batch(obs, offsets, self.crop_size)), frozenset({"crop"}))

    def crop_strong(self, obs: np.ndarray, kind: str, offsets: np.ndarray | None = None,
                    draws: np.ndarray | None = None) -> ObsBatch:
        """``crop(strong(obs))`` with the strong transform acting on full-size frames.

        Both transforms are evaluated on the crop window only: overlay is
        pointwise, and conv on a window padded by one pixel of its real (or
        reflected) surroundings gives the same values as conv-then-crop.
        """
        n, size = len(obs), obs.shape[-1]
        if offsets is None:
            offsets = self.crop_offsets(n, size)
        if draws is None:
            draws = self.draw(kind, n)
        cs = self.crop_size
        if kind == "conv":
            window = random_crop_batch(_reflect_pad(obs), offsets, cs + 2)
            out = _conv_valid(to_unit(window), draws)
        else:
            if self.pool is None:
                raise ConfigurationError("overlay augmentation needs an image pool")
            window = to_unit(random_crop_batch(obs, offsets, cs))
            imgs = self.pool.images[draws].transpose(0, 3, 1, 2)
            imgs = random_crop_batch(imgs, offsets, cs).transpose(0, 2, 3, 1)
            out = random_overlay_batch(window, imgs, self.overlay_alpha)
        return ObsBatch(out, frozenset({"crop", kind}))
