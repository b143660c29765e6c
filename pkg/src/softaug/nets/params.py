"""Parameter collections, gradients, optimizers, target tracking and checkpoints.

A ParamSet is a plain ``dict[str, np.ndarray]``. Names ending in
``running_mean`` / ``running_var`` are normalization buffers: they live in
the ParamSet but are never differentiated or touched by an optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from softaug.nets.autodiff import NumericalError, Tensor, sqrt, tsum

ParamSet = dict

BUFFER_SUFFIXES = ("running_mean", "running_var")
CHECKPOINT_MAGIC = b"SOFTAUG-CKPT"
CHECKPOINT_VERSION = 1


def is_buffer(name: str) -> bool:
    return name.endswith(BUFFER_SUFFIXES)


def trainable_keys(params: Mapping[str, np.ndarray], prefixes: Iterable[str] | None = None) -> list[str]:
    prefixes = tuple(prefixes) if prefixes is not None else None
    return [
        k for k in params
        if not is_buffer(k) and (prefixes is None or k.startswith(prefixes))
    ]


def select(params: Mapping[str, np.ndarray], prefixes: Iterable[str]) -> ParamSet:
    """Deep copy of every entry whose name starts with one of ``prefixes``."""
    prefixes = tuple(prefixes)
    return {k: v.copy() for k, v in params.items() if k.startswith(prefixes)}


def astype(params: Mapping[str, np.ndarray], dtype) -> ParamSet:
    return {k: np.array(v, dtype=dtype) for k, v in params.items()}


def value_and_grad(
    loss_fn: Callable,
    params: Mapping[str, np.ndarray],
    wrt: Iterable[str] | None = None,
    has_aux: bool = False,
):
    """Evaluate ``loss_fn`` on ``params`` and return ``(value, grads)``.

    ``loss_fn`` receives a mapping where every name in ``wrt`` (default: all
    trainable names) is a gradient-tracking leaf Tensor and everything else
    is the raw array. With ``has_aux`` the function returns ``(loss, aux)``
    and the result is ``((value, aux), grads)``.
    """
    keys = list(wrt) if wrt is not None else trainable_keys(params)
    leaves = {k: Tensor(params[k], requires_grad=True) for k in keys}
    view = dict(params)
    view.update(leaves)
    out = loss_fn(view)
    loss, aux = out if has_aux else (out, None)
    if loss.data.size != 1:
        raise ValueError("loss must be a scalar")
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss {value}")
    if loss.requires_grad:
        loss.backward()
    grads = {
        k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()
    }
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {k}")
    return ((value, aux) if has_aux else value), grads


def grad(loss_fn: Callable, params: Mapping[str, np.ndarray], wrt: Iterable[str] | None = None) -> ParamSet:
    """Exact reverse-mode gradient of a scalar loss with respect to ``params``."""
    return value_and_grad(loss_fn, params, wrt)[1]


class Adam:
    """Adam over a fixed set of parameter names, updating arrays in place."""

    def __init__(self, keys: Iterable[str], lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.keys = list(keys)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParamSet, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k in self.keys:
            g = grads.get(k)
            if g is None:
                continue
            p = params[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def state_keys(self) -> set[str]:
        return set(self.m)


@dataclass
class TargetPair:
    """Online parameters bound to an EMA-tracked target copy.

    ``target`` holds the same names as the tracked subset of ``online``.
    """

    online: ParamSet
    target: ParamSet
    tau: float
    keys: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if not self.keys:
            self.keys = list(self.target)
        for k in self.keys:
            if self.online[k].shape != self.target[k].shape:
                raise ValueError(f"shape mismatch for {k}: {self.online[k].shape} vs {self.target[k].shape}")

    @classmethod
    def track(cls, online: ParamSet, prefixes: Iterable[str], tau: float) -> TargetPair:
        target = select(online, prefixes)
        return cls(online=online, target=target, tau=tau, keys=list(target))


def ema_update(pair: TargetPair) -> TargetPair:
    """``target <- (1 - tau) * target + tau * online`` for every tracked tensor."""
    tau = pair.tau
    for k in pair.keys:
        t, o = pair.target[k], pair.online[k]
        if t.shape != o.shape:
            raise ValueError(f"shape mismatch for {k}: {t.shape} vs {o.shape}")
        pair.target[k] = (1.0 - tau) * t + tau * o
    return pair


def param_distance(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> float:
    """Euclidean distance between two ParamSets over their shared names."""
    return float(np.sqrt(sum(float(np.sum((a[k].astype(np.float64) - b[k]) ** 2)) for k in a if k in b)))


def l2_normalize(v, axis: int = -1, min_norm: float = 1e-8):
    """Row-wise ``v / ||v||_2``; raises on near-zero rows instead of dividing."""
    if isinstance(v, Tensor):
        norm = sqrt(tsum(v * v, axis=axis, keepdims=True))
        if np.any(norm.data < min_norm):
            raise NumericalError("cannot normalize a (near-)zero vector")
        return v / norm
    arr = np.asarray(v, dtype=np.float64) if not isinstance(v, np.ndarray) else v
    norm = np.sqrt(np.sum(arr * arr, axis=axis, keepdims=True))
    if np.any(norm < min_norm):
        raise NumericalError("cannot normalize a (near-)zero vector")
    return arr / norm


# -- checkpoint I/O ----------------------------------------------------------


def save_checkpoint(path: str | Path, params: Mapping[str, np.ndarray], meta: Mapping[str, str] | None = None) -> None:
    """Write a text header (magic, version, shape table) then float32 LE payloads.

    Layout::

        SOFTAUG-CKPT
        version 1
        meta <key> <value>        (optional, repeated)
        tensors <count>
        <name> <d0>,<d1>,...      (one line per tensor, declaration order)
        end
        <payload bytes>
    """
    lines = [CHECKPOINT_MAGIC.decode(), f"version {CHECKPOINT_VERSION}"]
    for k, v in (meta or {}).items():
        if any(c.isspace() for c in k) or "\n" in str(v):
            raise ValueError(f"invalid meta entry {k!r}")
        lines.append(f"meta {k} {v}")
    lines.append(f"tensors {len(params)}")
    for name, arr in params.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"tensor name {name!r} contains whitespace")
        lines.append(f"{name} {','.join(str(d) for d in arr.shape)}")
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for arr in params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ParamSet, dict[str, str]]:
    data = Path(path).read_bytes()
    pos = 0

    def readline() -> str:
        nonlocal pos
        end = data.index(b"\n", pos)
        line = data[pos:end].decode("ascii")
        pos = end + 1
        return line

    if readline().encode() != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version = readline()
    if version != f"version {CHECKPOINT_VERSION}":
        raise ValueError(f"{path}: unsupported {version!r}")
    meta: dict[str, str] = {}
    line = readline()
    while line.startswith("meta "):
        _, k, v = line.split(" ", 2)
        meta[k] = v
        line = readline()
    count = int(line.split()[1])
    table = []
    for _ in range(count):
        name, dims = readline().split(" ")
        shape = tuple(int(d) for d in dims.split(",")) if dims else ()
        table.append((name, shape))
    if readline() != "end":
        raise ValueError(f"{path}: malformed header")
    params: ParamSet = {}
    for name, shape in table:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).astype(np.float32).reshape(shape)
        params[name] = arr
        pos += 4 * n
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return params, meta


__all__ = [
    "Adam",
    "ParamSet",
    "TargetPair",
    "astype",
    "ema_update",
    "grad",
    "is_buffer",
    "l2_normalize",
    "load_checkpoint",
    "param_distance",
    "save_checkpoint",
    "select",
    "trainable_keys",
    "value_and_grad",
]
