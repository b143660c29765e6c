"""Run configuration and the line-oriented ``key = value`` config format."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from softaug.envsim import DISTRIBUTIONS, ConfigurationError, EnvConfig
from softaug.nets.layers import NetworkShapes
from softaug.sac import SACConfig
from softaug.soda import SODAConfig

METHODS = ("sac", "sac_dr", "sac_conv", "sac_overlay", "soda_conv", "soda_overlay", "augment_both_conv")


@dataclass(frozen=True)
class MethodWiring:
    rl_augment: str | None = None   # strong kind applied to RL batches
    soda_kind: str | None = None    # strong kind for the SODA branch
    domain_randomization: bool = False


WIRING = {
    "sac": MethodWiring(),
    "sac_dr": MethodWiring(domain_randomization=True),
    "sac_conv": MethodWiring(rl_augment="conv"),
    "sac_overlay": MethodWiring(rl_augment="overlay"),
    "soda_conv": MethodWiring(soda_kind="conv"),
    "soda_overlay": MethodWiring(soda_kind="overlay"),
    "augment_both_conv": MethodWiring(rl_augment="conv", soda_kind="conv"),
}


@dataclass(frozen=True)
class NetConfig:
    encoder_depth: int = 4
    filters: int = 32
    strides: tuple[int, ...] = (2, 2, 2, 1)
    kernel_size: int = 3
    feature_dim: int = 50
    hidden_dim: int = 256
    projection_dim: int = 100
    projection_hidden: int = 256
    conv_init: str = "uniform"

    def shapes(self, env: EnvConfig, action_dim: int = 2) -> NetworkShapes:
        return NetworkShapes(
            obs_channels=3 * env.frame_stack,
            obs_size=env.crop_size,
            action_dim=action_dim,
            **dataclasses.asdict(self),
        )


@dataclass(frozen=True)
class RunConfig:
    method: str = "soda_overlay"
    env: EnvConfig = field(default_factory=EnvConfig)
    sac: SACConfig = field(default_factory=SACConfig)
    soda: SODAConfig | None = None
    net: NetConfig = field(default_factory=NetConfig)
    total_env_steps: int = 20_000
    eval_every: int = 2_000
    eval_episodes: int = 10
    eval_variants: tuple[str, ...] = ("training",)
    final_variants: tuple[str, ...] = DISTRIBUTIONS
    pool_size: int = 100
    pool_dir: str | None = None
    overlay_alpha: float = 0.5
    seed: int = 0
    out_dir: str = "runs/default"

    @property
    def wiring(self) -> MethodWiring:
        return WIRING[self.method]

    def validate(self) -> RunConfig:
        """Check cross-field consistency; returns a config with defaults filled in."""
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; expected one of {METHODS}")
        env = self.env.resolved()
        self.sac.validate()
        wiring = WIRING[self.method]
        soda = self.soda
        if wiring.soda_kind is None:
            if soda is not None:
                raise ConfigurationError(f"method {self.method!r} takes no soda.* settings")
        else:
            soda = soda or SODAConfig(kind=wiring.soda_kind)
            if soda.kind != wiring.soda_kind:
                raise ConfigurationError(
                    f"soda.kind = {soda.kind} contradicts method {self.method!r} ({wiring.soda_kind})"
                )
            soda.validate()
        for name in ("total_env_steps",):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        for name in ("eval_every", "eval_episodes", "pool_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be at least 1")
        for v in (*self.eval_variants, *self.final_variants):
            if v not in DISTRIBUTIONS:
                raise ConfigurationError(f"unknown variant {v!r}; expected one of {DISTRIBUTIONS}")
        if not 0.0 <= self.overlay_alpha < 1.0:
            raise ConfigurationError("overlay_alpha must lie in [0, 1)")
        cfg = dataclasses.replace(self, env=env, soda=soda)
        try:
            cfg.shapes().validate()
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc
        return cfg

    def shapes(self) -> NetworkShapes:
        return self.net.shapes(self.env.resolved())


# -- text format -------------------------------------------------------------

SECTIONS = {"env": EnvConfig, "sac": SACConfig, "soda": SODAConfig, "net": NetConfig}


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _strip_optional(tp):
    args = typing.get_args(tp)
    if type(None) in args:
        rest = [a for a in args if a is not type(None)]
        return rest[0], True
    return tp, False


def parse_value(key: str, text: str, tp):
    """Convert ``text`` to the annotated type ``tp`` or raise a ConfigurationError."""
    base, optional = _strip_optional(tp)
    text = text.strip()
    if optional and text.lower() in ("none", "null", ""):
        return None
    try:
        if base is bool:
            low = text.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(text)
        if base is int:
            return int(text)
        if base is float:
            return float(text)
        if base is str:
            return text
        if typing.get_origin(base) is tuple:
            (item,) = {a for a in typing.get_args(base) if a is not Ellipsis}
            parts = [p.strip() for p in text.split(",") if p.strip()]
            return tuple(item(p) for p in parts)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {text!r} as {_type_name(tp)}") from None
    raise ConfigurationError(f"{key}: unsupported field type {tp}")


def _type_name(tp) -> str:
    return getattr(tp, "__name__", str(tp))


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_keys() -> dict[str, typing.Any]:
    """Every accepted config key mapped to its annotated type."""
    keys = {}
    for name, tp in _hints(RunConfig).items():
        if name in SECTIONS:
            for sub, stp in _hints(SECTIONS[name]).items():
                keys[f"{name}.{sub}"] = stp
        else:
            keys[name] = tp
    return keys


def parse_lines(lines, source: str = "<config>") -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        entries[key] = value
    return entries


def build_config(entries: dict[str, str]) -> RunConfig:
    """RunConfig from raw ``key -> text`` entries over the defaults."""
    known = config_keys()
    unknown = sorted(k for k in entries if k not in known)
    if unknown:
        raise ConfigurationError(f"unknown config key(s): {', '.join(unknown)}")
    top: dict = {}
    sections: dict[str, dict] = {name: {} for name in SECTIONS}
    for key, text in entries.items():
        value = parse_value(key, text, known[key])
        if "." in key:
            sec, sub = key.split(".", 1)
            sections[sec][sub] = value
        else:
            top[key] = value
    method = top.get("method", RunConfig.method)
    for sec, cls in SECTIONS.items():
        vals = sections[sec]
        if sec == "soda":
            wiring = WIRING.get(method)
            if wiring is None or wiring.soda_kind is None:
                if vals:
                    raise ConfigurationError(f"method {method!r} takes no soda.* settings")
                top["soda"] = None
                continue
            vals.setdefault("kind", wiring.soda_kind)
        top[sec] = cls(**vals)
    return RunConfig(**top)


def load_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Parse a config file (None or empty -> defaults) plus ``key -> text`` overrides."""
    entries: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {p}: {exc.strerror}") from exc
        entries.update(parse_lines(text.splitlines(), str(p)))
    entries.update(overrides or {})
    return build_config(entries)


def dump_config(cfg: RunConfig) -> str:
    """Inverse of ``load_config``: every key, one per line, in a fixed order."""
    lines = []
    for name in _hints(RunConfig):
        value = getattr(cfg, name)
        if name in SECTIONS:
            if value is None:
                continue
            for f in dataclasses.fields(value):
                lines.append(f"{name}.{f.name} = {format_value(getattr(value, f.name))}")
        else:
            lines.append(f"{name} = {format_value(value)}")
    return "\n".join(lines) + "\n"
