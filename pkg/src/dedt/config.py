"""Experiment configuration, flat ``key = value`` files and named seed streams.

Keys are dotted paths into :class:`ExperimentConfig`, e.g. ``dm.steps``,
``env.spacing`` or ``overhead.T_s``.  Sequence values are comma separated.
Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import dataclasses
import typing
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .channel_sim import EnvConfig, RisGeometry
from .dt_policy import DtConfig
from .imputer import DmConfig
from .ppo import PpoConfig

STREAMS = ("dataset", "mask", "dm-train", "dt-train", "rollout")


class ConfigError(ValueError):
    pass


@dataclass
class EnvSetConfig:
    """Shared scenario parameters plus one entry per training environment."""

    N1: int = 4
    N2: int = 4
    M: int = 2
    wavelength: float = 0.1
    P: float = 1.0
    noise_var: float = 1e-5
    T: int = 20
    correlation_model: str = "paper"
    # element spacing d1 = d2 as a fraction of the wavelength
    spacing: tuple = (0.25, 0.25, 0.2, 0.3, 0.25)
    mu: tuple = (0.5, 0.4, 0.5, 0.6, 0.6)
    mu0: tuple = (0.5, 0.5, 0.6, 0.5, 0.4)


@dataclass
class HeldoutConfig:
    spacing: float = 0.25
    mu: float = 0.45
    mu0: float = 0.45


@dataclass
class DataConfig:
    slots: int = 5000
    test_slots: int = 200


@dataclass
class DtSettings:
    hidden: int = 256
    blocks: int = 3
    heads: int = 4
    dropout: float = 0.1
    window: int = 4
    tag_dropout: float = 0.2
    rtg_scale: float = 50.0
    iters: int = 3000
    batch: int = 32
    lr: float = 1e-4
    episodes_per_env: int = 80
    prompt_scale: float = 1.0
    fewshot_episodes: int = 10
    finetune_steps: int = 500
    finetune_lr: float = 1e-3
    # trajectory source: "ao" coordinate ascent or "ppo" policies trained per environment
    expert: str = "ao"
    final_only: bool = False

    def model_config(self, N: int, M: int, T: int, n_envs: int) -> DtConfig:
        return DtConfig(N, M, hidden=self.hidden, blocks=self.blocks, heads=self.heads,
                        dropout=self.dropout, window=self.window, max_T=max(T, self.window),
                        n_tags=n_envs + 1, rtg_scale=self.rtg_scale, tag_dropout=self.tag_dropout)


@dataclass
class OverheadConfig:
    T_p: float = 1.0
    T_s: float = 0.0  # 0 means 2N symbols per slot

    def slot_symbols(self, N: int) -> float:
        return self.T_s if self.T_s > 0 else 2.0 * N


@dataclass
class SweepConfig:
    rho: tuple = (0.0, 0.25, 0.5, 0.75, 0.9)
    nmse_rho: tuple = (0.25, 0.5, 0.75)
    snr_db: tuple = (0.0, 10.0, 20.0)
    rate_snr_db: float = 20.0
    # operating mask ratio for the method comparison and the baselines
    eval_rho: float = 0.25
    eval_episodes: int = 20
    nmse_slots: int = 200
    mask_pattern: str = "random"


@dataclass
class ExperimentConfig:
    seed: int = 0
    env: EnvSetConfig = field(default_factory=EnvSetConfig)
    heldout: HeldoutConfig = field(default_factory=HeldoutConfig)
    data: DataConfig = field(default_factory=DataConfig)
    dm: DmConfig = field(default_factory=DmConfig)
    dt: DtSettings = field(default_factory=DtSettings)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    overhead: OverheadConfig = field(default_factory=OverheadConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def __post_init__(self):
        self.validate()

    def validate(self):
        e = self.env
        n = len(e.spacing)
        if n == 0 or len(e.mu) != n or len(e.mu0) != n:
            raise ConfigError("env.spacing, env.mu and env.mu0 must be non-empty and equally long")
        for name in ("rho", "nmse_rho", "snr_db"):
            if len(getattr(self.sweep, name)) == 0:
                raise ConfigError(f"sweep.{name} must be non-empty")
        if any(not 0 <= r <= 1 for r in (*self.sweep.rho, *self.sweep.nmse_rho, self.sweep.eval_rho)):
            raise ConfigError("mask ratios must lie in [0, 1]")
        if self.dt.expert not in ("ao", "ppo"):
            raise ConfigError(f"dt.expert must be 'ao' or 'ppo', got {self.dt.expert!r}")
        if self.overhead.T_s < 0 or self.overhead.T_p < 0:
            raise ConfigError("overhead.T_p and overhead.T_s must be >= 0")

    def _env(self, spacing, mu, mu0, tag) -> EnvConfig:
        e = self.env
        d = spacing * e.wavelength
        geometry = RisGeometry(e.N1, e.N2, d, d, e.wavelength)
        return EnvConfig(geometry, e.M, (float(mu),) * e.M, float(mu0), e.P, e.noise_var, e.T,
                         seed=self.seed, tag=tag, correlation_model=e.correlation_model)

    def training_envs(self) -> list:
        e = self.env
        return [self._env(s, m, m0, f"train{i}") for i, (s, m, m0) in enumerate(zip(e.spacing, e.mu, e.mu0))]

    def heldout_env(self) -> EnvConfig:
        h = self.heldout
        return self._env(h.spacing, h.mu, h.mu0, "heldout")

    def dt_model_config(self) -> DtConfig:
        e = self.env
        return self.dt.model_config(e.N1 * e.N2, e.M, e.T, len(e.spacing))


def _convert(text: str, tp, key: str):
    text = text.strip()
    try:
        if tp is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
        if tp is tuple:
            return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    raise ConfigError(f"unsupported type for {key}")


def _fields(obj):
    hints = typing.get_type_hints(type(obj))
    return {f.name: hints[f.name] for f in dataclasses.fields(obj)}


def set_value(cfg: ExperimentConfig, key: str, text: str):
    parts = key.strip().split(".")
    target = cfg
    for part in parts[:-1]:
        if not dataclasses.is_dataclass(target) or part not in _fields(target):
            raise ConfigError(f"unknown config key: {key}")
        target = getattr(target, part)
    types = _fields(target) if dataclasses.is_dataclass(target) else {}
    leaf = parts[-1]
    if leaf not in types or dataclasses.is_dataclass(getattr(target, leaf)):
        raise ConfigError(f"unknown config key: {key}")
    setattr(target, leaf, _convert(text, types[leaf], key))


def parse_pairs(text: str) -> list:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def apply_pairs(cfg: ExperimentConfig, pairs) -> ExperimentConfig:
    for key, value in pairs:
        set_value(cfg, key, value)
    # nested constructors re-validate
    try:
        cfg.ppo.__post_init__()
        cfg.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return cfg


def parse_override(item: str) -> tuple:
    if "=" not in item:
        raise ConfigError(f"override must be key=value, got {item!r}")
    key, value = item.split("=", 1)
    return key.strip(), value.strip()


def load_config(path=None, overrides=(), seed: int | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    pairs = []
    if path is not None:
        try:
            pairs = parse_pairs(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
    pairs += [parse_override(o) for o in overrides]
    if seed is not None:
        pairs.append(("seed", str(seed)))
    return apply_pairs(cfg, pairs)


def _flatten(obj, prefix=""):
    for name in _fields(obj):
        value = getattr(obj, name)
        if dataclasses.is_dataclass(value):
            yield from _flatten(value, f"{prefix}{name}.")
        else:
            yield f"{prefix}{name}", value


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {_format(v)}\n" for k, v in _flatten(cfg))


def config_dict(cfg: ExperimentConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in _flatten(cfg)}


def stream_seed(root: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(root), zlib.crc32(name.encode())])


def seed_stream(root: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for a named sub-stream of the root seed."""
    return np.random.default_rng(np.random.SeedSequence(
        [int(root), zlib.crc32(name.encode()), *map(int, extra)]))


def torch_seed(root: int, name: str) -> int:
    return int(stream_seed(root, name).generate_state(1)[0])


def seed_torch(root: int, name: str):
    torch.manual_seed(torch_seed(root, name))
