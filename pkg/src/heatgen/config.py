"""Run configuration dataclasses and the seeded RNG discipline.

Every command draws all of its randomness from one root seed. Streams are
split by purpose and, for training, by step: the generator for (seed,
stream, step) is derived from that triple alone, so a resumed run draws
exactly what the uninterrupted run would have drawn.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from .neural import ArchConfig

# Stream tags for derived generators. Documented here and nowhere else:
# DATA picks batch indices, NOISE draws training perturbations, INIT seeds
# weight init, SAMPLE drives the reverse chain, DROPOUT feeds the network's
# dropout masks, EVAL covers likelihood-evaluation draws.
STREAM_DATA = 1
STREAM_NOISE = 2
STREAM_INIT = 3
STREAM_SAMPLE = 4
STREAM_DROPOUT = 5
STREAM_EVAL = 6


def derive_rng(seed: int, stream: int, step: int = 0) -> np.random.Generator:
    """Generator for (seed, stream, step), independent across the triple."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream), int(step)]))


def derive_torch_gen(seed: int, stream: int, step: int = 0) -> torch.Generator:
    """torch generator derived from the same triple namespace."""
    ss = np.random.SeedSequence([int(seed), int(stream), int(step)])
    word = int(ss.generate_state(1, np.uint64)[0])
    gen = torch.Generator()
    gen.manual_seed(word & 0x7FFF_FFFF_FFFF_FFFF)
    return gen


@dataclass
class TrainConfig:
    """Everything a training run needs; serialises to the YAML config file."""

    dataset: str = ""
    out_dir: str = "runs/train"
    K: int = 100
    sigma: float = 0.01
    sigma_b_min: float = 0.5
    sigma_b_max: float = 20.0
    delta: float = 0.0125
    batch_size: int = 16
    total_steps: int = 2000
    lr: float = 2e-4
    warmup_steps: int = 5000
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    ema_rate: float = 0.999
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 1000
    arch: ArchConfig = field(default_factory=ArchConfig)

    def validate(self) -> None:
        if not self.dataset:
            raise ConfigError("no dataset path configured")
        if self.K < 2:
            raise ConfigError(f"K must be >= 2, got {self.K}")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")
        if self.delta < 0:
            raise ConfigError(f"delta must be >= 0, got {self.delta}")
        if self.batch_size < 1 or self.total_steps < 1:
            raise ConfigError("batch_size and total_steps must be positive")
        if not (0.0 <= self.ema_rate < 1.0):
            raise ConfigError(f"ema_rate must be in [0, 1), got {self.ema_rate}")

    @property
    def sigma_zero_ablation(self) -> bool:
        return self.sigma == 0.0


@dataclass
class SampleConfig:
    checkpoint: str = ""
    out_dir: str = "runs/sample"
    count: int = 16
    delta: float = -1.0  # negative: use the training delta from the checkpoint
    seed: int = 0
    columns: int = 4
    trace: bool = False
    fixed_noise: bool = False
    use_ema: bool = True


@dataclass
class EvalConfig:
    checkpoint: str = ""
    dataset: str = ""
    out_dir: str = "runs/eval"
    examples: int = 16
    delta_grid: tuple[float, ...] = ()
    mc_repeats: int = 1
    prior_size: int = 256
    seed: int = 0
    use_ema: bool = True


@dataclass
class AnalysisConfig:
    images: str = ""
    checkpoint: str = ""
    out_dir: str = "runs/psd"
    bins: int = 32
    fit_lo: int = 2
    fit_hi: int = 2
    count: int = 4
    seed: int = 0


@dataclass
class InterpolateConfig:
    checkpoint: str = ""
    out_dir: str = "runs/interpolate"
    steps: int = 8
    delta: float = -1.0
    seed_a: int = 1
    seed_b: int = 2
    seed: int = 0
    columns: int = 8
    use_ema: bool = True


@dataclass
class RunConfig:
    """Union of all command configs; one file can drive any subcommand."""

    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    interpolate: InterpolateConfig = field(default_factory=InterpolateConfig)


class ConfigError(ValueError):
    """A config file or flag set that cannot be acted on."""


def _to_plain(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(x) for x in obj]
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    return obj


def _fill(cls, data: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key == "arch":
            kwargs[key] = ArchConfig.from_dict(value)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


_SECTIONS = {
    "train": TrainConfig,
    "sample": SampleConfig,
    "eval": EvalConfig,
    "analysis": AnalysisConfig,
    "interpolate": InterpolateConfig,
}


def config_to_dict(cfg: RunConfig) -> dict:
    return _to_plain(cfg)


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _fill(cls, data[name] or {})
    return RunConfig(**kwargs)


def load_config(path: str | Path) -> RunConfig:
    """Parse a YAML run config; unknown keys are errors, not surprises."""
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if data is None:
        data = {}
    return config_from_dict(data)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=True))
