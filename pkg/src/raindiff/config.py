"""Run configuration: one flat JSON object with dotted keys.

Every key has a default, so an empty config file runs the documented
desk-scale profile (T=200, 32x32 training, widths 32/64/128). Unknown
keys and wrong types are hard errors that name the key: a silently
ignored hyperparameter typo costs a training run.
"""

import json
from dataclasses import dataclass, fields

from .data import RainSynthesisConfig
from .schedule import make_linear_schedule


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # schedule
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.07
    # model
    widths: tuple = (32, 64, 128)
    # training
    resolution: int = 32
    patch: int = 128
    batch_size: int = 4
    max_steps: int = 3000
    lambda_cyc: float = 1.0
    checkpoint_every: int = 500
    hflip: bool = True
    # optimizer
    lr: float = 2e-5
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 0.0
    # sampling
    S: int = 10
    sample_patch: int = 128
    stride: int = 64
    # seeds
    seed_global: int = 0
    seed_data: int = 1
    seed_noise: int = 2
    # paths
    corpus_dir: str = "corpus"
    checkpoint_dir: str = "checkpoints"
    output_dir: str = "outputs"
    # ablation flags
    stop_grad_conditions: bool = False
    independent_eps_per_term: bool = False
    # synthetic corpus
    n_clean: int = 200
    n_rainy: int = 200
    n_eval: int = 20
    rain_size: int = 32
    rain_streaks_min: int = 8
    rain_streaks_max: int = 18
    rain_angle_min: float = 70.0
    rain_angle_max: float = 110.0
    rain_length_min: float = 6.0
    rain_length_max: float = 16.0
    rain_thickness: float = 1.2
    rain_intensity_min: float = 0.5
    rain_intensity_max: float = 0.9


# dotted JSON key -> (attribute, expected type)
_KEYMAP = {
    "schedule.T": ("T", int),
    "schedule.beta_start": ("beta_start", float),
    "schedule.beta_end": ("beta_end", float),
    "model.widths": ("widths", list),
    "train.resolution": ("resolution", int),
    "train.patch": ("patch", int),
    "train.batch_size": ("batch_size", int),
    "train.max_steps": ("max_steps", int),
    "train.lambda_cyc": ("lambda_cyc", float),
    "train.checkpoint_every": ("checkpoint_every", int),
    "train.hflip": ("hflip", bool),
    "optim.lr": ("lr", float),
    "optim.beta1": ("beta1", float),
    "optim.beta2": ("beta2", float),
    "optim.eps": ("adam_eps", float),
    "optim.clip_norm": ("clip_norm", float),
    "sample.S": ("S", int),
    "sample.patch": ("sample_patch", int),
    "sample.stride": ("stride", int),
    "seed.global": ("seed_global", int),
    "seed.data": ("seed_data", int),
    "seed.noise": ("seed_noise", int),
    "paths.corpus": ("corpus_dir", str),
    "paths.checkpoints": ("checkpoint_dir", str),
    "paths.outputs": ("output_dir", str),
    "flags.stop_grad_conditions": ("stop_grad_conditions", bool),
    "flags.independent_eps_per_term": ("independent_eps_per_term", bool),
    "data.n_clean": ("n_clean", int),
    "data.n_rainy": ("n_rainy", int),
    "data.n_eval": ("n_eval", int),
    "data.size": ("rain_size", int),
    "data.streaks_min": ("rain_streaks_min", int),
    "data.streaks_max": ("rain_streaks_max", int),
    "data.angle_min": ("rain_angle_min", float),
    "data.angle_max": ("rain_angle_max", float),
    "data.length_min": ("rain_length_min", float),
    "data.length_max": ("rain_length_max", float),
    "data.thickness": ("rain_thickness", float),
    "data.intensity_min": ("rain_intensity_min", float),
    "data.intensity_max": ("rain_intensity_max", float),
}


def _coerce(key, value, want):
    if want is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"config key {key!r}: expected boolean, got {value!r}")
        return value
    if want is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {key!r}: expected integer, got {value!r}")
        return value
    if want is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key!r}: expected number, got {value!r}")
        return float(value)
    if want is str:
        if not isinstance(value, str):
            raise ConfigError(f"config key {key!r}: expected string, got {value!r}")
        return value
    if want is list:
        if not isinstance(value, list) or not all(
            isinstance(x, int) and not isinstance(x, bool) for x in value
        ):
            raise ConfigError(f"config key {key!r}: expected list of integers, got {value!r}")
        return tuple(value)
    raise AssertionError(want)


def validate(cfg: RunConfig) -> RunConfig:
    if cfg.T < 1:
        raise ConfigError("schedule.T must be >= 1")
    if not (0.0 < cfg.beta_start <= cfg.beta_end < 1.0):
        raise ConfigError("schedule betas must satisfy 0 < start <= end < 1")
    if cfg.S < 1 or cfg.T % cfg.S != 0:
        raise ConfigError(f"sample.S must divide schedule.T (S divides T), got S={cfg.S}, T={cfg.T}")
    if not (1 <= cfg.stride <= cfg.sample_patch):
        raise ConfigError(f"sample.stride must lie in 1..sample.patch, got {cfg.stride}")
    if cfg.lambda_cyc < 0:
        raise ConfigError("train.lambda_cyc must be >= 0")
    if cfg.batch_size < 1:
        raise ConfigError("train.batch_size must be >= 1")
    factor = 1 << (len(cfg.widths) - 1)
    if cfg.resolution % factor:
        raise ConfigError(
            f"train.resolution must be divisible by {factor} for {len(cfg.widths)} levels"
        )
    if any(w % 8 for w in cfg.widths):
        raise ConfigError("model.widths must all be divisible by 8 (GroupNorm groups)")
    if cfg.rain_streaks_min > cfg.rain_streaks_max or cfg.rain_streaks_min < 0:
        raise ConfigError("data.streaks_min..streaks_max must be a valid range")
    return cfg


def load_config(path) -> RunConfig:
    """Parse and validate a flat dotted-key JSON config file."""
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object of dotted keys")
    return from_dict(raw)


def from_dict(raw: dict) -> RunConfig:
    cfg = RunConfig()
    for key, value in raw.items():
        if key not in _KEYMAP:
            raise ConfigError(f"unknown config key {key!r}")
        attr, want = _KEYMAP[key]
        setattr(cfg, attr, _coerce(key, value, want))
    return validate(cfg)


def schedule_from_config(cfg: RunConfig):
    return make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)


def rain_config(cfg: RunConfig) -> RainSynthesisConfig:
    return RainSynthesisConfig(
        size=cfg.rain_size,
        streak_count=(cfg.rain_streaks_min, cfg.rain_streaks_max),
        angle_deg=(cfg.rain_angle_min, cfg.rain_angle_max),
        length_px=(cfg.rain_length_min, cfg.rain_length_max),
        thickness=cfg.rain_thickness,
        intensity=(cfg.rain_intensity_min, cfg.rain_intensity_max),
    )


def default_json() -> str:
    """The full key set with defaults, for documentation and `check`."""
    cfg = RunConfig()
    out = {}
    for key, (attr, want) in _KEYMAP.items():
        val = getattr(cfg, attr)
        out[key] = list(val) if want is list else val
    return json.dumps(out, indent=2, sort_keys=True)
