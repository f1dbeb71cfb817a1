"""Flat ``key = value`` config files for every pipeline stage."""
import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .exceptions import ConfigError
from .translation import TrainConfig


@dataclass
class DataConfig:
    n_per_domain: int = 512
    resolution: int = 32
    ratio: float = 0.8
    threshold: float = 0.02


@dataclass
class BackboneConfig:
    resolution: int = 32
    z_dim: int = 512
    w_dim: int = 512
    mapping_layers: int = 4
    channels: tuple = (32, 32, 16, 16)
    disc_channels: tuple = (16, 32, 32)
    n_steps: int = 5000
    batch_size: int = 16
    learning_rate: float = 2e-3
    r1_gamma: float = 10.0
    r1_interval: int = 16
    ema_beta: float = 0.995
    use_noise: bool = False


@dataclass
class DstConfig:
    resolution: int = 32
    n_bins: int = 10
    feature_dim: int = 256
    texture_dim: int = 128
    hidden_dim: int = 256
    widths: tuple = (16, 32, 64)
    norm: str = "batch"
    patch_size: int = 0
    lambda_sty: float = 1.0
    lambda_tex: float = 2.2
    n_steps: int = 2000
    batch_size: int = 32
    learning_rate: float = 2e-4
    beta1: float = 0.0
    beta2: float = 0.99
    kl_direction: str = "pred_gt"

    def estimator_params(self):
        params = dataclasses.asdict(self)
        params["patch_size"] = self.patch_size or None
        return params


STAGE_CONFIGS = {
    "prepare-data": DataConfig,
    "pretrain-gan": BackboneConfig,
    "train-dst": DstConfig,
    "train": TrainConfig,
}


def parse_bool(value):
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _coerce(tp, raw):
    if tp is bool:
        return parse_bool(raw)
    if tp is int:
        return int(raw)
    if tp is float:
        return float(raw)
    if tp is tuple:
        return tuple(int(v) for v in raw.replace(",", " ").split())
    return raw.strip().strip('"').strip("'")


def parse_flat_config(text, cls):
    """Parse ``key = value`` lines into dataclass ``cls``.

    ``#`` starts a comment. Unknown keys, duplicates and bad values raise
    ConfigError with the 1-based line number.
    """
    fields = {f.name: f.type for f in dataclasses.fields(cls)}
    values, seen = {}, {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} (first on line {seen[key]})", lineno)
        seen[key] = lineno
        try:
            values[key] = _coerce(fields[key], raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", lineno) from None
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def format_flat_config(config):
    lines = []
    for f in dataclasses.fields(config):
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            v = " ".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def load_config(path, cls):
    if path is None:
        return cls()
    return parse_flat_config(Path(path).read_text(), cls)
