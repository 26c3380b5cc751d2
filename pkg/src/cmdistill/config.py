"""Run configuration: one JSON document, every field defaulted, unknown keys rejected.

Reference values for a full-scale training run are kept next to
the desk defaults in ``FULL_SCALE_REFERENCE``.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

# Full-scale values; the desk defaults below are scaled down.
FULL_SCALE_REFERENCE = {
    "total_steps": 4300,
    "batch_size": 512,
    "base_lr": 5e-5,
    "weight_decay": 0.1,
    "warmup_fraction": 0.01,
}

ARMS = ("full", "distill_only", "align_only")
INIT_MODES = ("decoder", "scratch")


@dataclass
class AudioConfig:
    sample_rate: int = 16000
    n_fft: int = 400
    hop: int = 160
    n_mels: int = 16
    tone_ms: float = 60.0
    noise: float = 0.01
    pitch_low: float = 0.9
    pitch_high: float = 1.1
    amplitude: float = 0.4
    pad_side: str = "right"

    @property
    def pitch_range(self) -> tuple[float, float]:
        return (self.pitch_low, self.pitch_high)


@dataclass
class ModelConfig:
    vocab: int = 64
    lm_width: int = 64
    lm_layers: int = 2
    lm_heads: int = 4
    lm_max_len: int = 32
    audio_width: int = 32
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    decoder_max_len: int = 16
    n_queries: int = 16
    min_transcript: int = 3
    max_transcript: int = 12


@dataclass
class DataConfig:
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    lm_train: int = 8000
    lm_held_out: int = 400


@dataclass
class LMPretrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 3e-3
    weight_decay: float = 0.01
    warmup_fraction: float = 0.02
    min_improvement: float = 0.2


@dataclass
class DonorConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 2e-3
    weight_decay: float = 0.01
    warmup_fraction: float = 0.02
    eval_every: int = 100
    target_accuracy: float = 0.95
    min_accuracy: float = 0.60


@dataclass
class TrainConfig:
    total_steps: int = 600
    batch_size: int = 16
    base_lr: float = 1e-3
    weight_decay: float = 0.1
    warmup_fraction: float = 0.01
    seed: int = 0
    arm: str = "full"
    init_mode: str = "decoder"
    freeze_encoder: bool = False
    lambda_con: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    squared_alignment: bool = False
    truncate_long: bool = False

    def validate(self) -> None:
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ConfigError(f"warmup_fraction must lie in (0, 1), got {self.warmup_fraction}")
        if self.arm not in ARMS:
            raise ConfigError(f"arm must be one of {ARMS}, got {self.arm!r}")
        if self.init_mode not in INIT_MODES:
            raise ConfigError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class ToyRunConfig:
    dim: int = 16
    vocab: int = 32000
    steps: int = 100
    runs: int = 100
    lr: float = 0.1
    seed: int = 0
    dims: list[int] = field(default_factory=lambda: [8, 16, 32, 64, 128, 256, 512, 1024])
    l2_form: str = "squared"
    lr_sweep: list[float] = field(default_factory=list)

    def validate(self) -> None:
        if self.dim < 1 or self.vocab < 2:
            raise ConfigError(f"toy run needs dim >= 1 and vocab >= 2, got {self.dim}, {self.vocab}")
        if self.l2_form not in ("squared", "norm"):
            raise ConfigError(f"l2_form must be 'squared' or 'norm', got {self.l2_form!r}")


@dataclass
class EvalConfig:
    bootstrap_resamples: int = 10000
    bootstrap_seed: int = 0
    alpha: float = 0.05


@dataclass
class RunConfig:
    seed: int = 0
    precision: str = "float32"
    audio: AudioConfig = field(default_factory=AudioConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    lm_pretrain: LMPretrainConfig = field(default_factory=LMPretrainConfig)
    donor: DonorConfig = field(default_factory=DonorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    toy: ToyRunConfig = field(default_factory=ToyRunConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        m = self.model
        if m.n_queries <= m.max_transcript:
            raise ConfigError(f"n_queries ({m.n_queries}) must exceed max_transcript ({m.max_transcript})")
        if m.lm_width % m.lm_heads or m.audio_width % m.heads:
            raise ConfigError("model widths must be divisible by head counts")
        if m.decoder_max_len < m.max_transcript + 1:
            raise ConfigError("decoder_max_len must cover max_transcript + 1")
        if self.audio.pad_side not in ("left", "right"):
            raise ConfigError(f"audio.pad_side must be 'left' or 'right', got {self.audio.pad_side!r}")
        self.train.validate()
        self.toy.validate()
        return self


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        where = f"{path}.{key}" if path else key
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, where)
        else:
            kwargs[key] = _coerce(hint, value, where)
    return cls(**kwargs)


def _coerce(hint, value, where):
    origin = typing.get_origin(hint)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        (inner,) = typing.get_args(hint)
        return [_coerce(inner, v, f"{where}[{i}]") for i, v in enumerate(value)]
    return value


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "").validate()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return config_from_dict(data)


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)
