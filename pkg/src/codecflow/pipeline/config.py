"""Run configuration: nested dataclasses with YAML/JSON round-tripping."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from codecflow.codec import CodecConfig
from codecflow.errors import ConfigurationError
from codecflow.flow import FlowConfig
from codecflow.metrics import LsdConfig
from codecflow.voicing import VoicingConfig


@dataclass
class DataConfig:
    kind: str = "speechlike"  # or "tones"
    n_train: int = 24
    n_val: int = 4
    n_test: int = 4
    duration_s: float = 2.0
    crop_s: float = 1.0
    lr_band_hz: float = 4000.0


@dataclass
class StageConfig:
    steps: int = 500
    batch: int = 4
    lr: float = 1e-4
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    eval_every: int = 50
    # stage 2: stop after this many evaluations without improvement (0 = never)
    patience: int = 0
    # stage 3: Euler steps of the frozen converter inside the training graph
    ode_steps: int = 25
    # stage 3: backpropagate through the frozen converter chain (False: HR autoencoding)
    through_flow: bool = True
    waveform_weight: float = 1.0
    stft_weight: float = 1.0


def _stage(**kw) -> typing.Callable[[], StageConfig]:
    return lambda: StageConfig(**kw)


@dataclass
class RunConfig:
    seed: int = 0
    sample_rate: int = 16000
    data: DataConfig = field(default_factory=DataConfig)
    voicing: VoicingConfig = field(default_factory=VoicingConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    lsd: LsdConfig = field(default_factory=LsdConfig)
    stage1: StageConfig = field(default_factory=_stage(steps=500, batch=4, eval_every=50))
    stage2: StageConfig = field(default_factory=_stage(steps=2000, batch=8, eval_every=100, patience=5))
    stage3: StageConfig = field(default_factory=_stage(steps=500, batch=4, eval_every=50))

    def validate(self) -> None:
        if self.codec.sample_rate != self.sample_rate:
            raise ConfigurationError("codec.sample_rate must equal sample_rate")
        if self.voicing.hop != self.codec.hop:
            raise ConfigurationError(f"voicing hop {self.voicing.hop} must equal the codec hop {self.codec.hop}")
        if self.flow.latent_dim != self.codec.latent_dim:
            raise ConfigurationError("flow.latent_dim must equal codec.latent_dim")
        if self.data.kind not in ("speechlike", "tones"):
            raise ConfigurationError(f"unknown data kind {self.data.kind!r}")
        if not 0 < self.data.lr_band_hz < self.sample_rate / 2:
            raise ConfigurationError("data.lr_band_hz must lie below Nyquist")
        for name in ("stage1", "stage2", "stage3"):
            st = getattr(self, name)
            if st.steps < 0 or st.batch < 1 or st.eval_every < 1:
                raise ConfigurationError(f"{name}: steps >= 0, batch >= 1 and eval_every >= 1 required")
        self.codec.validate()
        self.codec.quantizer.validate()
        self.flow.validate()
        self.flow.net.validate()
        self.lsd.validate()

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        cfg = _build(cls, data or {}, "config")
        cfg.validate()
        return cfg


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigurationError(f"{path}: unknown keys {unknown}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        kwargs[f.name] = _coerce(hints[f.name], data[f.name], f"{path}.{f.name}")
    return cls(**kwargs)


def _coerce(hint, value, path: str):
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, path)
    if hint is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{path}: expected a list")
        return tuple(value)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, updated by a YAML (or JSON) file, then by dotted ``overrides``."""
    data: dict = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
    for key, value in (overrides or {}).items():
        node = data
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return RunConfig.from_dict(data)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
