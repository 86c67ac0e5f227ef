"""Run configuration: dataclasses, JSON round-trip and a stable hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PatchConfig:
    patch_len: int = 6
    stride: int = 3
    history: int = 36

    def __post_init__(self):
        if not 1 <= self.stride <= self.patch_len <= self.history:
            raise ConfigError(f"need 1 <= stride <= patch_len <= history, got {self}")

    @property
    def n_patches(self) -> int:
        return -(-(self.history - self.patch_len) // self.stride) + 1


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 512
    n_layers: int = 3
    n_heads: int = 4
    d_ff: int = 2048
    dropout: float = 0.05
    lstm_layers: int = 2
    lstm_hidden: int = 256
    fusion_heads: int = 4
    text_dim: int = 768
    translation_hidden: int = 512
    translator: str = "mlp"  # "mlp" (3 layers) or "linear"
    horizon: int = 12
    anchor_last: bool = False  # heads predict an offset from the last input sample

    def __post_init__(self):
        if self.d_model % self.n_heads or self.d_model % self.fusion_heads:
            raise ConfigError("d_model must be divisible by n_heads and fusion_heads")
        if self.translator not in ("mlp", "linear"):
            raise ConfigError(f"unknown translator {self.translator!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")


@dataclass(frozen=True)
class AdapterConfig:
    k: int = 3
    heads: int = 4
    aggregation: str = "mean"  # "mean", "learned" or "lstm"
    head_hidden: tuple = (512, 256)
    agg_lstm_hidden: int = 256
    exclude_self_finetune: bool = True
    exclude_self_eval: bool = False

    def __post_init__(self):
        if self.aggregation not in ("mean", "learned", "lstm"):
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        object.__setattr__(self, "head_hidden", tuple(self.head_hidden))


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 42
    lr: float = 1e-3
    epochs_pretrain: int = 100
    epochs_finetune: int = 50
    batch_size: int = 32
    translation_weight: float = 0.1
    huber_delta: float = 1.0
    use_rag: bool = True
    use_context_attention: bool = True
    use_translation_loss: bool = True
    val_fraction: float = 0.15
    test_fraction: float = 0.2
    window_stride: int = 1
    eval_stride: int = 1
    max_gap_steps: int = 6
    patch: PatchConfig = field(default_factory=PatchConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)

    @property
    def use_context(self) -> bool:
        """BGL-only runs (CA and CTL both off) never look at the summaries."""
        return self.use_context_attention or self.use_translation_loss

    @property
    def effective_lambda(self) -> float:
        return self.translation_weight if self.use_translation_loss else 0.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


def toy_config(**overrides) -> TrainConfig:
    """Small model for tests and demos: width 8, one layer, one head."""
    enc = EncoderConfig(d_model=8, n_layers=1, n_heads=1, d_ff=16, dropout=0.0, lstm_layers=1,
                        lstm_hidden=4, fusion_heads=1, translation_hidden=8, anchor_last=True)
    ad = AdapterConfig(heads=1, head_hidden=(16, 16), agg_lstm_hidden=8)
    base = TrainConfig(lr=1e-2, epochs_pretrain=30, epochs_finetune=40, batch_size=32,
                       window_stride=6, encoder=enc, adapter=ad)
    return from_dict({**base.to_dict(), **overrides}) if overrides else base


_SECTIONS = {"patch": PatchConfig, "encoder": EncoderConfig, "adapter": AdapterConfig}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_dict(data: dict) -> TrainConfig:
    data = dict(data)
    for key, cls in _SECTIONS.items():
        if key in data:
            sub = data[key]
            data[key] = sub if isinstance(sub, cls) else _build(cls, sub, key)
    return _build(TrainConfig, data, "config")


def load_config(path) -> TrainConfig:
    """Read a JSON run configuration; ``{"preset": "toy", ...}`` starts from the toy model."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    preset = data.pop("preset", None)
    if preset is None:
        return from_dict(data)
    if preset != "toy":
        raise ConfigError(f"unknown preset {preset!r}")
    base = toy_config().to_dict()
    for key in _SECTIONS:
        if key in data:
            base[key] = {**base[key], **data.pop(key)}
    base.update(data)
    return from_dict(base)


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(canonical_json(cfg.to_dict()).encode()).hexdigest()[:16]


def model_hash(cfg: TrainConfig) -> str:
    """Hash of the fields that shape the encoder (used to pair checkpoints and indexes)."""
    d = cfg.to_dict()
    keep = {k: d[k] for k in ("patch", "encoder", "use_context_attention", "use_translation_loss")}
    return hashlib.sha256(canonical_json(keep).encode()).hexdigest()[:16]
