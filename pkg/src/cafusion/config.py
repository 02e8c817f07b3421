"""Model and training configuration records.

Defaults follow the published NTD-scale setup (256-d latents, 8 heads, 30
concept slots, top-5 pooling, Adam at 1e-4, batch 128, 30 epochs).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

VARIANTS = ("ours", "concat1", "concat2", "avg_sum", "local_only", "global_only")
ATTENTION_SCALES = ("sqrt_n", "sqrt_dk")
FUSION_RESIDUALS = ("global", "local")


class ConfigError(ValueError):
    """Raised for invalid or unknown configuration values."""


def from_dict(cls, data: dict[str, Any] | None):
    """Build dataclass ``cls`` from ``data``, rejecting unknown keys."""
    data = dict(data or {})
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        nested = _NESTED.get((cls.__name__, key))
        if nested is not None and isinstance(value, dict):
            value = from_dict(nested, value)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    obj = cls(**kwargs)
    validate = getattr(obj, "validate", None)
    if validate is not None:
        validate()
    return obj


def to_dict(obj) -> dict[str, Any]:
    out = dataclasses.asdict(obj)
    return _listify(out)


def _listify(value):
    if isinstance(value, dict):
        return {k: _listify(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_listify(v) for v in value]
    return value


@dataclass(frozen=True)
class ModelConfig:
    d_in: int = 256  # 0 selects the raw-image / raw-crop encoders
    image_size: int = 128  # raw global path only
    d_model: int = 256
    d_global: int = 768
    patch_size: int = 16
    crop_size: int = 32
    crop_channels: int = 32
    heads: int = 8
    num_classes: int = 5
    n_concepts: int = 30
    k: int = 5
    variant: str = "ours"
    attention_scale: str = "sqrt_n"
    # what the attention branch is added to: the broadcast global token as in the
    # original formulation, or the concept tokens themselves
    fusion_residual: str = "global"
    fusion_dropout: float = 0.1
    classifier_dropout: float = 0.7
    mask_padded_topk: bool = False
    init_std: float = 0.02

    @property
    def raw(self) -> bool:
        return self.d_in == 0

    @property
    def slots(self) -> int:
        """Number of token slots reaching the classifier for this variant."""
        if self.variant == "concat1":
            return self.n_concepts + 1
        if self.variant in ("avg_sum", "global_only"):
            return 1
        return self.n_concepts

    @property
    def effective_k(self) -> int:
        return min(self.k, self.slots)

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown fusion variant {self.variant!r}; expected one of {VARIANTS}")
        if self.attention_scale not in ATTENTION_SCALES:
            raise ConfigError(f"attention_scale must be one of {ATTENTION_SCALES}")
        if self.fusion_residual not in FUSION_RESIDUALS:
            raise ConfigError(f"fusion_residual must be one of {FUSION_RESIDUALS}")
        if self.d_in < 0:
            raise ConfigError("d_in must be >= 0")
        for name in ("d_model", "heads", "num_classes", "n_concepts", "k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.k > self.n_concepts:
            raise ConfigError(f"k={self.k} exceeds n_concepts={self.n_concepts}")
        for name in ("fusion_dropout", "classifier_dropout"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.raw:
            if self.image_size % self.patch_size:
                raise ConfigError("image_size must be a multiple of patch_size")
            if self.crop_size % 8:
                raise ConfigError("crop_size must be a multiple of 8")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size_train: int = 128
    batch_size_eval: int = 1
    epochs: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    split_ratio: float = 0.5
    pad_sigma: float = 0.01
    # per-dimension standardisation of vector features, fitted on the training split
    standardize: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size_train < 1 or self.batch_size_eval < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError("split_ratio must lie in (0, 1)")
        if self.pad_sigma < 0:
            raise ConfigError("pad_sigma must be >= 0")
        self.model.validate()

    def replace(self, **changes) -> "TrainConfig":
        model_changes = {k: changes.pop(k) for k in list(changes) if k in _MODEL_FIELDS}
        model = dataclasses.replace(self.model, **model_changes) if model_changes else self.model
        new = dataclasses.replace(self, model=model, **changes)
        new.validate()
        return new


_MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)}
_NESTED = {("TrainConfig", "model"): ModelConfig}
