"""Run configuration: validated, JSON-round-trippable dataclasses.

A RunConfig bundles the model architecture, the training hyperparameters,
and the synthetic-data specification. Parsing is strict: unknown keys are
rejected, and every invariant is checked before a config reaches any other
module.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

from .errors import ValidationError


def _check(condition: bool, message: str) -> None:
    if not condition:
        raise ValidationError(message)


@dataclass
class ModelConfig:
    width: int = 64
    embed_dim: int = 128
    trm_layers: int = 6
    cam_layers: int = 3
    k_minutia: int = 10
    k_fingerprint: int = 10
    dilation: bool = True
    residual: bool = True
    ffm: bool = True
    centering: bool = True
    ffm_expansion: int = 4

    def validate(self) -> None:
        _check(self.width >= 1, "model.width must be >= 1")
        _check(self.embed_dim >= 1, "model.embed_dim must be >= 1")
        _check(self.trm_layers >= 1, "model.trm_layers must be >= 1")
        _check(self.cam_layers >= 1, "model.cam_layers must be >= 1")
        _check(self.k_minutia >= 1, "model.k_minutia must be >= 1")
        _check(self.k_fingerprint >= 1, "model.k_fingerprint must be >= 1")
        _check(self.ffm_expansion >= 1, "model.ffm_expansion must be >= 1")


@dataclass
class PerturbConfig:
    rotation_deg: float = 15.0
    translation: float = 0.05
    jitter_sigma: float = 0.01
    orientation_jitter_deg: float = 5.0
    dropout: float = 0.1
    spurious_min: int = 0
    spurious_max: int = 3

    def validate(self) -> None:
        for name in ("rotation_deg", "translation", "jitter_sigma",
                     "orientation_jitter_deg", "dropout"):
            _check(getattr(self, name) >= 0, f"perturb.{name} must be nonnegative")
        _check(self.rotation_deg <= 180.0, "perturb.rotation_deg must be <= 180")
        _check(self.dropout <= 1.0, "perturb.dropout must be <= 1")
        _check(0 <= self.spurious_min <= self.spurious_max,
               "perturb.spurious range must satisfy 0 <= min <= max")


@dataclass
class DataConfig:
    identities: int = 100
    impressions: int = 4
    min_minutiae: int = 24
    max_minutiae: int = 36
    seed: int = 11
    perturb: PerturbConfig = field(default_factory=PerturbConfig)

    def validate(self) -> None:
        _check(self.identities >= 2, "data.identities must be >= 2")
        _check(self.impressions >= 2, "data.impressions must be >= 2")
        _check(self.min_minutiae >= 8, "data.min_minutiae must be >= 8")
        _check(self.min_minutiae <= self.max_minutiae,
               "data.min_minutiae must not exceed data.max_minutiae")
        self.perturb.validate()


@dataclass
class TrainConfig:
    margin: float = 0.5
    lr: float = 1e-4
    lr_min: float = 1e-6
    epochs: int = 30
    identities_per_batch: int = 16
    impressions_per_batch: int = 4
    weight_decay: float = 0.01
    mining: str = "hardest"
    holdout: int = 1
    seed: int = 7

    @property
    def batch_size(self) -> int:
        return self.identities_per_batch * self.impressions_per_batch

    def validate(self) -> None:
        _check(self.margin > 0, "train.margin must be positive")
        _check(self.lr > 0, "train.lr must be positive")
        _check(0 < self.lr_min <= self.lr, "train.lr_min must be in (0, lr]")
        _check(self.epochs >= 1, "train.epochs must be >= 1")
        _check(self.identities_per_batch >= 2,
               "train.identities_per_batch must be >= 2 (triplets need two labels)")
        _check(self.impressions_per_batch >= 1,
               "train.impressions_per_batch must be >= 1")
        _check(self.batch_size >= 4, "train batch size must be >= 4")
        _check(self.weight_decay >= 0, "train.weight_decay must be nonnegative")
        _check(self.mining in ("hardest", "semi-hard"),
               "train.mining must be 'hardest' or 'semi-hard'")
        _check(self.holdout >= 0, "train.holdout must be nonnegative")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.data.validate()
        _check(self.train.holdout < self.data.impressions,
               "train.holdout must leave at least one impression for training")

    def to_dict(self) -> dict:
        return asdict(self)


_NESTED = {"perturb": PerturbConfig, "model": ModelConfig,
           "train": TrainConfig, "data": DataConfig}


def _build(cls, mapping: dict, path: str):
    if not isinstance(mapping, dict):
        raise ValidationError(f"{path or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(mapping) - set(known))
    if unknown:
        raise ValidationError(
            f"unknown key(s) {unknown} in {path or 'config'}")
    kwargs = {}
    for name, value in mapping.items():
        sub = _NESTED.get(name)
        if sub is not None and name in known:
            kwargs[name] = _build(sub, value, f"{path}.{name}" if path else name)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValidationError(f"bad value in {path or 'config'}: {exc}") from exc


def run_config_from_dict(mapping: dict) -> RunConfig:
    cfg = _build(RunConfig, mapping, "")
    cfg.validate()
    return cfg


def data_config_from_dict(mapping: dict) -> DataConfig:
    cfg = _build(DataConfig, mapping, "data")
    cfg.validate()
    return cfg
