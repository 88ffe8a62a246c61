"""Run configuration: one TOML file per run, validated before any compute.

Unknown keys, wrong types and out-of-range values raise
:class:`~featinv.errors.ConfigError` carrying the dotted key path. Weight
defaults depend on the attack variant: lambda_txt = 10 for white-box text
runs, lambda_c = 5 for multi-frame runs, lambda_txt = 3 for black-box text
training; lambda_s is 1 everywhere.
"""

import hashlib
import json
from pathlib import Path
from typing import List, Literal, Optional

import tomli
import tomli_w
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .blackbox import TrainConfig
from .defense import DefenseConfig
from .errors import ConfigError
from .losses import LossWeights
from .whitebox import InversionConfig

VARIANTS = ("whitebox", "whitebox-text", "multiframe")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True)


class ModelSection(_Section):
    name: str = "toy_cnn"
    split_index: int = Field(2, ge=1)
    weights_path: Optional[str] = None


class PriorSection(_Section):
    name: Literal["identity", "toy_decoder", "ldm_adapter"] = "toy_decoder"
    weights_path: Optional[str] = None
    sampling_steps: int = Field(20, ge=1)
    scheduler: str = "linear"
    guidance_scale: float = 1.0


class AttackSection(_Section):
    variant: Literal["whitebox", "whitebox-text", "multiframe"] = "whitebox"
    iterations: int = Field(1500, ge=1)
    learning_rate: float = Field(0.1, gt=0)
    betas: List[float] = Field([0.9, 0.999], min_length=2, max_length=2)
    lr_schedule: List[List[float]] = [[1 / 3, 0.5], [2 / 3, 0.5]]
    init_std: float = Field(0.1, gt=0)
    lambda_s: float = Field(1.0, ge=0)
    lambda_txt: Optional[float] = Field(None, ge=0)
    lambda_c: Optional[float] = Field(None, ge=0)
    alpha: float = Field(1.0, ge=1, le=2)
    negentropy_mode: Literal["literal", "squared_difference"] = "literal"
    text: str = ""
    frames: int = Field(4, ge=1)

    @model_validator(mode="after")
    def _variant_defaults(self):
        if self.lambda_txt is None:
            self.lambda_txt = 10.0 if self.variant == "whitebox-text" else 0.0
        if self.lambda_c is None:
            self.lambda_c = 5.0 if self.variant == "multiframe" else 0.0
        return self


class DataSection(_Section):
    images: Optional[str] = None
    frames: Optional[str] = None
    captions: Optional[str] = None
    synthetic_count: int = Field(10, ge=1)
    synthetic_seed: int = 1234
    frame_shift: float = 2.0


class BlackboxSection(_Section):
    variant: Literal["plain", "text", "multiframe"] = "plain"
    train_size: int = Field(4096, ge=1)
    test_size: int = Field(1024, ge=1)
    epochs: int = Field(96, ge=1)
    batch_size: int = Field(128, ge=1)
    learning_rate: float = Field(0.1, gt=0)
    betas: List[float] = Field([0.9, 0.999], min_length=2, max_length=2)
    lambda_s: float = Field(1.0, ge=0)
    lambda_txt: Optional[float] = Field(None, ge=0)
    alpha: float = Field(1.0, ge=1, le=2)
    val_fraction: float = Field(0.1, ge=0, lt=1)
    width: int = Field(16, ge=1)
    unet_depth: int = Field(1, ge=0)
    param_budget: Optional[int] = Field(None, ge=1)
    frames: int = Field(4, ge=1)
    fuse: bool = True
    text: str = ""

    @model_validator(mode="after")
    def _variant_defaults(self):
        if self.lambda_txt is None:
            self.lambda_txt = 3.0 if self.variant == "text" else 0.0
        return self


class DefenseSection(_Section):
    sigmas: List[float] = [0.0, 0.1, 0.5, 1.0]
    noise_kind: Literal["gaussian", "laplace"] = "gaussian"
    seeds: List[int] = [0, 1, 2]
    eval_count: int = Field(512, ge=1)
    attack_count: int = Field(10, ge=1)


class MetricsSection(_Section):
    classifier: str = "toy_cnn"


class RunConfig(_Section):
    seed: int = 0
    output_dir: str = "out"
    run_id: Optional[str] = None
    model: ModelSection = ModelSection()
    prior: PriorSection = PriorSection()
    attack: AttackSection = AttackSection()
    data: DataSection = DataSection()
    blackbox: BlackboxSection = BlackboxSection()
    defense: DefenseSection = DefenseSection()
    metrics: MetricsSection = MetricsSection()

    # ---- conversions to engine configs

    def inversion_config(self):
        a = self.attack
        weights = LossWeights(a.lambda_s, a.lambda_txt, a.lambda_c, a.alpha)
        return InversionConfig(
            iterations=a.iterations,
            learning_rate=a.learning_rate,
            betas=tuple(a.betas),
            lr_schedule=tuple(tuple(m) for m in a.lr_schedule),
            init_std=a.init_std,
            seed=self.seed,
            weights=weights,
            sampling_steps=self.prior.sampling_steps,
            negentropy_mode=a.negentropy_mode,
        )

    def train_config(self):
        b = self.blackbox
        return TrainConfig(
            epochs=b.epochs,
            batch_size=b.batch_size,
            learning_rate=b.learning_rate,
            betas=tuple(b.betas),
            weights=LossWeights(b.lambda_s, b.lambda_txt, 0.0, b.alpha),
            seed=self.seed,
            val_fraction=b.val_fraction,
        )

    def defense_configs(self):
        return [DefenseConfig(s, self.defense.noise_kind, self.defense.seeds[0]) for s in self.defense.sigmas]

    def to_dict(self):
        return self.model_dump(mode="json", exclude_none=True)

    def to_toml(self):
        return tomli_w.dumps(self.to_dict())

    def digest(self):
        """Hash of the resolved config, ignoring where outputs go."""
        d = self.to_dict()
        d.pop("output_dir", None)
        d.pop("run_id", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _key_path(loc):
    return ".".join(str(p) for p in loc if not str(p).startswith("function-")) or "<root>"


def from_dict(data):
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        raise ConfigError(err["msg"], _key_path(err["loc"])) from None
    # engine dataclasses run their own range checks
    cfg.inversion_config()
    cfg.train_config()
    cfg.defense_configs()
    return cfg


def apply_overrides(data, overrides):
    """Apply ``key.path=value`` strings (value parsed as TOML) to a raw config dict."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value", item)
        key, raw = item.split("=", 1)
        key = key.strip()
        try:
            value = tomli.loads(f"v = {raw.strip()}")["v"]
        except tomli.TOMLDecodeError:
            value = raw.strip()
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError("cannot set a key below a scalar", key)
        node[parts[-1]] = value
    return data


def parse_config(path=None, overrides=()):
    """Load, override and validate a run config; ``path=None`` means all defaults."""
    data = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}", "<file>")
        try:
            data = tomli.loads(path.read_text())
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"malformed TOML: {exc}", "<file>") from None
    return from_dict(apply_overrides(data, overrides))


def parse_config_text(text, overrides=()):
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"malformed TOML: {exc}", "<file>") from None
    return from_dict(apply_overrides(data, overrides))
