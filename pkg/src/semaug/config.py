"""Strict experiment configuration.

A config is a JSON object with the sections below. Every key is validated for
type and range and unknown keys are rejected, so a typo never silently falls
back to a default.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path


class ConfigError(ValueError):
    """Raised for malformed configs; the message names the offending key."""


def _f(default, lo=None, hi=None, help=""):
    return field(default=default, metadata={"range": (lo, hi), "help": help})


@dataclass
class ModelConfig:
    S: int = _f(3, 1, 4, "encoder stages; also the number of scales used for prompt selection")
    D: int = _f(32, 4, 256, "shared channel / embedding dimension")
    Q: int = _f(16, 1, 64, "detection queries")
    head_hidden: int = _f(64, 4, 512, "hidden width of the head perceptrons")
    max_text_len: int = _f(40, 2, 128, "text encoder maximum sequence length")
    head_layers: int = _f(2, 1, 8, "stacked cross-attention layers in the detection head")
    attn_radius: float = _f(0.1, 0.01, 2.0, "width of the query locality prior")
    N: int = _f(10, 1, 100, "prompt bank size (key, prompt) pairs")
    M: int = _f(12, 1, 64, "prompt length")
    lora_rank: int = _f(4, 1, 64, "LoRA rank r")
    lora_alpha: float = _f(8.0, 0.0, 1000.0, "LoRA scale alpha")
    fine_token_noise: float = _f(3.0, 0.0, 100.0,
                                 "relative noise of unseen fine-category tokens around their parent")


@dataclass
class LossConfig:
    lambda_m: float = _f(0.7, 0.0, 100.0, "weight of the key-matching loss")
    lambda_p: float = _f(0.3, 0.0, 100.0, "weight of the prompt-orthogonality loss")
    w_cls: float = _f(1.0, 0.0, 100.0, "focal classification weight")
    w_box: float = _f(5.0, 0.0, 100.0, "L1 box weight")
    w_giou: float = _f(2.0, 0.0, 100.0, "GIoU weight")
    focal_alpha: float = _f(0.25, 1e-6, 1.0, "focal alpha")
    focal_gamma: float = _f(2.0, 0.0, 10.0, "focal gamma")


@dataclass
class RouterConfig:
    tau: float = _f(0.039, 1e-12, 1e6, "routing threshold (overridden when calibrate is true)")
    epsilon: float = _f(1e-5, 1e-12, 1.0, "std guard of the content embedding")
    feature_dim: int = _f(32, 4, 256, "pooled router feature dimension")
    extractor_channels: int = _f(16, 1, 256, "hidden channels of the frozen extractor")
    epochs: int = _f(24, 0, 10000, "autoencoder epochs")
    lr: float = _f(1e-3, 0.0, 10.0, "autoencoder SGD learning rate")
    batch_size: int = _f(1, 1, 4096, "autoencoder SGD batch size")
    calibrate: bool = _f(True, help="select tau on the calibration splits")


@dataclass
class TrainConfig:
    pretrain_epochs: int = _f(150, 0, 10000, "general-domain pretraining epochs")
    pretrain_lr: float = _f(3e-3, 0.0, 10.0, "pretraining AdamW learning rate")
    peft_epochs: int = _f(200, 0, 10000, "adaptation epochs")
    peft_lr: float = _f(1e-2, 0.0, 10.0, "adaptation AdamW learning rate")
    batch_size: int = _f(16, 1, 4096, "minibatch size for pretraining and adaptation")
    weight_decay: float = _f(1e-4, 0.0, 1.0, "AdamW decoupled weight decay")
    augment: bool = _f(False, help="random square symmetries of pretraining images")
    peft_augment: bool = _f(True, help="random square symmetries of adaptation images")
    context_augment: float = _f(0.5, 0.0, 1.0,
                                "probability of a random text-context prefix during pretraining")
    shift: int = _f(0, 0, 32, "maximum random translation (px) of pretraining images")
    peft_shift: int = _f(0, 0, 32, "maximum random translation (px) of adaptation images")
    negative_tokens: int = _f(4, 0, 64, "random negative class tokens per pretraining batch")


@dataclass
class DomainConfig:
    bg_hue: float = _f(0.58, 0.0, 1.0, "background hue centre")
    bg_hue_jitter: float = _f(0.03, 0.0, 0.5, "background hue half-range")
    bg_saturation: float = _f(0.35, 0.0, 1.0, "background saturation")
    bg_value: float = _f(0.5, 0.0, 1.0, "background value")
    obj_saturation: float = _f(0.75, 0.0, 1.0, "object saturation")
    obj_value: float = _f(0.9, 0.0, 1.0, "object value")
    noise: float = _f(0.02, 0.0, 1.0, "additive pixel noise stddev")
    gain_min: float = _f(0.6, 1e-3, 1.0, "lower illumination gain")
    gain_max: float = _f(1.0, 1e-3, 1.0, "upper illumination gain")
    objects_min: int = _f(1, 1, 10, "minimum objects per image")
    objects_max: int = _f(3, 1, 10, "maximum objects per image")
    size_min: int = _f(18, 4, 60, "minimum object size (px)")
    size_max: int = _f(30, 4, 60, "maximum object size (px)")
    palette: list = _f(None, help="object hues")


def _vertical_defaults() -> DomainConfig:
    return DomainConfig(bg_hue=0.40, bg_saturation=0.7, bg_value=0.45, noise=0.06,
                        palette=[0.55, 0.65, 0.75])


def _general_defaults() -> DomainConfig:
    return DomainConfig(palette=[0.0, 0.08, 0.15])


@dataclass
class DataConfig:
    n_train: int = _f(200, 1, 100000, "training images per domain")
    n_eval: int = _f(100, 1, 100000, "evaluation images per domain")
    n_calib: int = _f(50, 1, 100000, "tau-calibration images per domain")
    image_size: int = _f(64, 16, 512, "square image side (px)")
    general: DomainConfig = field(default_factory=_general_defaults)
    vertical: DomainConfig = field(default_factory=_vertical_defaults)


@dataclass
class PathsConfig:
    out_dir: str = _f("runs/default", help="output directory (overridden by --out)")
    data_dir: str = _f("", help="dataset root for gen-data / training (default: <out>/data)")


@dataclass
class Config:
    seed: int = _f(0, 0, 2**64 - 1, "master seed")
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    router: RouterConfig = field(default_factory=RouterConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        cfg = _build(cls, d, "")
        _cross_check(cfg)
        return cfg

    @classmethod
    def from_file(cls, path: str | Path) -> "Config":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON in {path}: {exc}") from None
        return cls.from_dict(raw)

    def with_seed(self, seed: int | None) -> "Config":
        if seed is None:
            return self
        d = self.to_dict()
        d["seed"] = seed
        return Config.from_dict(d)


def _build(cls, d, prefix: str):
    if not isinstance(d, dict):
        raise ConfigError(f"'{prefix or '<root>'}' must be a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in d:
        if key not in fields:
            raise ConfigError(f"unknown config key '{prefix}{key}'")
    base = cls()
    kwargs = {}
    for name, f in fields.items():
        path = f"{prefix}{name}"
        default = getattr(base, name)
        if name not in d:
            kwargs[name] = copy.deepcopy(default)
            continue
        val = d[name]
        if dataclasses.is_dataclass(default):
            merged = dataclasses.asdict(default)
            if not isinstance(val, dict):
                raise ConfigError(f"'{path}' must be a JSON object")
            merged.update(val)
            kwargs[name] = _build(type(default), merged, path + ".")
        else:
            kwargs[name] = _check_value(path, val, default, f.metadata.get("range", (None, None)))
    return cls(**kwargs)


def _check_value(path, val, default, rng):
    lo, hi = rng
    if isinstance(default, bool):
        if not isinstance(val, bool):
            raise ConfigError(f"'{path}' must be a boolean")
        return val
    if isinstance(default, int):
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigError(f"'{path}' must be an integer")
    elif isinstance(default, float):
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"'{path}' must be a number")
        val = float(val)
    elif isinstance(default, str):
        if not isinstance(val, str):
            raise ConfigError(f"'{path}' must be a string")
        return val
    elif default is None or isinstance(default, list):
        if not isinstance(val, list) or not val or not all(
                isinstance(v, (int, float)) and 0.0 <= v <= 1.0 for v in val):
            raise ConfigError(f"'{path}' must be a non-empty list of numbers in [0, 1]")
        return [float(v) for v in val]
    if lo is not None and val < lo:
        raise ConfigError(f"'{path}'={val} below minimum {lo}")
    if hi is not None and val > hi:
        raise ConfigError(f"'{path}'={val} above maximum {hi}")
    return val


def _cross_check(cfg: Config) -> None:
    m = cfg.model
    if m.S * m.M + 1 > m.max_text_len:
        raise ConfigError(f"'model.max_text_len'={m.max_text_len} shorter than S*M+1={m.S * m.M + 1}")
    if cfg.data.image_size % (4 * 2 ** (m.S - 1)):
        raise ConfigError(f"'data.image_size' must be divisible by {4 * 2 ** (m.S - 1)}")
    if m.lora_rank > m.D:
        raise ConfigError("'model.lora_rank' must not exceed model.D")
    for name in ("general", "vertical"):
        dc = getattr(cfg.data, name)
        if dc.gain_min > dc.gain_max:
            raise ConfigError(f"'data.{name}.gain_min' exceeds gain_max")
        if dc.objects_min > dc.objects_max:
            raise ConfigError(f"'data.{name}.objects_min' exceeds objects_max")
        if dc.size_min > dc.size_max or dc.size_max >= cfg.data.image_size - 2:
            raise ConfigError(f"'data.{name}.size_min/size_max' invalid for the image size")


def default_config_path() -> Path:
    return Path(str(resources.files("semaug") / "configs" / "default.json"))


def load_default() -> Config:
    return Config.from_file(default_config_path())


def describe_keys() -> str:
    """One line per config key: dotted name, default, valid range, help."""
    lines = []

    def walk(obj, prefix):
        for f in dataclasses.fields(obj):
            val = getattr(obj, f.name)
            if dataclasses.is_dataclass(val):
                walk(val, prefix + f.name + ".")
                continue
            lo, hi = f.metadata.get("range", (None, None))
            if isinstance(val, bool):
                rng = "true|false"
            elif lo is not None or hi is not None:
                rng = f"[{lo}, {hi}]"
            elif isinstance(val, str):
                rng = "string"
            else:
                rng = "list of hues in [0, 1]"
            lines.append(f"  {prefix + f.name:<32} default={json.dumps(val):<22} range={rng}"
                         f"  {f.metadata.get('help', '')}")

    walk(Config(), "")
    return "\n".join(lines)
