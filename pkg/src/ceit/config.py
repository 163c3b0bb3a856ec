"""Model and training configuration records, presets and the JSON schema.

Config files are JSON objects with optional ``"model"`` and ``"train"``
sections. Every key must name a field of the corresponding dataclass; unknown
keys are rejected. Overrides use dotted paths, e.g. ``model.i2t.channels=64``
or ``train.epochs=3`` (a path without a section prefix addresses ``model``).
"""

from __future__ import annotations

import copy
import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration value, key or file."""


@dataclass
class I2TConfig:
    enabled: bool = True
    conv_kernel: int = 7
    conv_stride: int = 2
    num_convs: int = 1
    channels: int = 32
    use_maxpool: bool = True
    pool_kernel: int = 3
    pool_stride: int = 2
    use_bn: bool = True

    @property
    def stride(self) -> int:
        """Total downsampling factor S of the stem."""
        if not self.enabled:
            return 1
        s = self.conv_stride**self.num_convs
        return s * self.pool_stride if self.use_maxpool else s


@dataclass
class ModelConfig:
    image_size: int = 224
    in_channels: int = 3
    i2t: I2TConfig = field(default_factory=I2TConfig)
    # Patch side in pixels of the grid being tokenized: the stem output when
    # i2t is enabled, the raw image otherwise.
    patch_size: int = 4
    depth: int = 12
    embed_dim: int = 192
    heads: int = 3
    ffn_kind: str = "leff"
    expand_ratio: int = 4
    leff_kernel: int = 3
    leff_use_bn: bool = True
    use_lca: bool = True
    num_classes: int = 1000
    norm_order: str = "pre"
    norm_eps: float = 1e-5
    bn_momentum: float = 0.1
    dtype: str = "float64"

    @property
    def stem_size(self) -> int:
        return self.image_size // self.i2t.stride

    @property
    def stem_channels(self) -> int:
        return self.i2t.channels if self.i2t.enabled else self.in_channels

    @property
    def grid_side(self) -> int:
        return self.stem_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_side**2

    @property
    def hidden_dim(self) -> int:
        return self.expand_ratio * self.embed_dim

    def with_resolution(self, image_size: int) -> "ModelConfig":
        cfg = copy.deepcopy(self)
        cfg.image_size = image_size
        cfg.validate()
        return cfg

    def validate(self) -> "ModelConfig":
        positive = ("image_size", "in_channels", "patch_size", "depth", "embed_dim", "heads", "num_classes")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.ffn_kind not in ("leff", "baseline_ffn"):
            raise ConfigError(f"ffn_kind must be 'leff' or 'baseline_ffn', got {self.ffn_kind!r}")
        if self.norm_order not in ("pre", "post"):
            raise ConfigError(f"norm_order must be 'pre' or 'post', got {self.norm_order!r}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be 'float64' or 'float32', got {self.dtype!r}")
        if self.expand_ratio < 1:
            raise ConfigError("expand_ratio must be >= 1")
        if self.leff_kernel < 1 or self.leff_kernel % 2 == 0:
            raise ConfigError(f"leff_kernel must be odd, got {self.leff_kernel}")
        if self.norm_eps <= 0:
            raise ConfigError("norm_eps must be positive")
        t = self.i2t
        if t.enabled:
            for name in ("conv_kernel", "conv_stride", "num_convs", "channels", "pool_kernel", "pool_stride"):
                if getattr(t, name) < 1:
                    raise ConfigError(f"i2t.{name} must be positive")
        if self.image_size % self.i2t.stride:
            raise ConfigError(f"image_size {self.image_size} is not divisible by the stem stride {self.i2t.stride}")
        if self.stem_size % self.patch_size:
            raise ConfigError(f"token grid {self.stem_size} is not divisible by patch_size {self.patch_size}")
        return self


@dataclass
class TrainConfig:
    epochs: int = 25
    batch_size: int = 8
    base_lr: float = 1e-2
    warmup_epochs: int = 1
    schedule: str = "cosine"
    min_lr_ratio: float = 1e-2
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup_epochs ({self.warmup_epochs}) must be in [0, epochs={self.epochs})")
        if self.base_lr < 0:
            raise ConfigError("base_lr must be non-negative")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"schedule must be 'cosine' or 'constant', got {self.schedule!r}")
        return self


def _ceit(embed_dim: int, heads: int, **kw) -> ModelConfig:
    return ModelConfig(embed_dim=embed_dim, heads=heads, **kw)


PRESETS: dict[str, typing.Callable[[], ModelConfig]] = {
    "ceit-t": lambda: _ceit(192, 3),
    "ceit-s": lambda: _ceit(384, 6),
    "ceit-b": lambda: _ceit(768, 12),
    "deit-t": lambda: ModelConfig(
        i2t=I2TConfig(enabled=False),
        patch_size=16,
        embed_dim=192,
        heads=3,
        ffn_kind="baseline_ffn",
        use_lca=False,
    ),
    # Desk-scale model used by the gradient check and the training harness.
    "ceit-toy": lambda: ModelConfig(
        image_size=32,
        i2t=I2TConfig(channels=8),
        patch_size=4,
        depth=2,
        embed_dim=16,
        heads=2,
        num_classes=4,
    ),
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]().validate()
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# -- (de)serialization -----------------------------------------------------------


def to_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            v = to_dict(v)
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def _coerce(value, tp, path: str):
    origin = typing.get_origin(tp)
    if tp is bool:
        if isinstance(value, bool):
            return value
    elif tp is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif tp is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif tp is str:
        if isinstance(value, str):
            return value
    elif origin is tuple:
        args = typing.get_args(tp)
        if isinstance(value, (list, tuple)) and len(value) == len(args):
            return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    elif dataclasses.is_dataclass(tp):
        if isinstance(value, dict):
            return from_dict(tp, value, prefix=f"{path}.")
    name = getattr(tp, "__name__", str(tp))
    raise ConfigError(f"{path}: expected {name}, got {value!r}")


def from_dict(cls, data: dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(prefix + k for k in unknown)}")
    kwargs = {k: _coerce(v, hints[k], prefix + k) for k, v in data.items()}
    return cls(**kwargs)


def _parse_scalar(text: str, tp, path: str):
    if tp is bool:
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{path}: expected a boolean, got {text!r}")
    if tp is str:
        return text
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        raise ConfigError(f"{path}: cannot parse {text!r}") from None
    return _coerce(value, tp, path)


def apply_override(model: ModelConfig, train: TrainConfig, assignment: str) -> None:
    """Apply one ``dotted.key=value`` override in place, type-checked against the schema."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    if parts[0] in ("model", "train"):
        section, parts = parts[0], parts[1:]
    else:
        section = "model"
    target = model if section == "model" else train
    path = section
    for i, part in enumerate(parts):
        path += "." + part
        names = {f.name for f in dataclasses.fields(target)}
        if part not in names:
            raise ConfigError(f"unknown key {path}")
        hints = typing.get_type_hints(type(target))
        if i == len(parts) - 1:
            if dataclasses.is_dataclass(hints[part]):
                raise ConfigError(f"{path} is a section; set one of its fields")
            setattr(target, part, _parse_scalar(text.strip(), hints[part], path))
        else:
            target = getattr(target, part)
            if not dataclasses.is_dataclass(target):
                raise ConfigError(f"{path} is not a section")


def load_config_file(path: str | Path) -> tuple[dict | None, dict | None]:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = sorted(set(data) - {"model", "train", "preset"})
    if unknown:
        raise ConfigError(f"{path}: unknown top-level key(s) {unknown}")
    model = data.get("model")
    if "preset" in data:
        base = to_dict(preset(data["preset"]))
        model = _merge(base, model or {})
    return model, data.get("train")


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve(
    preset_name: str | None = None,
    config_paths: typing.Sequence[str | Path] = (),
    overrides: typing.Sequence[str] = (),
) -> tuple[ModelConfig, TrainConfig]:
    """Build the effective configs: preset, then config files in order, then overrides."""
    model_dict = to_dict(preset(preset_name)) if preset_name else to_dict(ModelConfig())
    train_dict = to_dict(TrainConfig())
    for path in config_paths:
        m, t = load_config_file(path)
        if m is not None:
            model_dict = _merge(model_dict, m)
        if t is not None:
            train_dict = _merge(train_dict, t)
    model = from_dict(ModelConfig, model_dict, prefix="model.")
    train = from_dict(TrainConfig, train_dict, prefix="train.")
    for assignment in overrides:
        apply_override(model, train, assignment)
    return model.validate(), train.validate()


def dump_config(model: ModelConfig, train: TrainConfig | None = None) -> str:
    data = {"model": to_dict(model)}
    if train is not None:
        data["train"] = to_dict(train)
    return json.dumps(data, indent=2, sort_keys=True) + "\n"
