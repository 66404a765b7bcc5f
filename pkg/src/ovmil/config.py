"""Training configuration, key=value config files and the built-in presets."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


# The ten tunable hyperparameters, in the column order of the tuning schedule.
HYPERPARAMETERS = (
    "learning_rate",
    "weight_decay",
    "beta1",
    "beta2",
    "epsilon",
    "lr_decay_patience",
    "lr_decay_factor",
    "model_size",
    "dropout_p",
    "max_patches",
)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-3
    lr_decay_patience: int = 20
    lr_decay_factor: float = 0.75
    beta1: float = 0.75
    beta2: float = 0.95
    epsilon: float = 1e-2
    weight_decay: float = 1e-3
    dropout_p: float = 0.4
    max_patches: int = 800
    model_size: tuple = (512, 128)
    max_epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "model_size", tuple(int(v) for v in self.model_size))
        problems = validate_config(self)
        if problems:
            raise ConfigError("; ".join(problems))

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_kv(self):
        return {f.name: format_value(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_kv(cls, kv, base=None):
        base = base or cls()
        return base.replace(**parse_overrides(kv))


def validate_config(cfg):
    problems = []
    if not cfg.learning_rate > 0:
        problems.append("learning_rate must be > 0")
    if cfg.lr_decay_patience < 1:
        problems.append("lr_decay_patience must be >= 1")
    if not 0 < cfg.lr_decay_factor <= 1:
        problems.append("lr_decay_factor must lie in (0, 1]")
    for name in ("beta1", "beta2"):
        if not 0 < getattr(cfg, name) < 1:
            problems.append(f"{name} must lie in (0, 1)")
    if not cfg.epsilon > 0:
        problems.append("epsilon must be > 0")
    if cfg.weight_decay < 0:
        problems.append("weight_decay must be >= 0")
    if not 0 <= cfg.dropout_p < 1:
        problems.append("dropout_p must lie in [0, 1)")
    if cfg.max_patches < 1:
        problems.append("max_patches must be >= 1")
    if len(cfg.model_size) != 2 or min(cfg.model_size) < 1:
        problems.append("model_size must be two positive sizes [M1,M2]")
    if cfg.max_epochs < 1:
        problems.append("max_epochs must be >= 1")
    return problems


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def format_value(value):
    if isinstance(value, tuple):
        return "[" + ",".join(str(v) for v in value) + "]"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_value(name, text):
    kind = _FIELD_TYPES.get(name)
    text = str(text).strip()
    try:
        if kind == "float":
            return float(text)
        if kind == "int":
            value = float(text)
            if not value.is_integer():
                raise ValueError
            return int(value)
        if kind == "tuple":
            parts = text.strip("[]() ").split(",")
            return tuple(int(p) for p in parts if p.strip())
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r}") from None
    raise ConfigError(f"unknown training field {name!r}")


def parse_overrides(kv):
    return {k: parse_value(k, v) if isinstance(v, str) else v for k, v in kv.items()}


def read_kv(path):
    """Parse a key=value file; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def dumps_kv(kv):
    return "".join(f"{k}={v}\n" for k, v in kv.items())


def write_kv(kv, path):
    Path(path).write_text(dumps_kv(kv), encoding="utf-8")


def _preset(lr, patience, factor, b1, b2, eps, drop, wd, max_patches, size):
    return TrainConfig(
        learning_rate=lr,
        lr_decay_patience=patience,
        lr_decay_factor=factor,
        beta1=b1,
        beta2=b2,
        epsilon=eps,
        dropout_p=drop,
        weight_decay=wd,
        max_patches=max_patches,
        model_size=size,
    )


# Final tuned settings per feature extractor (lr, patience, decay factor, beta1,
# beta2, epsilon, dropout, weight decay, max patches, model size).
PRESETS = {
    "rn50": _preset(2e-3, 20, 0.75, 0.75, 0.95, 1e-2, 0.4, 1e-3, 800, (512, 128)),
    "rn18": _preset(1e-4, 20, 0.9, 0.8, 0.99, 1e-4, 0.5, 1e-5, 700, (1024, 256)),
    "vit-l": _preset(5e-5, 10, 0.35, 0.85, 0.999, 1e-3, 0.0, 1e-1, 800, (512, 384)),
    "rn18-histo": _preset(2e-4, 20, 0.9, 0.9, 0.99, 1e-4, 0.6, 1e-4, 1000, (512, 512)),
    "lunit": _preset(1e-4, 10, 0.75, 0.99, 0.9999, 1e-5, 0.6, 1e-1, 900, (1024, 512)),
    "rn50-histo": _preset(2e-4, 25, 0.75, 0.8, 0.99, 1e-4, 0.6, 1e-3, 700, (512, 384)),
    "ctranspath": _preset(1e-4, 25, 0.9, 0.7, 0.99999, 1e-3, 0.4, 1e-3, 1000, (256, 128)),
    "hibou-b": _preset(4e-5, 10, 0.9, 0.99, 0.9999, 1e-3, 0.3, 1e-2, 1600, (256, 128)),
    "phikon": _preset(5e-5, 25, 0.75, 0.99, 0.999, 1e-5, 0.8, 1e-5, 1200, (512, 256)),
    "kaiko-b8": _preset(2e-5, 10, 0.75, 0.95, 0.9999, 1e-5, 0.2, 1e-1, 600, (512, 128)),
    "gpfm": _preset(1e-4, 25, 0.9, 0.95, 0.99, 1e-4, 0.8, 1e-6, 1000, (512, 128)),
    "uni": _preset(1e-5, 10, 0.75, 0.9, 0.999, 1e-5, 0.0, 1e-3, 1000, (512, 256)),
    "hibou-l": _preset(5e-5, 25, 0.75, 0.75, 0.99999, 1e-4, 0.6, 1e-7, 400, (256, 128)),
    "virchow": _preset(2e-4, 20, 0.9, 0.95, 0.99, 1e-3, 0.8, 1e-2, 1100, (512, 256)),
    "virchow2-cls": _preset(2e-5, 10, 0.75, 0.55, 0.999, 1e-4, 0.6, 1e-4, 1000, (512, 256)),
    "h-optimus-0": _preset(2.5e-5, 5, 0.75, 0.5, 0.9999, 1e-4, 0.4, 1e-2, 1000, (128, 32)),
    "prov-gigapath": _preset(5e-5, 15, 0.75, 0.7, 0.99, 1e-4, 0.7, 1e-4, 1300, (512, 256)),
    "rn50-reinhard": _preset(2e-3, 25, 0.75, 0.75, 0.95, 1e-2, 0.4, 1e-3, 400, (512, 256)),
    "rn50-macenko": _preset(2e-3, 15, 0.75, 0.85, 0.95, 1e-2, 0.3, 1e-3, 400, (512, 128)),
    "rn50-otsu": _preset(2e-3, 15, 0.9, 0.75, 0.95, 1e-2, 0.1, 1e-3, 600, (512, 256)),
    "rn50-otsu-macenko": _preset(2e-3, 25, 0.9, 0.75, 0.99, 1e-3, 0.3, 1e-4, 1000, (512, 256)),
    "rn50-5augs": _preset(1e-3, 25, 0.6, 0.8, 0.99, 1e-4, 0.4, 1e-4, 700, (128, 32)),
    "rn50-10augs": _preset(2e-3, 20, 0.75, 0.8, 0.99, 1e-2, 0.4, 1e-3, 700, (512, 256)),
    "rn50-20augs": _preset(1e-3, 20, 0.75, 0.7, 0.999, 1e-3, 0.6, 1e-4, 1000, (512, 128)),
}


def get_preset(name):
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise ConfigError(
            f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}"
        ) from None
