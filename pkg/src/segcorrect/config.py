"""Flat key=value run configuration.

One `key=value` per line, `#` starts a comment, blank lines ignored.
Unknown keys are rejected; every key has a default, so an empty file (or no
file at all) is a valid configuration.
"""

from dataclasses import dataclass, fields

from .errors import ConfigError
from .train import REGIMES, TrainConfig


@dataclass
class RunConfig:
    # training
    regime: str = "joint"
    iterations: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    seed: int = 0
    max_disp_px: float = 16.0
    num_classes: int = 4
    crop_size: int = 64
    mirror: bool = True
    scale_aug: bool = True
    log_every: int = 50
    eval_every: int = 500
    # dataset
    size: int = 64
    train_count: int = 200
    val_count: int = 50
    boundary_jitter_px: float = 3.0
    region_flip_rate: float = 0.15
    blur_sigma: float = 1.0

    def validate(self):
        self.to_train_config().validate()
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.size % 8:
            raise ConfigError(f"size must be divisible by 8, got {self.size}")
        if self.train_count < 1 or self.val_count < 0:
            raise ConfigError("train_count must be >= 1 and val_count >= 0")
        if not (0.0 <= self.region_flip_rate <= 1.0):
            raise ConfigError(f"region_flip_rate must be in [0,1], got {self.region_flip_rate}")
        if self.boundary_jitter_px < 0 or self.blur_sigma < 0:
            raise ConfigError("boundary_jitter_px and blur_sigma must be >= 0")
        return self

    def to_train_config(self):
        return TrainConfig(
            regime=self.regime,
            iterations=self.iterations,
            batch_size=self.batch_size,
            lr=self.lr,
            seed=self.seed,
            max_disp_px=self.max_disp_px,
            num_classes=self.num_classes,
            crop_size=self.crop_size,
            mirror=self.mirror,
            scale_aug=self.scale_aug,
            log_every=self.log_every,
            eval_every=self.eval_every,
        )


_BOOL_WORDS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _convert(name, kind, raw):
    try:
        if kind is bool:
            word = raw.strip().lower()
            if word not in _BOOL_WORDS:
                raise ValueError
            return _BOOL_WORDS[word]
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"bad value {raw.strip()!r} for key {name!r} ({kind.__name__})") from None


def parse_config_text(text):
    by_name = {"str": str, "int": int, "float": float, "bool": bool}
    types = {
        f.name: by_name[f.type] if isinstance(f.type, str) else f.type
        for f in fields(RunConfig)
    }
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected key=value, got {line.strip()!r}")
        key, raw = body.split("=", 1)
        key = key.strip()
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        setattr(cfg, key, _convert(key, types[key], raw))
    if cfg.regime not in REGIMES:
        raise ConfigError(f"regime must be one of {REGIMES}, got {cfg.regime!r}")
    return cfg.validate()


def load_config(path):
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_text(f.read())
