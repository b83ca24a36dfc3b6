"""Experiment configuration: one JSON document per run, validated strictly."""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_type_hints

from .simnet import LINK_PRESETS


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str | None = None  # PGM directory; synthetic blobs when null
    num_classes: int = 4
    train_samples: int = 800
    test_samples: int = 400
    noise: float = 0.3
    jitter: float = 1.2
    test_fraction: float = 0.33  # held-out share when loading from root
    seed: int = 1


@dataclass
class TrainConfig:
    data: DataConfig = field(default_factory=DataConfig)
    hospitals: int = 4
    rounds: int = 15
    local_epochs: int = 1
    lr: float = 0.05
    batch_size: int = 16
    weighted: bool = False
    plain_aggregation: bool = False
    seed: int = 7
    k: int = 64
    f: int = 16
    link: str = "6g"
    compute_speed: float = 1e9
    fail_after_messages: int | None = None  # fault injection: drop the link after this many messages
    out_dir: str = "out/train"


@dataclass
class InferConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model_dir: str = "out/train"
    batch_sizes: list = field(default_factory=lambda: [5, 10, 15, 20, 30])
    samples: int = 60  # leading validation samples run at every batch size
    seed: int = 11
    link: str = "6g"
    compute_speed: float = 1e9
    fail_after_messages: int | None = None
    out_dir: str = "out/infer"


@dataclass
class SelftestConfig:
    seed: int = 3
    randomness: str | None = None
    out_dir: str = "out/selftest"


@dataclass
class GenRandomnessConfig:
    out: str = "out/randomness.bin"
    triples: int = 16
    comparison_keys: int = 4
    shape: list = field(default_factory=lambda: [64])
    seed: int = 5
    k: int = 64
    f: int = 16


COMMAND_CONFIGS = {
    "train": TrainConfig,
    "infer": InferConfig,
    "selftest": SelftestConfig,
    "gen-randomness": GenRandomnessConfig,
}


def _line_of(text: str, key: str) -> int | None:
    m = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _where(text, key) -> str:
    line = _line_of(text, key) if text else None
    return f"line {line}: " if line else ""


def _build(cls, obj, text, path: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in obj:
        if key not in names:
            raise ConfigError(f"{_where(text, key)}unknown key {path + key!r}")
    kwargs = {}
    for key, value in obj.items():
        t = hints[key]
        if dataclasses.is_dataclass(t):
            kwargs[key] = _build(t, value, text, f"{path}{key}.")
            continue
        if not _type_ok(t, value):
            raise ConfigError(
                f"{_where(text, key)}{path + key!r} should be {_type_name(t)}, got {json.dumps(value)}"
            )
        kwargs[key] = float(value) if t is float else value
    return cls(**kwargs)


def _type_ok(t, value) -> bool:
    if t is bool:
        return isinstance(value, bool)
    if t is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if t is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if t is str:
        return isinstance(value, str)
    if t is list:
        return isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
    if t == (str | None):
        return value is None or isinstance(value, str)
    if t == (int | None):
        return value is None or _type_ok(int, value)
    return False


def _type_name(t) -> str:
    return {bool: "a boolean", int: "an integer", float: "a number", str: "a string",
            list: "a list of integers", int | None: "an integer or null"}.get(t, "a string or null")


def validate(cfg):
    link = getattr(cfg, "link", None)
    if link is not None and link not in LINK_PRESETS:
        raise ConfigError(f"link must be one of {sorted(LINK_PRESETS)}, got {link!r}")
    for name in ("hospitals", "rounds", "local_epochs", "batch_size", "triples", "samples"):
        if getattr(cfg, name, 1) <= 0:
            raise ConfigError(f"{name} must be positive")
    if isinstance(cfg, InferConfig) and (not cfg.batch_sizes or min(cfg.batch_sizes) <= 0):
        raise ConfigError("batch_sizes must be a non-empty list of positive integers")
    if hasattr(cfg, "compute_speed") and cfg.compute_speed <= 0:
        raise ConfigError("compute_speed must be positive")
    if getattr(cfg, "fail_after_messages", None) is not None and cfg.fail_after_messages < 0:
        raise ConfigError("fail_after_messages must be null or non-negative")
    data = getattr(cfg, "data", None)
    if data is not None:
        if data.num_classes < 2 or data.train_samples <= 0 or data.test_samples <= 0:
            raise ConfigError("data needs at least 2 classes and positive sample counts")
        if not 0.0 < data.test_fraction < 1.0:
            raise ConfigError("data.test_fraction must lie in (0, 1)")
    if hasattr(cfg, "k") and not 2 <= cfg.f <= cfg.k - 4:
        raise ConfigError(f"need 2 <= f <= k-4, got k={cfg.k}, f={cfg.f}")
    if hasattr(cfg, "k") and (cfg.k % 8 or not 8 <= cfg.k <= 64):
        raise ConfigError(f"k must be a multiple of 8 in [8, 64], got {cfg.k}")
    return cfg


def load_config(command: str, path: str | None):
    cls = COMMAND_CONFIGS[command]
    if path is None:
        return cls()
    text = Path(path).read_text()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    try:
        return validate(_build(cls, obj, text, ""))
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def config_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def dump_config(cfg) -> str:
    return json.dumps(config_dict(cfg), indent=2, sort_keys=True)
