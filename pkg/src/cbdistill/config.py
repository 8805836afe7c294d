"""Run configuration: a flat TOML document with a fixed key set.

Unknown keys are rejected so a typo never silently falls back to a default.
``--set key=value`` overrides use the same keys (``profile.<field>`` and
``split_thresholds.<many|few>`` reach into the two tables).
"""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import ConfigError, LongTailProfile
from .losses import MODES
from .train import METHODS

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

TEACHER_TYPES = ("standard", "data_aug")


def default_composition(K: int) -> list[str]:
    """floor(K/2) standard teachers followed by data_aug ones."""
    n_std = K // 2
    return ["standard"] * n_std + ["data_aug"] * (K - n_std)


@dataclass
class RunConfig:
    method: str = "cbd"
    seed: int = 0
    epochs_stage1: int = 100
    epochs_stage2: int = 100
    batch_size: int = 64
    lr0: float = 0.2
    momentum: float = 0.9
    alpha: float = 0.4
    beta: float = 100.0
    temperature: float = 2.0
    gamma: float = 16.0
    K: int = 4
    teacher_types: list[str] | None = None
    augment_sigma: float = 0.01
    dataset_path: str | None = None
    profile: LongTailProfile | None = field(default_factory=LongTailProfile)
    split_thresholds: dict | None = None
    distill_mode: str | None = None

    def validate(self) -> "RunConfig":
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {', '.join(METHODS)}; got {self.method!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        for k in ("beta", "temperature", "gamma", "lr0"):
            if not getattr(self, k) > 0:
                raise ConfigError(f"{k} must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        for k in ("epochs_stage1", "epochs_stage2", "batch_size", "K"):
            if not (isinstance(getattr(self, k), int) and getattr(self, k) >= 1):
                raise ConfigError(f"{k} must be a positive integer")
        if self.augment_sigma < 0:
            raise ConfigError("augment_sigma must be >= 0")
        if self.teacher_types is not None:
            bad = [t for t in self.teacher_types if t not in TEACHER_TYPES]
            if bad:
                raise ConfigError(f"teacher_types entries must be standard/data_aug, got {bad}")
            if not self.teacher_types:
                raise ConfigError("teacher_types must not be empty")
        if self.distill_mode is not None and self.distill_mode not in MODES:
            raise ConfigError(f"distill_mode must be one of {MODES}")
        if (self.dataset_path is None) == (self.profile is None):
            raise ConfigError("exactly one of dataset_path or profile must be given")
        if self.profile is not None:
            self.profile.validate()
        if self.split_thresholds is not None:
            extra = set(self.split_thresholds) - {"many", "few"}
            if extra:
                raise ConfigError(f"unknown split_thresholds key(s): {sorted(extra)}")
        return self

    def teachers(self) -> list[str]:
        """Teacher types for the configured method."""
        if self.method == "cbd":
            return [self.teacher_types[0] if self.teacher_types else "standard"]
        if self.teacher_types is not None:
            return list(self.teacher_types)
        return default_composition(self.K)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.profile is not None:
            d["profile"] = asdict(self.profile)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


_KEYS = {f.name for f in fields(RunConfig)}
_PROFILE_KEYS = {f.name for f in fields(LongTailProfile)}


def from_mapping(raw: dict) -> RunConfig:
    unknown = sorted(set(raw) - _KEYS)
    if unknown:
        raise ConfigError(f"unknown config key: {unknown[0]}")
    kw = dict(raw)
    for table in ("profile", "split_thresholds"):
        if kw.get(table) is not None and not isinstance(kw[table], dict):
            raise ConfigError(f"{table} must be a table")
    if "profile" in kw and kw["profile"] is not None:
        prof = kw["profile"]
        bad = sorted(set(prof) - _PROFILE_KEYS)
        if bad:
            raise ConfigError(f"unknown config key: profile.{bad[0]}")
        kw["profile"] = replace(RunConfig().profile, **prof)
    if "dataset_path" in kw and "profile" not in kw:
        kw["profile"] = None
    try:
        cfg = RunConfig(**kw)
    except TypeError as e:
        raise ConfigError(str(e)) from None
    return cfg.validate()


def parse_value(text: str):
    """TOML scalar/array syntax, with bare words taken as strings."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    raw = json.loads(json.dumps(raw))  # deep copy of plain data
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        key = key.strip()
        value = parse_value(text.strip())
        head, _, sub = key.partition(".")
        if head not in _KEYS:
            raise ConfigError(f"unknown config key: {key}")
        if sub:
            if head not in ("profile", "split_thresholds"):
                raise ConfigError(f"unknown config key: {key}")
            if head == "profile" and sub not in _PROFILE_KEYS:
                raise ConfigError(f"unknown config key: {key}")
            raw.setdefault(head, {})
            raw[head] = dict(raw[head] or {})
            raw[head][sub] = value
        else:
            raw[key] = value
    return raw


def load_raw(path) -> dict:
    try:
        return tomllib.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None


def load_config(path=None, overrides: list[str] = ()) -> RunConfig:
    raw = load_raw(path) if path is not None else {}
    return from_mapping(apply_overrides(raw, list(overrides)))
