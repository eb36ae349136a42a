"""Experiment configuration stored as sectioned key = value text (INI).

Every battery and PPO constant of the plant/algorithm table has its own key;
unknown keys are rejected so typos do not silently fall back to defaults.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import SynthConfig
from .env import EnvParams
from .rl import SCHEMES, WITHOUT_PREDICTION, PpoConfig

WORKERS_ENV = "MICROGRID_DRL_WORKERS"

# ini key -> dataclass field, where they differ
_ENV_KEYS = {"lambda_1": "lambda_low", "lambda_2": "lambda_high", "b0_eval": "b0"}
_PPO_KEYS = {"clip_epsilon": "clip_eps", "update_epochs": "epochs"}


@dataclass(frozen=True)
class ForecastSettings:
    epochs: int = 200
    hidden: int = 32
    learning_rate: float = 3e-2
    checkpoint: str = ""


@dataclass(frozen=True)
class DataSettings:
    source: str = "synth"        # "synth" or a CSV path
    train_fraction: float = 0.8


@dataclass(frozen=True)
class SchemeConfig:
    scheme: str = WITHOUT_PREDICTION
    k: int = 2
    seed: int = 0
    out: str = "runs"
    env: EnvParams = field(default_factory=EnvParams)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    forecast: ForecastSettings = field(default_factory=ForecastSettings)
    data: DataSettings = field(default_factory=DataSettings)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if not 1 <= self.k <= 2:
            raise ValueError("forecast horizon k must be 1 or 2")

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp["scheme"] = {"scheme": self.scheme, "k": str(self.k), "seed": str(self.seed), "out": self.out}
        cp["env"] = _section(self.env, _ENV_KEYS)
        cp["ppo"] = _section(self.ppo, _PPO_KEYS)
        cp["forecast"] = _section(self.forecast, {})
        cp["data"] = _section(self.data, {})
        cp["synth"] = _section(self.synth, {})
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> SchemeConfig:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp.read_string(text)
        unknown = set(cp.sections()) - {"scheme", "env", "ppo", "forecast", "data", "synth"}
        if unknown:
            raise ValueError(f"unknown config sections {sorted(unknown)}")
        base = cls()
        top = {}
        if cp.has_section("scheme"):
            for key, raw in cp["scheme"].items():
                if key not in ("scheme", "k", "seed", "out"):
                    raise ValueError(f"unknown key [scheme] {key}")
                top[key] = _parse(raw, type(getattr(base, key)))
        return replace(
            base, **top,
            env=_load(cp, "env", base.env, _ENV_KEYS),
            ppo=_load(cp, "ppo", base.ppo, _PPO_KEYS),
            forecast=_load(cp, "forecast", base.forecast, {}),
            data=_load(cp, "data", base.data, {}),
            synth=_load(cp, "synth", base.synth, {}),
        )

    @classmethod
    def load(cls, path) -> SchemeConfig:
        return cls.from_ini(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_ini())

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]

    def with_worker_override(self) -> SchemeConfig:
        raw = os.environ.get(WORKERS_ENV)
        if not raw:
            return self
        return replace(self, ppo=replace(self.ppo, workers=int(raw)))


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return "; ".join(", ".join(_fmt(v) for v in item) for item in value)
        return ", ".join(_fmt(v) for v in value)
    return str(value)


def _section(obj, renames: dict[str, str]) -> dict[str, str]:
    back = {v: k for k, v in renames.items()}
    return {back.get(f.name, f.name): _fmt(getattr(obj, f.name)) for f in fields(obj)}


def _parse(raw: str, like):
    raw = raw.strip()
    if like is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if like is int:
        return int(raw)
    if like is float:
        return float(raw)
    return raw


def _parse_tuple(raw: str, example: tuple):
    raw = raw.strip()
    if not raw:
        return ()
    if example and isinstance(example[0], tuple):
        inner = example[0]
        return tuple(tuple(_parse(p, type(inner[i % len(inner)])) for i, p in enumerate(item.split(",")))
                     for item in raw.split(";"))
    kind = type(example[0]) if example else float
    return tuple(_parse(p, kind) for p in raw.split(","))


def _load(cp, section: str, base, renames: dict[str, str]):
    if not cp.has_section(section):
        return base
    names = {f.name for f in fields(base)}
    updates = {}
    for key, raw in cp[section].items():
        name = renames.get(key, key)
        if name not in names:
            raise ValueError(f"unknown key [{section}] {key}")
        current = getattr(base, name)
        updates[name] = _parse_tuple(raw, current) if isinstance(current, tuple) else _parse(raw, type(current))
    return replace(base, **updates)
