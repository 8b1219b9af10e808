"""Flat, dotted-key run configuration.

Every tunable lives under a section prefix (``train.``, ``init.``,
``encoding.``, ``synth.``, ``paths.``). A run is configured by one JSON object
of such keys, and each key can be overridden on the command line by a flag of
the same name. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .deform_net import EncodingConfig
from .shape_init import InitConfig
from .synth import SynthConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    runs: str = "runs"


_NESTED = ("init", "encoding")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    init: InitConfig = field(default_factory=InitConfig)
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    paths: Paths = field(default_factory=Paths)

    def sections(self) -> dict:
        return {"train": self.train, "init": self.init, "encoding": self.encoding, "synth": self.synth,
                "paths": self.paths}

    def flat(self) -> dict:
        out = {}
        for sec, obj in self.sections().items():
            for f in fields(obj):
                if sec == "train" and f.name in _NESTED:
                    continue
                out[f"{sec}.{f.name}"] = getattr(obj, f.name)
        return out

    def resolved_train(self) -> TrainConfig:
        return dataclasses.replace(self.train, init=self.init, encoding=self.encoding)

    def digest(self) -> str:
        blob = json.dumps(self.flat(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def run_dir(self) -> Path:
        return Path(self.paths.runs) / self.digest()


def field_types() -> dict[str, type]:
    cfg = RunConfig()
    out = {}
    for sec, obj in cfg.sections().items():
        hints = {f.name: f.type for f in fields(obj)}
        for f in fields(obj):
            if sec == "train" and f.name in _NESTED:
                continue
            out[f"{sec}.{f.name}"] = hints[f.name]
    return out


def _coerce(key: str, value, default):
    kind = field_types()[key]
    if isinstance(kind, str):
        kind = kind.replace(" ", "")
    try:
        if kind in (bool, "bool"):
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes"):
                    return True
                if value.lower() in ("0", "false", "no"):
                    return False
                raise ValueError(value)
            return bool(value)
        if kind in (int, "int"):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind in ("int|None",):
            return None if value in (None, "none", "None", "null") else int(value)
        if kind in (float, "float"):
            return float(value)
        return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"key {key!r}: cannot interpret {value!r} (default {default!r})") from e


def apply(cfg: RunConfig, values: dict) -> RunConfig:
    """Set dotted keys; raise ConfigError on unknown keys or uninterpretable values."""
    known = cfg.flat()
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    sections = cfg.sections()
    for key, value in values.items():
        sec, name = key.split(".", 1)
        obj = sections[sec]
        new = _coerce(key, value, known[key])
        if sec == "encoding":
            try:
                cfg.encoding = obj = dataclasses.replace(cfg.encoding, **{name: new})
            except ValueError as e:
                raise ConfigError(f"key {key!r}: {e}") from e
            sections["encoding"] = obj
        else:
            setattr(obj, name, new)
    return cfg


def load(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"{p}: config file not found")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: malformed JSON ({e})") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: expected a JSON object of dotted keys")
        apply(cfg, data)
    if overrides:
        apply(cfg, overrides)
    try:
        cfg.resolved_train().validate()
        cfg.synth.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return cfg
