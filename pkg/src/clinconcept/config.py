"""JSON run configuration: LM and NER hyperparameters, file paths, seeds."""
from __future__ import annotations

import json
import os
import sys
from dataclasses import dataclass, field, fields

from .errors import ValidationError
from .lm import LmConfig
from .tagger import NerConfig

FORMAT_VERSION = 1
TOP_LEVEL = ("format_version", "lm", "ner", "paths", "seeds")


@dataclass
class Config:
    lm: LmConfig = field(default_factory=LmConfig)
    ner: NerConfig = field(default_factory=NerConfig)
    paths: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: [0])
    format_version: int = FORMAT_VERSION

    def to_dict(self):
        return {"format_version": self.format_version, "lm": self.lm.to_dict(),
                "ner": self.ner.to_dict(), "paths": dict(self.paths), "seeds": list(self.seeds)}

    def check_paths(self):
        """Input paths must exist; keys starting with ``out`` name outputs."""
        for key, path in self.paths.items():
            if not key.startswith("out") and not os.path.exists(path):
                raise ValidationError(f"paths.{key}: file not found: {path}")
        return self


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _check_type(name, value, default, nullable=False):
    if value is None and nullable:
        ok = True
    elif isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = _is_int(value)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list) and all(_is_int(x) for x in value)
    elif default is None:
        ok = value is None or (isinstance(value, (int, float)) and not isinstance(value, bool))
    else:
        ok = True
    if not ok:
        raise ValidationError(f"{name}: expected {type(default).__name__}, got {value!r}")


def _section(cls, name, raw, echo):
    if not isinstance(raw, dict):
        raise ValidationError(f"{name}: expected an object")
    defaults = cls()
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ValidationError(f"{name}.{key}: unknown key")
    values = {}
    for f in fields(cls):
        default = getattr(defaults, f.name)
        if f.name in raw:
            _check_type(f"{name}.{f.name}", raw[f.name], default, "None" in str(f.type))
            values[f.name] = raw[f.name]
            source = "file"
        else:
            values[f.name] = default
            source = "default"
        if (isinstance(default, float) or default is None) and _is_int(values[f.name]):
            values[f.name] = float(values[f.name])
        echo(f"{name}.{f.name} = {json.dumps(values[f.name])} ({source})")
    try:
        return cls(**values).validate()
    except TypeError as exc:
        raise ValidationError(f"{name}: {exc}") from None


def config_from_dict(raw, echo=None):
    if echo is None:
        echo = lambda line: None  # noqa: E731
    if not isinstance(raw, dict):
        raise ValidationError("configuration must be a JSON object")
    for key in raw:
        if key not in TOP_LEVEL:
            raise ValidationError(f"{key}: unknown key")
    version = raw.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise ValidationError(f"format_version: unsupported value {version!r}")
    lm = _section(LmConfig, "lm", raw.get("lm", {}), echo)
    ner = _section(NerConfig, "ner", raw.get("ner", {}), echo)
    paths = raw.get("paths", {})
    if not isinstance(paths, dict) or not all(isinstance(v, str) for v in paths.values()):
        raise ValidationError("paths: expected an object of strings")
    seeds = raw.get("seeds", [0])
    _check_type("seeds", seeds, [0])
    if not seeds or any(s < 0 for s in seeds):
        raise ValidationError("seeds: expected a non-empty list of non-negative integers")
    echo(f"seeds = {json.dumps(seeds)} ({'file' if 'seeds' in raw else 'default'})")
    return Config(lm, ner, dict(paths), list(seeds), version)


def load_config(path, stream=sys.stderr) -> Config:
    """Read and validate a configuration file, echoing every effective value."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    echo = (lambda line: print(line, file=stream)) if stream is not None else None
    return config_from_dict(raw, echo)
