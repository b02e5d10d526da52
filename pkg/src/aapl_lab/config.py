"""Strict JSON experiment configuration with dotted ``--set`` overrides."""
from __future__ import annotations

import copy
import json
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import __version__
from .data import SHIFTS, DatasetConfig, ShiftConfig
from .errors import ConfigError, VersionError
from .training import TrainConfig, WRSConfig

PROTOCOLS = ("base-to-new", "cross-dataset", "domain-shift")


def _default_targets() -> list[dict]:
    return [asdict(DatasetConfig(name="toy-b", family="b", class_id_offset=100, seed=1))]


def _default_shifts() -> list[dict]:
    return [{"name": "brightness", "magnitude": 0.2}, {"name": "contrast", "magnitude": 0.3}, {"name": "noise", "magnitude": 0.1}]


@dataclass
class ProfileConfig:
    n_points: int = 100
    seed: int = 0


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    split_seed: int = 0
    encoder_seed: int = 0
    protocol: str = "base-to-new"
    targets: list[DatasetConfig] = field(default_factory=lambda: [DatasetConfig(**t) for t in _default_targets()])
    shifts: list[ShiftConfig] = field(default_factory=lambda: [ShiftConfig(**s) for s in _default_shifts()])
    seeds: int = 1
    profile: ProfileConfig = field(default_factory=ProfileConfig)
    output_dir: str = "runs/default"
    tool_version: str = __version__

    def to_dict(self) -> dict:
        return asdict(self)


# --- schema ---------------------------------------------------------------------------
# Each entry maps a key to a type spec: a python type, a nested schema dict,
# ("list", spec), ("optional", spec) or ("map", spec).

_NUM = "number"


def _schema_of(cls) -> dict:
    defaults = cls()
    out = {}
    for f in fields(cls):
        out[f.name] = _spec_for(cls, f.name, getattr(defaults, f.name))
    return out


_OVERRIDES = {
    (TrainConfig, "aug_subset"): ("optional", ("list", str)),
    (TrainConfig, "aug_weights"): ("optional", ("map", _NUM)),
    (WRSConfig, "refresh"): ("optional", int),
}


def _spec_for(cls, name, default):
    if (cls, name) in _OVERRIDES:
        return _OVERRIDES[(cls, name)]
    if isinstance(default, bool):
        return bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return _NUM
    if isinstance(default, str):
        return str
    if isinstance(default, WRSConfig):
        return _schema_of(WRSConfig)
    raise TypeError(f"no schema for {cls.__name__}.{name}")  # pragma: no cover


SCHEMA = {
    "train": _schema_of(TrainConfig),
    "dataset": _schema_of(DatasetConfig),
    "split_seed": int,
    "encoder_seed": int,
    "protocol": str,
    "targets": ("list", _schema_of(DatasetConfig)),
    "shifts": ("list", {"name": str, "magnitude": _NUM}),
    "seeds": int,
    "profile": _schema_of(ProfileConfig),
    "output_dir": str,
    "tool_version": str,
}


def _key_line(text: str | None, path: list[str]) -> str:
    """Best-effort ``line N`` for a dotted key path in the source text."""
    if not text:
        return ""
    pos = 0
    for key in path:
        if not isinstance(key, str):
            continue
        m = re.compile(r'"' + re.escape(key) + r'"\s*:').search(text, pos)
        if m is None:
            return ""
        pos = m.start()
    return f"line {text.count(chr(10), 0, pos) + 1}: "


def _type_name(spec) -> str:
    if isinstance(spec, dict):
        return "object"
    if isinstance(spec, tuple):
        return f"{spec[0]} of {_type_name(spec[1])}" if spec[0] != "optional" else f"{_type_name(spec[1])} or null"
    return "number" if spec == _NUM else spec.__name__


def _check(value, spec, path: list, text: str | None, source: str):
    where = f"{source}:{_key_line(text, path)}" if text else f"{source}: "
    dotted = ".".join(str(p) for p in path)
    if where.endswith(":"):
        where += " "

    def fail(msg):
        raise ConfigError(f"{where}{dotted}: {msg}")

    if isinstance(spec, dict):
        if not isinstance(value, dict):
            fail("expected an object")
        for k, v in value.items():
            if k not in spec:
                loc = f"{source}:{_key_line(text, path + [k])}" if text else f"{source}: "
                raise ConfigError(f"{loc}unknown key '{'.'.join(map(str, path + [k]))}'")
            _check(v, spec[k], path + [k], text, source)
        return
    if isinstance(spec, tuple):
        kind, inner = spec
        if kind == "optional":
            if value is not None:
                _check(value, inner, path, text, source)
        elif kind == "list":
            if not isinstance(value, list):
                fail(f"expected {_type_name(spec)}")
            for i, v in enumerate(value):
                _check(v, inner, path + [i], text, source)
        elif kind == "map":
            if not isinstance(value, dict):
                fail(f"expected {_type_name(spec)}")
            for k, v in value.items():
                _check(v, inner, path + [k], text, source)
        return
    if spec == _NUM:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif spec is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, spec)
    if not ok:
        fail(f"expected {_type_name(spec)}, got {json.dumps(value)}")


def _deep_merge(base: dict, patch: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in patch.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("aug_weights",):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_key(key: str) -> list[str]:
    """Dotted override key to a config path; bare training keys resolve into ``train``."""
    parts = key.split(".")
    if not all(parts):
        raise ConfigError(f"--set {key}: malformed key")
    if parts[0] not in SCHEMA and parts[0] in SCHEMA["train"]:
        parts = ["train", *parts]
    spec = SCHEMA
    for i, p in enumerate(parts):
        if not isinstance(spec, dict) or p not in spec:
            raise ConfigError(f"--set {key}: unknown key '{'.'.join(parts[: i + 1])}'")
        spec = spec[p]
    return parts


def parse_value(raw: str):
    """JSON literal if it parses, otherwise the raw string."""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    doc = copy.deepcopy(doc)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set {item}: expected key=value")
        key, raw = item.split("=", 1)
        path = resolve_key(key.strip())
        node = doc
        for p in path[:-1]:
            node = node.setdefault(p, {})
        node[path[-1]] = parse_value(raw)
        _check(node[path[-1]], _spec_at(path), path, None, f"--set {item}")
    return doc


def _spec_at(path: list[str]):
    spec = SCHEMA
    for p in path:
        spec = spec[p]
    return spec


def build(doc: dict, source: str = "<config>", text: str | None = None) -> ExperimentConfig:
    """Validate a raw document against the schema and construct the config."""
    _check(doc, SCHEMA, [], text, source)
    full = _deep_merge(ExperimentConfig().to_dict(), doc)
    if full["tool_version"] != __version__:
        raise VersionError(f"{source}: config written by version {full['tool_version']}, this is {__version__}")
    if full["protocol"] not in PROTOCOLS:
        raise ConfigError(f"{source}:{_key_line(text, ['protocol'])}protocol must be one of {PROTOCOLS}")
    for s in full["shifts"]:
        if s.get("name") not in SHIFTS or "magnitude" not in s:
            raise ConfigError(f"{source}:{_key_line(text, ['shifts'])}each shift needs a name in {SHIFTS} and a magnitude")
    if full["seeds"] < 1:
        raise ConfigError(f"{source}:{_key_line(text, ['seeds'])}seeds must be >= 1")
    try:
        return ExperimentConfig(
            train=TrainConfig(**full["train"]),
            dataset=DatasetConfig(**full["dataset"]),
            split_seed=full["split_seed"],
            encoder_seed=full["encoder_seed"],
            protocol=full["protocol"],
            targets=[DatasetConfig(**t) for t in full["targets"]],
            shifts=[ShiftConfig(**s) for s in full["shifts"]],
            seeds=full["seeds"],
            profile=ProfileConfig(**full["profile"]),
            output_dir=full["output_dir"],
            tool_version=full["tool_version"],
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}:{_blame(text, doc, str(exc))}{exc}") from None


def _blame(text: str | None, doc: dict, msg: str) -> str:
    # point a constructor-level error at the first key it names that the file sets
    for section in ("train", "dataset", "profile"):
        for key in doc.get(section, {}) if isinstance(doc.get(section), dict) else ():
            if re.search(rf"\b{re.escape(key)}\b", msg):
                return _key_line(text, [section, key]) or " "
    return " "


def load(path=None, overrides: list[str] = ()) -> ExperimentConfig:
    """Parse ``path`` (or start from defaults), apply overrides, validate."""
    text = None
    source = "<defaults>"
    doc: dict = {}
    if path is not None:
        source = str(path)
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"{source}: cannot read config ({exc.strerror})") from None
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}:line {exc.lineno} col {exc.colno}: invalid JSON ({exc.msg})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{source}:line 1: top level must be an object")
        _check(doc, SCHEMA, [], text, source)
    doc = apply_overrides(doc, list(overrides))
    return build(doc, source, text)


def dumps(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n"
