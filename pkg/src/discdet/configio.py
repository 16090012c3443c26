"""Plain-text configuration files and run manifests.

A config file is a flat key=value document. Keys use dotted prefixes to pick
the consumer dataclass: scene.* fields build a SceneConfig, train.* fields a
TrainConfig. Values are parsed by the declared field type; pairs of integers
or floats (proposal count ranges, size ranges) are written "lo,hi". Blank
lines and lines starting with # are ignored.

Every command writes a RunManifest next to its outputs. The manifest records
the command, the effective config after flag overrides, the artifact paths,
and a hash of the canonical config text, so a run can be reproduced from the
manifest alone and two output directories can be compared by hash. The hash
is sha256 over the sorted key=value rendering; equal hashes mean equal
effective configs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from typing import Dict, Optional, Tuple

from .core import ContractViolation
from .synthdata import SceneConfig
from .trainer import TrainConfig

SCENE_PREFIX = "scene."
TRAIN_PREFIX = "train."


def parse_kv_text(text: str) -> Dict[str, str]:
    """key=value lines to a dict; errors name the offending line."""
    out: Dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ContractViolation(f"config line {n}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if not key:
            raise ContractViolation(f"config line {n}: empty key")
        if key in out:
            raise ContractViolation(f"config line {n}: duplicate key {key}")
        out[key] = value
    return out


def format_kv(mapping: Dict[str, str]) -> str:
    """Canonical rendering: sorted keys, one pair per line."""
    return "".join(f"{k}={mapping[k]}\n" for k in sorted(mapping))


def config_hash(mapping: Dict[str, str]) -> str:
    return hashlib.sha256(format_kv(mapping).encode("utf-8")).hexdigest()


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# config dataclasses use postponed annotations, so field types arrive as text
_SCALARS = {"int": int, "float": float, "bool": bool}
_PAIRS = {"Tuple[int, int]": int, "Tuple[float, float]": float}


def _parse(text: str, ftype: str, key: str):
    try:
        if ftype == "bool":
            if text not in ("true", "false"):
                raise ValueError(text)
            return text == "true"
        if ftype in _SCALARS:
            return _SCALARS[ftype](text)
        if ftype in _PAIRS:
            lo, hi = (p.strip() for p in text.split(","))
            return (_PAIRS[ftype](lo), _PAIRS[ftype](hi))
    except (ValueError, TypeError):
        raise ContractViolation(f"config field {key}: cannot parse {text!r}") from None
    raise ContractViolation(f"config field {key}: unsupported type {ftype}")


def dataclass_kv(instance, prefix: str) -> Dict[str, str]:
    """Flatten a config dataclass into prefixed key=value strings."""
    return {prefix + f.name: _render(getattr(instance, f.name))
            for f in dataclasses.fields(instance)}


def _build(cls, prefix: str, mapping: Dict[str, str]):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, text in mapping.items():
        if not key.startswith(prefix):
            continue
        name = key[len(prefix):]
        if name not in fields:
            raise ContractViolation(f"unknown config field {key}")
        kwargs[name] = _parse(text, fields[name].type, key)
    return cls(**kwargs)


def scene_config(mapping: Dict[str, str]) -> SceneConfig:
    return _build(SceneConfig, SCENE_PREFIX, mapping)


def train_config(mapping: Dict[str, str]) -> TrainConfig:
    return _build(TrainConfig, TRAIN_PREFIX, mapping)


def default_mapping() -> Dict[str, str]:
    """The full default config as written by `discdet gen-data --dump-config`."""
    out = dataclass_kv(SceneConfig(), SCENE_PREFIX)
    out.update(dataclass_kv(TrainConfig(), TRAIN_PREFIX))
    return out


def load_config(path: Optional[str], overrides: Optional[Dict[str, str]] = None
                ) -> Dict[str, str]:
    """Defaults, file values, then flag overrides, later layers winning."""
    mapping = default_mapping()
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            mapping.update(parse_kv_text(fh.read()))
    if overrides:
        for key in overrides:
            if key not in mapping:
                raise ContractViolation(f"unknown config field {key}")
        mapping.update(overrides)
    # validate both dataclasses eagerly so bad values fail before any output
    scene_config(mapping)
    train_config(mapping)
    return mapping


@dataclasses.dataclass(frozen=True)
class RunManifest:
    """How one output directory was produced."""

    command: str
    config: Dict[str, str]
    config_sha256: str
    artifacts: Tuple[str, ...]
    started_unix: float
    finished_unix: float

    def to_json(self) -> str:
        body = dataclasses.asdict(self)
        body["artifacts"] = list(self.artifacts)
        return json.dumps(body, indent=2, sort_keys=True) + "\n"


def write_manifest(path: str, command: str, mapping: Dict[str, str],
                   artifacts, started: float) -> RunManifest:
    manifest = RunManifest(command, dict(mapping), config_hash(mapping),
                           tuple(artifacts), started, time.time())
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(manifest.to_json())
    return manifest


def load_manifest(path: str) -> RunManifest:
    with open(path, "r", encoding="utf-8") as fh:
        body = json.load(fh)
    return RunManifest(body["command"], dict(body["config"]), body["config_sha256"],
                       tuple(body["artifacts"]), body["started_unix"],
                       body["finished_unix"])
