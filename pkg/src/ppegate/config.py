"""Config files (YAML or JSON) with ``GATE_`` environment overrides."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import yaml

from ppegate.classes import PpeClass
from ppegate.gate import GatePolicy
from ppegate.pipeline import PipelineConfig

ENV_PREFIX = "GATE_"
SECTIONS = ("policy", "pipeline", "server")


class ConfigError(ValueError):
    pass


@dataclass
class ServerConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    # directory for the service's log and audit files; nothing else is written
    data_dir: Optional[str] = None


@dataclass
class AppConfig:
    policy: GatePolicy = field(default_factory=GatePolicy)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    server: ServerConfig = field(default_factory=ServerConfig)
    raw: Dict[str, Any] = field(default_factory=dict)


def read_config_file(path: "str | Path | None") -> Dict[str, Any]:
    if path is None:
        return {}
    p = Path(path)
    try:
        doc = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"bad config {p}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {p} must be a mapping")
    # relative backend paths resolve against the config file's directory
    pipe = doc.get("pipeline") or {}
    for key in ("person_backend", "ppe_backend"):
        spec = pipe.get(key)
        if isinstance(spec, str) and ":" in spec:
            kind, _, arg = spec.partition(":")
            parts = [str((p.parent / a).resolve()) if a and not Path(a).is_absolute() else a for a in arg.split(",")]
            pipe[key] = f"{kind}:{','.join(parts)}"
    return doc


def apply_env_overrides(doc: Dict[str, Any], environ: Optional[Mapping[str, str]] = None) -> Dict[str, Any]:
    """Apply ``GATE_<SECTION>_<KEY>`` variables; ``__`` separates nested keys.

    ``GATE_POLICY_FRAMES_REQUIRED=3`` or ``GATE_PIPELINE_FUSION__N=5``. Values
    are parsed as YAML scalars.
    """
    environ = os.environ if environ is None else environ
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in doc.items()}
    for name, value in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        section, _, key = rest.partition("_")
        if section not in SECTIONS or not key:
            continue
        target = out.setdefault(section, {})
        parts = key.split("__")
        for part in parts[:-1]:
            target = target.setdefault(part, {})
        target[parts[-1]] = yaml.safe_load(value)
    return out


def policy_from_mapping(doc: Mapping) -> GatePolicy:
    doc = dict(doc or {})
    kwargs: Dict[str, Any] = {}
    if "required_classes" in doc:
        kwargs["required_classes"] = frozenset(PpeClass.parse(c) for c in doc.pop("required_classes"))
    for key, conv in (
        ("frames_required", int),
        ("check_timeout", float),
        ("allow_anonymous", bool),
        ("cooldown", float),
    ):
        if key in doc:
            kwargs[key] = conv(doc.pop(key))
    if doc:
        raise ConfigError(f"unknown policy keys: {', '.join(sorted(doc))}")
    return GatePolicy(**kwargs)


def load_config(path: "str | Path | None" = None, environ: Optional[Mapping[str, str]] = None) -> AppConfig:
    doc = apply_env_overrides(read_config_file(path), environ)
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(sorted(unknown))}")
    try:
        policy = policy_from_mapping(doc.get("policy") or {})
        pipeline = PipelineConfig.from_mapping(doc.get("pipeline") or {})
        server = ServerConfig(**(doc.get("server") or {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return AppConfig(policy, pipeline, server, doc)
