"""Run-config files: INI sections mapped 1:1 onto :class:`RunConfig`.

``[run]`` holds the top-level RunConfig fields, ``[agent]`` the AgentConfig
fields and ``[corruption]`` the sensor corruption fields. Unknown sections or
keys are rejected so typos don't silently fall back to defaults.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
from pathlib import Path
from typing import Any, Mapping, Optional, Union

from .depth_sensor import CorruptionConfig
from .errors import ConfigError
from .qagent import AgentConfig
from .trainer import RunConfig

DEFAULT_CONFIG = Path(__file__).parent / "default.config"

_SECTIONS = {"run": RunConfig, "agent": AgentConfig, "corruption": CorruptionConfig}
_NESTED = {"agent", "corruption"}


def _scalar_fields(cls) -> dict:
    return {f.name: f for f in dataclasses.fields(cls) if f.name not in _NESTED}


def _coerce(cls, key: str, raw: str) -> Any:
    f = _scalar_fields(cls)[key]
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"[{cls.__name__}] {key}: cannot parse {raw!r} as {kind}") from None
    return raw.strip()


def parse_config(text: str, source: str = "<config>") -> dict:
    """Parse INI text into a nested override dict (only keys present in the file)."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    out: dict = {}
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]; expected one of {sorted(_SECTIONS)}")
        cls = _SECTIONS[section]
        known = _scalar_fields(cls)
        values = {}
        for key, raw in cp.items(section):
            if key not in known:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            values[key] = _coerce(cls, key, raw)
        out[section] = values
    return out


def build_config(overrides: Optional[Mapping] = None, base: Optional[RunConfig] = None) -> RunConfig:
    """Apply nested overrides (``{"run": {...}, "agent": {...}, ...}``) on top of ``base``."""
    base = base or RunConfig()
    overrides = overrides or {}
    try:
        agent = dataclasses.replace(base.agent, **overrides.get("agent", {}))
        corruption = dataclasses.replace(base.corruption, **overrides.get("corruption", {}))
        return dataclasses.replace(base, agent=agent, corruption=corruption, **overrides.get("run", {}))
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: Union[str, Path, None] = None, overrides: Optional[Mapping] = None) -> RunConfig:
    """Defaults < file < ``overrides``."""
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
        cfg = build_config(parse_config(text, str(path)), cfg)
    return build_config(overrides, cfg)


def dump_config(cfg: RunConfig) -> str:
    """Serialize every field, so the output fully determines the run."""
    cp = configparser.ConfigParser(interpolation=None)
    sections = {"run": cfg, "agent": cfg.agent, "corruption": cfg.corruption}
    for name, obj in sections.items():
        cp[name] = {k: _fmt(getattr(obj, k)) for k in _scalar_fields(type(obj))}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)
