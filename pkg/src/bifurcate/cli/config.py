"""Layered run configuration: profile defaults, an optional user file, then ``--set`` overrides.

The profile tree doubles as the schema: user keys must already exist there and
values must have a compatible type.
"""
from __future__ import annotations

import copy
from importlib import resources
from typing import Any

import yaml

from ..errors import ConfigError

PROFILES = ("desk", "paper")


def load_profile(name: str) -> dict:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose one of {', '.join(PROFILES)}")
    text = resources.files("bifurcate.cli").joinpath("configs", f"{name}.yaml").read_text()
    return yaml.safe_load(text)


def _coerce(value: Any, default: Any, path: str) -> Any:
    if default is None:
        return value
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, list):
        if isinstance(value, list):
            if default:
                return [_coerce(v, default[0], f"{path}[{i}]") for i, v in enumerate(value)]
            return value
    elif isinstance(default, dict):
        if isinstance(value, dict):
            return merge(default, value, path)
    raise ConfigError(f"{path}: expected {type(default).__name__}, got {value!r}")


def merge(base: dict, overlay: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in overlay.items():
        path = f"{prefix}.{key}" if prefix else str(key)
        if key not in base:
            raise ConfigError(f"{path}: unknown key (known: {', '.join(sorted(map(str, base))) or 'none'})")
        out[key] = _coerce(value, base[key], path)
    return out


def parse_override(item: str) -> tuple[list[str], Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    if not key:
        raise ConfigError(f"override {item!r} has an empty key")
    return key.split("."), yaml.safe_load(raw) if raw else ""


def nest(path: list[str], value: Any) -> dict:
    out: Any = value
    for k in reversed(path):
        out = {k: out}
    return out


def resolve(subcommand: str, profile: str = "desk", config_file: str | None = None,
            overrides: list[str] | None = None) -> dict:
    """Resolved config tree for ``subcommand``."""
    tree = load_profile(profile)
    if subcommand not in tree:
        raise ConfigError(f"no configuration schema for {subcommand!r}")
    cfg = tree[subcommand]
    if config_file:
        try:
            with open(config_file) as fh:
                user = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_file}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"{config_file}: not valid YAML ({exc})") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{config_file}: top level must be a mapping")
        # a file may hold one subcommand's section or the whole tree
        if subcommand in user and isinstance(user[subcommand], dict):
            user = user[subcommand]
        cfg = merge(cfg, user)
    for item in overrides or []:
        path, value = parse_override(item)
        cfg = merge(cfg, nest(path, value))
    return cfg


def dump(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=False)
