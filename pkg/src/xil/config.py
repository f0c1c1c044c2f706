"""Hierarchical YAML run configuration with ``a.b.c=value`` overrides.

Grammar: a YAML 1.1 document (PyYAML safe loader) whose top level is a
mapping. Overrides are applied left to right; each path must name an existing
leaf and the new value (parsed as a YAML scalar or flow collection) must have
the leaf's type. Integers may replace floats; ``null`` leaves accept anything.
"""
from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path

import yaml


class ConfigParseError(ValueError):
    pass


class ConfigOverrideError(ValueError):
    pass


def default_config_path(name: str = "default") -> Path:
    return Path(str(resources.files("xil") / "configs" / f"{name}.yaml"))


def load_yaml(text: str, source: str = "<config>") -> dict:
    try:
        tree = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        problem = getattr(e, "problem", None) or str(e)
        raise ConfigParseError(f"{source}: parse error at {where}: {problem}") from None
    if tree is None:
        tree = {}
    if not isinstance(tree, dict):
        raise ConfigParseError(f"{source}: top level must be a mapping, got {type(tree).__name__}")
    return tree


def _type_name(v) -> str:
    return "null" if v is None else type(v).__name__


def _coerce(path: str, old, new):
    if old is None:
        return new
    if isinstance(old, float) and isinstance(new, str):
        # YAML 1.1 reads exponent forms without a dot ("1e-08") as strings
        try:
            new = float(new)
        except ValueError:
            pass
    if isinstance(old, bool) or isinstance(new, bool):
        if isinstance(old, bool) and isinstance(new, bool):
            return new
    elif isinstance(old, float) and isinstance(new, (int, float)):
        return float(new)
    elif isinstance(old, int) and isinstance(new, int):
        return new
    elif isinstance(old, str) and isinstance(new, str):
        return new
    elif isinstance(old, list) and isinstance(new, list):
        return new
    elif isinstance(old, dict) and isinstance(new, dict):
        return new
    raise ConfigOverrideError(
        f"override {path}: expected {_type_name(old)}, got {_type_name(new)} ({new!r})")


def apply_override(tree: dict, item: str) -> None:
    """Apply one ``dotted.path=value`` override in place."""
    if "=" not in item:
        raise ConfigOverrideError(f"override {item!r} must look like key.path=value")
    path, raw = item.split("=", 1)
    keys = path.strip().split(".")
    if not all(keys):
        raise ConfigOverrideError(f"override {item!r}: empty path component")
    node = tree
    for i, k in enumerate(keys[:-1]):
        if not isinstance(node, dict) or k not in node:
            raise ConfigOverrideError(f"unknown config path {'.'.join(keys[:i + 1])!r} (in override {path!r})")
        node = node[k]
    leaf = keys[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigOverrideError(f"unknown config path {path!r}")
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError:
        value = raw
    node[leaf] = _coerce(path, node[leaf], value)


def read_yaml_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigParseError(f"cannot read config {path}: {e.strerror}") from None
    return load_yaml(text, str(path))


def parse_config(file=None, overrides=(), base=None) -> dict:
    """Deep-merge ``file`` over ``base`` (default: the packaged defaults), then
    apply ``overrides`` in order. Keys absent from ``base`` are rejected."""
    tree = read_yaml_file(default_config_path()) if base is None else copy.deepcopy(base)
    if file is not None:
        tree = merge(tree, read_yaml_file(file), strict=True)
    for item in overrides:
        apply_override(tree, item)
    return tree


def merge(base: dict, extra: dict, strict: bool = False, _prefix: str = "") -> dict:
    """Deep merge; values from ``extra`` win. With ``strict``, every key of
    ``extra`` must exist in ``base`` and leaves must keep their type."""
    out = copy.deepcopy(base)
    for k, v in extra.items():
        path = f"{_prefix}{k}"
        if strict and k not in out:
            raise ConfigOverrideError(f"unknown config path {path!r}")
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v, strict, path + ".")
        else:
            out[k] = _coerce(path, out[k], copy.deepcopy(v)) if strict else copy.deepcopy(v)
    return out


def config_hash(tree: dict, n: int = 10) -> str:
    blob = json.dumps(tree, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:n]


def dump(tree: dict) -> str:
    return yaml.safe_dump(tree, sort_keys=False, default_flow_style=None)
