"""Run configuration: a YAML file with fixed sections and strict keys.

Unknown keys, wrong types and non-positive numbers are rejected before any
computation, with the offending key path and its line in the file.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Any

import yaml

__all__ = ["ConfigError", "RunConfig", "DEFAULTS", "load_config", "parse_config"]

COMMANDS = ("cell", "interface", "decay", "convergence", "all")


class ConfigError(ValueError):
    """Malformed configuration; the message names the key and the line."""


_NUM = (int, float)

# key -> type (or nested dict); every numeric leaf must be positive unless listed in _NONNEG
SCHEMA: dict[str, Any] = {
    "command": str,
    "dimension": int,
    "seed": int,
    "field": {
        "preset": str,
        "plus": {"preset": str, "a": list, "b": list},
        "minus": {"preset": str, "a": list, "b": list},
    },
    "cell": {"n": int, "phi_method": str, "duality_samples": int},
    "interface": {"n": int, "R": _NUM, "q_plus": _NUM, "R_check": _NUM, "strict_max_principle": bool},
    "convergence": {"n_cell": int, "R": _NUM, "eps": list, "collar": _NUM, "min_cells": int},
    "tolerances": {"cell": _NUM, "slab": _NUM, "linear": _NUM},
    "budget": {"max_seconds": _NUM, "max_unknowns": int},
    "output": {"dir": str, "fields": bool, "format": str},
}
_NONNEG = {("seed",)}

DEFAULTS: dict[str, Any] = {
    "dimension": 2,
    "seed": 0,
    "field": {},
    "cell": {"n": 64, "phi_method": "poisson", "duality_samples": 20},
    "interface": {"n": 64, "R": 8, "q_plus": 1.0, "R_check": 12, "strict_max_principle": False},
    "convergence": {"n_cell": 16, "R": 8, "eps": [0.125, 0.0625, 0.03125], "collar": 0.125, "min_cells": 8},
    "tolerances": {"cell": 1e-13, "slab": 1e-13, "linear": 1e-10},
    "budget": {"max_seconds": 600, "max_unknowns": 2_000_000},
    "output": {"dir": "out", "fields": False, "format": "csv"},
}


@dataclass
class RunConfig:
    data: dict
    path: str | None = None

    def __getitem__(self, key):
        return self.data[key]

    @property
    def command(self) -> str | None:
        return self.data.get("command")

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)


def _line(node) -> int:
    return node.start_mark.line + 1


def _check(node: yaml.Node, schema, path: tuple[str, ...]):
    if not isinstance(node, yaml.MappingNode):
        raise ConfigError(f"{'.'.join(path) or '<root>'} (line {_line(node)}): expected a mapping")
    seen = set()
    for knode, vnode in node.value:
        key = knode.value
        kp = path + (key,)
        name = ".".join(kp)
        if key in seen:
            raise ConfigError(f"duplicate key '{name}' (line {_line(knode)})")
        seen.add(key)
        if key not in schema:
            raise ConfigError(f"unknown key '{name}' (line {_line(knode)}); allowed: {sorted(schema)}")
        sub = schema[key]
        if isinstance(sub, dict):
            _check(vnode, sub, kp)


def _validate_values(data, schema, path, lines):
    for key, val in data.items():
        kp = path + (key,)
        name = ".".join(kp)
        sub = schema[key]
        where = f" (line {lines.get(kp)})" if kp in lines else ""
        if isinstance(sub, dict):
            _validate_values(val, sub, kp, lines)
            continue
        if sub is bool or sub is str or sub is list:
            if not isinstance(val, sub):
                raise ConfigError(f"'{name}'{where}: expected {sub.__name__}, got {type(val).__name__}")
            continue
        if isinstance(val, bool) or not isinstance(val, sub):
            tname = sub.__name__ if isinstance(sub, type) else "number"
            raise ConfigError(f"'{name}'{where}: expected {tname}, got {type(val).__name__}")
        if kp in _NONNEG:
            if val < 0:
                raise ConfigError(f"'{name}'{where}: must be non-negative, got {val}")
        elif val <= 0:
            raise ConfigError(f"'{name}'{where}: must be positive, got {val}")


def _lines(node, path=()):
    out = {}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            kp = path + (k.value,)
            out[kp] = _line(k)
            out.update(_lines(v, kp))
    return out


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_config(text: str, path: str | None = None) -> RunConfig:
    """Parse and validate a YAML config string."""
    try:
        node = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    if node is None:
        raw, node = {}, yaml.compose("{}")
    _check(node, SCHEMA, ())
    lines = _lines(node)
    data = _merge(DEFAULTS, raw)
    _validate_values(raw, SCHEMA, (), lines)
    if data.get("command") is not None and data["command"] not in COMMANDS:
        raise ConfigError(f"'command' (line {lines.get(('command',))}): must be one of {COMMANDS}")
    fld = data["field"]
    if "preset" in fld and ("plus" in fld or "minus" in fld):
        raise ConfigError("'field': give either 'preset' or 'plus'/'minus', not both")
    if "preset" not in fld and not ("plus" in fld and "minus" in fld):
        raise ConfigError("'field': a two-sided 'preset' or both 'plus' and 'minus' are required")
    for side in ("plus", "minus"):
        if side in fld:
            s = fld[side]
            if ("preset" in s) == ("a" in s or "b" in s):
                raise ConfigError(f"'field.{side}' (line {lines.get(('field', side))}): give either 'preset' or both 'a' and 'b'")
            if "preset" not in s and not ("a" in s and "b" in s):
                raise ConfigError(f"'field.{side}' (line {lines.get(('field', side))}): both 'a' and 'b' are required")
    eps = data["convergence"]["eps"]
    if not all(isinstance(e, _NUM) and not isinstance(e, bool) and e > 0 for e in eps):
        raise ConfigError("'convergence.eps': must be a list of positive numbers")
    itf = data["interface"]
    if itf["R"] <= 4 or itf["R_check"] <= 4:
        raise ConfigError("'interface.R' and 'interface.R_check' must exceed 4 so the decay window [2, R-2] is non-empty")
    if data["convergence"]["R"] <= 2:
        raise ConfigError("'convergence.R' must exceed 2 (the slab must contain the interface strip)")
    if data["cell"]["phi_method"] not in ("poisson", "stream"):
        raise ConfigError("'cell.phi_method': must be 'poisson' or 'stream'")
    if data["output"]["format"] not in ("csv", "binary"):
        raise ConfigError("'output.format': must be 'csv' or 'binary'")
    return RunConfig(data, path)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read(), str(path))
