"""Grid configuration files.

Grammar: INI-style sections of ``key = value`` lines, ``#`` or ``;`` comments.

``[defaults]``
    scalar settings shared by every cell (any SimConfig field; ``lambda`` is
    accepted for ``lam``). ``seed`` is the base seed from which each cell's
    own seed is derived.
``[grid]`` / ``[grid <name>]``
    comma-separated levels; the cells are the Cartesian product of the levels.
``[cell <name>]``
    one extra cell: the defaults overridden by the section's values.

Example::

    [defaults]
    n1 = 300
    replications = 200
    seed = 20240101

    [grid]
    f = normal, t7
    P = 3, 6
    b = 0, 0.5, 1

    [cell exp]
    g = exp
    b = 0.5
"""

from __future__ import annotations

import configparser
import itertools
from dataclasses import fields, replace

from .simulation import SimConfig, with_derived_seed

_ALIASES = {"lambda": "lam", "sigma2": "sigma2sq", "sigma3": "sigma3sq"}
_TYPES = {f.name: f.type for f in fields(SimConfig)}


class ConfigError(ValueError):
    pass


def _coerce(key: str, text: str):
    typ = _TYPES[key]
    text = text.strip()
    try:
        if key == "estimators":
            return tuple(s.strip() for s in text.replace(";", ",").split(",") if s.strip())
        if typ == "int":
            return int(float(text)) if float(text).is_integer() else int(text)
        if typ == "float":
            return float(text)
        if typ == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key}") from None


def _key(raw: str) -> str:
    key = _ALIASES.get(raw, raw)
    if key not in _TYPES:
        raise ConfigError(f"unknown setting {raw!r}")
    return key


def parse_grid(text: str, *, seed: int | None = None) -> list[SimConfig]:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None

    defaults = {}
    if parser.has_section("defaults"):
        defaults = {_key(k): _coerce(_key(k), v) for k, v in parser.items("defaults")}
    base_seed = defaults.pop("seed", 0) if seed is None else seed
    defaults.pop("seed", None)

    cells = []
    for section in parser.sections():
        head = section.split(None, 1)[0]
        if head == "defaults":
            continue
        if head == "grid":
            levels = {}
            for k, v in parser.items(section):
                key = _key(k)
                if key == "estimators":
                    levels[key] = [_coerce(key, v)]
                else:
                    levels[key] = [_coerce(key, s) for s in v.split(",") if s.strip()]
            keys = list(levels)
            for combo in itertools.product(*(levels[k] for k in keys)):
                cells.append({**defaults, **dict(zip(keys, combo))})
        elif head == "cell":
            cells.append({**defaults, **{_key(k): _coerce(_key(k), v) for k, v in parser.items(section)}})
        else:
            raise ConfigError(f"unknown section [{section}]")
    if not cells:
        raise ConfigError("configuration defines no cells")
    try:
        return [with_derived_seed(SimConfig(**c), base_seed) for c in cells]
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_grid(path, *, seed: int | None = None) -> list[SimConfig]:
    with open(path) as fh:
        return parse_grid(fh.read(), seed=seed)


def desk_grid(replications: int = 200, seed: int = 20240607, n1: int = 300) -> list[SimConfig]:
    """Stratified desk-scale grid: f x P x gamma x b x theta with g = identity, plus one exp cell."""
    base = SimConfig(n1=n1, replications=replications)
    cells = [
        replace(base, f=f, P=P, gamma=gamma, b=b, theta=theta)
        for f in ("normal", "t7")
        for P in (3, 6)
        for gamma in (1.0, 2.0)
        for b in (0.0, 0.5, 1.0)
        for theta in (0.5, 1.0)
    ]
    cells.append(replace(base, f="normal", g="exp", P=3, gamma=1.0, b=0.5, theta=0.5))
    return [with_derived_seed(c, seed) for c in cells]
