"""TOML run configuration: schema, validation and canonical hashing."""

from __future__ import annotations

import copy
import difflib
import hashlib
import json
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .bath import BathModel, FlatDensity, OhmicDensity, TabulatedDensity, asymmetric_table
from .lattice import CouplingGraph, build_lattice, grid, path, ring


class ConfigError(ValueError):
    def __init__(self, message: str, key: str = "", line: int | None = None):
        where = f"{key}" + (f" (line {line})" if line else "")
        super().__init__(f"{where}: {message}" if where else message)
        self.key = key
        self.line = line


@dataclass(frozen=True)
class Field:
    kind: type | tuple[type, ...]
    default: Any
    check: Callable[[Any], bool] | None = None
    rule: str = ""


def _positive(x):
    return x > 0


def _finite(x):
    return math.isfinite(x)


_NUM = (int, float)

SCHEMA: dict = {
    "lattice": {
        "topology": Field(str, "ring", lambda v: v in ("ring", "path", "grid", "explicit"),
                          "one of ring, path, grid, explicit"),
        "dimension": Field(int, 1, lambda v: v >= 1, ">= 1"),
        "n_sites": Field(int, 4, lambda v: v >= 1, ">= 1"),
        "coupling_j": Field(_NUM, 1.0, _finite, "finite"),
        "shape": Field(list, [], lambda v: all(isinstance(k, int) and k >= 1 for k in v), "list of positive integers"),
        "periodic": Field(bool, False),
        "sites": Field(list, [], lambda v: all(isinstance(x, (int, list)) for x in v), "list of site labels"),
    },
    "bath": {
        "beta": Field(_NUM, 1.0, lambda v: v > 0 and math.isfinite(v), "> 0 and finite"),
        "mu": Field(_NUM, 0.0, _finite, "finite, below the spectral support"),
        "spectral": Field(str, "flat", lambda v: v in ("flat", "ohmic", "table", "asymmetric"),
                          "one of flat, ohmic, table, asymmetric"),
        "null_tol": Field(_NUM, 1e-12, lambda v: v >= 0, ">= 0"),
        "include_null_pv": Field(bool, False),
        "flat": {
            "height": Field(_NUM, 1.0, _positive, "> 0"),
            "lower": Field(_NUM, 0.5, lambda v: v >= 0, ">= 0"),
            "cutoff": Field(_NUM, 10.0, _positive, "> 0"),
        },
        "ohmic": {
            "eta": Field(_NUM, 0.1, _positive, "> 0"),
            "cutoff": Field(_NUM, 5.0, _positive, "> 0"),
        },
        "table": {
            "path": Field(str, ""),
        },
        "pv": {
            "epsilon": Field(_NUM, 0.0, lambda v: v >= 0, ">= 0 (0 selects 1e-3 of the support width)"),
            "panels": Field(int, 4096, lambda v: v >= 16, ">= 16"),
        },
    },
    "dynamics": {
        "t_final": Field(_NUM, 5.0, lambda v: v >= 0, ">= 0"),
        "n_grid": Field(int, 51, lambda v: v >= 1, ">= 1"),
        "tol": Field(_NUM, 1e-9, _positive, "> 0"),
        "initial": Field(str, "all_up"),
        "observables": Field(list, ["magnetization:0", "magnetization", "nn_corr", "energy"],
                             lambda v: all(isinstance(s, str) for s in v), "list of strings"),
    },
    "trajectories": {
        "n_traj": Field(int, 1000, lambda v: v >= 1, ">= 1"),
        "seed": Field(int, 0, lambda v: 0 <= v < 2**64, "unsigned 64-bit"),
    },
    "kmc": {
        "n_sites": Field(int, 1000, lambda v: v >= 3, ">= 3"),
        "t_final": Field(_NUM, 10.0, lambda v: v >= 0, ">= 0"),
        "n_grid": Field(int, 101, lambda v: v >= 1, ">= 1"),
        "seed": Field(int, 0, lambda v: 0 <= v < 2**64, "unsigned 64-bit"),
        "initial": Field(str, "all_up", lambda v: v in ("all_up", "all_down")
                         or re.fullmatch(r"random\(([0-9.eE+-]+)\)", v) is not None,
                         "all_up, all_down or random(p)"),
    },
    "verify": {
        "n_pairs": Field(int, 100, lambda v: v >= 1, ">= 1"),
        "seed": Field(int, 0, lambda v: 0 <= v < 2**64, "unsigned 64-bit"),
    },
    "output": {
        "dir": Field(str, "out"),
    },
}

COUPLING_FIELDS = {
    "r": Field((int, list), None),
    "s": Field((int, list), None),
    "j": Field(_NUM, None, _finite, "finite"),
}


def _key_lines(text: str) -> dict[str, int]:
    """Map dotted key paths to their (first) line numbers."""
    lines: dict[str, int] = {}
    counts: dict[str, int] = {}
    section = ""
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        m = re.fullmatch(r"\[\[\s*([A-Za-z0-9_.\-]+)\s*\]\]", line)
        if m:
            counts[m.group(1)] = counts.get(m.group(1), -1) + 1
            section = f"{m.group(1)}[{counts[m.group(1)]}]"
            lines.setdefault(section, no)
            continue
        m = re.fullmatch(r"\[\s*([A-Za-z0-9_.\-]+)\s*\]", line)
        if m:
            section = m.group(1)
            lines.setdefault(section, no)
            continue
        m = re.match(r"([A-Za-z0-9_.\-\"]+)\s*=", line)
        if m:
            key = m.group(1).strip('"')
            lines.setdefault(f"{section}.{key}" if section else key, no)
    return lines


def _suggest(word: str, options) -> str:
    close = difflib.get_close_matches(word, list(options), n=1)
    return f"; did you mean {close[0]!r}?" if close else ""


@dataclass(frozen=True)
class RunConfig:
    values: dict
    source: str = ""

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def echo(self) -> str:
        """All values, defaults included, as canonical JSON."""
        return json.dumps(self.values, sort_keys=True, indent=2)

    @property
    def hash(self) -> str:
        canonical = {k: v for k, v in self.values.items() if k != "output"}
        blob = json.dumps(canonical, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_seed(self, seed: int | None) -> RunConfig:
        if seed is None:
            return self
        if not 0 <= seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer", "--seed")
        values = copy.deepcopy(self.values)
        for section in ("trajectories", "kmc", "verify"):
            values[section]["seed"] = seed
        return RunConfig(values, self.source)

    def graph(self) -> CouplingGraph:
        lat = self["lattice"]
        topo, j = lat["topology"], lat["coupling_j"]
        if topo == "ring":
            return ring(lat["n_sites"], j)
        if topo == "path":
            return path(lat["n_sites"], j)
        if topo == "grid":
            return grid(lat["shape"], j, lat["periodic"])
        sites = [_label(x) for x in lat["sites"]] or [[i] for i in range(lat["n_sites"])]
        bonds = [(_label(c["r"]), _label(c["s"]), c["j"]) for c in self.values["coupling"]]
        return build_lattice(lat["dimension"], sites, bonds)

    def bath(self) -> BathModel:
        b = self["bath"]
        if b["spectral"] == "flat":
            f = b["flat"]
            density = FlatDensity(f["height"], f["cutoff"], f["lower"])
        elif b["spectral"] == "ohmic":
            density = OhmicDensity(b["ohmic"]["eta"], b["ohmic"]["cutoff"])
        elif b["spectral"] == "asymmetric":
            density = asymmetric_table()
        else:
            density = TabulatedDensity.from_csv(b["table"]["path"])
        return BathModel(
            b["beta"], b["mu"], density,
            pv_epsilon=b["pv"]["epsilon"] or None,
            pv_panels=b["pv"]["panels"],
            null_tol=b["null_tol"],
            include_null_pv=b["include_null_pv"],
        )


def _check_field(f: Field, value, key: str, lines: dict):
    kinds = f.kind if isinstance(f.kind, tuple) else (f.kind,)
    if isinstance(value, bool) and bool not in kinds or not isinstance(value, kinds):
        names = " or ".join(k.__name__ for k in kinds)
        raise ConfigError(f"expected {names}, got {type(value).__name__}", key, lines.get(key))
    if f.check is not None and not f.check(value):
        raise ConfigError(f"value {value!r} violates constraint: {f.rule}", key, lines.get(key))
    return float(value) if f.kind is _NUM else value


def _validate_table(given: dict, schema: dict, prefix: str, lines: dict) -> dict:
    out = {}
    for key, value in given.items():
        path_ = f"{prefix}.{key}" if prefix else key
        if key not in schema:
            raise ConfigError(f"unknown key{_suggest(key, schema)}", path_, lines.get(path_))
        spec = schema[key]
        if isinstance(spec, dict):
            if not isinstance(value, dict):
                raise ConfigError("expected a table", path_, lines.get(path_))
            out[key] = _validate_table(value, spec, path_, lines)
        else:
            out[key] = _check_field(spec, value, path_, lines)
    for key, spec in schema.items():
        if key not in out:
            out[key] = _validate_table({}, spec, f"{prefix}.{key}", lines) if isinstance(spec, dict) else copy.deepcopy(spec.default)
    return out


def validate(data: dict, text: str = "", source: str = "") -> RunConfig:
    lines = _key_lines(text)
    data = dict(data)
    couplings = data.pop("coupling", [])
    if not isinstance(couplings, list):
        raise ConfigError("expected an array of tables [[coupling]]", "coupling", lines.get("coupling"))
    values = _validate_table(data, SCHEMA, "", lines)
    values["coupling"] = []
    for k, entry in enumerate(couplings):
        where = f"coupling[{k}]"
        if not isinstance(entry, dict):
            raise ConfigError("expected a table", where, lines.get(where))
        row = {}
        for key, value in entry.items():
            if key not in COUPLING_FIELDS:
                raise ConfigError(f"unknown key{_suggest(key, COUPLING_FIELDS)}", f"{where}.{key}", lines.get(f"{where}.{key}"))
            row[key] = _check_field(COUPLING_FIELDS[key], value, f"{where}.{key}", lines)
        missing = set(COUPLING_FIELDS) - set(row)
        if missing:
            raise ConfigError(f"missing {', '.join(sorted(missing))}", where, lines.get(where))
        values["coupling"].append(row)
    _cross_checks(values, lines)
    return RunConfig(values, source)


def _label(x) -> list[int]:
    return [x] if isinstance(x, int) else list(x)


def _cross_checks(values: dict, lines: dict) -> None:
    lat, bath = values["lattice"], values["bath"]
    if lat["topology"] == "grid" and not lat["shape"]:
        raise ConfigError("grid lattices need a shape", "lattice.shape", lines.get("lattice.shape"))
    if lat["topology"] == "ring" and lat["n_sites"] < 3:
        raise ConfigError("a ring needs at least 3 sites", "lattice.n_sites", lines.get("lattice.n_sites"))
    if lat["topology"] != "explicit" and values["coupling"]:
        raise ConfigError("[[coupling]] entries require topology = \"explicit\"", "lattice.topology",
                          lines.get("lattice.topology"))
    if bath["spectral"] == "table" and not bath["table"]["path"]:
        raise ConfigError("tabulated density needs a path", "bath.table.path", lines.get("bath.table.path"))
    flat = bath["flat"]
    if bath["spectral"] == "flat" and flat["lower"] >= flat["cutoff"]:
        raise ConfigError("lower edge must lie below the cutoff", "bath.flat.lower", lines.get("bath.flat.lower"))
    lower = flat["lower"] if bath["spectral"] == "flat" else 0.0
    if bath["mu"] > 0 and bath["mu"] >= lower:
        raise ConfigError("mu must lie below the spectral support", "bath.mu", lines.get("bath.mu"))
    if bath["spectral"] == "flat" and lower == 0 and bath["mu"] == 0:
        raise ConfigError("a flat band reaching mu = 0 makes the Lamb shift diverge; set bath.flat.lower > 0 "
                          "or mu < 0", "bath.flat.lower", lines.get("bath.flat.lower"))


def parse_config(path: str | Path | None) -> RunConfig:
    """Read and validate a TOML file (``None`` gives the all-defaults config)."""
    if path is None:
        return validate({})
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except UnicodeDecodeError:
        raise ConfigError(f"config file {path} is not UTF-8") from None
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML syntax error: {exc}") from None
    return validate(data, text, str(path))
