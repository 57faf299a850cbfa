"""Run configuration: one JSON document, validated before any compute starts.

Example::

    {
      "kernel": {"type": "sum_power", "lambda": 0.0, "k": 1.0},
      "source": {"family": "indicator", "c": 1.0, "a": 1.0, "b": 2.0},
      "grid": {"x_min": 1e-3, "x_max": 1e6, "bins_per_decade": 16},
      "evolution": {"deltas": [0.1, 0.01, 0.001]},
      "diagnostics": {},
      "seed": 0
    }
"""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

from coag_errors import CoagError, ConfigError
from diagnostics import DEFAULT_CHECKS, DiagnosticSettings
from evolution import EvolveParams, ProbeSettings, check_deltas
from grid import Grid, build_geometric
from kernels import Kernel, kernel_from_config
from sources import FAMILY_KEYS, SourceSpec, source_from_config

logger = logging.getLogger(__name__)

SECTIONS = ("kernel", "source", "grid", "evolution", "diagnostics", "seed")
OPTIONAL_SECTIONS = ("output", "probe")

KERNEL_KEYS = {
    "sum_power": ("lambda",),
    "product_power": ("gamma", "alpha"),
}
SOURCE_KEYS = dict(FAMILY_KEYS, point_mass=("x0", "mass"))
GRID_KEYS = ("x_min", "x_max", "bins_per_decade")
EVOLUTION_NUMBERS = ("dt_init", "dt_max", "t_max", "steady_tol", "blowup_factor", "blowup_moment")
EVOLUTION_INTS = ("max_steps", "record_every")
DIAGNOSTIC_NUMBERS = ("tol", "residual_tol", "identity_tol", "balance_tol", "tail_decades", "tail_exclude_decades",
                      "tail_tol")
DIAGNOSTIC_LISTS = ("battery_A", "transfer_eps")
KNOWN_CHECKS = DEFAULT_CHECKS + ("tail",)
PROBE_KEYS = ("x_maxes", "deltas", "x_min", "bins_per_decade", "growth_factor")


class _Locator:
    """Line numbers of sections and keys in the raw JSON text."""

    def __init__(self, text: str):
        self.text = text

    def _line_at(self, offset: int) -> int:
        return self.text.count("\n", 0, offset) + 1

    def _find(self, key: str, start: int = 0) -> Optional[int]:
        match = re.compile(r'"%s"\s*:' % re.escape(key)).search(self.text, start)
        return match.start() if match else None

    def section(self, name: str) -> int:
        offset = self._find(name)
        return 1 if offset is None else self._line_at(offset)

    def key(self, section: Optional[str], key: str) -> int:
        start = 0
        if section is not None:
            start = self._find(section)
            if start is None:
                return 1
        offset = self._find(key, start)
        if offset is None:
            return self.section(section) if section else 1
        return self._line_at(offset)


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


class _Validator:
    def __init__(self, path: str, locator: _Locator):
        self.path = path
        self.loc = locator

    def fail(self, message: str, section: Optional[str] = None, key: Optional[str] = None):
        if key is not None:
            line = self.loc.key(section, key)
        elif section is not None:
            line = self.loc.section(section)
        else:
            line = 1
        raise ConfigError(message, path=self.path, line=line)

    def section(self, data: dict, name: str) -> dict:
        value = data[name]
        if not isinstance(value, dict):
            self.fail(f"section '{name}' must be an object", name)
        return value

    def allowed(self, section: dict, name: str, keys) -> None:
        for key in section:
            if key not in keys:
                self.fail(f"unknown key '{key}' in section '{name}'", name, key)

    def required(self, section: dict, name: str, keys) -> None:
        for key in keys:
            if key not in section:
                self.fail(f"missing key '{key}' in section '{name}'", name)

    def number(self, section: dict, name: str, key: str, positive: bool = False) -> None:
        value = section[key]
        if not _is_number(value):
            self.fail(f"'{name}.{key}' must be a number", name, key)
        if positive and not value > 0:
            self.fail(f"'{name}.{key}' must be positive", name, key)

    def integer(self, section: dict, name: str, key: str) -> None:
        value = section[key]
        if isinstance(value, bool) or not isinstance(value, int) or value < 1:
            self.fail(f"'{name}.{key}' must be an integer >= 1", name, key)

    def number_list(self, section: dict, name: str, key: str) -> None:
        value = section[key]
        if not isinstance(value, list) or not value or not all(_is_number(v) for v in value):
            self.fail(f"'{name}.{key}' must be a non-empty list of numbers", name, key)

    # -------------------------------------------------------------- sections

    def kernel(self, kernel: dict) -> None:
        kind = kernel.get("type")
        if kind not in KERNEL_KEYS:
            self.fail(f"'kernel.type' must be one of {sorted(KERNEL_KEYS)}", "kernel", "type")
        shape_keys = KERNEL_KEYS[kind]
        self.allowed(kernel, "kernel", ("type",) + shape_keys + ("k", "k1", "k2"))
        self.required(kernel, "kernel", shape_keys)
        if "k" in kernel:
            if "k1" in kernel or "k2" in kernel:
                self.fail("'kernel.k' excludes 'k1' and 'k2'", "kernel", "k")
            self.number(kernel, "kernel", "k", positive=True)
        else:
            self.required(kernel, "kernel", ("k1", "k2"))
            self.number(kernel, "kernel", "k1", positive=True)
            self.number(kernel, "kernel", "k2", positive=True)
            if kernel["k1"] > kernel["k2"]:
                self.fail("'kernel.k1' must not exceed 'kernel.k2'", "kernel", "k1")
        for key in shape_keys:
            self.number(kernel, "kernel", key)
        if kind == "sum_power" and kernel["lambda"] < 0:
            self.fail("'kernel.lambda' must be >= 0", "kernel", "lambda")

    def source(self, source: dict) -> None:
        family = source.get("family")
        if family not in SOURCE_KEYS:
            self.fail(f"'source.family' must be one of {sorted(SOURCE_KEYS)}", "source", "family")
        keys = SOURCE_KEYS[family]
        self.allowed(source, "source", ("family",) + keys)
        self.required(source, "source", keys)
        for key in keys:
            self.number(source, "source", key)

    def grid(self, grid: dict) -> None:
        self.allowed(grid, "grid", GRID_KEYS)
        self.required(grid, "grid", GRID_KEYS)
        self.number(grid, "grid", "x_min", positive=True)
        self.number(grid, "grid", "x_max", positive=True)
        self.integer(grid, "grid", "bins_per_decade")
        if grid["x_max"] <= grid["x_min"]:
            self.fail("'grid.x_max' must exceed 'grid.x_min'", "grid", "x_max")

    def evolution(self, evolution: dict) -> None:
        allowed = ("delta", "deltas", "moment_orders") + EVOLUTION_NUMBERS + EVOLUTION_INTS
        self.allowed(evolution, "evolution", allowed)
        if ("delta" in evolution) == ("deltas" in evolution):
            self.fail("section 'evolution' needs exactly one of 'delta' and 'deltas'", "evolution")
        if "delta" in evolution:
            self.number(evolution, "evolution", "delta", positive=True)
            deltas = [evolution["delta"]]
        else:
            self.number_list(evolution, "evolution", "deltas")
            deltas = evolution["deltas"]
        try:
            check_deltas(deltas)
        except CoagError as exc:
            self.fail(f"'evolution.deltas': {exc}", "evolution", "deltas" if "deltas" in evolution else "delta")
        for key in EVOLUTION_NUMBERS:
            if key in evolution:
                self.number(evolution, "evolution", key, positive=True)
        for key in EVOLUTION_INTS:
            if key in evolution:
                self.integer(evolution, "evolution", key)
        if "moment_orders" in evolution:
            self.number_list(evolution, "evolution", "moment_orders")

    def diagnostics(self, diagnostics: dict) -> None:
        self.allowed(diagnostics, "diagnostics", DIAGNOSTIC_NUMBERS + DIAGNOSTIC_LISTS + ("checks",))
        for key in DIAGNOSTIC_NUMBERS:
            if key in diagnostics:
                self.number(diagnostics, "diagnostics", key, positive=True)
        for key in DIAGNOSTIC_LISTS:
            if key in diagnostics:
                self.number_list(diagnostics, "diagnostics", key)
        if "checks" in diagnostics:
            checks = diagnostics["checks"]
            if not isinstance(checks, list) or any(c not in KNOWN_CHECKS for c in checks):
                self.fail(f"'diagnostics.checks' must list names from {list(KNOWN_CHECKS)}",
                          "diagnostics", "checks")

    def probe(self, probe: dict) -> None:
        self.allowed(probe, "probe", PROBE_KEYS)
        for key in ("x_maxes", "deltas"):
            if key in probe:
                self.number_list(probe, "probe", key)
        for key in ("x_min", "growth_factor"):
            if key in probe:
                self.number(probe, "probe", key, positive=True)
        if "bins_per_decade" in probe:
            self.integer(probe, "probe", "bins_per_decade")


@dataclass
class RunConfig:
    kernel: dict
    source: dict
    grid: dict
    evolution: dict
    diagnostics: dict
    seed: int
    output: Optional[str] = None
    probe: dict = field(default_factory=dict)
    path: str = "<config>"

    def build_kernel(self) -> Kernel:
        return kernel_from_config(self.kernel)

    def build_source(self) -> SourceSpec:
        return source_from_config(self.source)

    def build_grid(self) -> Grid:
        return build_geometric(float(self.grid["x_min"]), float(self.grid["x_max"]),
                               int(self.grid["bins_per_decade"]))

    @property
    def deltas(self) -> List[float]:
        if "delta" in self.evolution:
            return [float(self.evolution["delta"])]
        return [float(d) for d in self.evolution["deltas"]]

    def evolve_params(self, delta: Optional[float] = None) -> EvolveParams:
        ev = self.evolution
        options = {key: float(ev[key]) for key in EVOLUTION_NUMBERS if key in ev}
        options.update({key: int(ev[key]) for key in EVOLUTION_INTS if key in ev})
        if "moment_orders" in ev:
            options["moment_orders"] = tuple(float(m) for m in ev["moment_orders"])
        return EvolveParams(delta=self.deltas[0] if delta is None else float(delta), **options)

    def diagnostic_settings(self) -> DiagnosticSettings:
        d = self.diagnostics
        options = {key: float(d[key]) for key in DIAGNOSTIC_NUMBERS if key in d}
        for key in DIAGNOSTIC_LISTS:
            if key in d:
                options[key] = tuple(float(v) for v in d[key])
        if "checks" in d:
            options["checks"] = tuple(d["checks"])
        if "steady_tol" in self.evolution:
            options["steady_tol"] = float(self.evolution["steady_tol"])
        options["moment_orders"] = tuple(float(m) for m in self.evolution.get("moment_orders", ()))
        return DiagnosticSettings(**options)

    def probe_settings(self) -> ProbeSettings:
        p = self.probe
        options = {}
        for key in ("x_maxes", "deltas"):
            if key in p:
                options[key] = tuple(float(v) for v in p[key])
        if "x_min" in p:
            options["x_min"] = float(p["x_min"])
        if "bins_per_decade" in p:
            options["bins_per_decade"] = int(p["bins_per_decade"])
        if "growth_factor" in p:
            options["growth_factor"] = float(p["growth_factor"])
        return ProbeSettings(**options)


def parse_config(text: str, path: str = "<config>") -> RunConfig:
    """Validate a JSON document and return the run configuration.

    Raises
    ------
    ConfigError
        With ``path:line: message`` for JSON syntax errors, schema errors
        and parameters that the kernel, source or grid constructors reject.
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg}", path=path, line=exc.lineno) from exc
    validator = _Validator(path, _Locator(text))
    if not isinstance(data, dict):
        validator.fail("the configuration must be a JSON object")

    for key in data:
        if key not in SECTIONS + OPTIONAL_SECTIONS:
            validator.fail(f"unknown top-level key '{key}'", None, key)
    for name in SECTIONS:
        if name not in data:
            validator.fail(f"missing section '{name}'")

    validator.kernel(validator.section(data, "kernel"))
    validator.source(validator.section(data, "source"))
    validator.grid(validator.section(data, "grid"))
    validator.evolution(validator.section(data, "evolution"))
    validator.diagnostics(validator.section(data, "diagnostics"))
    seed = data["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        validator.fail("'seed' must be a non-negative integer", None, "seed")
    if "probe" in data:
        validator.probe(validator.section(data, "probe"))
    output = data.get("output")
    if output is not None and not isinstance(output, str):
        validator.fail("'output' must be a string", None, "output")

    config = RunConfig(kernel=data["kernel"], source=data["source"], grid=data["grid"],
                       evolution=data["evolution"], diagnostics=data["diagnostics"], seed=seed,
                       output=output, probe=data.get("probe", {}), path=path)

    # constructor checks (support order, kernel constants, delta range) also run before compute
    for name, build in (("kernel", config.build_kernel), ("source", config.build_source),
                        ("grid", config.build_grid), ("evolution", config.evolve_params)):
        try:
            build()
        except CoagError as exc:
            validator.fail(f"section '{name}': {exc}", name)
    return config


def load_config(path) -> RunConfig:
    """Read and validate a configuration file."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration: {exc.strerror}", path=str(path), line=1) from exc
    config = parse_config(text, str(path))
    logger.info("loaded configuration %s", path)
    return config
