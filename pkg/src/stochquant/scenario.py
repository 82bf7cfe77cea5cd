"""
Scenario files: parsing, validation and resolution into runtime objects.

A scenario is a YAML mapping.  Shared sections describe the physics
(``system``, ``initial``, ``grid``, ``propagator``, ``model``,
``ensemble``, ``checkpoints``); ``experiment`` selects what is verified and
``params`` carries experiment-specific settings.  Validation never runs
any computation.
"""
from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import yaml

from .fields import HARD_WALL, PERIODIC, SpatialGrid
from .schrodinger import (ANALYTIC_KINDS, CRANK_NICOLSON, SPLIT_STEP, ClassicalSystem,
                          PropagatorConfig, box, free_particle, harmonic, quartic)
from .stochastic import ModelParams


class ScenarioParseError(ValueError):
    """The file is not a readable YAML mapping."""


class ScenarioValidationError(ValueError):
    """A field is missing, unknown or out of range; ``location`` names it."""

    def __init__(self, location: str, message: str):
        super().__init__(f"{location}: {message}")
        self.location = location


EXPERIMENTS = ("deviation-law", "born-rule", "fluctuation-scaling", "classical-limit",
               "information-balance", "uncertainty", "operator-averages", "locality",
               "solver-crossval", "determinism")

POTENTIALS = ("harmonic", "free", "quartic", "box")

OUTPUTS = ("data", "plots")

TOP_LEVEL = ("name", "description", "experiment", "seed", "system", "initial", "grid",
             "propagator", "model", "ensemble", "checkpoints", "outputs", "params")


def make_system(spec: Dict[str, Any], location: str = "system") -> ClassicalSystem:
    """Build a 1D system from ``{potential: kind, ...}``."""
    if not isinstance(spec, dict):
        raise ScenarioValidationError(location, "expected a mapping")
    kind = spec.get("potential")
    mass = float(spec.get("mass", 1.0))
    if not mass > 0:
        raise ScenarioValidationError(f"{location}.mass", "must be positive")
    if kind == "harmonic":
        return harmonic(float(spec.get("omega", 1.0)), mass, float(spec.get("center", 0.0)))
    if kind == "free":
        return free_particle(mass)
    if kind == "quartic":
        return quartic(float(spec.get("g", 1.0)), mass)
    if kind == "box":
        return box(mass)
    raise ScenarioValidationError(f"{location}.potential",
                                  f"unknown potential kind {kind!r} (expected one of "
                                  f"{', '.join(POTENTIALS)})")


def make_grid(spec: Dict[str, Any], location: str = "grid") -> SpatialGrid:
    if not isinstance(spec, dict):
        raise ScenarioValidationError(location, "expected a mapping")
    for key in ("extent", "n_points"):
        if key not in spec:
            raise ScenarioValidationError(f"{location}.{key}", "missing")
    boundary = spec.get("boundary", PERIODIC)
    if boundary not in (PERIODIC, HARD_WALL):
        raise ScenarioValidationError(f"{location}.boundary",
                                      f"unknown boundary {boundary!r} (expected "
                                      f"{PERIODIC} or {HARD_WALL})")
    try:
        grid = SpatialGrid(spec["extent"], spec["n_points"], boundary, spec.get("lower"))
    except (TypeError, ValueError) as exc:
        raise ScenarioValidationError(location, str(exc)) from None
    if not grid.spectral_ok:
        raise ScenarioValidationError(f"{location}.n_points",
                                      "spectral operators need a power of two")
    return grid


def initial_params(spec: Dict[str, Any], location: str = "initial") -> Dict[str, Any]:
    if not isinstance(spec, dict):
        raise ScenarioValidationError(location, "expected a mapping")
    kind = spec.get("kind")
    if kind not in ANALYTIC_KINDS:
        raise ScenarioValidationError(f"{location}.kind",
                                      f"unknown initial state {kind!r} (expected one of "
                                      f"{', '.join(ANALYTIC_KINDS)})")
    return {k: v for k, v in spec.items() if k != "kind"}


@dataclass
class Scenario:
    """Validated scenario with its physics sections resolved."""

    name: str
    experiment: str
    seed: int
    raw: Dict[str, Any]
    system: Optional[ClassicalSystem] = None
    grid: Optional[SpatialGrid] = None
    initial_kind: Optional[str] = None
    initial: Dict[str, Any] = field(default_factory=dict)
    propagator: Optional[PropagatorConfig] = None
    model: Optional[ModelParams] = None
    n: int = 0
    sampling: str = "random"
    checkpoints: List[float] = field(default_factory=list)
    outputs: List[str] = field(default_factory=lambda: list(OUTPUTS))
    params: Dict[str, Any] = field(default_factory=dict)
    source: Optional[str] = None

    def resolved(self) -> Dict[str, Any]:
        """Plain-data echo of the resolved parameters."""
        out = {"name": self.name, "experiment": self.experiment, "seed": self.seed,
               "outputs": list(self.outputs), "params": copy.deepcopy(self.params)}
        if self.system is not None:
            out["system"] = {"name": self.system.name, "masses": list(self.system.masses),
                             **{k: v for k, v in self.system.params.items()}}
        if self.grid is not None:
            out["grid"] = {"extent": list(self.grid.extent), "n_points": list(self.grid.n_points),
                           "boundary": self.grid.boundary, "lower": list(self.grid.lower),
                           "spacing": list(self.grid.spacing)}
        if self.initial_kind is not None:
            out["initial"] = {"kind": self.initial_kind, **self.initial}
        if self.propagator is not None:
            p = self.propagator
            out["propagator"] = {"method": p.method, "dt_solver": p.dt_solver, "hbar": p.hbar}
        if self.model is not None:
            m = self.model
            out["model"] = {"lambda_mag": m.lambda_mag, "dt": m.dt, "tau_xi": m.tau_xi,
                            "tau_lambda": m.tau_lambda if np.isfinite(m.tau_lambda) else "inf"}
        if self.n:
            out["ensemble"] = {"n": self.n, "sampling": self.sampling}
        if self.checkpoints:
            out["checkpoints"] = list(self.checkpoints)
        return out


def _number(value, location, positive=False, integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        if isinstance(value, str):
            try:
                value = float(value)
            except ValueError:
                raise ScenarioValidationError(location, f"expected a number, got {value!r}") from None
        else:
            raise ScenarioValidationError(location, f"expected a number, got {value!r}")
    if integer:
        if int(value) != value:
            raise ScenarioValidationError(location, "expected an integer")
        value = int(value)
    if not np.isfinite(value):
        raise ScenarioValidationError(location, "must be finite")
    if positive and not value > 0:
        raise ScenarioValidationError(location, "must be positive")
    return value


_EXPR = re.compile(r"^[0-9eE+\-*/(). ]*((pi|sqrt)[0-9eE+\-*/(). ]*)*$")


def read_number(value, location="value"):
    """A number, or a short arithmetic string using ``pi`` and ``sqrt``."""
    if isinstance(value, str):
        if not _EXPR.match(value.strip()):
            raise ScenarioValidationError(location, f"cannot read number {value!r}")
        try:
            value = float(eval(value, {"__builtins__": {}}, {"pi": np.pi, "sqrt": np.sqrt}))
        except Exception:
            raise ScenarioValidationError(location, f"cannot read number {value!r}") from None
    return _number(value, location)


def validate(raw: Any, source: Optional[str] = None) -> Scenario:
    """Check a parsed scenario mapping and resolve it.

    Raises
    ------
    ScenarioValidationError
        With a dotted ``location`` naming the offending field.
    """
    if not isinstance(raw, dict):
        raise ScenarioValidationError("<root>", "scenario must be a mapping")
    for key in raw:
        if key not in TOP_LEVEL:
            raise ScenarioValidationError(key, f"unknown section (expected one of "
                                               f"{', '.join(TOP_LEVEL)})")
    name = raw.get("name")
    if not isinstance(name, str) or not name:
        raise ScenarioValidationError("name", "missing or empty")
    experiment = raw.get("experiment")
    if experiment not in EXPERIMENTS:
        raise ScenarioValidationError("experiment", f"unknown experiment {experiment!r} "
                                                    f"(expected one of {', '.join(EXPERIMENTS)})")
    if "seed" not in raw:
        raise ScenarioValidationError("seed", "missing (a master seed is mandatory)")
    seed = _number(raw["seed"], "seed", integer=True)
    if seed < 0:
        raise ScenarioValidationError("seed", "must be non-negative")

    sc = Scenario(name=name, experiment=experiment, seed=seed, raw=copy.deepcopy(raw),
                  source=source)
    outputs = raw.get("outputs", list(OUTPUTS))
    if not isinstance(outputs, list) or any(o not in OUTPUTS for o in outputs):
        raise ScenarioValidationError("outputs", f"expected a list drawn from {OUTPUTS}")
    sc.outputs = list(outputs)
    params = raw.get("params", {}) or {}
    if not isinstance(params, dict):
        raise ScenarioValidationError("params", "expected a mapping")
    sc.params = copy.deepcopy(params)

    if "system" in raw:
        sc.system = make_system(raw["system"])
    if "grid" in raw:
        sc.grid = make_grid(raw["grid"])
    if "initial" in raw:
        sc.initial = initial_params(raw["initial"])
        sc.initial_kind = raw["initial"]["kind"]

    hbar = 1.0
    if "model" in raw:
        m = raw["model"]
        if not isinstance(m, dict):
            raise ScenarioValidationError("model", "expected a mapping")
        for key in m:
            if key not in ("lambda_mag", "dt", "tau_xi", "tau_lambda"):
                raise ScenarioValidationError(f"model.{key}", "unknown field")
        kw = {}
        for key in ("lambda_mag", "dt", "tau_xi"):
            if key in m:
                kw[key] = _number(m[key], f"model.{key}", positive=True)
        if "tau_lambda" in m:
            tl = m["tau_lambda"]
            kw["tau_lambda"] = float("inf") if tl in ("inf", None) else _number(
                tl, "model.tau_lambda", positive=True)
        try:
            sc.model = ModelParams(**kw)
        except ValueError as exc:
            raise ScenarioValidationError("model", str(exc)) from None
        hbar = sc.model.lambda_mag

    if "propagator" in raw:
        p = raw["propagator"]
        if not isinstance(p, dict):
            raise ScenarioValidationError("propagator", "expected a mapping")
        method = p.get("method", SPLIT_STEP)
        if method not in (SPLIT_STEP, CRANK_NICOLSON):
            raise ScenarioValidationError("propagator.method",
                                          f"unknown method {method!r} (expected {SPLIT_STEP} "
                                          f"or {CRANK_NICOLSON})")
        dt_solver = _number(p.get("dt_solver", sc.model.dt if sc.model else 1e-3),
                            "propagator.dt_solver", positive=True)
        sc.propagator = PropagatorConfig(method, dt_solver, 0, hbar)
        if sc.model is not None and dt_solver > sc.model.dt * (1 + 1e-9):
            raise ScenarioValidationError("propagator.dt_solver",
                                          "solver frames must be no wider than model.dt")

    if "ensemble" in raw:
        e = raw["ensemble"]
        if not isinstance(e, dict):
            raise ScenarioValidationError("ensemble", "expected a mapping")
        sc.n = _number(e.get("n", 0), "ensemble.n", positive=True, integer=True)
        sc.sampling = e.get("sampling", "random")
        if sc.sampling not in ("random", "stratified"):
            raise ScenarioValidationError("ensemble.sampling",
                                          "expected random or stratified")

    if "checkpoints" in raw:
        cks = raw["checkpoints"]
        if not isinstance(cks, list) or not cks:
            raise ScenarioValidationError("checkpoints", "expected a non-empty list of times")
        sc.checkpoints = [read_number(c, f"checkpoints[{i}]") for i, c in enumerate(cks)]
        if any(c < 0 for c in sc.checkpoints):
            raise ScenarioValidationError("checkpoints", "times must be non-negative")

    _require(sc)
    return sc


_NEEDS = {
    "born-rule": ("system", "grid", "initial", "propagator", "model", "ensemble", "checkpoints"),
    "fluctuation-scaling": ("system", "grid", "initial", "model", "ensemble"),
    "classical-limit": ("system", "grid", "initial", "ensemble"),
    "uncertainty": ("ensemble",),
    "operator-averages": ("ensemble",),
    "locality": ("model", "ensemble", "checkpoints"),
}


def _require(sc: Scenario):
    for section in _NEEDS.get(sc.experiment, ()):
        if section not in sc.raw:
            raise ScenarioValidationError(section, f"required by experiment {sc.experiment!r}")


def parse_text(text: str, source: Optional[str] = None) -> Dict[str, Any]:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioParseError(f"{source or '<text>'}: {exc}") from None
    if not isinstance(raw, dict):
        raise ScenarioParseError(f"{source or '<text>'}: top level must be a mapping")
    return raw


def load(path_or_name: str) -> Scenario:
    """Read and validate a scenario file, or a bundled scenario by name."""
    path = Path(path_or_name)
    if not path.exists():
        bundled = bundled_path(path_or_name)
        if bundled is None:
            raise ScenarioParseError(f"no such scenario file or bundled scenario: {path_or_name}")
        path = bundled
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioParseError(f"{path}: {exc}") from None
    return validate(parse_text(text, str(path)), source=str(path))


def _bundle_dir() -> Path:
    return Path(str(resources.files("stochquant") / "scenarios"))


def bundled_path(name: str) -> Optional[Path]:
    stem = name[:-5] if name.endswith(".yaml") else name
    p = _bundle_dir() / f"{stem}.yaml"
    return p if p.exists() else None


def list_scenarios() -> List[Dict[str, str]]:
    """Bundled scenarios with their experiment and one-line description."""
    out = []
    for p in sorted(_bundle_dir().glob("*.yaml")):
        raw = yaml.safe_load(p.read_text())
        out.append({"name": raw.get("name", p.stem), "experiment": raw.get("experiment", ""),
                    "description": str(raw.get("description", "")).strip().splitlines()[0]
                    if raw.get("description") else "", "path": str(p)})
    return out
