"""Scenario configuration: one TOML file per experiment.

A scenario file has the sections ``[scenario]``, ``[system]``, ``[law]``,
``[initial]``, ``[integrator]``, ``[forcing]`` and ``[perturbation]``; every
key is optional and falls back to the dataclass default::

    [scenario]
    name = "hair-cell"
    horizon = 300.0

    [system]
    kind = "oscillator"      # first_order | oscillator | oscillator_full
    mu0 = 0.3
    omega = 1.0
    lambda = 0.0

    [law]
    kind = "log"             # log | sigmoid | bounded_osc | custom
    a = 1.0
    b = 1.0

    [initial]
    x = 2.0
    xdot = 0.0
    mu = 0.0
"""

from __future__ import annotations

import math
import typing
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
import tomli
import tomli_w

from .adaptation import make_law
from .dynamics import (FirstOrderLoop, FirstOrderModel, OscillatorLoop, OscillatorModel,
                       Perturbation)
from .errors import ConfigError, DomainViolation
from .ode import IntegratorConfig

SYSTEMS = ("first_order", "oscillator", "oscillator_full")
LAWS = {
    "first_order": ("log", "sigmoid", "custom"),
    "oscillator": ("log", "bounded_osc", "custom"),
    "oscillator_full": ("log", "bounded_osc", "custom"),
}
CHARTS = {"first_order": ("original", "log"), "oscillator": ("original", "qphi_p"),
          "oscillator_full": ("original", "qphi_p")}
PERIODS_PER_RUN = 100
FIRST_ORDER_HORIZON = 100.0

# TOML key -> dataclass field, where they differ
_RENAMES = {"system": {"lambda": "lam"}}


@dataclass(frozen=True)
class SystemSpec:
    kind: str = "first_order"
    mu0: float = 0.0
    omega: float = 1.0
    lam: float = 0.0
    frozen_mu: bool = False


@dataclass(frozen=True)
class LawSpec:
    kind: str = "log"
    a: float = 1.0
    b: float = 1.0
    f: Optional[str] = None
    g: Optional[str] = None


@dataclass(frozen=True)
class InitialState:
    x: float = 2.0
    xdot: float = 0.0
    mu: float = 0.0


@dataclass(frozen=True)
class ForcingSpec:
    expr: Optional[str] = None


@dataclass(frozen=True)
class PerturbationSpec:
    epsilon: float = 0.0
    expr: Optional[str] = None


@dataclass(frozen=True)
class Scenario:
    """A fully specified closed-loop experiment.

    ``horizon`` of None means 100 forcing-free periods ``2 pi / omega`` for
    oscillators and 100 time units for the first-order loop.  ``chart``
    selects the integration coordinates; ``"log"`` / ``"qphi_p"`` keep the
    state admissible by construction.
    """

    name: str = "scenario"
    seed: int = 0
    horizon: Optional[float] = None
    settle_band: float = 1e-4
    chart: str = "original"
    system: SystemSpec = field(default_factory=SystemSpec)
    law: LawSpec = field(default_factory=LawSpec)
    initial: InitialState = field(default_factory=InitialState)
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    forcing: ForcingSpec = field(default_factory=ForcingSpec)
    perturbation: PerturbationSpec = field(default_factory=PerturbationSpec)

    # -- derived quantities --------------------------------------------------

    @property
    def oscillating(self):
        return self.system.kind != "first_order"

    @property
    def t_end(self):
        if self.horizon is not None:
            return float(self.horizon)
        if self.oscillating:
            return PERIODS_PER_RUN * 2 * math.pi / self.system.omega
        return FIRST_ORDER_HORIZON

    @property
    def columns(self):
        return ("t", "x", "xdot", "mu") if self.oscillating else ("t", "x", "mu")

    def law_object(self):
        spec = self.law
        return make_law(spec.kind, spec.a, spec.b, spec.f, spec.g)

    def build_loop(self):
        sys_ = self.system
        family = "oscillator" if self.oscillating else "first_order"
        pert = None
        if self.perturbation.expr is not None:
            pert = Perturbation.parse(self.perturbation.expr, self.perturbation.epsilon, family)
        law = self.law_object()
        if not self.oscillating:
            return FirstOrderLoop(FirstOrderModel(sys_.mu0, self.forcing.expr, pert), law)
        model = OscillatorModel(sys_.mu0, sys_.omega, sys_.lam, self.forcing.expr, pert)
        return OscillatorLoop(model, law, frozen_mu=sys_.frozen_mu)

    def initial_state(self):
        i = self.initial
        if self.oscillating:
            return np.array([i.x, i.xdot, i.mu], dtype=float)
        return np.array([i.x, i.mu], dtype=float)

    # -- validation ----------------------------------------------------------

    def validate(self):
        """Raise ConfigError (or DomainViolation for the initial state) when invalid."""
        s = self.system
        if s.kind not in SYSTEMS:
            raise ConfigError(f"system.kind must be one of {SYSTEMS}, got {s.kind!r}")
        if self.law.kind not in LAWS[s.kind]:
            raise ConfigError(f"law.kind {self.law.kind!r} is not available for {s.kind}; "
                              f"choose from {LAWS[s.kind]}")
        if s.kind == "oscillator" and s.lam != 0:
            raise ConfigError("the reduced oscillator has lambda = 0; use oscillator_full")
        if s.kind == "oscillator_full" and not s.lam > 0:
            raise ConfigError("oscillator_full needs lambda > 0")
        if s.frozen_mu and not self.oscillating:
            raise ConfigError("frozen_mu applies to oscillator systems only")
        if self.chart not in CHARTS[s.kind]:
            raise ConfigError(f"chart must be one of {CHARTS[s.kind]} for {s.kind}")
        if self.horizon is not None and not self.horizon > 0:
            raise ConfigError("horizon must be positive")
        if not self.settle_band > 0:
            raise ConfigError("settle_band must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.perturbation.epsilon < 0:
            raise ConfigError("perturbation.epsilon must be non-negative")
        if self.perturbation.epsilon > 0 and self.perturbation.expr is None:
            raise ConfigError("perturbation.epsilon > 0 needs perturbation.expr")
        values = [s.mu0, s.omega, s.lam, self.law.a, self.law.b, self.settle_band,
                  self.initial.x, self.initial.xdot, self.initial.mu, self.perturbation.epsilon]
        if not all(math.isfinite(v) for v in values):
            raise ConfigError("numeric parameters must be finite")
        try:
            loop = self.build_loop()
            loop.x_star()
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        if not loop.domain(self.initial_state()):
            raise DomainViolation(
                f"initial state {self.initial_state().tolist()} is outside the domain of {s.kind}")
        return self

    # -- parameter access for sweeps -------------------------------------------

    def with_value(self, param, value):
        """Copy with ``param`` (``"law.a"``, ``"a"``, ``"epsilon"``, ...) set to ``value``."""
        section, key = resolve_param(param)
        if section is None:
            return replace(self, **{key: _coerce(Scenario, key, value)})
        sub = getattr(self, section)
        return replace(self, **{section: replace(sub, **{key: _coerce(type(sub), key, value)})})

    def get_value(self, param):
        section, key = resolve_param(param)
        return getattr(self if section is None else getattr(self, section), key)


_SECTIONS = {"system": SystemSpec, "law": LawSpec, "initial": InitialState,
             "integrator": IntegratorConfig, "forcing": ForcingSpec,
             "perturbation": PerturbationSpec}
_TOP = ("name", "seed", "horizon", "settle_band", "chart")


def _toml_key(section, name):
    inverse = {v: k for k, v in _RENAMES.get(section, {}).items()}
    return inverse.get(name, name)


def resolve_param(param):
    """``(section, field)`` for a dotted or bare parameter name."""
    if "." in param:
        section, key = param.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section {section!r}")
        key = _RENAMES.get(section, {}).get(key, key)
        if key not in {f.name for f in fields(_SECTIONS[section])}:
            raise ConfigError(f"unknown parameter {param!r}")
        return section, key
    if param in _TOP:
        return None, param
    hits = []
    for section, cls in _SECTIONS.items():
        key = _RENAMES.get(section, {}).get(param, param)
        if key in {f.name for f in fields(cls)}:
            hits.append((section, key))
    if not hits:
        raise ConfigError(f"unknown parameter {param!r}")
    if len(hits) > 1:
        raise ConfigError(f"parameter {param!r} is ambiguous; use one of "
                          + ", ".join(f"{s}.{_toml_key(s, k)}" for s, k in hits))
    return hits[0]


def _coerce(cls, name, value):
    hint = typing.get_type_hints(cls)[name]
    optional = typing.get_origin(hint) is typing.Union
    if optional:
        if value is None:
            return None
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
    if hint is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(f"{name} must be a boolean, got {value!r}")
    if isinstance(value, bool):
        raise ConfigError(f"{name} must be {hint.__name__}, got a boolean")
    try:
        if hint is int:
            number = float(value)
            if number != int(number):
                raise ValueError
            return int(number)
        if hint is float:
            return float(value)
        if hint is str:
            if not isinstance(value, str):
                raise ValueError
            return value
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be {hint.__name__}, got {value!r}") from None
    raise ConfigError(f"cannot set {name}")


def _build(cls, table, where):
    if not isinstance(table, dict):
        raise ConfigError(f"[{where}] must be a table")
    renames = _RENAMES.get(where, {})
    names = {f.name for f in fields(cls) if f.init}
    kwargs = {}
    for key, value in table.items():
        name = renames.get(key, key)
        if name not in names or (where == "scenario" and name not in _TOP):
            raise ConfigError(f"unknown key {key!r} in [{where}]")
        kwargs[name] = _coerce(cls, name, value)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from None


def scenario_from_dict(data: dict) -> Scenario:
    unknown = set(data) - set(_SECTIONS) - {"scenario"}
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    top = _build(Scenario, data.get("scenario", {}), "scenario")
    parts = {name: _build(cls, data.get(name, {}), name) for name, cls in _SECTIONS.items()}
    return replace(top, **parts)


def scenario_to_dict(scenario: Scenario) -> dict:
    def table(obj, where):
        out = {}
        for f in fields(obj):
            if where == "scenario" and f.name not in _TOP:
                continue
            value = getattr(obj, f.name)
            if value is not None and f.init:
                out[_toml_key(where, f.name)] = value
        return out

    data = {"scenario": table(scenario, "scenario")}
    for name in _SECTIONS:
        data[name] = table(getattr(scenario, name), name)
    return data


def loads(text: str) -> Scenario:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from None
    return scenario_from_dict(data)


def dumps(scenario: Scenario) -> str:
    return tomli_w.dumps(scenario_to_dict(scenario))


def preset_names():
    root = resources.files("selftune") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".toml"))


def load(source) -> Scenario:
    """Load a scenario from a file path or a preset name."""
    path = Path(source)
    if path.is_file():
        return loads(path.read_text())
    preset = resources.files("selftune") / "presets" / f"{source}.toml"
    if preset.is_file():
        return loads(preset.read_text())
    raise ConfigError(f"no scenario file or preset named {str(source)!r} "
                      f"(presets: {', '.join(preset_names())})")
