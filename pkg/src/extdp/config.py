"""Run configuration: the dam parameters plus solver, simulation and audit knobs.

Files are TOML with the sections ``[dam]``, ``[inner]``, ``[uzawa]``,
``[simulation]`` and ``[audit]``; every key is optional and unknown sections
or keys are rejected.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import tomli

from extdp.audit import AuditTolerances
from extdp.core import ConfigInvalid, make_uniform_grid
from extdp.dam import DamConfig, DamInstance, build_dam_problem
from extdp.dual import UzawaConfig
from extdp.inner import InnerSolveConfig


@dataclass(frozen=True)
class InnerSection:
    method: str = "muscan"
    sum_step: float | None = None
    eps_mart: float | None = None
    mu_lo: float = 0.0
    mu_hi: float = 200.0
    mu_step: float = 1.0
    refine: bool = True
    audit_fraction: float = 0.01
    audit_seed: int = 0

    def build(self, v_grid) -> InnerSolveConfig:
        return InnerSolveConfig(v_grid, self.method, self.sum_step, self.eps_mart,
                                make_uniform_grid(self.mu_lo, self.mu_hi, self.mu_step),
                                self.refine, self.audit_fraction, self.audit_seed)


@dataclass(frozen=True)
class SimulationSection:
    n: int = 10_000
    seed: int = 1


@dataclass(frozen=True)
class RunConfig:
    dam: DamConfig = field(default_factory=DamConfig)
    inner: InnerSection = field(default_factory=InnerSection)
    uzawa: UzawaConfig = field(default_factory=UzawaConfig)
    simulation: SimulationSection = field(default_factory=SimulationSection)
    audit: AuditTolerances = field(default_factory=AuditTolerances)

    def instance(self) -> DamInstance:
        return build_dam_problem(self.dam)

    def inner_config(self, inst: DamInstance) -> InnerSolveConfig:
        return self.inner.build(inst.v_grid)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            sec = asdict(getattr(self, f.name))
            out[f.name] = {k: list(v) if isinstance(v, tuple) else v for k, v in sec.items()}
        return out


_SECTIONS = {"dam": DamConfig, "inner": InnerSection, "uzawa": UzawaConfig,
             "simulation": SimulationSection, "audit": AuditTolerances}
_TUPLES = {("dam", "x_bounds"), ("dam", "u_bounds"), ("dam", "w_bounds"), ("dam", "prices"),
           ("uzawa", "lambda0")}


def _coerce(section: str, key: str, value, default):
    if (section, key) in _TUPLES:
        if not isinstance(value, (list, tuple)):
            raise ConfigInvalid([f"{section}.{key} must be a list"])
        return tuple(float(v) for v in value)
    if value is None:
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigInvalid([f"{section}.{key} must be a boolean"])
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not float(value).is_integer():
            raise ConfigInvalid([f"{section}.{key} must be an integer"])
        return int(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigInvalid([f"{section}.{key} must be a string"])
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigInvalid([f"{section}.{key} must be a number"])
    return float(value)


def config_from_dict(data: dict) -> RunConfig:
    problems = [f"unknown section [{k}]" for k in data if k not in _SECTIONS]
    if problems:
        raise ConfigInvalid(problems)
    parts = {}
    for name, cls in _SECTIONS.items():
        raw = data.get(name, {}) or {}
        if not isinstance(raw, dict):
            raise ConfigInvalid([f"[{name}] must be a table"])
        base = cls()
        known = {f.name for f in fields(cls)}
        unknown = [f"unknown key {name}.{k}" for k in raw if k not in known]
        if unknown:
            raise ConfigInvalid(unknown)
        kwargs = {k: _coerce(name, k, v, getattr(base, k)) for k, v in raw.items()}
        try:
            parts[name] = replace(base, **kwargs)
        except (TypeError, ValueError) as err:
            if isinstance(err, ConfigInvalid):
                raise
            raise ConfigInvalid([f"[{name}]: {err}"]) from err
    cfg = RunConfig(**parts)
    dam_problems = cfg.dam.problems()
    if dam_problems:
        raise ConfigInvalid(dam_problems)
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path, "rb") as fh:
        try:
            data = tomli.load(fh)
        except tomli.TOMLDecodeError as err:
            raise ConfigInvalid([f"{path}: {err}"]) from err
    return config_from_dict(data)
