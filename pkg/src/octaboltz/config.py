"""Run configuration: flat ``section.key = value`` text files."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

from . import kernel as _kernel
from .coefficients import BuildSpec
from .kernel import SphereQuadrature
from .quadrature import CellQuadrature


class ConfigError(ValueError):
    pass


def _float(v):
    return float(v)


def _int(v):
    return int(v)


def _bool(v):
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _floats(v):
    return tuple(float(x) for x in v.replace(",", " ").split())


def _vec3(v):
    out = _floats(v)
    if len(out) != 3:
        raise ValueError(f"expected three components, got {len(out)}")
    return out


def _choice(*options):
    def parse(v):
        v = v.strip()
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {v!r}")
        return v
    return parse


SCHEMA = {
    "lattice.ell": _float,
    "lattice.active_radius": _float,
    "kernel.kind": _choice("hard_sphere", "vhs_power", "vhs_table"),
    "kernel.b": _float,
    "kernel.exponent": _float,
    "kernel.table_speeds": _floats,
    "kernel.table_values": _floats,
    "quadrature.outer_kind": _choice("tet", "gl", "mc"),
    "quadrature.outer_order": _int,
    "quadrature.loss_kind": _choice("tet", "gl", "mc"),
    "quadrature.loss_order": _int,
    "quadrature.n_s": _int,
    "quadrature.n_theta": _int,
    "build.drop_tolerance": _float,
    "build.leak_budget": _float,
    "build.zero_sum_policy": _choice("disable", "keep"),
    "scenario.kind": _choice("homogeneous", "slab1d"),
    "scenario.collisions": _bool,
    "initial.a.n0": _float,
    "initial.a.u0": _vec3,
    "initial.a.T0": _float,
    "initial.b.n0": _float,
    "initial.b.u0": _vec3,
    "initial.b.T0": _float,
    "grid.n_nodes": _int,
    "grid.dx": _float,
    "grid.boundary": _choice("periodic", "inflow"),
    "time.integrator": _choice("euler", "rk4"),
    "time.dt": _float,
    "time.t_end": _float,
    "output.path": str,
    "output.every": _int,
    "cache.path": str,
    "threads": _int,
}

DEFAULTS = {
    "kernel.kind": "hard_sphere",
    "kernel.b": 1.0,
    "kernel.exponent": 0.0,
    "quadrature.outer_kind": "tet",
    "quadrature.outer_order": 1,
    "quadrature.loss_kind": "tet",
    "quadrature.loss_order": 2,
    "quadrature.n_s": 48,
    "quadrature.n_theta": 48,
    "build.drop_tolerance": 1e-12,
    "build.leak_budget": 0.25,
    "build.zero_sum_policy": "disable",
    "scenario.kind": "homogeneous",
    "scenario.collisions": True,
    "grid.boundary": "periodic",
    "time.integrator": "rk4",
    "output.path": "run.csv",
    "output.every": 1,
    "cache.path": "coefficients.octb",
    "threads": 1,
}


@dataclass(frozen=True)
class Maxwellian:
    n0: float
    u0: tuple
    T0: float


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    source: str | None = None
    explicit: frozenset = frozenset()  # keys set in the file rather than defaulted

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    # -- derived objects -----------------------------------------------------

    def kernel(self):
        kind = self["kernel.kind"]
        if kind == "hard_sphere":
            return _kernel.hard_sphere(self["kernel.b"])
        if kind == "vhs_power":
            return _kernel.vhs_power(self["kernel.b"], self["kernel.exponent"])
        return _kernel.vhs_table(self["kernel.table_speeds"], self["kernel.table_values"])

    def build_spec(self, threads: int | None = None) -> BuildSpec:
        return BuildSpec(
            outer=CellQuadrature(self["quadrature.outer_kind"], self["quadrature.outer_order"]),
            loss_outer=CellQuadrature(self["quadrature.loss_kind"], self["quadrature.loss_order"]),
            sphere=SphereQuadrature(self["quadrature.n_s"], self["quadrature.n_theta"]),
            drop_tolerance=self["build.drop_tolerance"],
            leak_budget=self["build.leak_budget"],
            zero_sum_policy=self["build.zero_sum_policy"],
            threads=self["threads"] if threads is None else threads,
        )

    def maxwellians(self) -> list[Maxwellian]:
        out = []
        for tag in ("a", "b"):
            keys = [f"initial.{tag}.{k}" for k in ("n0", "u0", "T0")]
            if any(k in self.values for k in keys):
                out.append(Maxwellian(*(self.values[k] for k in keys)))
        return out


def parse_config(text: str, source: str | None = None) -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source or '<config>'}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source or '<config>'}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source or '<config>'}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = SCHEMA[key](value)
        except ValueError as exc:
            raise ConfigError(f"{source or '<config>'}:{lineno}: {key}: {exc}") from None
    merged = {**DEFAULTS, **values}
    cfg = RunConfig(merged, source, frozenset(values))
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, str(path))


def _positive(cfg, key):
    v = cfg.get(key)
    if v is None:
        raise ConfigError(f"missing required key {key!r}")
    if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
        raise ConfigError(f"{key} must be positive, got {v!r}")


def validate(cfg: RunConfig) -> None:
    _positive(cfg, "lattice.ell")
    _positive(cfg, "lattice.active_radius")
    if cfg["lattice.active_radius"] < cfg["lattice.ell"]:
        raise ConfigError("lattice.active_radius must be >= lattice.ell")
    if cfg["kernel.kind"] == "vhs_table":
        if "kernel.table_speeds" not in cfg.values or "kernel.table_values" not in cfg.values:
            raise ConfigError("vhs_table kernels need kernel.table_speeds and kernel.table_values")
    else:
        _positive(cfg, "kernel.b")
    for key in ("quadrature.outer_order", "quadrature.loss_order", "quadrature.n_s", "quadrature.n_theta", "output.every"):
        _positive(cfg, key)
    if cfg["threads"] < 0:
        raise ConfigError("threads must be >= 0 (0 = automatic)")
    for tag in ("a", "b"):
        present = [k for k in ("n0", "u0", "T0") if f"initial.{tag}.{k}" in cfg.values]
        if present and len(present) != 3:
            raise ConfigError(f"initial.{tag} needs n0, u0 and T0")
        if present:
            _positive(cfg, f"initial.{tag}.n0")
            _positive(cfg, f"initial.{tag}.T0")
    if cfg["scenario.kind"] == "slab1d":
        for key in ("grid.n_nodes", "grid.dx"):
            _positive(cfg, key)
        if cfg["grid.n_nodes"] < 2:
            raise ConfigError("grid.n_nodes must be >= 2")


def validate_run(cfg: RunConfig) -> None:
    """Extra requirements of the ``run`` subcommand."""
    if not cfg.maxwellians():
        raise ConfigError("a run needs at least initial.a.{n0,u0,T0}")
    _positive(cfg, "time.dt")
    _positive(cfg, "time.t_end")
