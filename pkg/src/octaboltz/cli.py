"""``octaboltz`` command-line driver.

Subcommands: ``build-coeffs``, ``check``, ``run`` and ``info``.  Every
machine-readable summary line starts with ``OCTB:``.

Exit codes: 0 success, 1 a coefficient invariant failed, 2 configuration
error, 3 coefficient build failure, 4 solver abort.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import coefficients as co
from .config import ConfigError, RunConfig, load_config, validate_run
from .diagnostics import RunRecord, write_timeseries
from .lattice import build_lattice
from .solver import (
    Grid1D,
    LatticeGeometry,
    SolverError,
    collision_rhs,
    initial_state,
    initialize_from_maxwellian,
    step_1d,
    step_homogeneous,
    transport_rhs_1d,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_BUILD = 3
EXIT_SOLVER = 4

THREADS_ENV = "OCTABOLTZ_THREADS"

log = logging.getLogger("octaboltz")


def emit(tag: str, **fields) -> None:
    parts = " ".join(f"{k}={_fmt(v)}" for k, v in fields.items())
    print(f"OCTB: {tag} {parts}".rstrip(), flush=True)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return f"{v:.6e}"
    return str(v)


def _error(msg: str) -> None:
    print(f"octaboltz: error: {msg}", file=sys.stderr)


def resolve_threads(flag: int | None, cfg: RunConfig | None) -> int:
    """``--threads`` beats the config key, which beats the environment variable."""
    if flag is not None:
        threads = flag
    elif cfg is not None and "threads" in cfg.explicit:
        threads = cfg["threads"]
    elif os.environ.get(THREADS_ENV):
        try:
            threads = int(os.environ[THREADS_ENV])
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer") from None
    else:
        threads = 1
    if threads < 0:
        raise ConfigError("threads must be >= 0 (0 = automatic)")
    return threads


def _cache_path(args, cfg: RunConfig | None) -> Path:
    if args.cache:
        return Path(args.cache)
    if cfg is not None:
        return Path(cfg["cache.path"])
    raise ConfigError("no coefficient cache given (use --cache or --config)")


def _build(cfg: RunConfig, threads: int):
    lattice = build_lattice(cfg["lattice.ell"], cfg["lattice.active_radius"])
    return co.build_coefficients(lattice, cfg.kernel(), cfg.build_spec(threads))


def _print_build_summary(coeffs, cache: Path, digest: int) -> None:
    s = coeffs.summary()
    emit("build", M=s["M"], classes=s["classes"], pairs=s["pairs"], nnz=s["nnz"],
         max_rescale=s["max_rescale"], min_rescale=s["min_rescale"],
         leak_fraction_mean=s["leak_fraction_mean"], leak_fraction_max=s["leak_fraction_max"],
         disabled_pairs=s["disabled_pairs"], prop2_residual=s["prop2_residual"],
         quadrature_residual=s["quadrature_residual"])
    emit("cache", path=cache, hash=f"{digest:016x}")
    for w in coeffs.diagnostics.get("warnings", []):
        print(f"OCTB: warning {w}")


# --------------------------------------------------------------------------
# subcommands


def cmd_build_coeffs(args) -> int:
    try:
        if not args.config:
            raise ConfigError("build-coeffs needs --config")
        cfg = load_config(args.config)
        threads = resolve_threads(args.threads, cfg)
        cache = _cache_path(args, cfg)
    except ConfigError as exc:
        _error(str(exc))
        return EXIT_CONFIG
    try:
        coeffs = _build(cfg, threads)
        digest = co.save_coefficients(coeffs, cache)
    except (OSError, ValueError, RuntimeError, MemoryError) as exc:
        _error(f"coefficient build failed: {exc}")
        return EXIT_BUILD
    _print_build_summary(coeffs, cache, digest)
    return EXIT_OK


def cmd_check(args) -> int:
    try:
        cfg = load_config(args.config) if args.config else None
        cache = _cache_path(args, cfg)
    except ConfigError as exc:
        _error(str(exc))
        return EXIT_CONFIG
    try:
        coeffs = co.load_coefficients(cache)
    except (OSError, co.CacheError) as exc:
        emit("check", invariant="integrity", status="FAIL")
        _error(str(exc))
        return EXIT_CHECK_FAILED
    emit("check", invariant="integrity", status="PASS")
    ok = True
    for res in co.check_coefficients(coeffs):
        ok &= res.passed
        emit("check", invariant=res.name, status="PASS" if res.passed else "FAIL")
        print(f"  {res.detail}")
    emit("check", result="PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def cmd_info(args) -> int:
    try:
        cfg = load_config(args.config) if args.config else None
        cache = _cache_path(args, cfg)
    except ConfigError as exc:
        _error(str(exc))
        return EXIT_CONFIG
    try:
        meta = co.read_meta(cache)
    except (OSError, co.CacheError) as exc:
        _error(str(exc))
        return EXIT_CONFIG
    for key in sorted(meta):
        emit("info", **{key: meta[key]})
    return EXIT_OK


def _coefficients_for_run(cfg: RunConfig, cache: Path, threads: int):
    lattice = build_lattice(cfg["lattice.ell"], cfg["lattice.active_radius"])
    kernel = cfg.kernel()
    if cache.exists():
        return co.load_coefficients(cache, lattice, kernel)
    log.warning("coefficient cache %s not found; building it", cache)
    coeffs = co.build_coefficients(lattice, kernel, cfg.build_spec(threads))
    digest = co.save_coefficients(coeffs, cache)
    _print_build_summary(coeffs, cache, digest)
    return coeffs


def _initial_densities(cfg: RunConfig, lattice, n_nodes: int | None = None):
    dens = [initialize_from_maxwellian(lattice, m.n0, m.u0, m.T0) for m in cfg.maxwellians()]
    if n_nodes is None:
        return np.sum(dens, axis=0), dens
    left = dens[0]
    right = dens[1] if len(dens) > 1 else dens[0]
    N = np.empty((n_nodes, lattice.n_cells))
    half = n_nodes // 2
    N[:half] = left
    N[half:] = right
    return N, [left, right]


def cmd_run(args) -> int:
    try:
        if not args.config:
            raise ConfigError("run needs --config")
        cfg = load_config(args.config)
        validate_run(cfg)
        threads = resolve_threads(args.threads, cfg)
        cache = _cache_path(args, cfg)
        output = Path(args.output or cfg["output.path"])
    except ConfigError as exc:
        _error(str(exc))
        return EXIT_CONFIG

    kind = cfg["scenario.kind"]
    collisions = cfg["scenario.collisions"]
    dt, t_end = cfg["time.dt"], cfg["time.t_end"]
    n_steps = max(1, int(round(t_end / dt)))
    integrator = cfg["time.integrator"]
    every = cfg["output.every"]

    try:
        if collisions:
            coeffs = _coefficients_for_run(cfg, cache, threads)
        else:
            coeffs = LatticeGeometry(build_lattice(cfg["lattice.ell"], cfg["lattice.active_radius"]))
    except co.MetaMismatchError as exc:
        _error(f"cache does not match the config: {exc}")
        return EXIT_CONFIG
    except (OSError, co.CacheError) as exc:
        _error(str(exc))
        return EXIT_CONFIG
    except (ValueError, RuntimeError, MemoryError) as exc:
        _error(f"coefficient build failed: {exc}")
        return EXIT_BUILD
    lattice = coeffs.lattice

    record = RunRecord()
    if collisions and hasattr(coeffs, "pair_scale"):
        record.max_rescale = coeffs.summary()["max_rescale"]

    if kind == "homogeneous":
        N0, _ = _initial_densities(cfg, lattice)
        state = initial_state(coeffs, N0)

        def rhs(s):
            return collision_rhs(coeffs, s.N) if collisions else np.zeros_like(s.N)

        def step(s):
            if not collisions:
                return type(s)(s.t + dt, s.N, s.p, s.E)
            return step_homogeneous(coeffs, s, dt, integrator)
    else:
        N0, (left, right) = _initial_densities(cfg, lattice, cfg["grid.n_nodes"])
        grid = Grid1D(cfg["grid.n_nodes"], cfg["grid.dx"], cfg["grid.boundary"],
                      left_state=left, right_state=right)
        state = initial_state(coeffs, N0)

        def rhs(s):
            return transport_rhs_1d(coeffs, grid, s.N, collisions)

        def step(s):
            return step_1d(coeffs, grid, s, dt, integrator, collisions=collisions)

    emit("run", scenario=kind, collisions=collisions, M=lattice.n_cells,
         integrator=integrator, dt=float(dt), steps=n_steps)
    start = state
    record.record_state(coeffs, state, rhs(state))
    status = EXIT_OK
    try:
        for n in range(1, n_steps + 1):
            state = step(state)
            if n % every == 0 or n == n_steps:
                record.record_state(coeffs, state, rhs(state))
    except SolverError as exc:
        _error(f"solver aborted: {exc}")
        emit("abort", t=float(state.t), reason=type(exc).__name__)
        status = EXIT_SOLVER

    try:
        write_timeseries(record, output)
    except OSError as exc:
        _error(str(exc))
        return EXIT_CONFIG if status == EXIT_OK else status
    _print_audit(record, start, state, output)
    return status


def _print_audit(record: RunRecord, start, end, output: Path) -> None:
    a = record.as_array()
    mass = a[:, 1]
    p_gap = np.abs(a[:, 2:5] - a[:, 6:9]).max() if len(a) else math.nan
    E_gap = np.abs(a[:, 5] - a[:, 9]).max() if len(a) else math.nan
    rhs = a[:, 10]
    emit("audit", t=float(end.t), mass_initial=float(mass[0]),
         mass_drift=float(np.abs(mass - mass[0]).max() / max(abs(mass[0]), 1e-300)),
         p_rec_drift=float(np.abs(a[:, 2:5] - a[0, 2:5]).max()),
         E_rec_change=float(a[-1, 5] - a[0, 5]),
         p_gap=float(p_gap), E_gap=float(E_gap),
         rhs_l1_initial=float(rhs[0]), rhs_l1_final=float(rhs[-1]),
         min_N=float(a[:, 11].min()), max_rescale=float(record.max_rescale))
    emit("output", path=output, rows=len(record))


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="octaboltz",
        description="Semi-discrete Boltzmann model on a truncated-octahedron velocity lattice.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, output=False):
        p.add_argument("--config", metavar="PATH", help="run configuration file")
        p.add_argument("--cache", metavar="PATH", help="coefficient cache (overrides cache.path)")
        p.add_argument("--threads", metavar="N", type=int,
                       help=f"worker threads, 0 = automatic (fallback: ${THREADS_ENV})")
        if output:
            p.add_argument("--output", metavar="PATH", help="CSV output (overrides output.path)")

    common(sub.add_parser("build-coeffs", help="build and cache the collision coefficients"))
    common(sub.add_parser("check", help="re-verify the invariants of a cached coefficient set"))
    common(sub.add_parser("run", help="run a scenario and write a CSV time series"), output=True)
    common(sub.add_parser("info", help="print the metadata of a coefficient cache"))
    return parser


COMMANDS = {
    "build-coeffs": cmd_build_coeffs,
    "check": cmd_check,
    "run": cmd_run,
    "info": cmd_info,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors, which matches the config-error code
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return COMMANDS[args.command](args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
