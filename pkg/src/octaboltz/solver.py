"""Time integration of the closed system for cell densities, momentum and energy.

The density equations are quadratic (Smoluchowski type) in 0-D; in a 1-D slab
each cell density is also advected with the x-component of its cell-mean
velocity.  Momentum and energy are driven passively by the same x-derivatives
and never feed back into the densities.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from ._validation import check_densities, check_positive
from .lattice import VelocityLattice, analytic_geometry
from .quadrature import CellQuadrature

INTEGRATORS = ("euler", "rk4")


class SolverError(RuntimeError):
    """A run was aborted (non-finite or negative densities)."""


class CFLError(SolverError):
    """The time step violates the advective stability bound."""


class LatticeGeometry:
    """Geometry-only stand-in for a coefficient set, for collisionless runs."""

    def __init__(self, lattice: VelocityLattice):
        self.lattice = lattice
        self.geometry = analytic_geometry(lattice)

    @property
    def n_cells(self) -> int:
        return self.lattice.n_cells

    mean_velocity = property(lambda self: self.geometry["mean_velocity"])
    second_moments = property(lambda self: self.geometry["second_moments"])
    energy_flux = property(lambda self: self.geometry["energy_flux"])
    cell_energy = property(lambda self: self.geometry["cell_energy"])


@dataclass(frozen=True)
class KineticState:
    """Densities ``N`` (``(M,)`` or ``(n_nodes, M)``), momentum ``p`` and energy ``E``."""

    t: float
    N: np.ndarray
    p: np.ndarray
    E: np.ndarray

    @property
    def mass(self) -> float:
        return float(np.sum(self.N))


@dataclass(frozen=True)
class Grid1D:
    """Uniform slab grid; ``inflow`` boundaries take fixed ghost densities."""

    n_nodes: int
    dx: float
    boundary: str = "periodic"
    left_state: np.ndarray | None = field(default=None, compare=False)
    right_state: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if int(self.n_nodes) < 2:
            raise ValueError("a slab grid needs at least two nodes")
        check_positive(self.dx, "dx")
        if self.boundary not in ("periodic", "inflow"):
            raise ValueError(f"unknown boundary {self.boundary!r}")
        if self.boundary == "inflow" and (self.left_state is None or self.right_state is None):
            raise ValueError("inflow boundaries need left_state and right_state")

    @property
    def x(self) -> np.ndarray:
        return (np.arange(self.n_nodes) + 0.5) * self.dx


def initial_state(coeffs, N, t: float = 0.0) -> KineticState:
    """State whose integrated moments start at their reconstructions."""
    N = check_densities(N, coeffs.n_cells)
    p = N @ coeffs.mean_velocity
    E = 0.5 * (N @ coeffs.cell_energy)
    return KineticState(float(t), N.copy(), p, np.asarray(E))


# --------------------------------------------------------------------------
# right-hand sides


def collision_rhs(coeffs, N) -> np.ndarray:
    """``1/2 sum G[a; b, c] N_b N_c - N_a sum_b nu[a, b] N_b``.

    ``N`` may be one density vector or a stack ``(n_nodes, M)``.
    """
    N = check_densities(N, coeffs.n_cells)
    b, g = coeffs.pair_beta, coeffs.pair_gamma
    if N.ndim == 1:
        gain = coeffs.gain_matrix @ (N[b] * N[g])
        return gain - N * (coeffs.loss @ N)
    gain = (coeffs.gain_matrix @ (N[:, b] * N[:, g]).T).T
    return gain - N * (N @ coeffs.loss)


def loss_rate(coeffs, N) -> np.ndarray:
    """Per-cell loss frequency ``sum_b nu[a, b] N_b``."""
    return N @ coeffs.loss


def euler_dt_bound(coeffs, N) -> float:
    """Largest Euler step that keeps every density non-negative."""
    rate = float(np.max(loss_rate(coeffs, N))) if np.size(N) else 0.0
    return math.inf if rate <= 0 else 0.5 / rate


def _upwind_difference(grid: Grid1D, N: np.ndarray, speed: np.ndarray) -> np.ndarray:
    """Upwind ``dN/dx`` per node and cell, direction set by the sign of ``speed``."""
    if grid.boundary == "periodic":
        left = np.roll(N, 1, axis=0)
        right = np.roll(N, -1, axis=0)
    else:
        left = np.vstack([np.asarray(grid.left_state, dtype=float)[None, :], N[:-1]])
        right = np.vstack([N[1:], np.asarray(grid.right_state, dtype=float)[None, :]])
    backward = N - left
    forward = right - N
    return np.where(speed > 0, backward, forward) / grid.dx


def transport_rhs_1d(coeffs, grid: Grid1D, N, collisions: bool = True) -> np.ndarray:
    """Upwind advection along x plus (optionally) collisions, per node."""
    N = check_densities(N, coeffs.n_cells)
    if N.shape != (grid.n_nodes, coeffs.n_cells):
        raise ValueError(f"slab densities must have shape ({grid.n_nodes}, {coeffs.n_cells})")
    speed = coeffs.mean_velocity[:, 0]
    out = -speed * _upwind_difference(grid, N, speed)
    if collisions:
        out = out + collision_rhs(coeffs, N)
    return out


def _moment_rhs_1d(coeffs, grid: Grid1D, N):
    speed = coeffs.mean_velocity[:, 0]
    D = _upwind_difference(grid, N, speed)
    # x-column of the second-moment tensor, and x-component of the energy flux
    pi_x = coeffs.second_moments[:, 0, :]
    e_x = coeffs.energy_flux[:, 0]
    return -(D @ pi_x), -0.5 * (D @ e_x)


# --------------------------------------------------------------------------
# steppers


def _check_state(N: np.ndarray, t: float, negative_tol: float):
    if not np.all(np.isfinite(N)):
        raise SolverError(f"non-finite density at t={t:.6g}")
    floor = -negative_tol * max(float(np.abs(N).sum()), 1.0)
    if np.min(N) < floor:
        a = np.unravel_index(np.argmin(N), N.shape)
        raise SolverError(
            f"negative density {np.min(N):.3e} in cell {a} at t={t:.6g}; reduce dt")


def _rk_step(f, y, dt, integrator):
    if integrator == "euler":
        return y + dt * f(y)
    k1 = f(y)
    k2 = f(y + 0.5 * dt * k1)
    k3 = f(y + 0.5 * dt * k2)
    k4 = f(y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step_homogeneous(coeffs, state: KineticState, dt: float, integrator: str = "rk4",
                     negative_tol: float = 0.0) -> KineticState:
    """Advance a spatially homogeneous state by one step.

    Momentum and energy have zero right-hand side here and are carried over.
    Explicit Euler additionally requires ``dt`` below :func:`euler_dt_bound`.
    """
    dt = check_positive(dt, "dt")
    if integrator not in INTEGRATORS:
        raise ValueError(f"integrator must be one of {INTEGRATORS}")
    N = state.N
    if integrator == "euler":
        bound = euler_dt_bound(coeffs, N)
        if dt > bound:
            raise SolverError(f"dt={dt:.3g} exceeds the Euler positivity bound {bound:.3g}")
    new = _rk_step(lambda y: collision_rhs(coeffs, y), N, dt, integrator)
    t = state.t + dt
    _check_state(new, t, negative_tol)
    return replace(state, t=t, N=new)


def cfl_number(coeffs, grid: Grid1D, dt: float) -> float:
    return float(dt * np.max(np.abs(coeffs.mean_velocity[:, 0])) / grid.dx)


def step_1d(coeffs, grid: Grid1D, state: KineticState, dt: float, integrator: str = "euler",
            collisions: bool = True, moments: bool = True, cfl_max: float = 0.9,
            negative_tol: float = 0.0) -> KineticState:
    """Advance a slab state: densities by upwind transport and collisions, then p and E.

    ``moments=False`` skips the momentum and energy update; the densities are
    computed by exactly the same operations either way.
    """
    dt = check_positive(dt, "dt")
    if integrator not in INTEGRATORS:
        raise ValueError(f"integrator must be one of {INTEGRATORS}")
    cfl = cfl_number(coeffs, grid, dt)
    if cfl > cfl_max:
        raise CFLError(f"CFL number {cfl:.3f} exceeds {cfl_max}")

    def f_N(y):
        return transport_rhs_1d(coeffs, grid, y, collisions)

    N = state.N
    if integrator == "euler":
        new_N = N + dt * f_N(N)
        if moments:
            dp, dE = _moment_rhs_1d(coeffs, grid, N)
            new_p, new_E = state.p + dt * dp, state.E + dt * dE
        else:
            new_p, new_E = state.p, state.E
    else:
        stages = [N]
        k1 = f_N(N)
        y2 = N + 0.5 * dt * k1
        k2 = f_N(y2)
        y3 = N + 0.5 * dt * k2
        k3 = f_N(y3)
        y4 = N + dt * k3
        k4 = f_N(y4)
        new_N = N + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        stages += [y2, y3, y4]
        if moments:
            rhs = [_moment_rhs_1d(coeffs, grid, y) for y in stages]
            new_p = state.p + (dt / 6.0) * (rhs[0][0] + 2 * rhs[1][0] + 2 * rhs[2][0] + rhs[3][0])
            new_E = state.E + (dt / 6.0) * (rhs[0][1] + 2 * rhs[1][1] + 2 * rhs[2][1] + rhs[3][1])
        else:
            new_p, new_E = state.p, state.E
    t = state.t + dt
    _check_state(new_N, t, negative_tol)
    return KineticState(t, new_N, new_p, new_E)


# --------------------------------------------------------------------------
# initial data


def maxwellian_tail_mass(radius: float, u0, T0: float, n0: float = 1.0) -> float:
    """Mass of ``n0 * M(u0, T0)`` outside the ball ``|xi| <= radius``."""
    u0 = np.asarray(u0, dtype=float)
    lam = float(u0 @ u0) / T0
    x = radius**2 / T0
    if lam == 0.0:
        return n0 * float(stats.chi2.sf(x, 3))
    return n0 * float(stats.ncx2.sf(x, 3, lam))


def initialize_from_maxwellian(lattice: VelocityLattice, n0: float, u0, T0: float,
                               quadrature: CellQuadrature | None = None) -> np.ndarray:
    """Cell integrals of ``n0 (2 pi T0)^(-3/2) exp(-|xi - u0|^2 / (2 T0))``.

    Without an explicit ``quadrature`` the cell rule order grows as the
    thermal width ``sqrt(T0)`` shrinks against ``ell``, keeping the captured
    mass accurate to about 1e-6 for cold data.
    """
    n0 = check_positive(n0, "n0")
    T0 = check_positive(T0, "T0")
    u0 = np.asarray(u0, dtype=float).reshape(3)
    if lattice.active_radius < np.linalg.norm(u0) + 3.0 * math.sqrt(T0):
        warnings.warn(
            f"active radius {lattice.active_radius} < |u0| + 3 sqrt(T0); "
            f"tail mass {maxwellian_tail_mass(lattice.active_radius, u0, T0, n0):.3g} is lost",
            RuntimeWarning, stacklevel=2)
    if quadrature is None:
        order = min(16, max(3, math.ceil(0.7 * lattice.ell / math.sqrt(T0))))
        quadrature = CellQuadrature("tet", order)
    rule = quadrature.rule(lattice.ell)
    norm = n0 * (2.0 * math.pi * T0) ** -1.5
    out = np.empty(lattice.n_cells)
    centers = lattice.centers
    for start in range(0, len(out), 64):
        xi = centers[start:start + 64, None, :] + rule.offsets[None, :, :] - u0
        f = norm * np.exp(-np.einsum("cnk,cnk->cn", xi, xi) / (2.0 * T0))
        out[start:start + 64] = f @ rule.weights
    return out


def integrate_homogeneous(coeffs, N0, dt: float, n_steps: int, integrator: str = "rk4",
                          callback=None, negative_tol: float = 0.0) -> KineticState:
    """Run ``n_steps`` homogeneous steps; ``callback(state)`` sees every state."""
    state = initial_state(coeffs, N0)
    if callback is not None:
        callback(state)
    for _ in range(int(n_steps)):
        state = step_homogeneous(coeffs, state, dt, integrator, negative_tol)
        if callback is not None:
            callback(state)
    return state
