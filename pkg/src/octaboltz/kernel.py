"""Scattering models, total cross section and the gain kernel.

The gain kernel of a test function ``phi`` at a pre-collision pair
``(xi, xi_star)`` is an integral over the sphere of post-collision velocities
``mid +/- |V| u / 2``, with ``mid`` the pair midpoint, ``V = xi - xi_star`` and
``u`` a unit vector parametrised by ``(s, theta)``::

    G(phi) = |V|/8 * int ds dtheta B(|V - |V| u| / 2, |V|) [phi(mid + |V|u/2) + phi(mid - |V|u/2)]

When ``B`` only depends on ``|V|`` the two terms coincide after ``u -> -u``
and the prefactor becomes ``|V| B / 4``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ._validation import check_positive, check_vector3
from .lattice import CellIndex, VelocityLattice

HARD_SPHERE = "hard_sphere"
VHS = "vhs"
GENERAL = "general"


@dataclass(frozen=True)
class KernelModel:
    """Scattering function ``B``.

    ``func`` is ``B(|V|)`` for VHS kernels and ``B(n.V, |V|)`` for general
    ones; both must accept numpy arrays.  ``name`` identifies the kernel in
    coefficient caches, so two kernels with the same name must agree.
    """

    kind: str
    name: str
    b: float = 1.0
    func: Callable | None = field(default=None, compare=False)
    nu_order: int = 64

    @property
    def is_vhs(self) -> bool:
        return self.kind in (HARD_SPHERE, VHS)

    def vhs_value(self, v_mag):
        """``B(|V|)`` for VHS kernels."""
        if self.kind == HARD_SPHERE:
            return np.full_like(np.asarray(v_mag, dtype=float), self.b)
        if self.kind == VHS:
            return np.asarray(self.func(np.asarray(v_mag, dtype=float)), dtype=float)
        raise TypeError("vhs_value is only defined for VHS kernels")

    def value(self, n_dot_v, v_mag):
        """``B(n.V, |V|)``; VHS kernels ignore the first argument."""
        if self.is_vhs:
            return self.vhs_value(np.broadcast_arrays(n_dot_v, v_mag)[1])
        return np.asarray(self.func(n_dot_v, v_mag), dtype=float)


def hard_sphere(b: float = 1.0) -> KernelModel:
    b = check_positive(b, "b")
    return KernelModel(HARD_SPHERE, f"hard_sphere(b={b!r})", b=b)


def vhs(func: Callable, name: str) -> KernelModel:
    """Variable hard sphere kernel with ``B = func(|V|)``."""
    return KernelModel(VHS, f"vhs({name})", func=func)


def vhs_power(b: float, exponent: float) -> KernelModel:
    """VHS kernel ``B(|V|) = b |V|**exponent``."""
    b = check_positive(b, "b")
    exponent = float(exponent)
    return KernelModel(
        VHS, f"vhs_power(b={b!r},exponent={exponent!r})", b=b,
        func=lambda v: b * np.power(v, exponent),
    )


def vhs_table(speeds, values) -> KernelModel:
    """VHS kernel linearly interpolated from a table of ``(|V|, B)`` samples."""
    speeds = np.asarray(speeds, dtype=float)
    values = np.asarray(values, dtype=float)
    if speeds.ndim != 1 or speeds.shape != values.shape or len(speeds) < 2:
        raise ValueError("kernel table needs matching 1-D speed and value arrays")
    if np.any(np.diff(speeds) <= 0):
        raise ValueError("kernel table speeds must be strictly increasing")
    if np.any(values < 0):
        raise ValueError("kernel table values must be non-negative")
    digest = ",".join(f"{s!r}:{v!r}" for s, v in zip(speeds, values))
    return KernelModel(VHS, f"vhs_table({digest})",
                       func=lambda v: np.interp(v, speeds, values))


def general(func: Callable, name: str, nu_order: int = 64) -> KernelModel:
    """Kernel ``B(n.V, |V|)`` with genuine dependence on the first argument."""
    return KernelModel(GENERAL, f"general({name})", func=func, nu_order=nu_order)


def nu(kernel: KernelModel, v_mag):
    """Total cross section ``pi |V| int_0^1 B(|V| s, |V|) s ds``.

    Closed form ``(pi/2) |V| B(|V|)`` for VHS kernels; Gauss-Legendre in ``s``
    otherwise.  Accepts scalars or arrays.
    """
    v = np.asarray(v_mag, dtype=float)
    if np.any(v < 0) or not np.all(np.isfinite(v)):
        raise ValueError("relative speed must be finite and non-negative")
    if kernel.is_vhs:
        # B may be singular at |V| = 0 (negative VHS exponents); that point is set to 0 below
        with np.errstate(divide="ignore", invalid="ignore"):
            out = 0.5 * math.pi * v * kernel.vhs_value(v)
    else:
        x, w = np.polynomial.legendre.leggauss(kernel.nu_order)
        s, w = (x + 1) / 2, w / 2
        vv = v[..., None]
        integral = np.sum(w * kernel.value(vv * s, vv) * s, axis=-1)
        out = math.pi * v * integral
    out = np.where(v == 0, 0.0, out)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class SphereQuadrature:
    """Product rule on the unit sphere: Gauss-Legendre in ``s``, uniform in ``theta``.

    The theta nodes sit at cell midpoints of the uniform grid, so no node has
    ``u_x`` or ``u_y`` exactly zero; with ``n_theta`` even the node set is
    closed under ``u -> -u``.
    """

    n_s: int = 32
    n_theta: int = 32

    def __post_init__(self):
        if self.n_s < 1 or self.n_theta < 2:
            raise ValueError("sphere quadrature needs n_s >= 1 and n_theta >= 2")

    def nodes(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit vectors ``(n_s * n_theta, 3)`` and weights summing to ``4 pi``."""
        return _sphere_nodes(self.n_s, self.n_theta)


_SPHERE_CACHE: dict = {}


def _sphere_nodes(n_s: int, n_theta: int):
    key = (n_s, n_theta)
    if key not in _SPHERE_CACHE:
        s, ws = np.polynomial.legendre.leggauss(n_s)
        theta = -math.pi + 2.0 * math.pi * (np.arange(n_theta) + 0.5) / n_theta
        S, T = np.meshgrid(s, theta, indexing="ij")
        r = np.sqrt(1.0 - S**2)
        u = np.stack([r * np.cos(T), r * np.sin(T), S], axis=-1).reshape(-1, 3)
        w = np.repeat(ws, n_theta) * (2.0 * math.pi / n_theta)
        u.setflags(write=False)
        w.setflags(write=False)
        _SPHERE_CACHE[key] = (u, w)
    return _SPHERE_CACHE[key]


def sphere_weights(kernel: KernelModel, quad: SphereQuadrature, V: np.ndarray):
    """Kernel-weighted sphere rule for a batch of relative velocities.

    Returns unit vectors ``u`` and weights of shape ``(n, n_nodes)`` such that
    ``G(phi) = sum_k w[:, k] * (phi(mid + |V| u_k / 2) + phi(mid - |V| u_k / 2))``
    for general kernels; for VHS kernels the same weights, doubled, go with
    the single ``phi(mid + |V| u_k / 2)`` term.
    """
    u, w = quad.nodes()
    V = np.atleast_2d(V)
    vmag = np.linalg.norm(V, axis=1)
    if kernel.is_vhs:
        b = kernel.vhs_value(vmag)
        return u, (vmag * b / 8.0)[:, None] * w[None, :]
    diff = V[:, None, :] - vmag[:, None, None] * u[None, :, :]
    arg = 0.5 * np.linalg.norm(diff, axis=-1)
    bvals = kernel.value(arg, vmag[:, None])
    return u, (vmag / 8.0)[:, None] * bvals * w[None, :]


def gain_kernel(kernel: KernelModel, quad: SphereQuadrature, phi: Callable, xi, xi_star) -> float:
    """``G(phi; xi, xi_star)`` by sphere quadrature.

    ``phi`` maps an ``(n, 3)`` array of velocities to ``n`` values.
    """
    xi = check_vector3(xi)
    xi_star = check_vector3(xi_star, "xi_star")
    V = xi - xi_star
    vmag = float(np.linalg.norm(V))
    if vmag == 0.0:
        return 0.0
    mid = 0.5 * (xi + xi_star)
    u, w = sphere_weights(kernel, quad, V[None, :])
    w = w[0]
    plus = np.asarray(phi(mid + 0.5 * vmag * u), dtype=float)
    if kernel.is_vhs:
        return float(2.0 * np.dot(w, plus))
    minus = np.asarray(phi(mid - 0.5 * vmag * u), dtype=float)
    return float(np.dot(w, plus + minus))


def gain_kernel_indicator(
    kernel: KernelModel,
    quad: SphereQuadrature,
    lattice: VelocityLattice,
    alpha: CellIndex,
    xi,
    xi_star,
) -> float:
    """``G(chi_alpha; xi, xi_star)``, the gain kernel of a cell indicator."""
    alpha = CellIndex(*alpha)
    centre = alpha.center(lattice.ell)

    def chi(points):
        rel = np.abs(points - centre) / lattice.ell
        return (np.all(rel < 0.5, axis=1) & (rel.sum(axis=1) < 0.75)).astype(float)

    return gain_kernel(kernel, quad, chi, xi, xi_star)
