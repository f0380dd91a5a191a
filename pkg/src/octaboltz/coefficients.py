"""Collision coefficients: gain tensor, loss matrix and their cache file.

The gain coefficient ``G[a; b, c]`` is the average of the gain kernel of the
indicator of cell ``a`` over pre-collision pairs in ``C_b x C_c``; the loss
coefficient ``nu[b, c]`` is the average of the total cross section over the
same set.  Both depend on the three cells only through their relative
positions, and are invariant under the cubic point group, so they are
computed once per *offset class*: the orbit of ``c_c - c_b`` under the 48
signed permutations.  A representative ``d0`` (absolute values sorted in
decreasing order, doubled lattice units) carries a sparse table
``r -> G[r; 0, d0]`` that is symmetrised over every group operation mapping
the pair ``(0, d0)`` onto itself or onto ``(d0, 0)``.

Expanding to the active set drops post-collision cells outside it (leak); a
per-pair rescale then restores ``sum_a G[a; b, c] = 2 nu[b, c]`` exactly.
"""

from __future__ import annotations

import io
import json
import logging
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse

from . import kernel as _kernel
from ._accumulate import scatter_sphere
from .kernel import KernelModel, SphereQuadrature
from .lattice import (
    VelocityLattice,
    analytic_geometry,
    build_lattice,
    cell_volume,
    central_second_moment,
    circumradius,
    point_group,
)
from .quadrature import CellQuadrature

logger = logging.getLogger(__name__)

MAGIC = b"OCTB1"
ZERO_SUM_POLICIES = ("disable", "keep")
_CHUNK = 256


class CacheError(ValueError):
    """Base class for unreadable or incompatible coefficient caches."""


class TruncatedCacheError(CacheError):
    pass


class HashMismatchError(CacheError):
    pass


class MetaMismatchError(CacheError):
    pass


class CacheFormatError(CacheError):
    pass


@dataclass(frozen=True)
class BuildSpec:
    """Quadrature and policy settings of a coefficient build.

    ``outer`` samples pre-collision pairs for the gain tables; ``loss_outer``
    is the (finer) rule for the loss coefficients.  The gain kernel is not
    smooth where the two velocities meet, and a separate loss rule keeps the
    comparison between gain sums and loss an honest measure of quadrature
    error instead of an identity of the shared nodes.
    """

    outer: CellQuadrature = field(default_factory=lambda: CellQuadrature("tet", 1))
    loss_outer: CellQuadrature = field(default_factory=lambda: CellQuadrature("tet", 2))
    sphere: SphereQuadrature = field(default_factory=lambda: SphereQuadrature(48, 48))
    drop_tolerance: float = 1e-12
    leak_budget: float = 0.25
    zero_sum_policy: str = "disable"
    threads: int = 1

    def __post_init__(self):
        if self.zero_sum_policy not in ZERO_SUM_POLICIES:
            raise ValueError(f"zero_sum_policy must be one of {ZERO_SUM_POLICIES}")
        if not (0.0 <= self.drop_tolerance < 1.0):
            raise ValueError("drop_tolerance must lie in [0, 1)")
        if not (0.0 <= self.leak_budget <= 1.0):
            raise ValueError("leak_budget must lie in [0, 1]")


# --------------------------------------------------------------------------
# offset classes


def canonical_offset(d: np.ndarray) -> np.ndarray:
    """Orbit representative: absolute values sorted in decreasing order."""
    return -np.sort(-np.abs(d), axis=-1)


def pair_table(lattice: VelocityLattice):
    """All stored pairs ``beta <= gamma``, their class ids and class representatives."""
    M = lattice.n_cells
    beta, gamma = np.triu_indices(M)
    d = lattice.doubled[gamma] - lattice.doubled[beta]
    reps, class_id = np.unique(canonical_offset(d), axis=0, return_inverse=True)
    return beta.astype(np.int64), gamma.astype(np.int64), reps, class_id.reshape(-1)


def pair_ordinal(M: int, beta, gamma):
    """Position of ``(beta, gamma)`` (any order) in the ``triu_indices`` pair list."""
    b = np.minimum(beta, gamma)
    g = np.maximum(beta, gamma)
    return b * M - b * (b - 1) // 2 + (g - b)


def class_symmetries(d0: np.ndarray):
    """Affine maps ``r -> g r + t`` that fix the class ``(0, d0)`` up to a swap."""
    maps = []
    for g in point_group():
        gd = g @ d0
        if np.array_equal(gd, d0):
            maps.append((g, np.zeros(3, dtype=np.int64)))
        elif np.array_equal(gd, -d0):
            maps.append((g, d0.copy()))
    return maps


def _map_onto(d: np.ndarray):
    """Signed permutation ``(perm, sign)`` per row with ``sign * d0[perm] == d``."""
    order = np.argsort(-np.abs(d), axis=1, kind="stable")
    perm = np.argsort(order, axis=1, kind="stable")
    sign = np.where(d < 0, -1, 1)
    return perm, sign


# --------------------------------------------------------------------------
# class-level quadrature


@dataclass
class ClassTable:
    offset: np.ndarray  # (3,) doubled
    loss: float
    r: np.ndarray  # (n, 3) doubled relative offsets of post-collision cells
    value: np.ndarray  # (n,)
    lost: float = 0.0  # weight on cell boundaries (measure zero)
    dropped: float = 0.0  # weight removed by the drop tolerance


def _outer_nodes(lattice: VelocityLattice, rule_spec: CellQuadrature):
    rule = rule_spec.rule(1.0)
    y = 2.0 * np.asarray(rule.offsets)  # doubled units
    w = np.asarray(rule.weights) / rule.weights.sum()
    return y, w


def class_loss(lattice: VelocityLattice, kernel: KernelModel, spec: BuildSpec, d0,
               rule: CellQuadrature | None = None) -> float:
    """``nu[0, d0]``: mean total cross section over the cell pair, on ``spec.loss_outer``."""
    y, w = _outer_nodes(lattice, rule or spec.loss_outer)
    d0 = np.asarray(d0, dtype=float)
    total = 0.0
    for start in range(0, len(w), _CHUNK):
        yi = y[start:start + _CHUNK]
        V = 0.5 * lattice.ell * (yi[:, None, :] - d0 - y[None, :, :])
        nu = _kernel.nu(kernel, np.linalg.norm(V, axis=-1))
        total += float(np.sum(w[start:start + _CHUNK, None] * w[None, :] * nu))
    return total


def class_gain(
    lattice: VelocityLattice,
    kernel: KernelModel,
    spec: BuildSpec,
    d0,
    symmetrize: bool = True,
) -> ClassTable:
    """Gain table ``r -> G[r; 0, d0]`` before any active-set truncation."""
    d0 = np.asarray(d0, dtype=np.int64)
    y, w = _outer_nodes(lattice, spec.outer)
    u, _ = spec.sphere.nodes()
    n = len(w)
    I, J = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    I, J = I.reshape(-1), J.reshape(-1)
    wij = w[I] * w[J]

    # accumulator box in doubled units
    rmax = np.linalg.norm(d0) / 2.0 + 2.0 * np.abs(y).max() + 2.0
    lo = int(math.floor(min(0, d0.min()) - rmax)) - 2
    hi = int(math.ceil(max(0, d0.max()) + rmax)) + 2
    size = hi - lo + 1
    acc = np.zeros(size**3)
    lost = 0.0
    loss = 0.0
    for start in range(0, len(I), _CHUNK):
        i, j = I[start:start + _CHUNK], J[start:start + _CHUNK]
        xi = y[i]
        xs = d0 + y[j]
        mid = 0.5 * (xi + xs)
        Vd = xi - xs
        V = 0.5 * lattice.ell * Vd
        vmag = np.linalg.norm(V, axis=1)
        half = 0.5 * np.linalg.norm(Vd, axis=1)
        loss += float(np.dot(wij[start:start + _CHUNK], _kernel.nu(kernel, vmag)))
        _, sw = _kernel.sphere_weights(kernel, spec.sphere, V)
        W = wij[start:start + _CHUNK, None] * sw
        if kernel.is_vhs:
            W = 2.0 * W
        lost += scatter_sphere(mid, half, np.ascontiguousarray(W), u,
                               not kernel.is_vhs, lo, size, acc)

    nz = np.flatnonzero(acc)
    i0, rem = np.divmod(nz, size * size)
    i1, i2 = np.divmod(rem, size)
    r = np.stack([i0, i1, i2], axis=1).astype(np.int64) + lo
    val = acc[nz]

    if symmetrize:
        maps = class_symmetries(d0)
        rr = np.concatenate([r @ g.T + t for g, t in maps])
        vv = np.tile(val, len(maps))
        r, inv = np.unique(rr, axis=0, return_inverse=True)
        val = np.bincount(inv.reshape(-1), weights=vv, minlength=len(r)) / len(maps)
    else:
        order = np.lexsort(r.T[::-1])
        r, val = r[order], val[order]

    dropped = 0.0
    if spec.drop_tolerance > 0:
        keep = val > spec.drop_tolerance * loss
        dropped = float(val[~keep].sum())
        r, val = r[keep], val[keep]
    return ClassTable(d0, loss, r, val, lost, dropped)


def _compute_classes(lattice, kernel, spec, reps, what):
    threads = spec.threads or os.cpu_count() or 1

    def work(d0):
        if what == "loss":
            return class_loss(lattice, kernel, spec, d0)
        return class_gain(lattice, kernel, spec, d0)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(work, reps))
    return [work(d0) for d0 in reps]


# --------------------------------------------------------------------------
# the coefficient set


class CoefficientSet:
    """Gain tensor, loss matrix and cell geometry for one lattice and kernel.

    Stored form: per-class tables plus one rescale factor per pair
    ``beta <= gamma``.  Expanded arrays over the active set are derived on
    first access.  ``pair_scale == 0`` marks a pair whose collisions are
    disabled (its whole gain leaked out of the active set).
    """

    def __init__(self, lattice, kernel_name, spec, class_offsets, class_loss,
                 class_ptr, class_r, class_value, pair_scale=None, corrected=False,
                 diagnostics=None):
        self.lattice = lattice
        self.kernel_name = kernel_name
        self.spec = spec
        self.class_offsets = np.asarray(class_offsets, dtype=np.int64)
        self.class_loss = np.asarray(class_loss, dtype=float)
        self.class_ptr = np.asarray(class_ptr, dtype=np.int64)
        self.class_r = np.asarray(class_r, dtype=np.int64).reshape(-1, 3)
        self.class_value = np.asarray(class_value, dtype=float)
        M = lattice.n_cells
        n_pairs = M * (M + 1) // 2
        if pair_scale is None:
            pair_scale = np.ones(n_pairs)
        self.pair_scale = np.asarray(pair_scale, dtype=float)
        if self.pair_scale.shape != (n_pairs,):
            raise ValueError("pair_scale does not match the lattice")
        self.corrected = bool(corrected)
        self.diagnostics = dict(diagnostics or {})

    # -- basic shape -------------------------------------------------------

    @property
    def n_cells(self) -> int:
        return self.lattice.n_cells

    @property
    def ell(self) -> float:
        return self.lattice.ell

    @cached_property
    def _pairs(self):
        beta, gamma, reps, class_id = pair_table(self.lattice)
        if not np.array_equal(reps, self.class_offsets):
            raise ValueError("class table does not match the lattice offset classes")
        return beta, gamma, class_id

    @property
    def pair_beta(self):
        return self._pairs[0]

    @property
    def pair_gamma(self):
        return self._pairs[1]

    @property
    def pair_class(self):
        return self._pairs[2]

    @property
    def pair_loss_raw(self) -> np.ndarray:
        return self.class_loss[self.pair_class]

    @property
    def pair_enabled(self) -> np.ndarray:
        return self.pair_scale > 0

    @property
    def pair_loss(self) -> np.ndarray:
        return np.where(self.pair_enabled, self.pair_loss_raw, 0.0)

    # -- expansion ---------------------------------------------------------

    @cached_property
    def _expanded(self):
        lat = self.lattice
        H = lat.doubled
        beta, gamma, class_id = self._pairs
        n_pairs = len(beta)
        parts_a, parts_p, parts_v = [], [], []
        total = np.zeros(n_pairs)
        inset = np.zeros(n_pairs)
        order = np.argsort(class_id, kind="stable")
        bounds = np.searchsorted(class_id[order], np.arange(len(self.class_offsets) + 1))
        for c in range(len(self.class_offsets)):
            pairs = order[bounds[c]:bounds[c + 1]]
            lo, hi = self.class_ptr[c], self.class_ptr[c + 1]
            r = self.class_r[lo:hi]
            val = self.class_value[lo:hi]
            if len(pairs) == 0 or len(r) == 0:
                continue
            d = H[gamma[pairs]] - H[beta[pairs]]
            perm, sign = _map_onto(d)
            rr = sign[:, None, :] * np.moveaxis(r[:, perm], 0, 1)
            alpha = lat.lookup_doubled(H[beta[pairs]][:, None, :] + rr)
            vals = np.broadcast_to(val, alpha.shape)
            total[pairs] = val.sum()
            mask = alpha >= 0
            inset[pairs] = np.where(mask, vals, 0.0).sum(axis=1)
            pid = np.broadcast_to(pairs[:, None], alpha.shape)
            parts_a.append(alpha[mask])
            parts_p.append(pid[mask])
            parts_v.append(vals[mask])
        alpha = np.concatenate(parts_a) if parts_a else np.zeros(0, np.int64)
        pid = np.concatenate(parts_p) if parts_p else np.zeros(0, np.int64)
        raw = np.concatenate(parts_v) if parts_v else np.zeros(0)
        order = np.lexsort((alpha, pid))
        return alpha[order], pid[order], raw[order], total, inset

    @property
    def gain_alpha(self) -> np.ndarray:
        return self._expanded[0]

    @property
    def gain_pair(self) -> np.ndarray:
        return self._expanded[1]

    @property
    def gain_beta(self) -> np.ndarray:
        return self.pair_beta[self.gain_pair]

    @property
    def gain_gamma(self) -> np.ndarray:
        return self.pair_gamma[self.gain_pair]

    @property
    def gain_raw(self) -> np.ndarray:
        """Expanded gain values before the per-pair rescale."""
        return self._expanded[2]

    @cached_property
    def gain_value(self) -> np.ndarray:
        """Expanded gain values ``G[alpha; beta, gamma]`` (``beta <= gamma``)."""
        return self.gain_raw * self.pair_scale[self.gain_pair]

    @property
    def pair_gain_total(self) -> np.ndarray:
        """Per pair, sum of gain over all post-collision cells, active or not."""
        return self._expanded[3]

    @property
    def pair_gain_inset(self) -> np.ndarray:
        return self._expanded[4]

    @property
    def pair_leak(self) -> np.ndarray:
        return self.pair_gain_total - self.pair_gain_inset

    @property
    def nnz(self) -> int:
        return len(self.gain_alpha)

    @cached_property
    def loss(self) -> np.ndarray:
        """Dense symmetric loss matrix ``nu[alpha, beta]``."""
        M = self.n_cells
        out = np.zeros((M, M))
        out[self.pair_beta, self.pair_gamma] = self.pair_loss
        out[self.pair_gamma, self.pair_beta] = self.pair_loss
        out.setflags(write=False)
        return out

    @cached_property
    def gain_matrix(self) -> sparse.csr_matrix:
        """``(M, n_pairs)`` matrix with ``gain_matrix @ (N_b N_c)`` = the gain term.

        Diagonal pairs carry the factor 1/2 of the double sum; off-diagonal
        pairs appear once for both orders.
        """
        half = np.where(self.pair_beta == self.pair_gamma, 0.5, 1.0)
        vals = self.gain_value * half[self.gain_pair]
        mat = sparse.csr_matrix(
            (vals, (self.gain_alpha, self.gain_pair)),
            shape=(self.n_cells, len(self.pair_beta)),
        )
        mat.sort_indices()
        return mat

    def gain_entry(self, alpha: int, beta: int, gamma: int, raw: bool = False) -> float:
        """Single coefficient ``G[alpha; beta, gamma]`` by ordinals (0 if absent)."""
        M = self.n_cells
        p = int(pair_ordinal(M, beta, gamma))
        key = self.gain_pair * M + self.gain_alpha
        want = p * M + alpha
        pos = np.searchsorted(key, want)
        if pos < len(key) and key[pos] == want:
            return float((self.gain_raw if raw else self.gain_value)[pos])
        return 0.0

    # -- geometry and meta ---------------------------------------------------

    @cached_property
    def geometry(self) -> dict:
        return analytic_geometry(self.lattice)

    @property
    def mean_velocity(self) -> np.ndarray:
        return self.geometry["mean_velocity"]

    @property
    def second_moments(self) -> np.ndarray:
        return self.geometry["second_moments"]

    @property
    def energy_flux(self) -> np.ndarray:
        return self.geometry["energy_flux"]

    @property
    def cell_energy(self) -> np.ndarray:
        """Cell average of ``|xi|^2``."""
        return self.geometry["cell_energy"]

    @property
    def meta(self) -> dict:
        return {
            "ell": self.lattice.ell,
            "active_radius": self.lattice.active_radius,
            "kernel": self.kernel_name,
            "outer_kind": self.spec.outer.kind,
            "outer_order": int(self.spec.outer.order),
            "loss_kind": self.spec.loss_outer.kind,
            "loss_order": int(self.spec.loss_outer.order),
            "n_s": self.spec.sphere.n_s,
            "n_theta": self.spec.sphere.n_theta,
            "corrected": self.corrected,
            "leak_budget": self.spec.leak_budget,
            "drop_tolerance": self.spec.drop_tolerance,
            "zero_sum_policy": self.spec.zero_sum_policy,
            "build_hash": f"{content_hash(self):016x}",
        }

    # -- quality figures -----------------------------------------------------

    def conservation_residual(self) -> np.ndarray:
        """Per pair ``|1/2 sum_a G[a; b, c] - nu[b, c]| / nu[b, c]`` over the active set."""
        gsum = np.bincount(self.gain_pair, weights=self.gain_value,
                           minlength=len(self.pair_beta))
        nu = self.pair_loss
        res = np.abs(0.5 * gsum - nu)
        return np.divide(res, nu, out=np.where(res > 0, np.inf, 0.0), where=nu > 0)

    def quadrature_residual(self) -> np.ndarray:
        """Per pair, the same residual with leaked cells included and no rescale.

    This isolates quadrature error: the gain and loss rules differ, and
    truncation of the active set plays no part.
    """
        nu = self.pair_loss_raw
        res = np.abs(0.5 * self.pair_gain_total - nu)
        return np.divide(res, nu, out=np.zeros_like(res), where=nu > 0)

    def leak_fraction(self) -> np.ndarray:
        tot = self.pair_gain_total
        return np.divide(self.pair_leak, tot, out=np.zeros_like(tot), where=tot > 0)

    def summary(self) -> dict:
        lf = self.leak_fraction()
        scale = self.pair_scale[self.pair_enabled]
        return {
            "M": self.n_cells,
            "pairs": len(self.pair_beta),
            "classes": len(self.class_offsets),
            "nnz": self.nnz,
            "max_rescale": float(scale.max()) if len(scale) else 0.0,
            "min_rescale": float(scale.min()) if len(scale) else 0.0,
            "leak_fraction_max": float(lf.max()) if len(lf) else 0.0,
            "leak_fraction_mean": float(lf.mean()) if len(lf) else 0.0,
            "disabled_pairs": int((~self.pair_enabled).sum()),
            "prop2_residual": float(self.conservation_residual().max()),
            "quadrature_residual": float(self.quadrature_residual().max()),
        }


# --------------------------------------------------------------------------
# build operations


def build_loss(lattice: VelocityLattice, kernel: KernelModel, spec: BuildSpec | None = None) -> np.ndarray:
    """Dense loss matrix, by cell-pair quadrature of the total cross section."""
    spec = spec or BuildSpec()
    beta, gamma, reps, class_id = pair_table(lattice)
    values = np.array(_compute_classes(lattice, kernel, spec, reps, "loss"))
    M = lattice.n_cells
    out = np.zeros((M, M))
    out[beta, gamma] = values[class_id]
    out[gamma, beta] = values[class_id]
    return out


def build_gain(lattice: VelocityLattice, kernel: KernelModel, spec: BuildSpec | None = None) -> CoefficientSet:
    """Gain tables for every offset class, with the matching loss values.

    Returns an uncorrected :class:`CoefficientSet`; pass it through
    :func:`enforce_conservation` before use.
    """
    spec = spec or BuildSpec()
    _, _, reps, _ = pair_table(lattice)
    tables = _compute_classes(lattice, kernel, spec, reps, "gain")
    loss = np.array(_compute_classes(lattice, kernel, spec, reps, "loss"))
    ptr = np.zeros(len(tables) + 1, dtype=np.int64)
    ptr[1:] = np.cumsum([len(t.value) for t in tables])
    r = np.concatenate([t.r for t in tables]) if tables else np.zeros((0, 3), np.int64)
    val = np.concatenate([t.value for t in tables]) if tables else np.zeros(0)
    diag = {
        "boundary_weight": float(sum(t.lost for t in tables)),
        "dropped_weight": float(sum(t.dropped for t in tables)),
        "warnings": [],
    }
    coeffs = CoefficientSet(lattice, kernel.name, spec, reps, loss, ptr, r, val,
                            diagnostics=diag)
    lf = coeffs.leak_fraction()
    over = int((lf > spec.leak_budget).sum())
    if over:
        msg = (f"{over} of {len(lf)} pairs leak more than {spec.leak_budget:.0%} "
               f"of their gain outside the active set (max {lf.max():.3f})")
        coeffs.diagnostics["warnings"].append(msg)
        logger.warning(msg)
    return coeffs


def enforce_conservation(coeffs: CoefficientSet) -> CoefficientSet:
    """Rescale each pair's gain so that half its sum equals the loss coefficient."""
    nu = coeffs.pair_loss_raw
    gsum = coeffs.pair_gain_inset
    scale = np.ones_like(nu)
    pos = gsum > 0
    scale[pos] = 2.0 * nu[pos] / gsum[pos]
    empty = ~pos & (nu > 0)
    diag = dict(coeffs.diagnostics)
    diag["warnings"] = list(diag.get("warnings", []))
    if empty.any():
        msg = f"{int(empty.sum())} pairs have no in-set gain but positive loss"
        if coeffs.spec.zero_sum_policy == "disable":
            scale[empty] = 0.0
            msg += "; their collisions are disabled"
        diag["warnings"].append(msg)
        logger.warning(msg)
    bad = pos & ((scale < 0.5) | (scale > 2.0))
    if bad.any():
        msg = (f"{int(bad.sum())} pairs need a rescale outside [0.5, 2] "
               f"(range {scale[pos].min():.3f}..{scale[pos].max():.3f})")
        diag["warnings"].append(msg)
        logger.warning(msg)
    out = CoefficientSet(coeffs.lattice, coeffs.kernel_name, coeffs.spec,
                         coeffs.class_offsets, coeffs.class_loss, coeffs.class_ptr,
                         coeffs.class_r, coeffs.class_value, scale, True, diag)
    # reuse the expansion, it does not depend on the rescale
    if "_expanded" in coeffs.__dict__:
        out.__dict__["_expanded"] = coeffs.__dict__["_expanded"]
        out.__dict__["_pairs"] = coeffs.__dict__["_pairs"]
    return out


def build_coefficients(lattice: VelocityLattice, kernel: KernelModel,
                       spec: BuildSpec | None = None, correct: bool = True) -> CoefficientSet:
    coeffs = build_gain(lattice, kernel, spec)
    return enforce_conservation(coeffs) if correct else coeffs


# --------------------------------------------------------------------------
# invariant checks


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def check_coefficients(coeffs: CoefficientSet, tol: float = 1e-13, samples: int = 20,
                       seed: int = 0) -> list[CheckResult]:
    """Re-verify the structural invariants of a coefficient set."""
    results = []
    lat = coeffs.lattice
    M = coeffs.n_cells

    neg = int((coeffs.class_value < 0).sum() + (coeffs.class_loss < 0).sum()
              + (coeffs.pair_scale < 0).sum())
    results.append(CheckResult("nonnegativity", neg == 0, f"{neg} negative entries"))

    # symmetry of each class table under the maps fixing its pair (this is
    # what makes G[a; b, c] = G[a; c, b]); the loss matrix is symmetric by storage
    worst = 0.0
    for c, d0 in enumerate(coeffs.class_offsets):
        lo, hi = coeffs.class_ptr[c], coeffs.class_ptr[c + 1]
        r, val = coeffs.class_r[lo:hi], coeffs.class_value[lo:hi]
        table = {tuple(x): v for x, v in zip(r.tolist(), val)}
        for g, t in class_symmetries(d0):
            for x, v in zip((r @ g.T + t).tolist(), val):
                worst = max(worst, abs(table.get(tuple(x), 0.0) - v) / max(abs(v), 1e-300))
    loss_sym = float(np.abs(coeffs.loss - coeffs.loss.T).max()) if M else 0.0
    results.append(CheckResult(
        "symmetry", worst <= 1e-10 and loss_sym == 0.0,
        f"class-table max relative asymmetry {worst:.3e}, loss asymmetry {loss_sym:.1e}"))

    # reachable-ball support
    c = lat.centers
    rc = circumradius(lat.ell)
    nb = np.linalg.norm(c[coeffs.gain_beta], axis=1)
    ng = np.linalg.norm(c[coeffs.gain_gamma], axis=1)
    reach = np.sqrt((nb + rc) ** 2 + (ng + rc) ** 2) + rc
    na = np.linalg.norm(c[coeffs.gain_alpha], axis=1)
    outside = int((na > reach * (1 + 1e-12)).sum())
    results.append(CheckResult("support", outside == 0,
                               f"{outside} entries outside the reachable ball"))

    res = coeffs.conservation_residual()
    worst_res = float(res.max()) if len(res) else 0.0
    results.append(CheckResult("conservation", worst_res <= tol,
                               f"max relative residual {worst_res:.3e} (tol {tol:.0e})"))

    # cubic symmetry of the expanded tensor on sampled entries
    rng = np.random.default_rng(seed)
    group = point_group()
    worst = 0.0
    if coeffs.nnz:
        for n in rng.choice(coeffs.nnz, size=min(samples, coeffs.nnz), replace=False):
            a, b, g_ = coeffs.gain_alpha[n], coeffs.gain_beta[n], coeffs.gain_gamma[n]
            ref = coeffs.gain_value[n]
            H = lat.doubled[[a, b, g_]]
            for g in group:
                a2, b2, g2 = lat.lookup_doubled(H @ g.T)
                worst = max(worst, abs(coeffs.gain_entry(a2, b2, g2) - ref) / ref)
    results.append(CheckResult("cubic_symmetry", bool(worst <= 1e-10),
                               f"max relative deviation {worst:.3e} on {samples} samples"))
    return results


# --------------------------------------------------------------------------
# cache file


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    prime = 0x100000001B3
    mask = 0xFFFFFFFFFFFFFFFF
    for byte in data:
        h = ((h ^ byte) * prime) & mask
    return h


def _u64(v: int) -> bytes:
    return struct.pack("<Q", int(v))


def _f64(v: float) -> bytes:
    return struct.pack("<d", float(v))


def _str(s: str) -> bytes:
    b = s.encode("utf-8")
    return _u64(len(b)) + b


def _payload(coeffs: CoefficientSet) -> bytes:
    spec = coeffs.spec
    buf = io.BytesIO()
    buf.write(MAGIC)
    # meta
    buf.write(_f64(coeffs.lattice.ell))
    buf.write(_f64(coeffs.lattice.active_radius))
    buf.write(_str(coeffs.kernel_name))
    buf.write(_str(spec.outer.kind))
    buf.write(_u64(spec.outer.order))
    buf.write(_u64(spec.outer.seed))
    buf.write(_str(spec.loss_outer.kind))
    buf.write(_u64(spec.loss_outer.order))
    buf.write(_u64(spec.loss_outer.seed))
    buf.write(_u64(spec.sphere.n_s))
    buf.write(_u64(spec.sphere.n_theta))
    buf.write(_u64(1 if coeffs.corrected else 0))
    buf.write(_f64(spec.leak_budget))
    buf.write(_f64(spec.drop_tolerance))
    buf.write(_str(spec.zero_sum_policy))
    # geometry
    M = coeffs.n_cells
    buf.write(_u64(M))
    buf.write(np.ascontiguousarray(coeffs.lattice.centers, dtype="<f8").tobytes())
    buf.write(_f64(cell_volume(coeffs.ell)))
    buf.write(_f64(central_second_moment(coeffs.ell)))
    # loss: offset-class table
    C = len(coeffs.class_offsets)
    buf.write(_u64(C))
    buf.write(np.ascontiguousarray(coeffs.class_offsets, dtype="<i8").tobytes())
    buf.write(np.ascontiguousarray(coeffs.class_loss, dtype="<f8").tobytes())
    # gain: per-class sparse (r, value) entries
    buf.write(_u64(C))
    buf.write(np.ascontiguousarray(np.diff(coeffs.class_ptr), dtype="<u8").tobytes())
    buf.write(np.ascontiguousarray(coeffs.class_r, dtype="<i8").tobytes())
    buf.write(np.ascontiguousarray(coeffs.class_value, dtype="<f8").tobytes())
    # per-pair rescale factors
    buf.write(_u64(len(coeffs.pair_scale)))
    buf.write(np.ascontiguousarray(coeffs.pair_scale, dtype="<f8").tobytes())
    return buf.getvalue()


def content_hash(coeffs: CoefficientSet) -> int:
    return fnv1a64(_payload(coeffs))


def save_coefficients(coeffs: CoefficientSet, path) -> int:
    """Write the cache file; returns its content hash."""
    payload = _payload(coeffs)
    h = fnv1a64(payload)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
        fh.write(_u64(h))
    os.replace(tmp, path)
    return h


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise TruncatedCacheError("coefficient cache is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def str(self) -> str:
        n = self.u64()
        return self.take(n).decode("utf-8")

    def array(self, dtype: str, count: int, shape=None) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        if count > len(self.data):
            raise TruncatedCacheError("coefficient cache is truncated")
        arr = np.frombuffer(self.take(count * itemsize), dtype=dtype).astype(dtype[1:])
        return arr.reshape(shape) if shape is not None else arr


def read_meta(path) -> dict:
    """Cache meta block, without verifying the hash."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CacheFormatError(f"{path}: not a coefficient cache (bad magic)")
    return {
        "ell": r.f64(), "active_radius": r.f64(), "kernel": r.str(),
        "outer_kind": r.str(), "outer_order": r.u64(), "outer_seed": r.u64(),
        "loss_kind": r.str(), "loss_order": r.u64(), "loss_seed": r.u64(),
        "n_s": r.u64(), "n_theta": r.u64(), "corrected": bool(r.u64()),
        "leak_budget": r.f64(), "drop_tolerance": r.f64(), "zero_sum_policy": r.str(),
        "hash": f"{struct.unpack('<Q', data[-8:])[0]:016x}" if len(data) >= 8 else None,
    }


def load_coefficients(path, lattice: VelocityLattice | None = None,
                      kernel: KernelModel | str | None = None) -> CoefficientSet:
    """Read a cache written by :func:`save_coefficients`.

    With ``lattice`` or ``kernel`` given, the cache must have been built for
    them; otherwise :class:`MetaMismatchError` is raised.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < len(MAGIC) + 8:
        raise TruncatedCacheError(f"{path}: coefficient cache is truncated")
    if data[:len(MAGIC)] != MAGIC:
        raise CacheFormatError(f"{path}: not a coefficient cache (bad magic)")
    payload, trailer = data[:-8], data[-8:]
    try:
        r = _Reader(payload)
        r.take(len(MAGIC))
        ell, radius = r.f64(), r.f64()
        kernel_name = r.str()
        outer_kind, outer_order, outer_seed = r.str(), r.u64(), r.u64()
        loss_kind, loss_order, loss_seed = r.str(), r.u64(), r.u64()
        n_s, n_theta = r.u64(), r.u64()
        corrected = bool(r.u64())
        leak_budget, drop_tol = r.f64(), r.f64()
        policy = r.str()
        M = r.u64()
        centers = r.array("<f8", 3 * M, (M, 3))
        r.f64()
        r.f64()
        C = r.u64()
        offsets = r.array("<i8", 3 * C, (C, 3))
        class_loss_ = r.array("<f8", C)
        if r.u64() != C:
            raise CacheFormatError(f"{path}: class counts disagree")
        counts = r.array("<u8", C).astype(np.int64)
        nnz = int(counts.sum())
        class_r = r.array("<i8", 3 * nnz, (nnz, 3))
        class_val = r.array("<f8", nnz)
        P = r.u64()
        scale = r.array("<f8", P)
        if r.pos != len(payload):
            raise CacheFormatError(f"{path}: trailing bytes after the payload")
    except TruncatedCacheError:
        # a short file whose tail happens to parse still reports as truncated
        raise TruncatedCacheError(f"{path}: coefficient cache is truncated") from None
    except (UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, CacheError):
            raise
        raise CacheFormatError(f"{path}: malformed cache ({exc})") from exc
    expected = struct.unpack("<Q", trailer)[0]
    actual = fnv1a64(payload)
    if actual != expected:
        raise HashMismatchError(
            f"{path}: content hash {actual:016x} does not match trailer {expected:016x}")

    if lattice is not None:
        if lattice.ell != ell or lattice.active_radius != radius:
            raise MetaMismatchError(
                f"{path}: built for ell={ell}, active_radius={radius}; requested "
                f"ell={lattice.ell}, active_radius={lattice.active_radius}")
    else:
        lattice = build_lattice(ell, radius)
    if lattice.n_cells != M or not np.allclose(lattice.centers, centers, rtol=0, atol=1e-12 * ell):
        raise MetaMismatchError(f"{path}: cell table does not match the lattice")
    if kernel is not None:
        name = kernel if isinstance(kernel, str) else kernel.name
        if name != kernel_name:
            raise MetaMismatchError(f"{path}: built for kernel {kernel_name}, requested {name}")

    spec = BuildSpec(
        outer=CellQuadrature(outer_kind, int(outer_order), int(outer_seed)),
        loss_outer=CellQuadrature(loss_kind, int(loss_order), int(loss_seed)),
        sphere=SphereQuadrature(int(n_s), int(n_theta)),
        drop_tolerance=drop_tol, leak_budget=leak_budget, zero_sum_policy=policy,
    )
    ptr = np.zeros(C + 1, dtype=np.int64)
    ptr[1:] = np.cumsum(counts)
    return CoefficientSet(lattice, kernel_name, spec, offsets, class_loss_, ptr,
                          class_r, class_val, scale, corrected,
                          {"loaded_from": str(path), "warnings": []})


def meta_json(coeffs: CoefficientSet) -> str:
    return json.dumps(coeffs.meta, indent=2, sort_keys=True)
