"""Quadrature rules on the truncated-octahedron cell.

All rules are built for the reference cell (``ell = 1``, centred at the
origin) and scaled on demand.  Three kinds are available:

``tet``
    The cell is cut into 48 congruent copies of a fundamental domain of the
    octahedral group, each split into three tetrahedra carrying a collapsed
    Gauss-Jacobi (conical product) rule.  Order ``q`` integrates polynomials
    of total degree ``2q - 1`` exactly and the node set is invariant under the
    full cubic symmetry group.
``gl``
    Tensor Gauss-Legendre rule on the bounding cube with the membership
    indicator as a weight.  Cheap to explain, slow to converge (the indicator
    has kinks).
``mc``
    Uniform Monte-Carlo samples on the bounding cube with a fixed seed.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi

# Fundamental domain {1/2 >= x >= y >= z >= 0, x + y + z <= 3/4} of the
# reference cell, as three tetrahedra.
_F_O = (0.0, 0.0, 0.0)
_F_A = (0.5, 0.0, 0.0)
_F_B = (0.5, 0.25, 0.0)
_F_C = (0.375, 0.375, 0.0)
_F_D = (0.25, 0.25, 0.25)
_F_E = (0.5, 0.125, 0.125)
_FUNDAMENTAL_TETS = (
    (_F_O, _F_A, _F_B, _F_E),
    (_F_O, _F_B, _F_C, _F_D),
    (_F_O, _F_B, _F_D, _F_E),
)


def octahedral_group() -> np.ndarray:
    """The 48 signed permutation matrices, identity first, as int array (48, 3, 3)."""
    mats = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1, -1), repeat=3):
            g = np.zeros((3, 3), dtype=np.int64)
            for row, (col, sgn) in enumerate(zip(perm, signs)):
                g[row, col] = sgn
            mats.append(g)
    return np.array(mats)


def in_reference_cell(x: np.ndarray) -> np.ndarray:
    """Strict membership test for the reference cell, vectorised over rows."""
    a = np.abs(x)
    return np.all(a < 0.5, axis=-1) & (a.sum(axis=-1) < 0.75)


def _collapsed_tet_rule(order: int):
    """Barycentric nodes and weights on the unit simplex (weights sum to 1)."""
    xa, wa = roots_jacobi(order, 2.0, 0.0)
    xb, wb = roots_jacobi(order, 1.0, 0.0)
    xc, wc = np.polynomial.legendre.leggauss(order)
    a, b, c = (xa + 1) / 2, (xb + 1) / 2, (xc + 1) / 2
    wa, wb, wc = wa / 8, wb / 4, wc / 2
    A, B, C = np.meshgrid(a, b, c, indexing="ij")
    W = wa[:, None, None] * wb[None, :, None] * wc[None, None, :]
    l1 = A
    l2 = (1 - A) * B
    l3 = (1 - A) * (1 - B) * C
    l0 = 1 - l1 - l2 - l3
    lam = np.stack([l0, l1, l2, l3], axis=-1).reshape(-1, 4)
    # reference simplex has volume 1/6
    return lam, 6.0 * W.reshape(-1)


@dataclass(frozen=True)
class CellRule:
    """Nodes (as offsets from the cell centre) and weights for one cell."""

    offsets: np.ndarray
    weights: np.ndarray
    kind: str
    order: int

    @property
    def n_nodes(self) -> int:
        return len(self.weights)

    def scaled(self, ell: float) -> "CellRule":
        return CellRule(self.offsets * ell, self.weights * ell**3, self.kind, self.order)


@dataclass(frozen=True)
class CellQuadrature:
    """User-facing description of a cell rule.

    ``order`` is the per-tetrahedron order for ``tet``, the per-axis order for
    ``gl`` and the sample count for ``mc``.
    """

    kind: str = "tet"
    order: int = 3
    seed: int = 12345

    def __post_init__(self):
        if self.kind not in ("tet", "gl", "mc"):
            raise ValueError(f"unknown cell quadrature kind {self.kind!r}")
        if int(self.order) <= 0:
            raise ValueError("cell quadrature needs at least one node")

    def rule(self, ell: float = 1.0) -> CellRule:
        return reference_rule(self.kind, int(self.order), int(self.seed)).scaled(ell)


@lru_cache(maxsize=None)
def reference_rule(kind: str = "tet", order: int = 3, seed: int = 12345) -> CellRule:
    if order <= 0:
        raise ValueError("cell quadrature needs at least one node")
    if kind == "tet":
        lam, w = _collapsed_tet_rule(order)
        pts, wts = [], []
        for tet in _FUNDAMENTAL_TETS:
            v = np.array(tet)
            vol = abs(np.linalg.det(v[1:] - v[0])) / 6.0
            pts.append(lam @ v)
            wts.append(w * vol)
        base = np.concatenate(pts)
        base_w = np.concatenate(wts)
        group = octahedral_group()
        offsets = np.concatenate([base @ g.T for g in group])
        weights = np.tile(base_w, len(group))
    elif kind == "gl":
        x, w = np.polynomial.legendre.leggauss(order)
        x, w = x / 2, w / 2
        X = np.stack(np.meshgrid(x, x, x, indexing="ij"), axis=-1).reshape(-1, 3)
        W = (w[:, None, None] * w[None, :, None] * w[None, None, :]).reshape(-1)
        keep = in_reference_cell(X)
        offsets, weights = X[keep], W[keep]
    elif kind == "mc":
        rng = np.random.default_rng(seed)
        X = rng.uniform(-0.5, 0.5, size=(order, 3))
        keep = in_reference_cell(X)
        offsets, weights = X[keep], np.full(int(keep.sum()), 1.0 / order)
    else:
        raise ValueError(f"unknown cell quadrature kind {kind!r}")
    if len(weights) == 0:
        raise ValueError(f"{kind} rule of order {order} has no nodes inside the cell")
    offsets.setflags(write=False)
    weights.setflags(write=False)
    return CellRule(offsets, weights, kind, order)
