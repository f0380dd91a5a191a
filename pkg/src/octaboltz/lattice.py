"""Truncated-octahedron partition of velocity space.

Cell centres form a body-centred cubic lattice: the corners ``ell * (i, j, k)``
(even parity) and the body centres ``ell * (i + 1/2, j + 1/2, k + 1/2)`` (odd
parity).  Internally a centre is carried by its *doubled* integer coordinates
``h = 2 * c / ell``, which are all even or all odd.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from ._validation import check_points, check_positive, check_vector3
from .quadrature import CellQuadrature, octahedral_group

EVEN, ODD = 0, 1

# doubled-coordinate offsets of the 14 neighbours: 8 across hexagonal faces,
# then 6 across square faces
NEIGHBOR_OFFSETS = np.array(
    [(sx, sy, sz) for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]
    + [(2, 0, 0), (-2, 0, 0), (0, 2, 0), (0, -2, 0), (0, 0, 2), (0, 0, -2)],
    dtype=np.int64,
)


class CellIndex(NamedTuple):
    """Integer lattice coordinates of one cell."""

    i: int
    j: int
    k: int
    parity: int = EVEN

    @classmethod
    def from_doubled(cls, h) -> "CellIndex":
        h = [int(v) for v in h]
        parity = h[0] & 1
        if any((v & 1) != parity for v in h):
            raise ValueError(f"{h} is not a BCC lattice point in doubled coordinates")
        return cls((h[0] - parity) // 2, (h[1] - parity) // 2, (h[2] - parity) // 2, parity)

    def doubled(self) -> tuple[int, int, int]:
        return (2 * self.i + self.parity, 2 * self.j + self.parity, 2 * self.k + self.parity)

    def center(self, ell: float) -> np.ndarray:
        return 0.5 * ell * np.array(self.doubled(), dtype=float)


@dataclass(frozen=True)
class CellGeometry:
    """Per-cell moments: ``second_moments[:, i]`` is the cell average of xi * xi_i."""

    center: np.ndarray
    volume: float
    mean_velocity: np.ndarray
    second_moments: np.ndarray
    energy_flux: np.ndarray


def central_second_moment(ell: float) -> float:
    """Per-axis second central moment of the cell, ``19 ell^2 / 384``."""
    return 19.0 * ell**2 / 384.0


def cell_volume(ell: float) -> float:
    return 0.5 * ell**3


def circumradius(ell: float) -> float:
    """Distance from the centre to a vertex (a permutation of (0, ell/4, ell/2))."""
    return ell * math.sqrt(5.0) / 4.0


@dataclass(frozen=True, eq=False)
class VelocityLattice:
    """Finite active set of truncated-octahedron cells.

    Use :func:`build_lattice` rather than constructing this directly.
    """

    ell: float
    active_radius: float
    doubled: np.ndarray  # (M, 3) int64, ordinal order
    _ordinal: dict = field(repr=False)
    _grid: np.ndarray = field(repr=False)  # dense doubled-coordinate -> ordinal lookup
    _grid_offset: int = field(repr=False)

    def __len__(self) -> int:
        return len(self.doubled)

    @property
    def n_cells(self) -> int:
        return len(self.doubled)

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * self.ell * self.doubled

    @property
    def cells(self) -> list[CellIndex]:
        return [CellIndex.from_doubled(h) for h in self.doubled]

    def index(self, ordinal: int) -> CellIndex:
        return CellIndex.from_doubled(self.doubled[ordinal])

    def ordinal(self, index: CellIndex) -> int:
        """Dense ordinal (0-based) of an active cell; ``KeyError`` otherwise."""
        return self._ordinal[tuple(index.doubled())]

    def __contains__(self, index) -> bool:
        return tuple(CellIndex(*index).doubled()) in self._ordinal

    def lookup_doubled(self, h: np.ndarray) -> np.ndarray:
        """Ordinals for rows of doubled coordinates, -1 where the cell is inactive."""
        h = np.asarray(h, dtype=np.int64)
        idx = h + self._grid_offset
        size = self._grid.shape[0]
        inside = np.all((idx >= 0) & (idx < size), axis=-1)
        out = np.full(h.shape[:-1], -1, dtype=np.int64)
        sel = idx[inside]
        out[inside] = self._grid[sel[..., 0], sel[..., 1], sel[..., 2]]
        return out

    def meta(self) -> dict:
        return {"ell": self.ell, "active_radius": self.active_radius, "n_cells": self.n_cells}


def build_lattice(ell: float, active_radius: float) -> VelocityLattice:
    """Active set of every cell whose centre lies within ``active_radius``."""
    ell = check_positive(ell, "ell")
    active_radius = check_positive(active_radius, "active_radius")
    if active_radius < ell:
        raise ValueError(f"active_radius ({active_radius}) must be >= ell ({ell})")

    # |c| <= R  <=>  |h|^2 <= (2R/ell)^2 ; compare in integers with a small slack
    bound = (2.0 * active_radius / ell) ** 2
    hmax = int(math.floor(2.0 * active_radius / ell)) + 1
    r = np.arange(-hmax, hmax + 1)
    H = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
    same_parity = np.all((H & 1) == (H[:, :1] & 1), axis=1)
    H = H[same_parity]
    sq = np.einsum("ij,ij->i", H, H)
    H = H[sq <= bound * (1 + 1e-12)]
    sq = np.einsum("ij,ij->i", H, H)

    # deterministic ordinal order: (|c|^2, k, j, i, parity)
    parity = H[:, 0] & 1
    ijk = (H - parity[:, None]) // 2
    order = np.lexsort((parity, ijk[:, 0], ijk[:, 1], ijk[:, 2], sq))
    H = H[order]
    H.setflags(write=False)

    offset = hmax + 2
    grid = np.full((2 * offset + 1,) * 3, -1, dtype=np.int64)
    grid[H[:, 0] + offset, H[:, 1] + offset, H[:, 2] + offset] = np.arange(len(H))
    grid.setflags(write=False)
    ordinal = {tuple(int(v) for v in h): n for n, h in enumerate(H)}
    return VelocityLattice(ell, active_radius, H, ordinal, grid, offset)


def contains(lattice: VelocityLattice, index: CellIndex, xi) -> bool:
    """Whether ``xi`` lies in the open cell ``index``."""
    xi = check_vector3(xi)
    rel = (xi - CellIndex(*index).center(lattice.ell)) / lattice.ell
    a = np.abs(rel)
    return bool(np.all(a < 0.5) and a.sum() < 0.75)


def nearest_doubled(xi: np.ndarray, ell: float) -> np.ndarray:
    """Doubled coordinates of the nearest lattice centre (ties broken arbitrarily)."""
    y = 2.0 * np.asarray(xi, dtype=float) / ell
    even = 2.0 * np.round(0.5 * y)
    odd = 2.0 * np.floor(0.5 * y) + 1.0
    de = np.sum((y - even) ** 2, axis=-1)
    do = np.sum((y - odd) ** 2, axis=-1)
    return np.where((de <= do)[..., None], even, odd).astype(np.int64)


def locate_many(lattice: VelocityLattice, xi) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`locate`.

    Returns the doubled coordinates of the containing cell for every row of
    ``xi`` and a boolean mask that is True for points on a cell boundary.
    """
    xi = check_points(xi)
    h = nearest_doubled(xi, lattice.ell)
    rel = np.abs(xi / lattice.ell - 0.5 * h)
    inside = np.all(rel < 0.5, axis=1) & (rel.sum(axis=1) < 0.75)
    return h, ~inside


def locate(lattice: VelocityLattice, xi) -> CellIndex | None:
    """Cell whose centre is strictly nearest to ``xi``; None on a cell boundary.

    The search covers the whole lattice, not only the active set.
    """
    xi = check_vector3(xi)
    h, boundary = locate_many(lattice, xi[None, :])
    if boundary[0]:
        return None
    return CellIndex.from_doubled(h[0])


def neighbors(lattice: VelocityLattice, index: CellIndex) -> list[CellIndex]:
    """The 14 face-adjacent cells (whether or not they are active)."""
    h = np.array(CellIndex(*index).doubled(), dtype=np.int64)
    return [CellIndex.from_doubled(h + off) for off in NEIGHBOR_OFFSETS]


def cell_geometry(
    lattice: VelocityLattice,
    index: CellIndex,
    quadrature: CellQuadrature | None = None,
) -> CellGeometry:
    """Volume and velocity moments of one cell, by quadrature over the cell.

    Moments are averages, i.e. integrals divided by the analytic volume
    ``ell^3 / 2``; the quadrature weight sum is only used as a check of the rule.
    """
    index = CellIndex(*index)
    if index not in lattice:
        raise KeyError(f"{index} is not in the active set")
    quadrature = quadrature or CellQuadrature()
    rule = quadrature.rule(lattice.ell)
    c = index.center(lattice.ell)
    xi = c + rule.offsets
    w = rule.weights
    vol = cell_volume(lattice.ell)
    mean = w @ xi / vol
    second = np.einsum("n,ni,nj->ij", w, xi, xi) / vol
    energy = np.einsum("n,ni,n->i", w, xi, np.einsum("ni,ni->n", xi, xi)) / vol
    return CellGeometry(c, vol, mean, second, energy)


def quadrature_volume(lattice: VelocityLattice, quadrature: CellQuadrature) -> float:
    return float(quadrature.rule(lattice.ell).weights.sum())


def analytic_geometry(lattice: VelocityLattice) -> dict[str, np.ndarray]:
    """Closed-form moments for every active cell.

    By central symmetry and cubic symmetry of the cell the moments reduce to
    ``m = c``, ``pi = c c^T + d I`` and ``e = (|c|^2 + 5 d) c``.
    """
    c = lattice.centers
    d = central_second_moment(lattice.ell)
    c2 = np.einsum("ni,ni->n", c, c)
    return {
        "centers": c,
        "mean_velocity": c.copy(),
        "second_moments": np.einsum("ni,nj->nij", c, c) + d * np.eye(3),
        "energy_flux": (c2 + 5.0 * d)[:, None] * c,
        "cell_energy": c2 + 3.0 * d,
        "d": np.float64(d),
    }


def point_group() -> np.ndarray:
    """Cubic symmetry group acting on doubled coordinates."""
    return octahedral_group()
