"""Compiled inner loop of the gain-tensor quadrature."""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True, nogil=True)
def scatter_sphere(mid, half_v, weights, u, both, lo, n, acc):
    """Bin sphere quadrature weights by the lattice cell holding each node.

    Everything is in doubled lattice units (``2 * xi / ell``).  ``mid`` and
    ``half_v`` give the centre and radius of each post-collision sphere,
    ``weights[p, k]`` the weight of node ``u[k]`` on sphere ``p``.  With
    ``both`` the antipodal node ``-u[k]`` is binned with the same weight.
    Cells are identified by doubled coordinates relative to ``lo`` inside a
    cube of side ``n``; ``acc`` is the flat accumulator.  Returns the weight
    that fell on cell boundaries or outside the accumulator box.
    """
    lost = 0.0
    n_pairs = mid.shape[0]
    n_nodes = u.shape[0]
    n_sign = 2 if both else 1
    for p in range(n_pairs):
        mx, my, mz = mid[p, 0], mid[p, 1], mid[p, 2]
        r = half_v[p]
        for k in range(n_nodes):
            w = weights[p, k]
            if w == 0.0:
                continue
            for sgn in range(n_sign):
                f = r if sgn == 0 else -r
                y0 = mx + f * u[k, 0]
                y1 = my + f * u[k, 1]
                y2 = mz + f * u[k, 2]
                # nearest even point of 2Z^3 and nearest odd point of 2Z^3 + 1
                e0 = 2.0 * np.floor(0.5 * y0 + 0.5)
                e1 = 2.0 * np.floor(0.5 * y1 + 0.5)
                e2 = 2.0 * np.floor(0.5 * y2 + 0.5)
                o0 = 2.0 * np.floor(0.5 * y0) + 1.0
                o1 = 2.0 * np.floor(0.5 * y1) + 1.0
                o2 = 2.0 * np.floor(0.5 * y2) + 1.0
                de = (y0 - e0) ** 2 + (y1 - e1) ** 2 + (y2 - e2) ** 2
                do = (y0 - o0) ** 2 + (y1 - o1) ** 2 + (y2 - o2) ** 2
                if de <= do:
                    c0, c1, c2 = e0, e1, e2
                else:
                    c0, c1, c2 = o0, o1, o2
                a0 = abs(y0 - c0)
                a1 = abs(y1 - c1)
                a2 = abs(y2 - c2)
                # open cell in doubled units: |.| < 1 per axis, sum < 3/2
                if a0 >= 1.0 or a1 >= 1.0 or a2 >= 1.0 or a0 + a1 + a2 >= 1.5:
                    lost += w
                    continue
                i0 = int(c0) - lo
                i1 = int(c1) - lo
                i2 = int(c2) - lo
                if i0 < 0 or i1 < 0 or i2 < 0 or i0 >= n or i1 >= n or i2 >= n:
                    lost += w
                    continue
                acc[(i0 * n + i1) * n + i2] += w
    return lost
