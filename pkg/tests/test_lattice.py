import itertools
import math

import numpy as np
import pytest

from octaboltz.lattice import (
    EVEN,
    ODD,
    CellIndex,
    build_lattice,
    cell_geometry,
    cell_volume,
    central_second_moment,
    circumradius,
    contains,
    locate,
    locate_many,
    neighbors,
)
from octaboltz.quadrature import CellQuadrature


def brute_centres(ell, radius):
    """All centres (both sublattices) with |c| <= radius, by enumeration."""
    n = int(math.ceil(radius / ell)) + 1
    out = []
    for i, j, k in itertools.product(range(-n, n + 1), repeat=3):
        for par in (0, 1):
            c = ell * (np.array([i, j, k]) + 0.5 * par)
            if np.linalg.norm(c) <= radius + 1e-12:
                out.append(tuple(np.round(c / ell * 2).astype(int)))
    return set(out)


@pytest.mark.parametrize("ell,radius", [(1.0, 1.0), (1.0, 2.0), (0.5, 1.3), (1.0, 3.0)])
def test_active_set_matches_enumeration(ell, radius):
    lat = build_lattice(ell, radius)
    assert {tuple(h) for h in lat.doubled.tolist()} == brute_centres(ell, radius)
    assert np.all(np.linalg.norm(lat.centers, axis=1) <= radius + 1e-12)


def test_unit_radius_has_origin_and_both_neighbour_shells():
    lat = build_lattice(1.0, 1.0)
    # origin, 8 odd cells at |c| = sqrt(3)/2 and 6 even cells at |c| = 1
    assert lat.n_cells == 15
    norms = np.sort(np.linalg.norm(lat.centers, axis=1))
    assert norms[0] == 0.0
    np.testing.assert_allclose(norms[1:9], math.sqrt(3) / 2)
    np.testing.assert_allclose(norms[9:], 1.0)


def test_scale_invariance():
    a, b = build_lattice(1.0, 1.0), build_lattice(2.0, 2.0)
    assert a.n_cells == b.n_cells
    np.testing.assert_allclose(b.centers, 2.0 * a.centers)


def test_radius_below_ell_rejected():
    with pytest.raises(ValueError):
        build_lattice(1.0, 0.4)
    with pytest.raises(ValueError):
        build_lattice(-1.0, 2.0)


def test_ordinals_are_dense_and_deterministic():
    lat = build_lattice(1.0, 2.0)
    again = build_lattice(1.0, 2.0)
    np.testing.assert_array_equal(lat.doubled, again.doubled)
    for n, idx in enumerate(lat.cells):
        assert lat.ordinal(idx) == n
        assert idx in lat
    assert lat.ordinal(CellIndex(0, 0, 0, EVEN)) == 0
    with pytest.raises(KeyError):
        lat.ordinal(CellIndex(10, 0, 0, EVEN))
    assert lat.lookup_doubled(np.array([[40, 0, 0]]))[0] == -1


def test_cell_index_round_trip():
    for h in [(0, 0, 0), (1, -1, 3), (-4, 2, 6)]:
        idx = CellIndex.from_doubled(h)
        assert tuple(idx.doubled()) == h
    assert CellIndex.from_doubled((1, 1, 1)).parity == ODD
    with pytest.raises(ValueError):
        CellIndex.from_doubled((1, 0, 0))


def test_contains_boundaries_are_open():
    lat = build_lattice(1.0, 2.0)
    o = CellIndex(0, 0, 0, EVEN)
    assert contains(lat, o, (0, 0, 0))
    assert not contains(lat, o, (0.5, 0, 0))
    assert not contains(lat, o, (0.25, 0.25, 0.25))
    assert contains(lat, o, (0.2499, 0.25, 0.25))
    odd = CellIndex(0, 0, 0, ODD)
    assert contains(lat, odd, odd.center(1.0))


def test_locate_centres_and_boundaries():
    lat = build_lattice(1.0, 2.0)
    for idx in lat.cells:
        assert locate(lat, idx.center(1.0)) == idx
    assert locate(lat, (0.5, 0.0, 0.0)) is None
    assert locate(lat, (0.25, 0.25, 0.25)) is None


def test_locate_agrees_with_nearest_centre_search(rng):
    lat = build_lattice(1.0, 2.0)
    pts = rng.uniform(-2.0, 2.0, size=(100_000, 3))
    h, boundary = locate_many(lat, pts)
    assert not boundary.any()
    # brute force over every candidate centre in the surrounding box
    r = np.arange(-6, 7)
    H = np.stack(np.meshgrid(r, r, r, indexing="ij"), -1).reshape(-1, 3)
    H = H[np.all((H & 1) == (H[:, :1] & 1), axis=1)]
    C = 0.5 * H
    best = np.empty(len(pts), dtype=np.int64)
    for s in range(0, len(pts), 5000):
        d = ((pts[s:s + 5000, None, :] - C[None]) ** 2).sum(-1)
        best[s:s + 5000] = d.argmin(1)
    np.testing.assert_array_equal(h, H[best])


def test_partition_property(rng):
    lat = build_lattice(1.0, 3.0)
    pts = rng.uniform(-3.0, 3.0, size=(1_000_000, 3))
    h, boundary = locate_many(lat, pts)
    assert boundary.mean() < 1e-4
    inner = ~boundary
    rel = np.abs(pts[inner] - 0.5 * h[inner])
    assert np.all(rel.max(1) < 0.5) and np.all(rel.sum(1) < 0.75)


def test_neighbors():
    lat = build_lattice(1.0, 3.0)
    o = CellIndex(0, 0, 0, EVEN)
    nb = neighbors(lat, o)
    assert len(nb) == 14 and len(set(nb)) == 14
    assert sum(n.parity == ODD for n in nb) == 8
    dist = sorted(np.linalg.norm(n.center(1.0)) for n in nb)
    np.testing.assert_allclose(dist[:8], math.sqrt(3) / 2)
    np.testing.assert_allclose(dist[8:], 1.0)
    for a in lat.cells[:40]:
        for b in neighbors(lat, a):
            assert a in neighbors(lat, b)
            d = np.linalg.norm(b.center(1.0) - a.center(1.0))
            assert min(abs(d - 1.0), abs(d - math.sqrt(3) / 2)) < 1e-12


def test_neighbours_share_a_face():
    # the midpoint between neighbouring centres lies on the common boundary
    o = CellIndex(0, 0, 0, EVEN)
    lat = build_lattice(1.0, 2.0)
    for n in neighbors(lat, o):
        mid = 0.5 * n.center(1.0)
        assert locate(lat, mid) is None
        assert locate(lat, 0.999 * mid) == o


def test_closed_form_constants():
    assert cell_volume(2.0) == 4.0
    assert central_second_moment(1.0) == pytest.approx(19 / 384)
    assert circumradius(1.0) == pytest.approx(math.sqrt(5) / 4)


def test_cell_geometry_origin():
    lat = build_lattice(1.0, 2.0)
    g = cell_geometry(lat, CellIndex(0, 0, 0, EVEN))
    assert g.volume == 0.5
    np.testing.assert_allclose(g.mean_velocity, 0.0, atol=1e-14)
    np.testing.assert_allclose(g.second_moments, 19 / 384 * np.eye(3), atol=1e-14)
    np.testing.assert_allclose(g.energy_flux, 0.0, atol=1e-14)


def test_cell_geometry_translation_covariance():
    lat = build_lattice(1.0, 3.0)
    o = cell_geometry(lat, CellIndex(0, 0, 0, EVEN))
    for idx in (CellIndex(1, -1, 0, ODD), CellIndex(2, 0, -1, EVEN)):
        g = cell_geometry(lat, idx)
        c = idx.center(1.0)
        np.testing.assert_allclose(g.mean_velocity, c, atol=1e-13)
        np.testing.assert_allclose(g.second_moments - np.outer(c, c), o.second_moments, atol=1e-13)
        d = 19 / 384
        np.testing.assert_allclose(g.energy_flux, (c @ c + 5 * d) * c, atol=1e-12)


def test_cell_geometry_inactive_cell():
    lat = build_lattice(1.0, 1.0)
    with pytest.raises(KeyError):
        cell_geometry(lat, CellIndex(5, 0, 0, EVEN))


def test_geometry_with_other_rules():
    lat = build_lattice(1.0, 1.0)
    gl = cell_geometry(lat, CellIndex(0, 0, 0, EVEN), CellQuadrature("gl", 12))
    assert np.allclose(np.diag(gl.second_moments), 19 / 384, rtol=0.05)
