import math

import numpy as np
import pytest

from octaboltz import coefficients as co
from octaboltz.coefficients import BuildSpec, CoefficientSet
from octaboltz.kernel import SphereQuadrature, hard_sphere, vhs_power
from octaboltz.lattice import build_lattice, circumradius, point_group
from octaboltz.quadrature import CellQuadrature, in_reference_cell


def sample_cell(rng, n):
    out, have = [], 0
    while have < n:
        x = rng.uniform(-0.5, 0.5, size=(2 * n, 3))
        x = x[in_reference_cell(x)]
        out.append(x)
        have += len(x)
    return np.concatenate(out)[:n]


def test_self_pair_loss_against_monte_carlo(rng):
    lat = build_lattice(1.0, 1.0)
    nu = co.class_loss(lat, hard_sphere(1.0), BuildSpec(), np.zeros(3))
    n = 10_000_000
    v = 0.5 * math.pi * np.linalg.norm(sample_cell(rng, n) - sample_cell(rng, n), axis=1)
    assert abs(nu - v.mean()) <= 3 * v.std() / math.sqrt(n)
    assert 0 < nu < 0.5 * math.pi * math.sqrt(3)


def test_loss_far_pairs_approach_point_value():
    lat = build_lattice(1.0, 1.0)
    nu = co.class_loss(lat, hard_sphere(1.0), BuildSpec(), np.array([20, 0, 0]))
    assert nu == pytest.approx(0.5 * math.pi * 10.0, rel=0.02)


def test_loss_translation_invariance(small_coeffs):
    lat = small_coeffs.lattice
    H = lat.doubled
    L = small_coeffs.loss
    seen = {}
    for a in range(lat.n_cells):
        for b in range(lat.n_cells):
            key = tuple(H[b] - H[a])
            if key in seen:
                assert L[a, b] == pytest.approx(L[seen[key]], rel=1e-10, abs=0)
            else:
                seen[key] = (a, b)
    np.testing.assert_array_equal(L, L.T)


def test_build_loss_matches_class_values(small_lattice, small_spec, small_raw):
    L = co.build_loss(small_lattice, hard_sphere(1.0), small_spec)
    np.testing.assert_array_equal(L, small_raw.loss)


def test_canonical_offsets():
    d = np.array([[-3, 1, 2], [2, -2, 0]])
    np.testing.assert_array_equal(co.canonical_offset(d), [[3, 2, 1], [2, 2, 0]])
    perm, sign = co._map_onto(d)
    for row, p, s in zip(d, perm, sign):
        d0 = co.canonical_offset(row)
        np.testing.assert_array_equal(s * d0[p], row)


def test_pair_ordinal_inverts_pair_table(small_lattice):
    b, g, _, _ = co.pair_table(small_lattice)
    M = small_lattice.n_cells
    np.testing.assert_array_equal(co.pair_ordinal(M, b, g), np.arange(len(b)))
    np.testing.assert_array_equal(co.pair_ordinal(M, g, b), np.arange(len(b)))


def test_support_inside_reachable_ball(small_coeffs):
    results = {r.name: r for r in co.check_coefficients(small_coeffs)}
    assert results["support"].passed
    c = small_coeffs.lattice.centers
    rc = circumradius(1.0)
    for a, b, g in zip(small_coeffs.gain_alpha, small_coeffs.gain_beta, small_coeffs.gain_gamma):
        reach = math.hypot(np.linalg.norm(c[b]) + rc, np.linalg.norm(c[g]) + rc) + rc
        assert np.linalg.norm(c[a]) <= reach


def test_self_pair_gain_sum_before_correction(small_raw):
    # the origin pair's post-collision spheres stay inside the active set
    p = co.pair_ordinal(small_raw.n_cells, 0, 0)
    assert small_raw.pair_leak[p] == 0.0
    total = small_raw.pair_gain_inset[p]
    assert 0.5 * total == pytest.approx(small_raw.pair_loss_raw[p], rel=5e-2)


def test_gain_symmetric_in_pre_collision_cells(small_coeffs, rng):
    M = small_coeffs.n_cells
    for _ in range(200):
        a, b, g = rng.integers(0, M, 3)
        assert small_coeffs.gain_entry(a, b, g) == small_coeffs.gain_entry(a, g, b)
    # class tables are symmetric under the swap maps by construction
    assert {r.name: r.passed for r in co.check_coefficients(small_coeffs)}["symmetry"]


def test_raw_table_has_exact_swap_symmetry(small_lattice, small_spec):
    # swapping the pre-collision velocities maps r -> d0 - r; the integrand is
    # symmetric under the swap, so the raw table has it without symmetrisation
    d0 = np.array([2, 0, 0])
    raw = co.class_gain(small_lattice, hard_sphere(), small_spec, d0, symmetrize=False)
    table = dict(zip(map(tuple, raw.r.tolist()), raw.value))
    for r, v in table.items():
        swapped = tuple(int(x) for x in d0 - np.array(r))
        assert table.get(swapped, 0.0) == pytest.approx(v, rel=1e-10)
    sym = co.class_gain(small_lattice, hard_sphere(), small_spec, d0, symmetrize=True)
    assert sym.value.sum() == pytest.approx(raw.value.sum(), rel=1e-12)
    # the product sphere rule is not cubic invariant; symmetrisation fixes that
    st = dict(zip(map(tuple, sym.r.tolist()), sym.value))
    big = [k for k, v in st.items() if v > 1e-3 * sym.value.max()]
    assert max(abs(st[k] - table.get(k, 0.0)) / st[k] for k in big) < 1e-2


def test_cubic_symmetry_of_expanded_tensor(small_coeffs, rng):
    lat = small_coeffs.lattice
    for n in rng.choice(small_coeffs.nnz, 30, replace=False):
        a, b, g = small_coeffs.gain_alpha[n], small_coeffs.gain_beta[n], small_coeffs.gain_gamma[n]
        ref = small_coeffs.gain_value[n]
        H = lat.doubled[[a, b, g]]
        for G in point_group():
            a2, b2, g2 = lat.lookup_doubled(H @ G.T)
            assert small_coeffs.gain_entry(a2, b2, g2) == pytest.approx(ref, rel=1e-12)


def test_enforce_conservation_exact(small_raw, small_coeffs):
    assert not small_raw.corrected and small_coeffs.corrected
    assert small_coeffs.conservation_residual().max() <= 1e-13
    assert small_raw.conservation_residual().max() > 1e-3  # leak is real


def test_enforce_factor_is_quadrature_times_leak(small_coeffs):
    c = small_coeffs
    lf = c.leak_fraction()
    quad_factor = 2 * c.pair_loss_raw / c.pair_gain_total
    np.testing.assert_allclose(c.pair_scale, quad_factor / (1 - lf), rtol=1e-12)
    assert np.abs(quad_factor - 1).max() <= 0.05


def test_enforce_is_idempotent_and_linear(small_raw, small_coeffs):
    again = co.enforce_conservation(small_coeffs)
    np.testing.assert_array_equal(again.pair_scale, small_coeffs.pair_scale)
    scaled = CoefficientSet(small_raw.lattice, small_raw.kernel_name, small_raw.spec,
                            small_raw.class_offsets, 1.05 * small_raw.class_loss,
                            small_raw.class_ptr, small_raw.class_r, small_raw.class_value)
    out = co.enforce_conservation(scaled)
    np.testing.assert_allclose(out.pair_scale, 1.05 * small_coeffs.pair_scale, rtol=1e-14)
    assert out.conservation_residual().max() <= 1e-13


def test_leak_free_pairs_keep_unit_factor():
    lat = build_lattice(1.0, 3.0)
    spec = BuildSpec(sphere=SphereQuadrature(16, 16), loss_outer=CellQuadrature("tet", 1))
    # with matched loss and gain rules, the only deviation is leak
    coeffs = co.build_coefficients(build_lattice(1.0, 1.0), hard_sphere(), spec)
    free = coeffs.pair_leak == 0
    assert free.any()
    np.testing.assert_allclose(coeffs.pair_scale[free], 1.0, rtol=1e-11)
    del lat


def _zero_class(coeffs, policy):
    spec = BuildSpec(sphere=coeffs.spec.sphere, zero_sum_policy=policy)
    val = coeffs.class_value.copy()
    lo, hi = coeffs.class_ptr[1], coeffs.class_ptr[2]
    val[lo:hi] = 0.0
    return co.enforce_conservation(CoefficientSet(
        coeffs.lattice, coeffs.kernel_name, spec, coeffs.class_offsets,
        coeffs.class_loss, coeffs.class_ptr, coeffs.class_r, val))


def test_zero_sum_policies(small_raw):
    off = _zero_class(small_raw, "disable")
    dead = off.pair_class == 1
    assert np.all(off.pair_scale[dead] == 0) and np.all(off.pair_loss[dead] == 0)
    assert off.conservation_residual().max() <= 1e-13
    assert any("disabled" in w for w in off.diagnostics["warnings"])
    keep = _zero_class(small_raw, "keep")
    assert np.all(keep.pair_loss[dead] > 0)
    np.testing.assert_allclose(keep.conservation_residual()[dead], 1.0)


def test_threads_do_not_change_results(small_lattice, small_coeffs):
    spec = BuildSpec(sphere=SphereQuadrature(16, 16), threads=3)
    other = co.build_coefficients(small_lattice, hard_sphere(1.0), spec)
    assert co.content_hash(other) == co.content_hash(small_coeffs)


def test_vhs_kernel_build_conserves():
    lat = build_lattice(1.0, 1.0)
    coeffs = co.build_coefficients(lat, vhs_power(1.0, 0.5), BuildSpec(sphere=SphereQuadrature(16, 16)))
    assert coeffs.conservation_residual().max() <= 1e-13
    # the kernel grows with |V| ** 1.5 near coincident velocities, which the
    # coarse gain rule resolves less well than the hard-sphere case
    assert coeffs.summary()["quadrature_residual"] < 0.1


def test_check_detects_faults(small_coeffs):
    assert all(r.passed for r in co.check_coefficients(small_coeffs))
    val = small_coeffs.class_value.copy()
    val[3] *= 1 + 1e-6
    bumped = CoefficientSet(small_coeffs.lattice, small_coeffs.kernel_name, small_coeffs.spec,
                            small_coeffs.class_offsets, small_coeffs.class_loss,
                            small_coeffs.class_ptr, small_coeffs.class_r, val,
                            small_coeffs.pair_scale, True)
    res = {r.name: r.passed for r in co.check_coefficients(bumped)}
    assert not res["conservation"]
    val = small_coeffs.class_value.copy()
    val[3] = -val[3]
    negated = CoefficientSet(small_coeffs.lattice, small_coeffs.kernel_name, small_coeffs.spec,
                             small_coeffs.class_offsets, small_coeffs.class_loss,
                             small_coeffs.class_ptr, small_coeffs.class_r, val,
                             small_coeffs.pair_scale, True)
    assert not {r.name: r.passed for r in co.check_coefficients(negated)}["nonnegativity"]


# -- cache file --------------------------------------------------------------


def test_round_trip_bit_exact(small_coeffs, tmp_path):
    path = tmp_path / "c.octb"
    h = co.save_coefficients(small_coeffs, path)
    back = co.load_coefficients(path)
    assert co.content_hash(back) == h
    for name in ("class_offsets", "class_loss", "class_ptr", "class_r", "class_value", "pair_scale"):
        a, b = getattr(small_coeffs, name), getattr(back, name)
        assert a.dtype == b.dtype and a.tobytes() == b.tobytes(), name
    assert back.gain_value.tobytes() == small_coeffs.gain_value.tobytes()
    co.save_coefficients(back, tmp_path / "d.octb")
    assert (tmp_path / "d.octb").read_bytes() == path.read_bytes()
    assert path.read_bytes()[:5] == b"OCTB1"
    meta = co.read_meta(path)
    assert meta["hash"] == f"{h:016x}" and meta["ell"] == 1.0


def test_load_meta_mismatch(small_coeffs, tmp_path):
    path = tmp_path / "c.octb"
    co.save_coefficients(small_coeffs, path)
    with pytest.raises(co.MetaMismatchError):
        co.load_coefficients(path, lattice=build_lattice(0.5, 1.5))
    with pytest.raises(co.MetaMismatchError):
        co.load_coefficients(path, kernel=hard_sphere(2.0))
    co.load_coefficients(path, lattice=small_coeffs.lattice, kernel=hard_sphere(1.0))


def test_load_detects_corruption(small_coeffs, tmp_path):
    path = tmp_path / "c.octb"
    co.save_coefficients(small_coeffs, path)
    data = bytearray(path.read_bytes())
    data[len(data) // 2] ^= 0x01
    bad = tmp_path / "bad.octb"
    bad.write_bytes(bytes(data))
    with pytest.raises(co.HashMismatchError):
        co.load_coefficients(bad)
    short = tmp_path / "short.octb"
    short.write_bytes(path.read_bytes()[:200])
    with pytest.raises(co.CacheError):
        co.load_coefficients(short)
    (tmp_path / "tiny.octb").write_bytes(b"OCT")
    with pytest.raises(co.TruncatedCacheError):
        co.load_coefficients(tmp_path / "tiny.octb")
    (tmp_path / "magic.octb").write_bytes(b"XXXXX" + bytes(40))
    with pytest.raises(co.CacheFormatError):
        co.load_coefficients(tmp_path / "magic.octb")


def test_fnv1a64_reference_values():
    assert co.fnv1a64(b"") == 0xCBF29CE484222325
    assert co.fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert co.fnv1a64(b"foobar") == 0x85944171F73967E8


def test_build_spec_validation():
    with pytest.raises(ValueError):
        BuildSpec(zero_sum_policy="clip")
    with pytest.raises(ValueError):
        BuildSpec(leak_budget=1.5)
