import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from settlers.dynamics import (CatalogParseError, DomainError, RotationCurve, ShipState, Star,
                               StarCatalog, angular_momentum, circular_velocity,
                               generate_catalog, gravity, gravity_jacobian, load_catalog,
                               load_curve, potential, propagate_ship, propagate_with_stm,
                               save_catalog, save_curve, specific_energy, star_state)
from settlers.units import KPC_PER_MYR_KMS, internal_to_kms, kms_to_internal

radii = st.floats(2.0, 32.0)


def test_conversion_constant_rederived():
    assert KPC_PER_MYR_KMS == pytest.approx(3.0857e16 / 3.15576e13, rel=1e-6)
    assert internal_to_kms(kms_to_internal(123.4)) == pytest.approx(123.4)


class TestCircularVelocity:
    def test_flat_curve_is_constant(self, flat):
        for r in (2.0, 8.0, 31.9):
            assert circular_velocity(flat, r) == pytest.approx(0.225, rel=1e-15)

    def test_single_term(self):
        c = 0.37
        curve = RotationCurve((0, c))
        assert circular_velocity(curve, 5.0) == pytest.approx(1 / (c * 5.0), rel=1e-15)

    def test_matches_direct_power_sum(self, rng):
        k = rng.normal(size=9) * np.array([1, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8])
        k[0] = 5.0 + abs(k[0])
        curve = RotationCurve(k)
        direct = 1.0 / sum(k[i] * 8.0**i for i in range(9))
        assert circular_velocity(curve, 8.0) == pytest.approx(direct, rel=1e-13)

    def test_array_input(self, wavy):
        r = np.array([2.0, 10.0, 30.0])
        v = circular_velocity(wavy, r)
        assert v.shape == (3,)
        assert v[1] == pytest.approx(circular_velocity(wavy, 10.0))

    def test_domain_errors(self):
        with pytest.raises(DomainError):
            circular_velocity(RotationCurve((1.0,)), 0.0)
        with pytest.raises(DomainError):
            circular_velocity(RotationCurve((1.0, -1.0)), 5.0)


class TestGravity:
    def test_axis_aligned(self, flat):
        g = gravity(flat, [10.0, 0, 0])
        np.testing.assert_allclose(g, [-0.225**2 / 10.0, 0, 0], rtol=1e-15)

    @given(st.floats(2, 32), st.floats(-np.pi, np.pi), st.floats(-1.0, 1.0))
    def test_definition_identity(self, r, a, z):
        curve = RotationCurve((4.6, -0.05, 0.002))
        p = np.array([r * math.cos(a), r * math.sin(a), z])
        rr = np.linalg.norm(p)
        g = gravity(curve, p)
        assert np.linalg.norm(g) * rr / circular_velocity(curve, rr) ** 2 == pytest.approx(1, rel=1e-12)
        assert np.dot(g, p) < 0

    def test_matches_potential_gradient(self, flat):
        # V = v0^2 ln r; dV/dr by central difference
        h = 1e-5
        dV = (potential(flat, 10 + h) - potential(flat, 10 - h)) / (2 * h)
        assert -gravity(flat, [10.0, 0, 0])[0] == pytest.approx(dV, abs=1e-8)

    def test_quadrature_potential_matches_closed_form(self):
        # a flat curve written as a non-flat polynomial forces the quadrature path
        c = RotationCurve((1 / 0.225, 1e-300))
        assert not c.is_flat
        assert potential(c, 17.0) == pytest.approx(0.225**2 * math.log(17.0), rel=1e-10)

    def test_zero_radius(self, flat):
        with pytest.raises(DomainError):
            gravity(flat, [0, 0, 0])

    def test_jacobian_finite_difference(self, wavy, rng):
        for _ in range(5):
            p = rng.normal(size=3) * 8
            p *= rng.uniform(3, 30) / np.linalg.norm(p)
            h = 1e-5
            fd = np.column_stack([(gravity(wavy, p + h * e) - gravity(wavy, p - h * e)) / (2 * h)
                                  for e in np.eye(3)])
            np.testing.assert_allclose(gravity_jacobian(wavy, p), fd, atol=1e-7)


class TestStarState:
    def test_epoch_zero(self, flat):
        s = star_state(flat, Star(1, 8.0), 0.0)
        np.testing.assert_allclose(s.position, [8, 0, 0], atol=1e-15)
        np.testing.assert_allclose(s.velocity, [0, 0.225, 0], atol=1e-15)

    def test_full_period(self, wavy):
        star = Star(1, 9.0, 0.3, 1.1, 0.4)
        w = circular_velocity(wavy, 9.0) / 9.0
        a, b = star_state(wavy, star, 0.0), star_state(wavy, star, 2 * np.pi / w)
        np.testing.assert_allclose(a.position, b.position, atol=1e-12)
        np.testing.assert_allclose(a.velocity, b.velocity, atol=1e-12)

    @given(radii, st.floats(0, 0.5), st.floats(0, 2 * np.pi), st.floats(0, 2 * np.pi),
           st.floats(0, 90))
    def test_circular_invariants(self, r, i, node, phi0, t):
        curve = RotationCurve((4.6, -0.05, 0.002))
        s = star_state(curve, Star(1, r, i, node, phi0), t)
        assert np.linalg.norm(s.position) == pytest.approx(r, rel=1e-13)
        assert np.linalg.norm(s.velocity) == pytest.approx(circular_velocity(curve, r), rel=1e-13)
        assert abs(s.position @ s.velocity) < 1e-12

    def test_matches_integration(self, wavy):
        star = Star(3, 12.5, 0.2, 0.7, 2.0)
        s0 = star_state(wavy, star, 0.0)
        s1 = propagate_ship(wavy, s0, 17.3)
        np.testing.assert_allclose(s1.position, star_state(wavy, star, 17.3).position, atol=1e-9)

    def test_catalog_vectorised_states_agree(self, wavy, small_catalog):
        pos, vel = small_catalog.states(wavy, 33.0)
        for k in (0, 17, 399):
            s = star_state(wavy, small_catalog.star(small_catalog.ids[k]), 33.0)
            np.testing.assert_allclose(pos[k], s.position, atol=1e-13)
            np.testing.assert_allclose(vel[k], s.velocity, atol=1e-13)


class TestPropagation:
    def test_zero_duration(self, flat):
        s = ShipState(np.array([5.0, 1, 0]), np.array([0.0, 0.2, 0.01]), 3.0)
        assert propagate_ship(flat, s, 3.0) is s

    def test_circular_orbit_radius_constant(self, flat):
        s = star_state(flat, Star(1, 6.0), 0.0)
        for t in (30.0, 60.0, 90.0):
            assert np.linalg.norm(propagate_ship(flat, s, t).position) == pytest.approx(6.0, abs=1e-9)

    def test_reversibility(self, wavy):
        s = ShipState(np.array([7.0, 2.0, 0.3]), np.array([-0.05, 0.21, 0.01]), 5.0)
        fwd = propagate_ship(wavy, s, 15.0)
        back = propagate_ship(wavy, fwd, 5.0)
        np.testing.assert_allclose(back.vector, s.vector, atol=1e-8)

    @pytest.mark.parametrize("curve_name", ["flat", "wavy"])
    def test_energy_and_angular_momentum(self, curve_name, request):
        curve = request.getfixturevalue(curve_name)
        s = ShipState(np.array([9.0, -3.0, 0.5]), np.array([0.07, 0.2, -0.02]), 0.0)
        e0 = specific_energy(curve, s.position, s.velocity)
        h0 = angular_momentum(s.position, s.velocity)
        e = propagate_ship(curve, s, 40.0, tol=1e-10)
        assert abs(specific_energy(curve, e.position, e.velocity) - e0) < 10 * 1e-10
        h1 = angular_momentum(e.position, e.velocity)
        np.testing.assert_allclose(h1 / np.linalg.norm(h1), h0 / np.linalg.norm(h0), atol=1e-9)

    def test_deterministic(self, wavy):
        s = ShipState(np.array([9.0, -3.0, 0.5]), np.array([0.07, 0.2, -0.02]), 0.0)
        a = propagate_ship(wavy, s, 21.0)
        b = propagate_ship(wavy, s, 21.0)
        assert np.array_equal(a.vector, b.vector)

    def test_star_propagation_consistency(self, wavy):
        star = Star(9, 21.0, 0.1, 0.2, 0.3)
        a = propagate_ship(wavy, star_state(wavy, star, 40.0), 11.0)
        np.testing.assert_allclose(a.position, star_state(wavy, star, 11.0).position, atol=1e-8)

    def test_stm_matches_finite_difference(self, wavy):
        y0 = np.array([8.0, 1.0, 0.1, -0.02, 0.22, 0.0])
        _, phi = propagate_with_stm(wavy, y0, 0.0, 6.0, tol=1e-12)
        h = 1e-6
        cols = []
        for e in np.eye(6):
            p = propagate_ship(wavy, ShipState(y0[:3] + h * e[:3], y0[3:] + h * e[3:], 0.0), 6.0,
                               tol=1e-12).vector
            m = propagate_ship(wavy, ShipState(y0[:3] - h * e[:3], y0[3:] - h * e[3:], 0.0), 6.0,
                               tol=1e-12).vector
            cols.append((p - m) / (2 * h))
        np.testing.assert_allclose(phi, np.column_stack(cols), atol=1e-5)


class TestCatalog:
    def test_generate_empty(self):
        assert len(generate_catalog(0, 1)) == 0

    def test_generate_range_and_ids(self):
        cat = generate_catalog(10000, 3, "inclined")
        assert cat.r.min() >= 2 and cat.r.max() <= 32
        assert len(set(cat.ids.tolist())) == 10000
        assert np.all(cat.i >= 0) and np.all(cat.i <= 0.1)

    def test_ring_counts_match_linear_density(self):
        n = 50000
        cat = generate_catalog(n, 5)
        counts = np.histogram(cat.r, bins=np.arange(2, 33))[0]
        lo = np.arange(2, 32)
        p = ((lo + 1) ** 2 - lo**2) / (32**2 - 2**2)  # integral of 2r / (32^2 - 2^2)
        mu = n * p
        sigma = np.sqrt(n * p * (1 - p))
        assert np.all(np.abs(counts - mu) < 3 * sigma + 1)

    def test_round_trip(self, tmp_path, small_catalog):
        path = tmp_path / "c.csv"
        save_catalog(small_catalog, path)
        back = load_catalog(path)
        assert back.digest() == small_catalog.digest()
        np.testing.assert_array_equal(back.r, small_catalog.r)

    def test_parse_error_names_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("id,r_kpc,i_rad,Omega_rad,phi0_rad\n1,5,0,0,0\n2,abc,0,0,0\n")
        with pytest.raises(CatalogParseError, match="line 3"):
            load_catalog(path)
        path.write_text("id,r_kpc\n")
        with pytest.raises(CatalogParseError, match="line 1"):
            load_catalog(path)

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValueError):
            StarCatalog([1, 1], [3.0, 4.0])

    def test_curve_round_trip(self, tmp_path, wavy):
        save_curve(wavy, tmp_path / "k.json")
        assert load_curve(tmp_path / "k.json") == wavy
