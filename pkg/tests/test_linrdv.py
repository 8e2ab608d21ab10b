import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from settlers.dynamics import Star
from settlers.linrdv import (NeighborhoodCache, SingularityError, ThresholdTable,
                             build_neighborhoods, from_rotating, hcw_stm, min_time_batch,
                             min_time_transfer, mobility_map, relative_state, to_rotating,
                             two_impulse_linear)
from settlers.units import KPC_PER_MYR_KMS


def hcw_rhs(omega):
    def f(t, y):
        x, yy, z, vx, vy, vz = y
        return [vx, vy, vz, 3 * omega**2 * x + 2 * omega * vy, -2 * omega * vx, -omega**2 * z]
    return f


class TestStm:
    def test_identity_at_zero(self):
        s = hcw_stm(0.03, 0.0)
        assert np.array_equal(s.M, np.eye(3)) and np.array_equal(s.T, np.eye(3))
        assert np.array_equal(s.N, np.zeros((3, 3))) and np.array_equal(s.S, np.zeros((3, 3)))

    def test_full_period(self):
        w = 0.5
        tau = 2 * np.pi / w
        s = hcw_stm(w, tau)
        np.testing.assert_allclose(s.M, [[1, 0, 0], [-12 * np.pi, 1, 0], [0, 0, 1]], atol=1e-12)
        assert s.N[1, 1] == pytest.approx(-3 * tau, abs=1e-12)
        np.testing.assert_allclose(s.N[[0, 0, 1, 2], [0, 1, 0, 2]], 0, atol=1e-12)
        np.testing.assert_allclose(s.S, 0, atol=1e-12)
        np.testing.assert_allclose(s.T, np.eye(3), atol=1e-12)

    def test_matches_linear_ode(self):
        w, tau = 1.0, 0.7
        cols = []
        for e in np.eye(6):
            sol = solve_ivp(hcw_rhs(w), (0, tau), e, method="DOP853", rtol=1e-13, atol=1e-14)
            cols.append(sol.y[:, -1])
        np.testing.assert_allclose(hcw_stm(w, tau).matrix, np.column_stack(cols), atol=1e-9)

    @given(st.floats(0.005, 0.2), st.floats(0, 40), st.floats(0, 40))
    def test_semigroup(self, w, t1, t2):
        a, b, ab = hcw_stm(w, t1), hcw_stm(w, t2), hcw_stm(w, t1 + t2)
        np.testing.assert_allclose(b.matrix @ a.matrix, ab.matrix,
                                   atol=1e-9 * max(1.0, np.abs(ab.matrix).max()))

    def test_rejects_nonpositive_omega(self):
        with pytest.raises(ValueError):
            hcw_stm(0.0, 1.0)


class TestTwoImpulse:
    def test_colocated(self):
        lt = two_impulse_linear(np.zeros(3), np.zeros(3), 0.02, 5.0)
        assert lt.dv_total == 0.0

    def test_pure_velocity_offset(self):
        w = np.array([0.01, -0.003, 0.002])
        lt = two_impulse_linear(np.zeros(3), w, 0.02, 5.0)
        np.testing.assert_allclose(lt.v0_plus, 0, atol=1e-15)
        assert lt.dv_total == pytest.approx(np.linalg.norm(w) * KPC_PER_MYR_KMS, rel=1e-14)

    def test_closure_random(self, rng):
        for _ in range(200):
            dr, dv = rng.normal(size=3), rng.normal(size=3) * 0.01
            lt = two_impulse_linear(dr, dv, 1.0, 3.0)
            s = hcw_stm(1.0, 3.0)
            assert np.linalg.norm(s.M @ dr + s.N @ lt.v0_plus) < 1e-9
            # final impulse cancels the arrival velocity
            vf = s.S @ dr + s.T @ lt.v0_plus
            np.testing.assert_allclose(vf * KPC_PER_MYR_KMS + lt.dvf, 0, atol=1e-9)
            assert lt.dv_total == np.linalg.norm(lt.dv0) + np.linalg.norm(lt.dvf)

    def test_singular_time(self):
        w = 0.1
        with pytest.raises(SingularityError):
            two_impulse_linear(np.ones(3), np.zeros(3), w, 2 * np.pi / w)


class TestFrame:
    def test_round_trip(self, rng):
        tp, tv = np.array([8.0, 3.0, 0.2]), np.array([-0.08, 0.21, 0.01])
        for _ in range(20):
            p, v = tp + rng.normal(size=3), tv + rng.normal(size=3) * 0.01
            dr, dv = to_rotating(tp, tv, p, v)
            p2, v2 = from_rotating(tp, tv, dr, dv)
            np.testing.assert_allclose(p2, p, atol=1e-13)
            np.testing.assert_allclose(v2, v, atol=1e-13)

    def test_co_orbiting_stars_are_at_rest(self, flat):
        a, b = Star(1, 10.0, phi0=0.05), Star(2, 10.0)
        dr, dv, w = relative_state(flat, a, b, 7.0)
        np.testing.assert_allclose(dv, 0, atol=1e-15)
        assert dr[1] > 0  # leading star sits along-track
        assert w == pytest.approx(0.0225)

    def test_radial_axis(self, flat):
        dr, dv, _ = relative_state(flat, Star(1, 11.0), Star(2, 10.0), 0.0)
        np.testing.assert_allclose(dr, [1, 0, 0], atol=1e-14)


def _exhaustive_min_time(curve, a, b, t_dep, table, t_end=90.0):
    dr, dv, w = relative_state(curve, a, b, t_dep)
    for tau in range(1, int(t_end - t_dep) + 1):
        try:
            lt = two_impulse_linear(dr, dv, w, float(tau))
        except SingularityError:
            continue
        i_max, tot = table.band(tau)
        if np.linalg.norm(lt.dv0) < i_max and np.linalg.norm(lt.dvf) < i_max and lt.dv_total < tot:
            return tau
    return None


class TestThresholds:
    def test_default_values(self):
        t = ThresholdTable.default()
        assert t.band(3.9) == (170, 340)
        assert t.band(4.0) == (175, 350)
        assert t.band(14.0) == (190, 360)
        assert t.band(15.0) == (300, 400)
        assert t.band(89.0) == (300, 400)

    def test_round_trip_list(self):
        t = ThresholdTable.default()
        assert ThresholdTable.from_list(t.to_list()) == t

    def test_invalid(self):
        with pytest.raises(ValueError):
            ThresholdTable(((5, 1, 2), (4, 1, 2), (math.inf, 1, 2)))
        with pytest.raises(ValueError):
            ThresholdTable(((5, 1, 2),))

    def test_later_bands_are_looser(self):
        rows = ThresholdTable.default().rows
        for (_, a, b), (_, c, d) in zip(rows, rows[1:]):
            assert c >= a and d >= b


class TestMinTime:
    def test_self_transfer(self, flat):
        s = Star(1, 9.0, phi0=1.0)
        tau, lt = min_time_transfer(flat, s, s, 10.0)
        assert tau == 1.0 and lt.dv_total == 0.0

    def test_infeasible(self, flat):
        assert min_time_transfer(flat, Star(1, 4.0), Star(2, 30.0, phi0=3.0), 0.0) is None

    def test_matches_exhaustive_grid(self, flat, small_catalog, rng):
        table = ThresholdTable.default()
        ids = small_catalog.ids
        checked = 0
        for _ in range(40):
            a = rng.choice(ids)
            near = [s for s in ids if s != a and abs(small_catalog.star(s).r
                                                     - small_catalog.star(a).r) < 1.0]
            b = rng.choice(near)
            sa, sb = small_catalog.star(a), small_catalog.star(b)
            t_dep = float(rng.integers(0, 80))
            got = min_time_transfer(flat, sa, sb, t_dep, table)
            want = _exhaustive_min_time(flat, sa, sb, t_dep, table)
            assert (got is None) == (want is None)
            if got is not None:
                assert got[0] == want
                checked += 1
        assert checked >= 10

    def test_batch_matches_scalar(self, wavy, small_catalog):
        table = ThresholdTable.default()
        origin = int(small_catalog.ids[0])
        ra = small_catalog.r[0]
        near = [int(s) for s, r in zip(small_catalog.ids, small_catalog.r)
                if abs(r - ra) < 2.0 and s != origin][:40]
        tau, dv = min_time_batch(wavy, small_catalog, origin, near, 12.0, table)
        for k, s in enumerate(near):
            got = min_time_transfer(wavy, small_catalog.star(origin), small_catalog.star(s), 12.0,
                                    table)
            if got is None:
                assert np.isnan(tau[k])
            else:
                assert tau[k] == got[0]
                assert dv[k] == pytest.approx(got[1].dv_total, rel=1e-9)


@pytest.fixture(scope="module")
def zone_cache(flat, small_catalog):
    zone = [int(s) for s, r in zip(small_catalog.ids, small_catalog.r) if 10 <= r < 14][:60]
    return zone, build_neighborhoods(flat, small_catalog, zone, [0, 30, 85])


class TestNeighborhoods:
    def test_empty_filter(self, flat, small_catalog):
        assert len(build_neighborhoods(flat, small_catalog, [], [0, 1])) == 0

    def test_round_trip(self, tmp_path, zone_cache):
        _, cache = zone_cache
        cache.save(tmp_path / "nb")
        back = NeighborhoodCache.load(tmp_path / "nb")
        assert back.keys() == cache.keys()
        assert back.thresholds == cache.thresholds
        for k in cache.keys():
            a, b = cache.get(*k), back.get(*k)
            np.testing.assert_array_equal(a.targets, b.targets)
            np.testing.assert_array_equal(a.tau, b.tau)
            np.testing.assert_array_equal(a.dv, b.dv)

    def test_entries_revalidate(self, flat, small_catalog, zone_cache):
        zone, cache = zone_cache
        n = 0
        for origin, epoch in cache.keys():
            nb = cache.get(origin, epoch)
            for tgt, tau, dv in nb.entries():
                got = min_time_transfer(flat, small_catalog.star(origin), small_catalog.star(tgt),
                                        float(epoch))
                assert got is not None and got[0] == tau
                assert epoch + tau <= 90
                n += 1
        assert n > 0

    def test_parallel_build_matches_serial(self, flat, small_catalog, zone_cache):
        zone, cache = zone_cache
        par = build_neighborhoods(flat, small_catalog, zone, [0, 30, 85], workers=2)
        for k in cache.keys():
            np.testing.assert_array_equal(cache.get(*k).targets, par.get(*k).targets)


class TestMobility:
    def test_empty_grid(self, flat):
        assert mobility_map(flat, 8.0, 0.0, [], 175, 400).reachable == {}

    def test_zero_dv_vessel(self, flat):
        mm = mobility_map(flat, 8.0, 0.0, [2, 10], 0.0, 0.0)
        for tau in (2.0, 10.0):
            assert mm.reachable[tau] == {(0.0, 0.0)}

    def test_monotone_in_time(self, wavy):
        mm = mobility_map(wavy, 12.0, 5.0, [1, 3, 6, 12], 60.0, 120.0)
        sets = [mm.reachable[t] for t in mm.taus]
        for a, b in zip(sets, sets[1:]):
            assert a <= b
        assert len(sets[-1]) > len(sets[0])

    def test_csv(self, tmp_path, flat):
        mm = mobility_map(flat, 8.0, 0.0, [4], 50.0, 100.0)
        mm.to_csv(tmp_path / "m.csv")
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "tau,dr,dtheta_f"
        assert len(lines) == 1 + len(mm.reachable[4.0])

    def test_bad_radius(self, flat):
        with pytest.raises(ValueError):
            mobility_map(flat, 40.0, 0.0, [1], 1, 1)
