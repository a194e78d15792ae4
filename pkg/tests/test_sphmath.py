import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, strategies as st

from elsa import sphmath as sm

mp.mp.dps = 40


def mp_sph_jn(n, x):
    if x == 0:
        return 1.0 if n == 0 else 0.0
    return float(mp.sqrt(mp.pi / (2 * mp.mpf(x))) * mp.besselj(n + mp.mpf(1) / 2, x))


def mp_sph_yn(n, x):
    return float(mp.sqrt(mp.pi / (2 * mp.mpf(x))) * mp.bessely(n + mp.mpf(1) / 2, x))


class TestSphericalDirection:
    def test_unit_vector_is_normalized(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            d = sm.SphericalDirection(rng.uniform(-math.pi, math.pi), rng.uniform(-math.pi / 2, math.pi / 2))
            assert abs(np.linalg.norm(d.unit_vector()) - 1.0) < 1e-12

    def test_range_validation(self):
        with pytest.raises(ValueError):
            sm.SphericalDirection(4.0, 0.0)
        with pytest.raises(ValueError):
            sm.SphericalDirection(0.0, 2.0)

    def test_from_unit_vector_roundtrip(self):
        d = sm.SphericalDirection(0.7, -0.3)
        d2 = sm.SphericalDirection.from_unit_vector(d.unit_vector())
        assert d2.azimuth == pytest.approx(d.azimuth, abs=1e-12)
        assert d2.elevation == pytest.approx(d.elevation, abs=1e-12)

    def test_convention_axes(self):
        front = sm.SphericalDirection(0.0, 0.0).unit_vector()
        up = sm.SphericalDirection(0.0, math.pi / 2).unit_vector()
        assert np.allclose(front, [1, 0, 0])
        assert np.allclose(up, [0, 0, 1], atol=1e-12)


class TestSHIndex:
    def test_acn_formula(self):
        assert sm.SHIndex(0, 0).acn == 0
        assert sm.SHIndex(1, -1).acn == 1
        assert sm.SHIndex(1, 0).acn == 2
        assert sm.SHIndex(1, 1).acn == 3

    @given(st.integers(min_value=0, max_value=3), st.integers(min_value=-3, max_value=3))
    def test_acn_bijection(self, n, m):
        if abs(m) > n:
            with pytest.raises(ValueError):
                sm.SHIndex(n, m)
            return
        idx = sm.SHIndex(n, m)
        assert sm.SHIndex.from_acn(idx.acn) == idx

    def test_acn_covers_all_channels(self):
        seen = {sm.SHIndex(n, m).acn for n in range(4) for m in range(-n, n + 1)}
        assert seen == set(range(16))

    def test_invalid(self):
        with pytest.raises(ValueError):
            sm.SHIndex(1, 2)
        with pytest.raises(ValueError):
            sm.SHIndex(-1, 0)


class TestRealSphHarm:
    def test_constant_term(self):
        d = sm.SphericalDirection(1.1, -0.4)
        assert sm.real_sph_harm(sm.SHIndex(0, 0), d) == pytest.approx(1 / (2 * math.sqrt(math.pi)), abs=1e-12)

    def test_dipole_front(self):
        d = sm.SphericalDirection(0.0, 0.0)
        assert sm.real_sph_harm(sm.SHIndex(1, 1), d) == pytest.approx(math.sqrt(3 / (4 * math.pi)), abs=1e-10)
        assert sm.real_sph_harm(sm.SHIndex(1, -1), d) == pytest.approx(0.0, abs=1e-12)
        assert sm.real_sph_harm(sm.SHIndex(1, 0), d) == pytest.approx(0.0, abs=1e-12)

    def test_first_order_is_direction_vector(self):
        # (Y, Z, X) dipoles are sqrt(3/4pi) * (y, z, x)
        rng = np.random.default_rng(1)
        c = math.sqrt(3 / (4 * math.pi))
        for _ in range(20):
            d = sm.SphericalDirection(rng.uniform(-math.pi, math.pi), math.asin(rng.uniform(-1, 1)))
            x, y, z = d.unit_vector()
            assert sm.real_sph_harm(sm.SHIndex(1, -1), d) == pytest.approx(c * y, abs=1e-12)
            assert sm.real_sph_harm(sm.SHIndex(1, 0), d) == pytest.approx(c * z, abs=1e-12)
            assert sm.real_sph_harm(sm.SHIndex(1, 1), d) == pytest.approx(c * x, abs=1e-12)

    def test_orthonormality_quadrature(self):
        # 64-point Gauss-Legendre in sin(el) x 128 uniform azimuths
        nodes, weights = np.polynomial.legendre.leggauss(64)
        az = (np.arange(128) + 0.5) / 128 * 2 * np.pi - np.pi
        el_grid, az_grid = np.meshgrid(np.arcsin(nodes), az, indexing="ij")
        w = np.repeat(weights[:, None], 128, axis=1) * (2 * np.pi / 128)
        y = sm.sh_matrix(az_grid.ravel(), el_grid.ravel(), 3)
        gram = (y * w.ravel()[:, None]).T @ y
        assert np.max(np.abs(gram - np.eye(16))) < 1e-6

    def test_matrix_matches_scalar(self):
        rng = np.random.default_rng(2)
        az = rng.uniform(-math.pi, math.pi, 10)
        el = np.arcsin(rng.uniform(-1, 1, 10))
        y = sm.sh_matrix(az, el, 3)
        for i in range(10):
            d = sm.SphericalDirection(az[i], el[i])
            for acn in range(16):
                idx = sm.SHIndex.from_acn(acn)
                assert y[i, acn] == pytest.approx(sm.real_sph_harm(idx, d), abs=1e-12)

    def test_deterministic(self):
        d = sm.SphericalDirection(0.3, 0.2)
        v1 = sm.real_sph_harm(sm.SHIndex(2, -1), d)
        v2 = sm.real_sph_harm(sm.SHIndex(2, -1), d)
        assert v1 == v2


class TestSphBessel:
    def test_j0_closed_form(self):
        assert sm.sph_bessel_j(0, 1.0) == pytest.approx(math.sin(1.0), abs=1e-14)

    def test_series_limits(self):
        assert sm.sph_bessel_j(0, 0.0) == pytest.approx(1.0, abs=1e-15)
        assert sm.sph_bessel_j(1, 0.0) == pytest.approx(0.0, abs=1e-15)

    def test_j2_against_series_oracle(self):
        assert sm.sph_bessel_j(2, 5.0) == pytest.approx(mp_sph_jn(2, 5.0), rel=1e-10)

    @pytest.mark.parametrize("n", range(0, 9))
    def test_accuracy_target_against_oracle(self, n):
        for x in [1e-6, 1e-4, 0.01, 0.3, 0.49, 0.51, 1.0, 2.0, 5.0, 10.0, 25.0, 50.0]:
            val = sm.sph_bessel_j(n, x)
            ref = mp_sph_jn(n, x)
            assert abs(val - ref) <= 1e-10 * max(abs(ref), 1e-30), (n, x)

    def test_y_against_oracle(self):
        for n in range(6):
            for x in [0.05, 0.5, 1.0, 3.0, 10.0, 50.0]:
                assert sm.sph_bessel_y(n, x) == pytest.approx(mp_sph_yn(n, x), rel=1e-10)

    def test_domain_errors(self):
        with pytest.raises(sm.DomainError):
            sm.sph_bessel_j(0, -1.0)
        with pytest.raises(sm.DomainError):
            sm.sph_bessel_y(0, 0.0)


class TestHankel:
    def test_h0_closed_form(self):
        # h_0^(1)(x) = -i e^{ix} / x -> at x=1: sin(1) - i cos(1)
        h = sm.sph_hankel_h1(0, 1.0)
        assert h.real == pytest.approx(math.sin(1.0), abs=1e-14)
        assert h.imag == pytest.approx(-math.cos(1.0), abs=1e-14)

    def test_domain_error(self):
        with pytest.raises(sm.DomainError):
            sm.sph_hankel_h1(0, 0.0)
        with pytest.raises(sm.DomainError):
            sm.sph_hankel_h1(1, -0.5)

    def test_derivative_identity_j0(self):
        assert sm.sph_bessel_j_prime(0, 2.0) == pytest.approx(-sm.sph_bessel_j(1, 2.0), abs=1e-10)

    def test_h1_derivative_finite_difference(self):
        h = 1e-6
        fd = (sm.sph_hankel_h1(1, 1 + h) - sm.sph_hankel_h1(1, 1 - h)) / (2 * h)
        an = sm.sph_hankel_h1_prime(1, 1.0)
        assert abs(fd - an) / abs(an) < 1e-6


class TestRadialFunction:
    def test_small_argument_limit(self):
        b0 = sm.radial_function_rigid(0, 1e-3, 1e-3)
        assert abs(b0 - 4 * math.pi) / (4 * math.pi) < 1e-3

    def test_open_sphere_reduction(self):
        # with the scatterer term removed the value is 4 pi i^n j_n(kr)
        for n in range(4):
            kr = 1.3
            open_val = 4 * math.pi * (1j**n) * sm.sph_bessel_j(n, kr)
            rigid = sm.radial_function_rigid(n, kr, 0.5)
            scatter = (
                4
                * math.pi
                * (1j**n)
                * (sm.sph_bessel_j_prime(n, 0.5) / sm.sph_hankel_h1_prime(n, 0.5))
                * sm.sph_hankel_h1(n, kr)
            )
            assert rigid + scatter == pytest.approx(open_val, abs=1e-12)

    def test_golden_value_n1(self):
        # frozen from a 40-digit mpmath evaluation of the same formula
        golden = complex(-0.6010083564675921, 5.5876223063967085)
        val = sm.radial_function_rigid(1, 1.0, 1.0)
        assert abs(val - golden) < 1e-12

    def test_domain_error(self):
        with pytest.raises(sm.DomainError):
            sm.radial_function_rigid(0, 0.5, 1.0)
        with pytest.raises(sm.DomainError):
            sm.radial_function_rigid(0, 1.0, 0.0)

    def test_finite_nonzero_over_range(self):
        for kr0 in [0.01, 0.1, 0.5, 1.0, 2.0]:
            for kr in np.linspace(kr0, 20.0, 40):
                for n in range(4):
                    v = abs(sm.radial_function_rigid(n, kr, kr0))
                    assert np.isfinite(v) and v > 0, (n, kr, kr0)

    def test_bit_deterministic(self):
        a = sm.radial_function_rigid(2, 3.7, 0.9)
        b = sm.radial_function_rigid(2, 3.7, 0.9)
        assert a == b
