import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from copula_fhmm.exceptions import DomainError
from copula_fhmm.numerics import (EPS_RHO, as_cholesky, bvn_cdf, bvn_cdf_grad, bvn_pdf,
                                  gaussian_logpdf, std_normal_cdf, std_normal_quantile)
from oracles import dense_logpdf, mp_bvn_cdf

finite = st.floats(-6.0, 6.0)
corr = st.floats(-1.0 + EPS_RHO, 1.0 - EPS_RHO)


class TestUnivariate:
    def test_cdf_at_zero(self):
        assert std_normal_cdf(0.0) == 0.5

    def test_cdf_table_value(self):
        assert std_normal_cdf(1.959964) == pytest.approx(0.975, abs=1e-6)

    def test_far_tail(self):
        assert 0.0 < std_normal_cdf(-8.0) < 1e-14

    def test_cdf_against_erf(self):
        x = np.linspace(-7, 7, 301)
        ref = [0.5 * math.erfc(-v / math.sqrt(2.0)) for v in x]
        np.testing.assert_allclose(std_normal_cdf(x), ref, rtol=0, atol=1e-12)

    def test_cdf_monotone(self):
        x = np.linspace(-9, 9, 5001)
        assert np.all(np.diff(std_normal_cdf(x)) >= 0.0)

    def test_quantile_median(self):
        assert std_normal_quantile(0.5) == 0.0

    def test_quantile_by_bisection(self):
        lo, hi = 0.0, 5.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            lo, hi = (mid, hi) if std_normal_cdf(mid) < 0.975 else (lo, mid)
        assert std_normal_quantile(0.975) == pytest.approx(lo, abs=1e-12)
        assert std_normal_quantile(0.975) == pytest.approx(1.959964, abs=1e-5)

    @pytest.mark.parametrize("x", [-3.0, -1.0, 0.0, 1.0, 3.0])
    def test_roundtrip_points(self, x):
        assert std_normal_quantile(std_normal_cdf(x)) == pytest.approx(x, abs=1e-8)

    def test_roundtrip_grid(self):
        p = np.linspace(1e-6, 1 - 1e-6, 1000)
        np.testing.assert_allclose(std_normal_cdf(std_normal_quantile(p)), p, atol=1e-10)

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5, float("nan")])
    def test_quantile_domain(self, p):
        with pytest.raises(DomainError):
            std_normal_quantile(p)


class TestBivariate:
    def test_independent_medians(self):
        assert bvn_cdf(0.0, 0.0, 0.0) == pytest.approx(0.25, abs=1e-15)

    def test_arcsine_half(self):
        assert bvn_cdf(0.0, 0.0, 0.5) == pytest.approx(1 / 3, abs=1e-12)

    def test_arcsine_grid(self):
        rho = np.linspace(-1 + EPS_RHO, 1 - EPS_RHO, 50)
        ref = 0.25 + np.arcsin(rho) / (2 * math.pi)
        np.testing.assert_allclose(bvn_cdf(np.zeros(50), np.zeros(50), rho), ref,
                                   rtol=0, atol=1e-10)

    @pytest.mark.parametrize("b,rho", [(-1.3, 0.4), (0.2, -0.9), (2.5, 0.999)])
    def test_upper_saturation(self, b, rho):
        assert bvn_cdf(38.0, b, rho) == pytest.approx(std_normal_cdf(b), abs=1e-12)

    def test_independence_grid(self):
        a, b = np.meshgrid(np.linspace(-4, 4, 17), np.linspace(-4, 4, 17))
        np.testing.assert_allclose(bvn_cdf(a, b, np.zeros_like(a)),
                                   std_normal_cdf(a) * std_normal_cdf(b), atol=1e-12)

    @pytest.mark.parametrize("a,b,rho", [(0.3, -1.1, 0.2), (-2.0, 1.5, -0.7),
                                         (1.2, 1.4, 0.95), (-0.5, -0.4, -0.97),
                                         (2.1, -2.2, 0.999999), (-3.5, 0.1, 0.6)])
    def test_against_high_precision(self, a, b, rho):
        assert bvn_cdf(a, b, rho) == pytest.approx(mp_bvn_cdf(a, b, rho), abs=1e-13)

    @given(finite, finite, corr)
    def test_frechet_bounds(self, a, b, rho):
        v = bvn_cdf(a, b, rho)
        pa, pb = std_normal_cdf(a), std_normal_cdf(b)
        assert max(0.0, pa + pb - 1.0) - 1e-15 <= v <= min(pa, pb) + 1e-15

    @given(finite, finite, corr)
    def test_symmetric(self, a, b, rho):
        assert bvn_cdf(a, b, rho) == pytest.approx(bvn_cdf(b, a, rho), abs=1e-14)

    @given(finite, finite, corr, st.floats(0.0, 1.0))
    def test_monotone_in_a(self, a, b, rho, step):
        assert bvn_cdf(a + step, b, rho) >= bvn_cdf(a, b, rho) - 1e-15

    @given(finite, finite, finite, finite, corr)
    def test_rectangle_nonnegative(self, a1, a2, b1, b2, rho):
        (a1, a2), (b1, b2) = sorted((a1, a2)), sorted((b1, b2))
        mass = (bvn_cdf(a2, b2, rho) - bvn_cdf(a1, b2, rho)
                - bvn_cdf(a2, b1, rho) + bvn_cdf(a1, b1, rho))
        assert mass >= -1e-14

    def test_rho_out_of_range(self):
        with pytest.raises(DomainError):
            bvn_cdf(0.0, 0.0, 1.0)


class TestGradient:
    def test_origin_values(self):
        da, db, dr = bvn_cdf_grad(0.0, 0.0, 0.0)
        assert dr == pytest.approx(1 / (2 * math.pi), abs=1e-12)
        assert da == pytest.approx(0.1994711402, abs=1e-9)
        assert db == pytest.approx(da, abs=1e-15)

    @given(st.floats(-4, 4), st.floats(-4, 4), st.floats(-0.98, 0.98))
    def test_finite_differences(self, a, b, rho):
        h = 1e-5
        g = bvn_cdf_grad(a, b, rho)
        fd = [(bvn_cdf(a + h, b, rho) - bvn_cdf(a - h, b, rho)) / (2 * h),
              (bvn_cdf(a, b + h, rho) - bvn_cdf(a, b - h, rho)) / (2 * h),
              (bvn_cdf(a, b, rho + h) - bvn_cdf(a, b, rho - h)) / (2 * h)]
        for got, ref in zip(g, fd):
            assert got == pytest.approx(ref, rel=1e-5, abs=1e-9)

    def test_density_is_rho_derivative(self):
        assert bvn_pdf(0.4, -0.3, 0.5) == pytest.approx(bvn_cdf_grad(0.4, -0.3, 0.5)[2])


class TestGaussian:
    def test_standard_normal_at_zero(self):
        assert gaussian_logpdf([0.0], [0.0], [[1.0]]) == pytest.approx(-0.5 * math.log(2 * math.pi))

    def test_identity_2d(self):
        assert gaussian_logpdf([1.0, 2.0], [1.0, 2.0], np.eye(2)) == pytest.approx(-math.log(2 * math.pi))

    def test_dense_oracle(self, rng):
        for _ in range(20):
            L = np.tril(rng.normal(size=(3, 3)), -1) + np.diag(rng.uniform(0.3, 2.0, 3))
            y, mu = rng.normal(size=3), rng.normal(size=3)
            assert gaussian_logpdf(y, mu, L) == pytest.approx(dense_logpdf(y, mu, L @ L.T), abs=1e-10)

    def test_broadcasts(self, rng):
        L = np.diag([0.5, 2.0])
        y = rng.normal(size=(4, 5, 2))
        out = gaussian_logpdf(y, np.zeros(2), L)
        assert out.shape == (4, 5)
        assert out[2, 3] == pytest.approx(dense_logpdf(y[2, 3], np.zeros(2), L @ L.T))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            gaussian_logpdf([0.0, 1.0], [0.0], np.eye(2))

    @pytest.mark.parametrize("L", [[[1.0, 0.5], [0.0, 1.0]], [[1.0, 0.0], [0.0, -1.0]],
                                   [[0.0, 0.0], [0.0, 1.0]]])
    def test_rejects_invalid_cholesky(self, L):
        with pytest.raises(ValueError):
            as_cholesky(L)
