"""Tests for the nonnegative rate fits."""

import math

import numpy as np
import pytest

from meanode.errors import FitError
from meanode.experiments.fitting import RatePoint, design_matrix, fit_rate, loglog_slope


class TestFitRate:
    """Tests for fit_rate."""

    def test_recovers_depth_width_coefficients(self):
        """Exact a/L + b/sqrt(LM) data gives back (a, b) with R^2 = 1."""
        points = [
            RatePoint(2.0 / L + 0.5 / math.sqrt(L), L=L) for L in (8, 16, 32, 64, 128)
        ]

        fit = fit_rate(points, "depth_width")

        np.testing.assert_allclose(fit.coefficients, (2.0, 0.5), rtol=1e-8)
        assert fit.r_squared == pytest.approx(1.0)
        assert fit.n_points == 5
        assert fit.formula == "a/L + b/sqrt(L*M)"

    def test_noisy_depth_data(self):
        """Under 5% multiplicative noise the mean fit over 100 draws is within 20%."""
        rng = np.random.default_rng(0)
        depths = [2**i for i in range(3, 10)]
        exact = np.array([0.15 / L + 0.22 / math.sqrt(L) for L in depths])

        coefficients = [
            fit_rate(
                [RatePoint(float(y), L=L) for y, L in zip(noisy, depths, strict=True)],
                "depth_width",
            ).coefficients
            for noisy in exact * (1.0 + 0.05 * rng.standard_normal((100, len(depths))))
        ]

        np.testing.assert_allclose(np.mean(coefficients, axis=0), (0.15, 0.22), rtol=0.2)

    def test_coefficients_are_nonnegative(self):
        """A decreasing-in-1/L trend is clipped at a = 0 instead of going negative."""
        points = [RatePoint(1.0 / math.sqrt(L) - 0.5 / L, L=L) for L in (4, 16, 64, 256)]

        fit = fit_rate(points, "depth_width")

        assert all(c >= 0 for c in fit.coefficients)

    def test_fluctuation_model(self):
        """Exact fluctuation data gives back (a, b, c)."""
        points = [
            RatePoint((1.0 * a * math.sqrt(D) + 0.2 * math.sqrt(D) + 0.1) / math.sqrt(500 * 10),
                      L=500, M=10, D=D, alpha=a)
            for D in (8, 32)
            for a in (0.5, 1.0, 2.0, 4.0)
        ]  # fmt: skip

        fit = fit_rate(points, "fluctuation")

        np.testing.assert_allclose(fit.coefficients, (1.0, 0.2, 0.1), rtol=1e-6, atol=1e-9)

    def test_laziness_model(self):
        """a*min(1, 1/alpha) data gives back a."""
        points = [RatePoint(0.3 * min(1.0, 1.0 / a), alpha=a) for a in (0.5, 1.0, 2.0, 4.0)]

        fit = fit_rate(points, "laziness")

        assert fit.coefficients[0] == pytest.approx(0.3)
        np.testing.assert_allclose(fit.predict(points), [p.y for p in points])

    def test_too_few_points(self):
        """Two points cannot fit two coefficients."""
        points = [RatePoint(1.0, L=8), RatePoint(0.5, L=16)]

        with pytest.raises(FitError, match="at least 3"):
            fit_rate(points, "depth_width")

    def test_no_points(self):
        """An empty fit is an error."""
        with pytest.raises(FitError):
            fit_rate([], "laziness")

    def test_non_finite_observations(self):
        """NaN observations are rejected."""
        points = [RatePoint(y, L=L) for y, L in ((1.0, 8), (math.nan, 16), (0.2, 32))]

        with pytest.raises(FitError, match="finite"):
            fit_rate(points, "depth_width")

    def test_degenerate_grid(self):
        """A single depth cannot separate 1/L from 1/sqrt(L)."""
        points = [RatePoint(0.1 * r, L=16) for r in range(1, 5)]

        with pytest.raises(FitError, match="degenerate"):
            fit_rate(points, "depth_width")

    def test_design_matrix_rows(self):
        """Row of 1/L and 1/sqrt(LM)."""
        A = design_matrix([RatePoint(0.0, L=4, M=9)], "depth_width")

        np.testing.assert_allclose(A, [[0.25, 1.0 / 6.0]])


class TestLogLogSlope:
    """Tests for loglog_slope."""

    def test_power_law(self):
        """Slope of a pure power law."""
        xs = np.array([8.0, 16.0, 32.0, 64.0])

        assert loglog_slope(xs, 3.0 * xs**-0.5) == pytest.approx(-0.5)

    def test_rejects_nonpositive(self):
        """Logs need positive values."""
        with pytest.raises(FitError):
            loglog_slope([1.0, 2.0], [1.0, 0.0])
