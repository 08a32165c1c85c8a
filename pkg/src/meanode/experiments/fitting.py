"""Nonnegative least-squares fits of the error-rate models."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike
from scipy.optimize import nnls

from meanode.config import RateModel
from meanode.errors import FitError
from meanode.tensor import FloatArray

MODEL_FORMULAS: dict[str, str] = {
    "depth_width": "a/L + b/sqrt(L*M)",
    "fluctuation": "(a*alpha*sqrt(D) + b*sqrt(D) + c)/sqrt(L*M)",
    "laziness": "a*min(1, 1/alpha)",
}


@dataclass(frozen=True)
class RatePoint:
    """One observation y at a setting (L, M, D, alpha)."""

    y: float
    L: int = 1
    M: int = 1
    D: int = 1
    alpha: float = 1.0


@dataclass(frozen=True)
class RateFit:
    model: RateModel
    coefficients: tuple[float, ...]
    residual: float
    r_squared: float
    n_points: int

    @property
    def formula(self) -> str:
        return MODEL_FORMULAS[self.model]

    def predict(self, points: Sequence[RatePoint]) -> FloatArray:
        return design_matrix(points, self.model) @ np.asarray(self.coefficients)


def design_matrix(points: Sequence[RatePoint], model: RateModel) -> FloatArray:
    rows = []
    for pt in points:
        width = 1.0 / math.sqrt(pt.L * pt.M)
        if model == "depth_width":
            rows.append([1.0 / pt.L, width])
        elif model == "fluctuation":
            root_d = math.sqrt(pt.D)
            rows.append([pt.alpha * root_d * width, root_d * width, width])
        elif model == "laziness":
            rows.append([min(1.0, 1.0 / pt.alpha)])
        else:
            raise FitError(f"unknown rate model {model!r}")
    return np.asarray(rows, dtype=np.float64)


def fit_rate(points: Sequence[RatePoint], model: RateModel) -> RateFit:
    """Fit the model's nonnegative coefficients to the observations.

    Raises:
        FitError: with fewer than (#coefficients + 1) points, non-finite
            observations, or a rank-deficient design matrix.
    """
    if not points:
        raise FitError("no data points to fit")
    A = design_matrix(points, model)
    y = np.asarray([pt.y for pt in points], dtype=np.float64)
    n_coef = A.shape[1]
    if len(points) < n_coef + 1:
        raise FitError(f"{model} needs at least {n_coef + 1} points, got {len(points)}")
    if not np.all(np.isfinite(y)):
        raise FitError("observations must be finite")
    if np.linalg.matrix_rank(A) < n_coef:
        raise FitError(f"degenerate design matrix for {model}: the grid does not identify it")
    coef, residual = nnls(A, y)
    ss_res = float(np.sum((y - A @ coef) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot > 0:
        r_squared = 1.0 - ss_res / ss_tot
    else:
        r_squared = 1.0 if ss_res == 0 else -math.inf
    return RateFit(model, tuple(float(c) for c in coef), float(residual), r_squared, len(points))


def loglog_slope(x: ArrayLike, y: ArrayLike) -> float:
    """Least-squares slope of log y against log x."""
    xs, ys = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if xs.size < 2 or np.any(xs <= 0) or np.any(ys <= 0):
        raise FitError("log-log slopes need at least two positive points")
    slope, _ = np.polyfit(np.log(xs), np.log(ys), 1)
    return float(slope)
