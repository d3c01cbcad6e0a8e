"""Budget-constrained pair-level subsidy rules derived from the Lagrangian dual.

Under a linear completion model the per-pair inner maximisation has the
closed form ``b* = clip(kappa * reward, 0, cap)`` with
``kappa = (C + delta + 1/lambda) / 2``. For smooth concave completion curves
the interior optimum solves a one-dimensional stationarity equation, which
:func:`general_subsidy` finds by bisection.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from .core import PairEconomics

BISECT_TOL = 1e-10


class ModelError(ValueError):
    """Completion model violates monotonicity/concavity/normalisation."""


@dataclass(frozen=True)
class DualParams:
    lam: float
    cap_C: float
    tolerance_delta: float = 0.0

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"dual multiplier must be positive, got {self.lam}")
        if not 0 < self.cap_C < 1:
            raise ValueError(f"cap_C must lie in (0, 1), got {self.cap_C}")
        if self.tolerance_delta < 0:
            raise ValueError("tolerance_delta must be >= 0")

    @property
    def budget(self) -> float:
        return self.cap_C + self.tolerance_delta

    @property
    def kappa(self) -> float:
        return 0.5 * (self.budget + 1.0 / self.lam)


def closed_form_subsidy(d: DualParams, reward, cap):
    """``min(max(0, kappa * reward), cap)``; broadcasts over arrays."""
    if not d.lam > 0:
        raise ValueError("dual multiplier must be positive")
    out = np.minimum(np.maximum(0.0, d.kappa * np.asarray(reward, dtype=float)), cap)
    return float(out) if np.ndim(out) == 0 else out


def pairwise_lagrangian_term(d: DualParams, reward, slope, b):
    """Per-pair Lagrangian contribution under the linear completion model."""
    b = np.asarray(b, dtype=float)
    if np.any(b < 0):
        raise ValueError("subsidy must be non-negative")
    with np.errstate(over="raise", invalid="raise"):
        val = (1.0 + d.lam * d.budget) * reward * slope * b - d.lam * slope * b * b
    return float(val) if np.ndim(val) == 0 else val


def map_window_subsidies(d: DualParams, pairs: Sequence[PairEconomics]) -> list[float]:
    """Apply the closed form to every broadcast pair in a window, order preserved."""
    if len(pairs) == 0:
        return []
    r = np.array([p.reward for p in pairs])
    c = np.array([p.cap for p in pairs])
    return list(np.atleast_1d(closed_form_subsidy(d, r, c)).tolist())


class LinearCompletion:
    """``p(b) = slope * b``."""

    def __init__(self, slope: float):
        if not slope > 0:
            raise ValueError("slope must be positive")
        self.slope = float(slope)

    def p(self, b):
        return self.slope * np.asarray(b, dtype=float)

    def dp(self, b):
        return np.full_like(np.asarray(b, dtype=float), self.slope)


class LogisticCompletion:
    """Shifted logistic ``p(b) = s * (sigmoid(k (b - m)) - sigmoid(-k m))``.

    The shift makes ``p(0) = 0``; with ``m <= 0`` the curve is concave on
    ``b >= 0``.
    """

    def __init__(self, scale: float, midpoint: float, steepness: float):
        if not (scale > 0 and steepness > 0):
            raise ValueError("scale and steepness must be positive")
        self.scale = float(scale)
        self.midpoint = float(midpoint)
        self.steepness = float(steepness)
        self._p0 = expit(-self.steepness * self.midpoint)

    def p(self, b):
        return self.scale * (expit(self.steepness * (np.asarray(b, dtype=float) - self.midpoint)) - self._p0)

    def dp(self, b):
        s = expit(self.steepness * (np.asarray(b, dtype=float) - self.midpoint))
        return self.scale * self.steepness * s * (1.0 - s)


def check_completion_model(model, cap: float, n: int = 65) -> None:
    """Spot-check p(0)=0, p(cap)<=1, p' >= 0 and p' non-increasing on a grid."""
    grid = np.linspace(0.0, cap, n)
    p, dp = model.p(grid), model.dp(grid)
    if abs(float(model.p(0.0))) > 1e-12:
        raise ModelError("completion model must satisfy p(0) = 0")
    if p[-1] > 1 + 1e-12:
        raise ModelError(f"completion probability exceeds 1 at cap: {p[-1]}")
    if np.any(dp < -1e-12):
        raise ModelError("completion model is not monotone non-decreasing")
    if np.any(np.diff(dp) > 1e-12 * max(1.0, float(np.abs(dp).max()))):
        raise ModelError("completion model is not concave on [0, cap]")


def stationarity(d: DualParams, reward: float, model, b):
    """First-order condition of the per-pair objective:
    ``[(1 + lam (C+delta)) r - lam b] p'(b) - lam p(b)``."""
    return ((1.0 + d.lam * d.budget) * reward - d.lam * b) * model.dp(b) - d.lam * model.p(b)


def pair_objective(d: DualParams, reward: float, model, b):
    return ((1.0 + d.lam * d.budget) * reward - d.lam * b) * model.p(b)


def general_subsidy(d: DualParams, reward: float, cap: float, model, tol: float = BISECT_TOL) -> float:
    """Clipped maximiser of the per-pair objective for a concave completion model."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    if not cap > 0:
        raise ValueError("cap must be positive")
    check_completion_model(model, cap)
    lo, hi = 0.0, float(cap)
    f_lo = float(stationarity(d, reward, model, lo))
    f_hi = float(stationarity(d, reward, model, hi))
    if f_lo > 0 > f_hi:
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            f_mid = float(stationarity(d, reward, model, mid))
            if f_mid == 0.0:
                return mid
            if f_mid > 0:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)
    # no interior root: the better endpoint wins, ties go to spending less
    v0 = float(pair_objective(d, reward, model, 0.0))
    vc = float(pair_objective(d, reward, model, cap))
    return float(cap) if vc > v0 else 0.0


def dual_function(lam: float, cap_C: float, tolerance_delta: float, rewards, slopes, caps) -> float:
    """``g(lam)``: sum over pairs of the maximised per-pair Lagrangian term."""
    d = DualParams(lam, cap_C, tolerance_delta)
    b = closed_form_subsidy(d, rewards, caps)
    return float(np.sum(pairwise_lagrangian_term(d, rewards, slopes, b)))
