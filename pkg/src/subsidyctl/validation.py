"""Input-validation helpers shared by the estimator wrappers and the CLI."""

from __future__ import annotations

from numbers import Integral, Real
from typing import Sequence

import numpy as np

from .core import LAMBDA_MAX, STATE_DIM, Trajectory


class ValidationError(ValueError):
    """Bad user input (maps to CLI exit code 2)."""


def check_positive(name: str, value, strict: bool = True) -> float:
    if not isinstance(value, Real) or not np.isfinite(value):
        raise ValidationError(f"{name} must be a finite number, got {value!r}")
    if value < 0 or (strict and value == 0):
        raise ValidationError(f"{name} must be {'>' if strict else '>='} 0, got {value}")
    return float(value)


def check_int(name: str, value, lo: int | None = None, hi: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, Integral):
        raise ValidationError(f"{name} must be an integer, got {value!r}")
    if (lo is not None and value < lo) or (hi is not None and value > hi):
        raise ValidationError(f"{name}={value} outside [{lo}, {hi}]")
    return int(value)


def check_unit_interval(name: str, value) -> float:
    if not isinstance(value, Real) or not 0 < value < 1:
        raise ValidationError(f"{name} must lie in (0, 1), got {value!r}")
    return float(value)


def check_action(lam) -> float:
    lam = float(lam)
    if not 0 < lam <= LAMBDA_MAX:
        raise ValidationError(f"action {lam} outside (0, {LAMBDA_MAX}]")
    return lam


def check_states(X, dim: int = STATE_DIM) -> np.ndarray:
    """2-d finite float array with ``dim`` columns (a single row is promoted)."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None]
    if X.ndim != 2 or X.shape[1] != dim:
        raise ValidationError(f"expected states of shape (n, {dim}), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValidationError("states contain non-finite values")
    return X


def check_trajectories(trajs, min_cities: int = 1) -> list[Trajectory]:
    if isinstance(trajs, Trajectory):
        trajs = [trajs]
    trajs = list(trajs)
    if not trajs:
        raise ValidationError("empty trajectory dataset")
    for tr in trajs:
        if not isinstance(tr, Trajectory):
            raise ValidationError(f"expected Trajectory, got {type(tr).__name__}")
    if len({tr.window_minutes for tr in trajs}) != 1:
        raise ValidationError("trajectories mix window sizes")
    n = len({tr.city_id for tr in trajs})
    if n < min_cities:
        raise ValidationError(f"need trajectories from >= {min_cities} cities, got {n}")
    return trajs


def check_same_length(*arrays: Sequence) -> int:
    lens = {len(a) for a in arrays}
    if len(lens) != 1:
        raise ValidationError(f"length mismatch: {sorted(lens)}")
    return lens.pop()
