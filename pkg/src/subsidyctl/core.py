"""Shared domain types, seeded randomness and the trajectory data model."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

N_FEATURES = 19
STATE_DIM = N_FEATURES + 1
LAMBDA_MAX = 30.0
WINDOW_CHOICES = (2, 5, 10)


def horizon_for(window_minutes: int) -> int:
    """Number of decision windows in one day."""
    if window_minutes not in WINDOW_CHOICES:
        raise ValueError(f"window_minutes must be one of {WINDOW_CHOICES}, got {window_minutes}")
    return 1440 // window_minutes


def augment_state(features, rho: float) -> np.ndarray:
    """Append the running subsidy rate to the observable feature vector."""
    s = np.asarray(features, dtype=float).ravel()
    if s.shape[0] != N_FEATURES:
        raise ValueError(f"expected {N_FEATURES} features, got {s.shape[0]}")
    if not rho >= 0:
        raise ValueError(f"subsidy rate must be non-negative, got {rho}")
    return np.concatenate([s, [float(rho)]])


@dataclass(frozen=True)
class MarketState:
    features: np.ndarray
    subsidy_rate_so_far: float = 0.0

    def __post_init__(self):
        if np.asarray(self.features).shape != (N_FEATURES,):
            raise ValueError(f"expected {N_FEATURES} features, got shape {np.shape(self.features)}")
        if self.subsidy_rate_so_far < 0:
            raise ValueError("subsidy_rate_so_far must be >= 0")

    def augmented(self) -> np.ndarray:
        return augment_state(self.features, self.subsidy_rate_so_far)


@dataclass(frozen=True)
class PairEconomics:
    reward: float
    gmv: float
    slope: float
    cap: float
    base_prob: float = 0.0


class SeededRng:
    """numpy PCG64 stream keyed by ``(seed, stream_id)``.

    PCG64 output is specified bit-for-bit, so the same key reproduces the
    same draws on every platform numpy supports.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        ss = np.random.SeedSequence([self.seed & (2**64 - 1), self.stream_id & (2**64 - 1)])
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def spawn(self, stream_id: int) -> "SeededRng":
        """Independent child stream sharing this seed."""
        return SeededRng(self.seed, stream_id)

    def __getattr__(self, name):
        return getattr(self.generator, name)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, stream_id={self.stream_id})"


@dataclass(frozen=True)
class Context:
    """Conditioning vector for the planner and decoder.

    ``city_index`` is ``None`` for cities the models were not trained on; they
    map to the trailing "unknown" slot of the one-hot block.
    """

    n_cities: int
    city_index: int | None
    hour: float
    dow: int
    cap_C: float
    tolerance_delta: float
    target_rides: float = 1.0

    def __post_init__(self):
        if self.city_index is not None and not 0 <= self.city_index < self.n_cities:
            raise ValueError(f"city_index {self.city_index} outside [0, {self.n_cities})")
        if not 0 < self.cap_C < 1:
            raise ValueError(f"cap_C must lie in (0, 1), got {self.cap_C}")
        if self.tolerance_delta < 0 or self.cap_C + self.tolerance_delta >= 1:
            raise ValueError("need tolerance_delta >= 0 and cap_C + tolerance_delta < 1")
        if self.target_rides < 0:
            raise ValueError("target_rides must be >= 0")

    @staticmethod
    def dim(n_cities: int) -> int:
        return n_cities + 1 + 7

    @property
    def city_onehot(self) -> np.ndarray:
        v = np.zeros(self.n_cities + 1)
        v[self.n_cities if self.city_index is None else self.city_index] = 1.0
        return v

    def to_vector(self) -> np.ndarray:
        h = 2 * math.pi * self.hour / 24.0
        d = 2 * math.pi * self.dow / 7.0
        tail = [math.sin(h), math.cos(h), math.sin(d), math.cos(d),
                self.cap_C, self.tolerance_delta, self.target_rides]
        return np.concatenate([self.city_onehot, tail])

    def with_target(self, target_rides: float) -> "Context":
        return replace(self, target_rides=target_rides)

    def at_hour(self, hour: float) -> "Context":
        return replace(self, hour=hour)


@dataclass
class Trajectory:
    """One city-day. ``states[t]`` is what the policy observes before acting at ``t``.

    Arrays are right-padded past ``valid_length``. ``subsidy`` is the
    per-window subsidy actually paid, kept so the day-end subsidy rate can be
    recomputed from the log.
    """

    city_id: str
    day_index: int
    window_minutes: int
    states: np.ndarray
    actions: np.ndarray
    rides: np.ndarray
    gmv: np.ndarray
    drv: np.ndarray
    subsidy: np.ndarray
    valid_length: int = -1
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        T = horizon_for(self.window_minutes)
        self.states = np.asarray(self.states, dtype=float)
        for name in ("actions", "rides", "gmv", "drv", "subsidy"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.valid_length < 0:
            self.valid_length = T
        if self.states.shape != (T, STATE_DIM):
            raise ValueError(f"states must be {T}x{STATE_DIM}, got {self.states.shape}")
        for name in ("actions", "rides", "gmv", "drv", "subsidy"):
            if getattr(self, name).shape != (T,):
                raise ValueError(f"{name} must have length {T}")
        if not 0 < self.valid_length <= T:
            raise ValueError(f"valid_length must be in (0, {T}], got {self.valid_length}")
        a = self.actions[: self.valid_length]
        if np.any(a <= 0) or np.any(a > LAMBDA_MAX):
            raise ValueError("actions must lie in (0, 30] on valid positions")

    @property
    def T(self) -> int:
        return self.states.shape[0]

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.T)
        m[: self.valid_length] = 1.0
        return m

    def total(self, kpi: str) -> float:
        return float(getattr(self, kpi)[: self.valid_length].sum())

    @property
    def c_real(self) -> float:
        """Day-end cumulative subsidy over cumulative completed GMV (0 if no GMV)."""
        g = self.total("gmv")
        return self.total("subsidy") / g if g > 0 else 0.0

    def to_dict(self) -> dict:
        return {
            "city_id": self.city_id,
            "day_index": int(self.day_index),
            "window_minutes": int(self.window_minutes),
            "states": self.states.tolist(),
            "actions": self.actions.tolist(),
            "rides": self.rides.tolist(),
            "gmv": self.gmv.tolist(),
            "drv": self.drv.tolist(),
            "subsidy": self.subsidy.tolist(),
            "valid_length": int(self.valid_length),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        keys = ("city_id", "day_index", "window_minutes", "states", "actions",
                "rides", "gmv", "drv", "subsidy", "valid_length")
        missing = [k for k in keys if k not in d]
        if missing:
            raise ValueError(f"trajectory record missing keys: {missing}")
        return cls(**{k: d[k] for k in keys})


def write_jsonl(trajs: Iterable[Trajectory], path) -> None:
    # json emits floats via repr(): shortest round-trip form, so reload is bit-exact
    with open(path, "w") as fh:
        for tr in trajs:
            fh.write(json.dumps(tr.to_dict(), separators=(",", ":")))
            fh.write("\n")


def read_jsonl(path) -> list[Trajectory]:
    out = []
    with open(Path(path)) as fh:
        for line in fh:
            if line.strip():
                out.append(Trajectory.from_dict(json.loads(line)))
    return out


def group_by_city(trajs: Sequence[Trajectory]) -> dict[str, list[Trajectory]]:
    out: dict[str, list[Trajectory]] = {}
    for tr in trajs:
        out.setdefault(tr.city_id, []).append(tr)
    for v in out.values():
        v.sort(key=lambda tr: tr.day_index)
    return out
