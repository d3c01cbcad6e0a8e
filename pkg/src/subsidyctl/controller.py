"""Deployed decision loop: observed prefix -> sampled future -> decoded lambda."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .core import LAMBDA_MAX, STATE_DIM, Context, SeededRng, Trajectory, horizon_for
from .diffusion import NoiseSchedule, reverse_sample
from .market import CityProfile, initial_state, step
from .net import InverseDecoder, TemporalDenoiser, decoder_windows
from .train import CityIndex, StateScaler

FUTURE_H = 8


@dataclass
class Planner:
    """Frozen bundle of trained components needed at decision time."""

    denoiser: TemporalDenoiser
    decoder: InverseDecoder
    scaler: StateScaler
    cities: CityIndex
    schedule: NoiseSchedule
    window_minutes: int
    dtype: type = np.float32
    clip_margin: float | None = 0.5

    def __post_init__(self):
        # float32 copy for inference; training keeps float64
        self._den = self.denoiser.astype(self.dtype)
        self.clip = None if self.clip_margin is None else self.scaler.bounds(self.clip_margin)

    @property
    def T(self) -> int:
        return horizon_for(self.window_minutes)

    def context_for(self, city_id: str, day_index: int, cap_C: float, delta: float) -> Context:
        return Context(self.cities.n, self.cities.index(city_id), 0.0, day_index % 7, cap_C, delta, 1.0)

    def eps(self, z, tau, c):
        return self._den(z, tau, c)


@dataclass
class ControllerState:
    context: Context
    gamma: float = 1.0
    replan_every: int = 1
    truncate: bool = False
    history: list = field(default_factory=list)
    plan: np.ndarray | None = None
    plan_t: int = -1
    offset: int = 0
    timings: list = field(default_factory=list)

    def __post_init__(self):
        if self.replan_every < 1:
            raise ValueError("replan_every must be >= 1")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")

    def observe(self, x) -> None:
        self.history.append(np.asarray(x, dtype=float).copy())

    def reset(self) -> None:
        self.history.clear()
        self.plan, self.plan_t, self.offset = None, -1, 0
        self.timings.clear()


def _context_vector(state: ControllerState, planner: Planner, t: int) -> np.ndarray:
    hour = ((t * planner.window_minutes) % 1440) / 60.0
    ctx = state.context.at_hour(hour).with_target(state.gamma * state.context.target_rides)
    return planner.scaler.scale_context(ctx.to_vector())


def decide(state: ControllerState, t: int, planner: Planner, rng, deterministic: bool = False) -> float:
    """Decision for window ``t`` given history ``x_0..x_t`` held in ``state``."""
    T = planner.T
    if not 0 <= t < T:
        raise IndexError(f"window {t} outside horizon [0, {T})")
    if len(state.history) != t + 1:
        raise ValueError(f"history has {len(state.history)} rows, expected {t + 1}")
    start = time.perf_counter()
    c = _context_vector(state, planner, t)
    due = state.plan is None or t - state.plan_t >= state.replan_every
    if due:
        hist = planner.scaler.transform(np.asarray(state.history))
        offset = 0
        if state.truncate and t + 1 > T - FUTURE_H:
            # keep the last T-H observations so H future rows are always generated
            offset = t + 1 - (T - FUTURE_H)
            hist = hist[offset:]
        suffix = reverse_sample(hist, c, planner.schedule, planner.eps, rng, T,
                                deterministic=deterministic, clip=planner.clip)
        state.plan = np.concatenate([hist, suffix])
        state.plan_t, state.offset = t, offset
    else:
        # observed rows always overwrite the cached plan
        hist = planner.scaler.transform(np.asarray(state.history[state.offset:]))
        state.plan[: len(hist)] = hist
    pos = t - state.offset
    w = decoder_windows(state.plan, [pos], T)
    lam = float(planner.decoder(w, c[None])[0])
    state.timings.append(time.perf_counter() - start)
    return float(min(max(lam, 1e-3), LAMBDA_MAX))


def run_day(state: ControllerState, profile: CityProfile, planner: Planner, day_index: int, rng,
            sample_rng=None, deterministic: bool = False) -> Trajectory:
    """Closed-loop day: market draws use ``rng``, diffusion draws ``sample_rng``."""
    T = planner.T
    sample_rng = sample_rng if sample_rng is not None else rng
    state.reset()
    sim = initial_state(profile, day_index, planner.window_minutes, rng)
    states = np.zeros((T, STATE_DIM))
    acts = np.zeros(T)
    kpi = np.zeros((4, T))
    for t in range(T):
        states[t] = sim.x
        state.observe(sim.x)
        lam = decide(state, t, planner, sample_rng, deterministic=deterministic)
        acts[t] = lam
        sim, out = step(sim, profile, lam, rng)
        kpi[:, t] = (out.rides, out.gmv_completed, out.drv, out.subsidy_paid)
    tr = Trajectory(profile.city_id, day_index, planner.window_minutes, states, acts,
                    kpi[0], kpi[1], kpi[2], kpi[3])
    tr.extras["final_rho"] = sim.market.subsidy_rate_so_far
    tr.extras["decide_seconds"] = float(np.mean(state.timings))
    return tr


def controller_policy(state: ControllerState, planner: Planner, rng):
    """Adapter to the ``policy(x, t, ctx)`` signature used by ``market.rollout``."""

    def policy(x, t, ctx=None):
        if t == 0:
            state.reset()
        state.observe(x)
        return decide(state, t, planner, rng)

    return policy


def time_decisions(planner: Planner, context: Context, n: int = 20, seed: int = 0,
                   t: int | None = None) -> float:
    """Mean wall time of ``decide`` on a synthetic history (seconds)."""
    rng = SeededRng(seed, 99)
    T = planner.T
    t = T // 2 if t is None else t
    hist = planner.scaler.inverse(rng.standard_normal((t + 1, STATE_DIM)))
    state = ControllerState(context)
    state.history = list(hist)
    decide(state, t, planner, rng)  # warm-up
    state.timings.clear()
    for _ in range(n):
        state.plan = None
        decide(state, t, planner, rng)
    return float(np.mean(state.timings))
