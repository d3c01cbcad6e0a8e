"""Seeded synthetic city simulator.

Each window draws broadcast order-driver pairs, prices them with the dual
mapping for the chosen multiplier, samples completions and folds the outcome
into the running KPIs, the realised subsidy rate and the next feature vector.

The completion curve is affine in the subsidy and clipped at 1, with a
pair-level intercept. Pickup distance drives both the intercept (long pickups
are rarely accepted unpaid) and the slope (long pickups respond more to
money), and pickup distance grows when supply is short of demand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import (
    LAMBDA_MAX,
    N_FEATURES,
    STATE_DIM,
    Context,
    MarketState,
    PairEconomics,
    SeededRng,
    Trajectory,
    horizon_for,
)
from .dual_map import DualParams, closed_form_subsidy

ROLL = 6

FEATURE_NAMES = (
    "hour_sin", "hour_cos", "dow_sin", "dow_cos",
    "demand_rate", "supply", "completion_rate",
    "rides", "gmv", "drv",
    "rides_roll", "gmv_roll", "drv_roll",
    "pickup_dist", "broadcasts",
    "cum_rides", "cum_gmv",
    "remaining", "last_lambda",
)
assert len(FEATURE_NAMES) == N_FEATURES
LAST_LAMBDA = FEATURE_NAMES.index("last_lambda")

DEFAULT_DEMAND = (
    0.25, 0.15, 0.10, 0.08, 0.10, 0.25, 0.60, 1.30, 1.80, 1.40, 1.00, 0.95,
    1.05, 1.00, 0.95, 1.00, 1.20, 1.60, 1.90, 1.50, 1.10, 0.90, 0.70, 0.45,
)
DEFAULT_SUPPLY = (
    0.45, 0.35, 0.30, 0.28, 0.30, 0.40, 0.60, 0.85, 1.00, 1.05, 1.05, 1.00,
    1.00, 1.00, 1.00, 1.00, 1.05, 1.05, 1.05, 1.00, 0.95, 0.85, 0.70, 0.55,
)


@dataclass(frozen=True)
class CityProfile:
    city_id: str
    demand_curve: tuple = DEFAULT_DEMAND
    supply_curve: tuple = DEFAULT_SUPPLY
    demand_scale: float = 100.0
    gmv_mu: float = 2.6
    gmv_sigma: float = 0.45
    margin: float = 0.2
    slope_coeffs: tuple = (0.02, 0.08)
    base_prob_range: tuple = (0.2, 0.85)
    dist_ref: float = 1.0
    c_frac: float = 0.25
    noise_sigma: float = 0.08
    elasticity: float = 0.6
    cap_C: float = 0.1
    tolerance_delta: float = -1.0

    def __post_init__(self):
        if len(self.demand_curve) != 24 or len(self.supply_curve) != 24:
            raise ValueError("demand_curve and supply_curve need 24 hourly values")
        if min(self.demand_curve) < 0 or min(self.supply_curve) <= 0:
            raise ValueError("hourly rates must be non-negative (supply positive)")
        if not self.demand_scale >= 0:
            raise ValueError("demand_scale must be >= 0")
        if not 0 < self.margin < 1 or not 0 < self.c_frac <= 1:
            raise ValueError("margin must be in (0,1) and c_frac in (0,1]")
        lo, hi = self.base_prob_range
        if not 0 <= lo <= hi < 1:
            raise ValueError("base_prob_range must satisfy 0 <= lo <= hi < 1")
        if self.slope_coeffs[0] <= 0 or self.slope_coeffs[1] < 0:
            raise ValueError("slope_coeffs must give a positive slope")
        if self.noise_sigma < 0 or self.elasticity <= 0:
            raise ValueError("noise_sigma must be >= 0 and elasticity > 0")
        if not 0 < self.cap_C < 1:
            raise ValueError("cap_C must be in (0,1)")
        if self.tolerance_delta < 0:
            object.__setattr__(self, "tolerance_delta", 0.1 * self.cap_C)
        object.__setattr__(self, "demand_curve", tuple(float(v) for v in self.demand_curve))
        object.__setattr__(self, "supply_curve", tuple(float(v) for v in self.supply_curve))

    @property
    def mean_gmv(self) -> float:
        return math.exp(self.gmv_mu + 0.5 * self.gmv_sigma**2)

    def orders_per_window(self, window_minutes: int) -> float:
        """City-average expected broadcasts per window, used to scale features."""
        return max(self.demand_scale * float(np.mean(self.demand_curve)) * window_minutes / 60.0, 1e-9)


def load_profile(path) -> CityProfile:
    """Parse a ``key=value`` profile file (lists comma-separated, ``#`` comments)."""
    kv = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}: malformed line {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        kv[k] = v
    return profile_from_dict(kv)


def profile_from_dict(kv: dict) -> CityProfile:
    types = {f.name: f.type for f in fields(CityProfile)}
    args = {}
    for k, v in kv.items():
        if k not in types:
            raise ValueError(f"unknown profile key {k!r}")
        if k == "city_id":
            args[k] = str(v)
        elif isinstance(v, str) and "," in v:
            args[k] = tuple(float(x) for x in v.split(","))
        elif k in ("demand_curve", "supply_curve", "slope_coeffs", "base_prob_range"):
            args[k] = tuple(float(x) for x in np.atleast_1d(v))
        else:
            args[k] = float(v)
    return CityProfile(**args)


def dump_profile(profile: CityProfile, path) -> None:
    lines = []
    for f in fields(CityProfile):
        v = getattr(profile, f.name)
        if isinstance(v, tuple):
            v = ",".join(repr(float(x)) for x in v)
        lines.append(f"{f.name}={v}")
    Path(path).write_text("\n".join(lines) + "\n")


def default_profiles() -> list[CityProfile]:
    """Six synthetic cities: A-C form the main split, D-F the cold-start split."""
    specs = [
        ("A", 180.0, 2.7, 0.20, 0.10, 0.7),
        ("B", 60.0, 2.5, 0.22, 0.12, 0.5),
        ("C", 45.0, 2.6, 0.18, 0.09, 0.6),
        ("D", 25.0, 2.4, 0.20, 0.10, 0.5),
        ("E", 15.0, 2.5, 0.21, 0.11, 0.6),
        ("F", 40.0, 2.6, 0.19, 0.10, 0.7),
    ]
    out = []
    for i, (cid, scale, mu, margin, cap, elast) in enumerate(specs):
        shift = (i % 3) - 1
        demand = np.roll(DEFAULT_DEMAND, shift)
        out.append(CityProfile(city_id=cid, demand_scale=scale, gmv_mu=mu, margin=margin,
                               cap_C=cap, elasticity=elast, demand_curve=tuple(demand)))
    return out


@dataclass(frozen=True)
class WindowOutcome:
    completions: int = 0
    rides: float = 0.0
    gmv_completed: float = 0.0
    drv: float = 0.0
    subsidy_paid: float = 0.0
    pairs_broadcast: int = 0
    mean_pickup: float = 0.0


@dataclass(frozen=True)
class PairBatch:
    """Column view of one window's broadcast pairs."""

    reward: np.ndarray
    gmv: np.ndarray
    slope: np.ndarray
    cap: np.ndarray
    base_prob: np.ndarray
    pickup: np.ndarray

    def __len__(self):
        return self.reward.shape[0]

    def to_pairs(self) -> list[PairEconomics]:
        return [PairEconomics(float(r), float(g), float(a), float(c), float(p))
                for r, g, a, c, p in zip(self.reward, self.gmv, self.slope, self.cap, self.base_prob)]


def hour_of(t: int, window_minutes: int) -> int:
    return int((t * window_minutes) // 60) % 24


def draw_pairs(profile: CityProfile, t: int, rng, window_minutes: int,
               demand_mult: float = 1.0, supply: float | None = None) -> PairBatch:
    h = hour_of(t, window_minutes)
    rate = profile.demand_curve[h] * profile.demand_scale * demand_mult * window_minutes / 60.0
    n = int(rng.poisson(rate)) if rate > 0 else 0
    if supply is None:
        supply = profile.supply_curve[h]
    tightness = profile.demand_curve[h] / max(supply, 1e-6)
    g = rng.lognormal(profile.gmv_mu, profile.gmv_sigma, size=n)
    pickup = rng.exponential(profile.dist_ref * math.sqrt(max(tightness, 1e-6)), size=n)
    lo, hi = profile.base_prob_range
    base = hi - (hi - lo) * (1.0 - np.exp(-pickup / profile.dist_ref))
    a0, a1 = profile.slope_coeffs[:2]
    slope = a0 + a1 * pickup
    cap = profile.c_frac * g
    slope = np.minimum(slope, (1.0 - base) / np.maximum(cap, 1e-12))
    return PairBatch(profile.margin * g, g, slope, cap, base, pickup)


def generate_pairs(profile: CityProfile, t: int, rng, window_minutes: int = 5,
                   demand_mult: float = 1.0) -> list[PairEconomics]:
    """Broadcast pairs for window ``t``; Poisson count at the hourly rate."""
    return draw_pairs(profile, t, rng, window_minutes, demand_mult).to_pairs()


def completion_prob(pair: PairEconomics, b: float) -> float:
    if b < 0 or b > pair.cap * (1 + 1e-12):
        raise ValueError(f"subsidy {b} outside [0, {pair.cap}]")
    return min(1.0, pair.base_prob + pair.slope * b)


def update_rho(prev_cum_subsidy: float, prev_cum_gmv: float, outcome: WindowOutcome):
    """Returns ``(rho, cum_subsidy, cum_gmv)``; rho is 0 while no GMV has completed."""
    if prev_cum_subsidy < 0 or prev_cum_gmv < 0:
        raise ValueError("cumulative totals must be >= 0")
    cs = prev_cum_subsidy + outcome.subsidy_paid
    cg = prev_cum_gmv + outcome.gmv_completed
    return (cs / cg if cg > 0 else 0.0), cs, cg


@dataclass(frozen=True)
class SimState:
    """Everything the simulator carries between windows for one city-day."""

    market: MarketState
    t: int
    day_index: int
    window_minutes: int
    demand_mult: float
    supply: float
    cum_subsidy: float = 0.0
    cum_gmv: float = 0.0
    cum_rides: float = 0.0
    cum_drv: float = 0.0
    recent: tuple = field(default_factory=tuple)
    last_lambda: float = 0.0

    @property
    def x(self) -> np.ndarray:
        return self.market.augmented()

    @property
    def T(self) -> int:
        return horizon_for(self.window_minutes)


def _features(profile: CityProfile, t: int, T: int, day_index: int, window_minutes: int,
              demand_mult: float, supply: float, last: WindowOutcome | None, recent: tuple,
              cum_rides: float, cum_gmv: float, last_lambda: float) -> np.ndarray:
    opw = profile.orders_per_window(window_minutes)
    gscale = opw * profile.mean_gmv
    minute = (t * window_minutes) % 1440
    hang = 2 * math.pi * minute / 1440.0
    dang = 2 * math.pi * (day_index % 7) / 7.0
    h = hour_of(t, window_minutes)
    demand = profile.demand_curve[h] * profile.demand_scale * demand_mult * window_minutes / 60.0 / opw
    last = last or WindowOutcome()
    cr = last.completions / last.pairs_broadcast if last.pairs_broadcast else 0.0
    if recent:
        rr = np.mean(np.asarray(recent), axis=0)
    else:
        rr = np.zeros(3)
    f = np.array([
        math.sin(hang), math.cos(hang), math.sin(dang), math.cos(dang),
        demand, supply, cr,
        last.rides / opw, last.gmv_completed / gscale, last.drv / gscale,
        rr[0] / opw, rr[1] / gscale, rr[2] / gscale,
        last.mean_pickup / profile.dist_ref, last.pairs_broadcast / opw,
        cum_rides / (opw * T), cum_gmv / (gscale * T),
        (T - t) / T, last_lambda,
    ])
    return f


def initial_state(profile: CityProfile, day_index: int, window_minutes: int, rng) -> SimState:
    T = horizon_for(window_minutes)
    weekend = 1.08 if day_index % 7 in (5, 6) else 1.0
    demand_mult = weekend * float(math.exp(profile.noise_sigma * rng.standard_normal()))
    supply = profile.supply_curve[0]
    f = _features(profile, 0, T, day_index, window_minutes, demand_mult, supply, None, (), 0.0, 0.0, 0.0)
    return SimState(MarketState(f, 0.0), 0, day_index, window_minutes, demand_mult, supply)


def step(state: SimState, profile: CityProfile, lambda_t: float, rng,
         force_complete: bool = False) -> tuple[SimState, WindowOutcome]:
    """Advance one window under city-level multiplier ``lambda_t``."""
    if not 0 < lambda_t <= LAMBDA_MAX:
        raise ValueError(f"action {lambda_t} outside (0, {LAMBDA_MAX}]")
    T = state.T
    if state.t >= T:
        raise ValueError(f"window {state.t} beyond horizon {T}")
    wm = state.window_minutes
    pairs = draw_pairs(profile, state.t, rng, wm, state.demand_mult, state.supply)
    d = DualParams(float(lambda_t), profile.cap_C, profile.tolerance_delta)
    n = len(pairs)
    if n:
        b = np.asarray(closed_form_subsidy(d, pairs.reward, pairs.cap), dtype=float).reshape(n)
        p = np.minimum(1.0, pairs.base_prob + pairs.slope * b)
        y = np.ones(n, bool) if force_complete else rng.random(n) < p
        gmv = float(pairs.gmv[y].sum())
        sub = float(b[y].sum())
        out = WindowOutcome(
            completions=int(y.sum()),
            rides=float(y.sum()),
            gmv_completed=gmv,
            drv=gmv * (1.0 - profile.margin) + sub,
            subsidy_paid=sub,
            pairs_broadcast=n,
            mean_pickup=float(pairs.pickup.mean()),
        )
    else:
        out = WindowOutcome()

    rho, cs, cg = update_rho(state.cum_subsidy, state.cum_gmv, out)
    t1 = state.t + 1
    h1 = hour_of(t1, wm)
    # drivers drift toward the hourly baseline; paid subsidy pulls extra supply in
    share = out.subsidy_paid / out.gmv_completed if out.gmv_completed > 0 else 0.0
    target = profile.supply_curve[h1] * (1.0 + profile.elasticity * share)
    shock = math.exp(profile.noise_sigma * 0.5 * rng.standard_normal())
    supply = float(np.clip(0.7 * state.supply + 0.3 * target * shock, 0.05, 5.0))
    recent = (state.recent + ((out.rides, out.gmv_completed, out.drv),))[-ROLL:]
    cum_rides = state.cum_rides + out.rides
    f = _features(profile, t1, T, state.day_index, wm, state.demand_mult, supply, out, recent,
                  cum_rides, cg, float(lambda_t))
    nxt = replace(state, market=MarketState(f, rho), t=t1, supply=supply, cum_subsidy=cs,
                  cum_gmv=cg, cum_rides=cum_rides, cum_drv=state.cum_drv + out.drv,
                  recent=recent, last_lambda=float(lambda_t))
    return nxt, out


Policy = Callable[[np.ndarray, int, "Context | None"], float]


def rollout(profile: CityProfile, policy: Policy, day_index: int, window_minutes: int, rng,
            context: Context | None = None, horizon: int | None = None,
            force_complete: bool = False) -> Trajectory:
    """Closed-loop city-day under ``policy(x_t, t, context) -> lambda_t``."""
    T = horizon_for(window_minutes)
    H = T if horizon is None else int(horizon)
    if not 0 < H <= T:
        raise ValueError(f"horizon must be in (0, {T}]")
    state = initial_state(profile, day_index, window_minutes, rng)
    states = np.zeros((T, STATE_DIM))
    acts = np.zeros(T)
    kpi = np.zeros((4, T))
    for t in range(H):
        x = state.x
        states[t] = x
        lam = float(policy(x, t, context))
        if not 0 < lam <= LAMBDA_MAX:
            raise ValueError(f"policy returned {lam} at window {t}; must lie in (0, {LAMBDA_MAX}]")
        acts[t] = lam
        state, out = step(state, profile, lam, rng, force_complete=force_complete)
        kpi[:, t] = (out.rides, out.gmv_completed, out.drv, out.subsidy_paid)
    if H < T:
        states[H:] = states[H - 1]
        acts[H:] = acts[H - 1]
    tr = Trajectory(profile.city_id, day_index, window_minutes, states, acts,
                    kpi[0], kpi[1], kpi[2], kpi[3], valid_length=H)
    tr.extras["final_rho"] = state.market.subsidy_rate_so_far
    return tr


def recompute_rho(subsidy: Sequence[float], gmv: Sequence[float]) -> np.ndarray:
    """Batch prefix-sum recomputation of the running rate from window logs."""
    cs = np.cumsum(np.asarray(subsidy, dtype=float))
    cg = np.cumsum(np.asarray(gmv, dtype=float))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(cg > 0, cs / np.where(cg > 0, cg, 1.0), 0.0)


def behavior_policy(profile: CityProfile, base_lambda: float, rng, amplitude: float = 0.35,
                    level_sigma: float = 0.3, step_sigma: float = 0.15, feedback: float = 4.0,
                    window_minutes: int = 5) -> Policy:
    """Noisy logging heuristic: per-day level and phase, sinusoidal intra-day
    modulation, per-window noise, and a mild pull toward the cap via rho."""
    level = base_lambda * math.exp(level_sigma * rng.standard_normal())
    phase = rng.uniform(0.0, 24.0)
    amp = amplitude * rng.uniform(0.3, 1.0)
    noise = rng.standard_normal(horizon_for(window_minutes))

    def policy(x, t, ctx=None):
        hour = (t * window_minutes) / 60.0
        lam = level * (1.0 + amp * math.sin(2 * math.pi * (hour - phase) / 24.0))
        rho = float(x[-1])
        if rho > 0:
            lam *= math.exp(feedback * (rho - profile.cap_C) / profile.cap_C * 0.25)
        lam *= math.exp(step_sigma * noise[t])
        return float(np.clip(lam, 1e-3, LAMBDA_MAX))

    return policy


def lambda_for_rate(profile: CityProfile, rate: float) -> float:
    """Constant multiplier whose uncapped subsidy rate ``kappa * margin`` equals ``rate``."""
    kappa = rate / profile.margin
    inv = 2 * kappa - profile.cap_C - profile.tolerance_delta
    if inv <= 0:
        return LAMBDA_MAX
    return float(min(LAMBDA_MAX, 1.0 / inv))


def generate_logs(profiles: Sequence[CityProfile], days: Sequence[int], window_minutes: int,
                  seed: int, base_rate_frac: float = 0.9,
                  positions: Sequence[int] | None = None) -> list[Trajectory]:
    """Behaviour-policy logs for every (city, day), each on its own rng stream.

    The logging level targets ``base_rate_frac * C`` before per-day noise,
    so logged days straddle the cap. ``positions`` key the rng streams
    (default: index in ``profiles``).
    """
    out = []
    positions = range(len(profiles)) if positions is None else positions
    for ci, prof in zip(positions, profiles):
        base = lambda_for_rate(prof, base_rate_frac * prof.cap_C)
        for d in days:
            rng = SeededRng(seed, 10_000 * (ci + 1) + int(d))
            pol = behavior_policy(prof, base, rng, window_minutes=window_minutes)
            out.append(rollout(prof, pol, int(d), window_minutes, rng))
    return out
