"""Constraint-aware scoring, baselines, paired comparison and report emission."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.compose import TransformedTargetRegressor
from sklearn.exceptions import ConvergenceWarning
from sklearn.neural_network import MLPRegressor
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .core import LAMBDA_MAX, SeededRng, Trajectory
from .market import CityProfile, recompute_rho, rollout

DEFAULT_BETA = 0.5
P_SENTINEL = 1e-12
GAMMA_GRID = tuple(round(0.2 * k, 1) for k in range(1, 11))
KPI_FIELDS = ("rides", "gmv", "drv", "subsidy")


def score(rides: float, c_real: float, cap_C: float, beta: float = DEFAULT_BETA) -> float:
    """Daily rides, discounted by ``(C / c_real) ** beta`` when over the cap."""
    if not 0 < cap_C < 1:
        raise ValueError("cap_C must lie in (0, 1)")
    if not beta > 0:
        raise ValueError("penalty exponent must be positive")
    if c_real is None or not np.isfinite(c_real):
        c_real = 0.0
    if c_real < 0:
        raise ValueError("c_real must be >= 0")
    if c_real <= cap_C:
        return float(rides)
    return float((cap_C / c_real) ** beta * rides)


@dataclass(frozen=True)
class DayResult:
    policy: str
    city_id: str
    day_index: int
    score: float
    rides: float
    gmv: float
    drv: float
    c_real: float
    under_gap: float
    violated: bool


def evaluate_trajectory(tr: Trajectory, cap_C: float, delta: float, policy: str,
                        beta: float = DEFAULT_BETA) -> DayResult:
    c = tr.c_real
    return DayResult(policy, tr.city_id, tr.day_index, score(tr.total("rides"), c, cap_C, beta),
                     tr.total("rides"), tr.total("gmv"), tr.total("drv"), c,
                     max(0.0, cap_C - c), bool(c > cap_C + delta))


@dataclass
class EvalReport:
    policy: str
    days: list = field(default_factory=list)
    trajectories: list = field(default_factory=list)
    caps: dict = field(default_factory=dict)

    def add(self, tr: Trajectory, cap_C: float, delta: float, beta: float = DEFAULT_BETA) -> DayResult:
        r = evaluate_trajectory(tr, cap_C, delta, self.policy, beta)
        self.days.append(r)
        self.trajectories.append(tr)
        self.caps[tr.city_id] = cap_C
        return r

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(d, name) for d in self.days], dtype=float)

    def key(self):
        return [(d.city_id, d.day_index) for d in self.days]

    @property
    def n_violations(self) -> int:
        return int(sum(d.violated for d in self.days))

    def summary_rows(self) -> list[tuple]:
        rows = []
        for city in sorted({d.city_id for d in self.days}):
            ds = [d for d in self.days if d.city_id == city]
            rows.append((self.policy, city, float(np.mean([d.score for d in ds])),
                         float(np.mean([d.rides for d in ds])), float(np.mean([d.gmv for d in ds])),
                         int(sum(d.violated for d in ds)), float(np.mean([d.under_gap for d in ds]))))
        return rows


@dataclass(frozen=True)
class PairedResult:
    mean_diff: float
    ci_low: float
    ci_high: float
    t_stat: float
    p_value: float
    n: int


def paired_compare(a: Sequence[float], b: Sequence[float]) -> PairedResult:
    """One-sided paired t-test of ``H0: E[a - b] <= 0``, with a two-sided 95% CI."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("inputs must be aligned 1-d sequences")
    n = a.size
    if n < 2:
        raise ValueError("need at least two pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return PairedResult(0.0, 0.0, 0.0, 0.0, 0.5, n)
        p = P_SENTINEL if mean > 0 else 1.0
        return PairedResult(mean, mean, mean, math.copysign(math.inf, mean), p, n)
    se = sd / math.sqrt(n)
    t = mean / se
    half = float(stats.t.ppf(0.975, n - 1)) * se
    return PairedResult(mean, mean - half, mean + half, t, float(stats.t.sf(t, n - 1)), n)


def fixed_lambda_policy(level: float):
    if not 0 < level <= LAMBDA_MAX:
        raise ValueError(f"level must lie in (0, {LAMBDA_MAX}]")
    level = float(level)

    def policy(x, t, ctx=None):
        return level

    return policy


def lambda_grid(n: int = 15, lo: float = 0.2, hi: float = LAMBDA_MAX) -> np.ndarray:
    return np.geomspace(lo, hi, n)


def day_rng(seed: int, city_pos: int, day: int, stream: int = 0) -> SeededRng:
    """Market randomness for one evaluation day, shared by every policy."""
    return SeededRng(seed, 1_000_000 * stream + 1000 * (city_pos + 1) + int(day))


def tune_fixed_lambda(profile: CityProfile, days: Sequence[int], window_minutes: int, seed: int,
                      grid: Sequence[float] | None = None, beta: float = DEFAULT_BETA,
                      city_pos: int = 0) -> tuple[float, np.ndarray]:
    """Grid level with the best mean Score over ``days``; returns ``(level, scores)``."""
    grid = lambda_grid() if grid is None else np.asarray(grid, dtype=float)
    means = np.empty(len(grid))
    for i, lvl in enumerate(grid):
        pol = fixed_lambda_policy(lvl)
        s = [score(tr.total("rides"), tr.c_real, profile.cap_C, beta)
             for tr in (rollout(profile, pol, d, window_minutes, day_rng(seed, city_pos, d, stream=7))
                        for d in days)]
        means[i] = np.mean(s)
    return float(grid[int(np.argmax(means))]), means


class BehaviorCloning(RegressorMixin, BaseEstimator):
    """Regress logged actions on the augmented state (which already carries
    the time-of-day features) with a small MLP; predictions clamped to (0, 30].

    ``fit`` takes either trajectories (padding dropped) or ``(X, y)`` arrays.
    """

    def __init__(self, hidden=(64, 64), max_iter=300, seed=0):
        self.hidden = hidden
        self.max_iter = max_iter
        self.seed = seed

    def fit(self, X, y=None):
        if y is None:
            trajs = list(X)
            if not trajs:
                raise ValueError("empty dataset")
            X = np.concatenate([tr.states[: tr.valid_length] for tr in trajs])
            y = np.concatenate([tr.actions[: tr.valid_length] for tr in trajs])
        X, y = check_X_y(X, y)
        net = make_pipeline(
            StandardScaler(),
            MLPRegressor(hidden_layer_sizes=tuple(self.hidden), activation="tanh", max_iter=self.max_iter,
                         random_state=self.seed, tol=1e-6, n_iter_no_change=20),
        )
        # standardised targets: the net only has to learn deviations from the mean action
        self.model_ = TransformedTargetRegressor(regressor=net, transformer=StandardScaler())
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            self.model_.fit(X, y)
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_array(np.atleast_2d(np.asarray(X, dtype=float)))
        return np.clip(self.model_.predict(X), 1e-3, LAMBDA_MAX)

    def policy(self):
        def policy(x, t, ctx=None):
            return float(self.predict(x)[0])

        return policy


def run_policy(policy_factory: Callable[[CityProfile], Callable], name: str,
               profiles: Sequence[CityProfile], days: Sequence[int], window_minutes: int, seed: int,
               beta: float = DEFAULT_BETA, positions: Sequence[int] | None = None) -> EvalReport:
    """Roll a policy over every (city, day) on the shared evaluation streams."""
    rep = EvalReport(name)
    positions = range(len(profiles)) if positions is None else positions
    for pos, prof in zip(positions, profiles):
        pol = policy_factory(prof)
        for d in days:
            tr = rollout(prof, pol, d, window_minutes, day_rng(seed, pos, d))
            rep.add(tr, prof.cap_C, prof.tolerance_delta, beta)
    return rep


def spearman(x, y) -> float:
    """Rank correlation; NaN when either side is constant."""
    if np.ptp(np.asarray(x, float)) == 0 or np.ptp(np.asarray(y, float)) == 0:
        return float("nan")
    return float(stats.spearmanr(x, y).statistic)


@dataclass(frozen=True)
class SweepRow:
    gamma: float
    mean_score: float
    mean_rides: float
    mean_gmv: float
    mean_c_real: float
    violations: int


def sweep_table(reports: dict) -> tuple[list[SweepRow], float]:
    """Per-gamma aggregates and Spearman(gamma, mean rides)."""
    rows = []
    for g in sorted(reports):
        r = reports[g]
        rows.append(SweepRow(float(g), float(r.column("score").mean()), float(r.column("rides").mean()),
                             float(r.column("gmv").mean()), float(r.column("c_real").mean()),
                             r.n_violations))
    rho = spearman([r.gamma for r in rows], [r.mean_rides for r in rows]) if len(rows) > 1 else float("nan")
    return rows, rho


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def emit_report(reports: Sequence[EvalReport], out_dir) -> dict:
    """Write kpi_curves.csv, rate_curve.csv and summary.csv under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / f"{k}.csv" for k in ("kpi_curves", "rate_curve", "summary")}
    with open(paths["kpi_curves"], "w", newline="") as fk, open(paths["rate_curve"], "w", newline="") as fr:
        wk, wr = csv.writer(fk), csv.writer(fr)
        wk.writerow(["city", "day", "t", "metric", "value", "policy"])
        wr.writerow(["city", "day", "t", "rate_minus_C", "policy"])
        for rep in reports:
            for tr in rep.trajectories:
                C = rep.caps[tr.city_id]
                n = tr.valid_length
                series = {k: np.asarray(getattr(tr, k))[:n] for k in KPI_FIELDS}
                for t in range(n):
                    for k in KPI_FIELDS:
                        wk.writerow([tr.city_id, tr.day_index, t, k, _fmt(series[k][t]), rep.policy])
                        wk.writerow([tr.city_id, tr.day_index, t, k + "_cum",
                                     _fmt(series[k][: t + 1].sum()), rep.policy])
                rate = recompute_rho(series["subsidy"], series["gmv"]) - C
                for t in range(n):
                    wr.writerow([tr.city_id, tr.day_index, t, _fmt(rate[t]), rep.policy])
    with open(paths["summary"], "w", newline="") as fs:
        ws = csv.writer(fs)
        ws.writerow(["policy", "city", "mean_score", "mean_rides", "mean_gmv", "violations", "mean_under_gap"])
        for rep in reports:
            for row in rep.summary_rows():
                ws.writerow([_fmt(v) for v in row])
    return paths


def report_to_dicts(rep: EvalReport) -> list[dict]:
    return [asdict(d) for d in rep.days]
