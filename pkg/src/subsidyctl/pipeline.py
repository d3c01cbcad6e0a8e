"""Desk-scale experiment: dataset splits, two-stage training, controller and
baseline evaluation, and the target-rides steering sweep."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np
from joblib import Parallel, delayed

from .controller import run_day
from .core import SeededRng, Trajectory
from .estimators import FixedLambdaPolicy, SubsidyPlanner
from .evaluation import GAMMA_GRID, BehaviorCloning, EvalReport, day_rng, run_policy, sweep_table
from .market import CityProfile, default_profiles, generate_logs

SAMPLE_STREAM = 5_000_000


@dataclass
class DeskConfig:
    window_minutes: int = 10
    n_days: int = 28
    train_days: int = 21
    main_cities: tuple = ("A", "B", "C")
    cold_cities: tuple = ("D", "E", "F")
    seed: int = 0
    beta: float = 0.5
    gammas: tuple = GAMMA_GRID
    epochs: int = 300
    inverse_epochs: int = 300
    ft_epochs: int = 20
    diffusion_steps: int = 20
    lr_pretrain: float = 1e-3
    lr_finetune: float = 3e-5
    batch_size: int = 16
    anchor: float = 1e-2
    decoder_noise: float = 0.3
    jobs: int = 1

    @classmethod
    def from_dict(cls, kv: dict) -> "DeskConfig":
        out = {}
        for f in fields(cls):
            if f.name not in kv:
                continue
            v, cur = kv[f.name], getattr(cls, f.name)
            if isinstance(cur, tuple):
                items = [x.strip() for x in v.split(",")] if isinstance(v, str) else list(v)
                out[f.name] = tuple(float(x) for x in items) if f.name == "gammas" else tuple(items)
            elif isinstance(cur, int):
                out[f.name] = int(float(v))
            else:
                out[f.name] = float(v)
        return cls(**out)

    def estimator_params(self) -> dict:
        keys = ("epochs", "inverse_epochs", "ft_epochs", "diffusion_steps", "lr_pretrain",
                "lr_finetune", "batch_size", "anchor", "decoder_noise", "seed")
        return {k: getattr(self, k) for k in keys}

    @property
    def test_days(self) -> range:
        return range(self.train_days, self.n_days)


def profiles_by_id(profiles: Sequence[CityProfile] | None = None) -> dict:
    return {p.city_id: p for p in (profiles or default_profiles())}


def make_splits(cfg: DeskConfig, profiles: Sequence[CityProfile] | None = None) -> dict:
    """Logged behaviour data: main cities split by day, cold-start cities held out whole."""
    pmap = profiles_by_id(profiles)
    ids = list(pmap)
    main = [pmap[c] for c in cfg.main_cities]
    cold = [pmap[c] for c in cfg.cold_cities]
    # streams are keyed by position in the full city list so splits stay stable
    logs = generate_logs(main, range(cfg.n_days), cfg.window_minutes, cfg.seed,
                         positions=[ids.index(c) for c in cfg.main_cities])
    cold_logs = generate_logs(cold, range(cfg.n_days), cfg.window_minutes, cfg.seed,
                              positions=[ids.index(c) for c in cfg.cold_cities])
    return {
        "train": [tr for tr in logs if tr.day_index < cfg.train_days],
        "test": [tr for tr in logs if tr.day_index >= cfg.train_days],
        "coldstart": cold_logs,
    }


def train_planner(train: Sequence[Trajectory], cfg: DeskConfig, finetune_cities: Sequence[str] | None = None,
                  profiles: Sequence[CityProfile] | None = None) -> SubsidyPlanner:
    pmap = profiles_by_id(profiles)
    deltas = {c: p.tolerance_delta for c, p in pmap.items()}
    est = SubsidyPlanner(**cfg.estimator_params()).fit(train, deltas=deltas)
    for city in (cfg.main_cities if finetune_cities is None else finetune_cities):
        own = [tr for tr in train if tr.city_id == city]
        if own:
            est.finetune(own, city_id=city, deltas=deltas)
    return est


def _controller_day(est, profile, pos, day, seed, gamma):
    return est.run_day(profile, day, day_rng(seed, pos, day),
                       sample_rng=SeededRng(seed, SAMPLE_STREAM + 1000 * (pos + 1) + day), gamma=gamma)


def controller_report(est: SubsidyPlanner, profiles: Sequence[CityProfile], days: Sequence[int], seed: int,
                      gamma: float = 1.0, beta: float = 0.5, jobs: int = 1, name: str = "planner",
                      positions: Sequence[int] | None = None) -> EvalReport:
    """Closed-loop controller days on the shared evaluation streams.

    Market draws depend only on (seed, city position, day); sampler draws use
    a separate stream, so every gamma sees identical randomness.
    """
    positions = list(range(len(profiles))) if positions is None else list(positions)
    tasks = [(prof, pos, d) for prof, pos in zip(profiles, positions) for d in days]
    if jobs == 1:
        trajs = [_controller_day(est, p, pos, d, seed, gamma) for p, pos, d in tasks]
    else:
        trajs = Parallel(n_jobs=jobs)(delayed(_controller_day)(est, p, pos, d, seed, gamma) for p, pos, d in tasks)
    rep = EvalReport(name)
    for (prof, _, _), tr in zip(tasks, trajs):
        rep.add(tr, prof.cap_C, prof.tolerance_delta, beta)
    return rep


def fixed_lambda_report(profiles, train_days, test_days, cfg: DeskConfig, positions=None):
    positions = list(range(len(profiles))) if positions is None else list(positions)
    levels = {}
    for prof, pos in zip(profiles, positions):
        levels[prof.city_id] = FixedLambdaPolicy(beta=cfg.beta, seed=cfg.seed).fit(
            prof, train_days, cfg.window_minutes, city_pos=pos)
    rep = run_policy(lambda p: levels[p.city_id].policy(), "fixed_lambda", profiles, test_days,
                     cfg.window_minutes, cfg.seed, cfg.beta, positions)
    return rep, {c: est.level_ for c, est in levels.items()}


def bc_report(train, profiles, test_days, cfg: DeskConfig, positions=None):
    bc = BehaviorCloning(seed=cfg.seed).fit(train)
    return run_policy(lambda p: bc.policy(), "bc", profiles, test_days, cfg.window_minutes, cfg.seed,
                      cfg.beta, positions), bc


def steering_sweep(est, profiles, days, cfg: DeskConfig, base: EvalReport | None = None, positions=None):
    """Per-gamma reports (reusing ``base`` at gamma=1) and Spearman(gamma, rides)."""
    reports = {}
    for g in cfg.gammas:
        if base is not None and g == 1.0:
            reports[g] = base
            continue
        reports[g] = controller_report(est, profiles, days, cfg.seed, gamma=g, beta=cfg.beta, jobs=cfg.jobs,
                                       name=f"planner_gamma_{g:g}", positions=positions)
    rows, rho = sweep_table(reports)
    return reports, rows, rho


@dataclass
class DeskResult:
    cfg: DeskConfig
    estimator: SubsidyPlanner
    planner: EvalReport
    fixed: EvalReport
    levels: dict
    bc: EvalReport | None = None
    sweep_rows: list = field(default_factory=list)
    spearman: float = float("nan")
    sweep_reports: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)


def run_desk(cfg: DeskConfig, with_bc: bool = True, with_sweep: bool = True) -> DeskResult:
    """Full pipeline on the main split; returns every report and stage timing."""
    t0 = time.perf_counter()
    sec = {}
    pmap = profiles_by_id()
    main = [pmap[c] for c in cfg.main_cities]
    splits = make_splits(cfg)
    sec["gen"] = time.perf_counter() - t0
    t = time.perf_counter()
    est = train_planner(splits["train"], cfg)
    sec["train"] = time.perf_counter() - t
    t = time.perf_counter()
    rep = controller_report(est, main, cfg.test_days, cfg.seed, beta=cfg.beta, jobs=cfg.jobs)
    sec["eval_planner"] = time.perf_counter() - t
    t = time.perf_counter()
    fixed, levels = fixed_lambda_report(main, range(cfg.train_days), cfg.test_days, cfg)
    sec["eval_fixed"] = time.perf_counter() - t
    res = DeskResult(cfg, est, rep, fixed, levels)
    if with_bc:
        t = time.perf_counter()
        res.bc, _ = bc_report(splits["train"], main, cfg.test_days, cfg)
        sec["eval_bc"] = time.perf_counter() - t
    if with_sweep:
        t = time.perf_counter()
        res.sweep_reports, res.sweep_rows, res.spearman = steering_sweep(est, main, cfg.test_days, cfg, base=rep)
        sec["sweep"] = time.perf_counter() - t
    sec["total"] = time.perf_counter() - t0
    res.seconds = sec
    return res
