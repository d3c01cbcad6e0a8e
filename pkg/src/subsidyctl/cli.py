"""Command line entry point.

Every command reads a key=value config (``--config``), accepts ``--set
key=value`` overrides, writes its outputs plus ``resolved_<command>.cfg``
under ``--out``, and prints a one-line summary.

Exit codes: 0 success, 2 validation failure, 3 invariant violation, 4 I/O.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as kvconf
from .core import read_jsonl, write_jsonl
from .estimators import SubsidyPlanner
from .evaluation import EvalReport, emit_report, paired_compare
from .market import default_profiles, dump_profile, load_profile
from .net import save_checkpoint
from .pipeline import (
    DeskConfig,
    bc_report,
    controller_report,
    fixed_lambda_report,
    make_splits,
    steering_sweep,
)
from .train import LossCurve, TrainConfig, _setup, finetune, pretrain_decoder, pretrain_denoiser
from .validation import ValidationError

log = logging.getLogger("subsidyctl")

EXIT_OK, EXIT_VALIDATION, EXIT_INVARIANT, EXIT_IO = 0, 2, 3, 4


class InvariantError(RuntimeError):
    pass


class MissingArtifact(OSError):
    pass


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {what}: {path}")
    return path


def _settings(args) -> dict:
    base = kvconf.load_kv(args.config) if args.config else {}
    over = {}
    for item in args.set or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        over[k.strip()] = v.strip()
    if args.seed is not None:
        over["seed"] = str(args.seed)
    if args.jobs is not None:
        over["jobs"] = str(args.jobs)
    return kvconf.resolve(base, over)


def _desk(kv: dict) -> DeskConfig:
    try:
        return DeskConfig.from_dict(kv)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"bad config: {exc}") from exc


def _train_cfg(kv: dict, cfg: DeskConfig) -> TrainConfig:
    merged = {**cfg.estimator_params(), **kv}
    try:
        return TrainConfig.from_dict(merged)
    except (TypeError, ValueError) as exc:
        raise ValidationError(str(exc)) from exc


def _profiles(kv: dict, data_dir: Path):
    pdir = Path(kv.get("profiles", data_dir / "profiles"))
    if pdir.is_dir():
        files = sorted(pdir.glob("*.cfg"))
        if files:
            return [load_profile(f) for f in files]
    return default_profiles()


def _positions(profiles, ids):
    allids = [p.city_id for p in profiles]
    return [allids.index(c) for c in ids]


def _write_resolved(out: Path, name: str, kv: dict, cfg: DeskConfig) -> None:
    merged = {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}
    merged.update(kv)
    kvconf.dump_kv(merged, out / f"resolved_{name}.cfg")


def _data_dir(kv, out) -> Path:
    return Path(kv.get("data", out))


def _model_dir(kv, out) -> Path:
    return Path(kv.get("model", Path(out) / "model"))


def cmd_gen(kv, cfg, out: Path) -> str:
    profiles = default_profiles()
    splits = make_splits(cfg, profiles)
    (out / "profiles").mkdir(parents=True, exist_ok=True)
    for p in profiles:
        dump_profile(p, out / "profiles" / f"{p.city_id}.cfg")
    for name, trajs in splits.items():
        for tr in trajs:
            if not np.all((tr.actions[: tr.valid_length] > 0) & (tr.actions[: tr.valid_length] <= 30)):
                raise InvariantError(f"logged action out of range in {tr.city_id} day {tr.day_index}")
        write_jsonl(trajs, out / f"{name}.jsonl")
    return "gen: " + ", ".join(f"{k}={len(v)}" for k, v in splits.items())


def _train_setup(kv, cfg, out):
    data = _need(_data_dir(kv, out) / "train.jsonl", "training dataset (run gen)")
    trajs = read_jsonl(data)
    profiles = _profiles(kv, _data_dir(kv, out))
    deltas = {p.city_id: p.tolerance_delta for p in profiles}
    tcfg = _train_cfg(kv, cfg)
    return trajs, deltas, tcfg


def _estimator(tcfg: TrainConfig, cfg: DeskConfig) -> SubsidyPlanner:
    params = {k: getattr(tcfg, k) for k in SubsidyPlanner().get_params() if hasattr(tcfg, k)}
    return SubsidyPlanner(**params)


def cmd_train_diffusion(kv, cfg, out: Path) -> str:
    trajs, deltas, tcfg = _train_setup(kv, cfg, out)
    cities, scaler, data = _setup(trajs, tcfg, deltas)
    den, schedule, curve = pretrain_denoiser(data, cities, tcfg)
    mdir = _model_dir(kv, out)
    est = _estimator(tcfg, cfg)
    est.denoiser_, est.scaler_, est.cities_, est.schedule_ = den, scaler, cities, schedule
    est.window_minutes_ = trajs[0].window_minutes
    est.decoder_, est.city_decoders_ = None, {}
    mdir.mkdir(parents=True, exist_ok=True)
    _save_partial(est, mdir)
    curve.write_csv(out / "diffusion_loss.csv")
    last = curve.losses()[-1] if curve.rows else float("nan")
    return f"train-diffusion: {len(trajs)} trajectories, final loss {last:.4f}"


def _save_partial(est: SubsidyPlanner, mdir: Path) -> None:
    import json

    save_checkpoint(mdir / "denoiser.json", est.denoiser_)
    meta = {"params": {k: list(v) if isinstance(v, tuple) else v for k, v in est.get_params().items()},
            "scaler": est.scaler_.to_dict(), "cities": list(est.cities_.cities),
            "window_minutes": est.window_minutes_, "finetuned": []}
    (mdir / "planner.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def cmd_train_inverse(kv, cfg, out: Path) -> str:
    trajs, deltas, tcfg = _train_setup(kv, cfg, out)
    mdir = _model_dir(kv, out)
    _need(mdir / "planner.json", "diffusion model (run train-diffusion)")
    cities, scaler, data = _setup(trajs, tcfg, deltas)
    dec, curve = pretrain_decoder(data, cities, tcfg)
    save_checkpoint(mdir / "decoder.json", dec)
    curve.write_csv(out / "inverse_loss.csv")
    last = curve.losses()[-1] if curve.rows else float("nan")
    return f"train-inverse: final loss {last:.4f}"


def _load_model(kv, out) -> SubsidyPlanner:
    mdir = _model_dir(kv, out)
    _need(mdir / "planner.json", "model metadata (run train-diffusion)")
    _need(mdir / "denoiser.json", "denoiser checkpoint (run train-diffusion)")
    _need(mdir / "decoder.json", "decoder checkpoint (run train-inverse)")
    return SubsidyPlanner.load(mdir)


def cmd_finetune(kv, cfg, out: Path) -> str:
    tcfg = _train_cfg(kv, cfg)  # rejects anchor < 0 before touching any file
    est = _load_model(kv, out)
    est.set_params(anchor=tcfg.anchor, ft_epochs=tcfg.ft_epochs, lr_finetune=tcfg.lr_finetune,
                   decoder_noise=tcfg.decoder_noise)
    trajs = read_jsonl(_need(_data_dir(kv, out) / "train.jsonl", "training dataset (run gen)"))
    profiles = _profiles(kv, _data_dir(kv, out))
    deltas = {p.city_id: p.tolerance_delta for p in profiles}
    theta = {k: v.copy() for k, v in est.denoiser_.params.items()}
    cities = [c for c in cfg.main_cities if any(tr.city_id == c for tr in trajs)]
    for city in cities:
        est.finetune([tr for tr in trajs if tr.city_id == city], city_id=city, deltas=deltas)
    if any(not np.array_equal(theta[k], est.denoiser_.params[k]) for k in theta):
        raise InvariantError("fine-tuning modified the diffusion parameters")
    est.save(_model_dir(kv, out))
    for city, curve in est.finetune_curves_.items():
        curve.write_csv(out / f"finetune_loss_{city}.csv")
    return f"finetune: adapted decoders for {','.join(cities)} (anchor={tcfg.anchor:g})"


def cmd_rollout(kv, cfg, out: Path) -> str:
    est = _load_model(kv, out)
    profiles = _profiles(kv, _data_dir(kv, out))
    ids = [c.strip() for c in kv.get("cities", ",".join(cfg.main_cities)).split(",")]
    sel = [p for p in profiles if p.city_id in ids]
    gamma = float(kv.get("gamma", 1.0))
    rep = controller_report(est, sel, cfg.test_days, cfg.seed, gamma=gamma, beta=cfg.beta, jobs=cfg.jobs,
                            positions=_positions(profiles, [p.city_id for p in sel]))
    _check_report(rep)
    write_jsonl(rep.trajectories, out / "rollouts.jsonl")
    return f"rollout: {len(rep.days)} days, mean rides {rep.column('rides').mean():.1f}"


def _check_report(rep: EvalReport) -> None:
    for tr in rep.trajectories:
        if not 0 <= tr.c_real < 1:
            raise InvariantError(f"subsidy rate {tr.c_real} outside [0, 1) for {tr.city_id} day {tr.day_index}")
        if np.any(tr.actions <= 0) or np.any(tr.actions > 30):
            raise InvariantError(f"action out of range for {tr.city_id} day {tr.day_index}")


def cmd_eval(kv, cfg, out: Path) -> str:
    est = _load_model(kv, out)
    profiles = _profiles(kv, _data_dir(kv, out))
    main = [p for p in profiles if p.city_id in cfg.main_cities]
    pos = _positions(profiles, [p.city_id for p in main])
    rep = controller_report(est, main, cfg.test_days, cfg.seed, beta=cfg.beta, jobs=cfg.jobs, positions=pos)
    fixed, levels = fixed_lambda_report(main, range(cfg.train_days), cfg.test_days, cfg, positions=pos)
    reports = [rep, fixed]
    if kv.get("with_bc", "1") not in ("0", "false"):
        train = read_jsonl(_need(_data_dir(kv, out) / "train.jsonl", "training dataset (run gen)"))
        reports.append(bc_report(train, main, cfg.test_days, cfg, positions=pos)[0])
    if kv.get("coldstart", "0") not in ("0", "false"):
        cold = [p for p in profiles if p.city_id in cfg.cold_cities]
        cpos = _positions(profiles, [p.city_id for p in cold])
        crep = controller_report(est, cold, cfg.test_days, cfg.seed, beta=cfg.beta, jobs=cfg.jobs,
                                 name="planner_coldstart", positions=cpos)
        cfix, _ = fixed_lambda_report(cold, range(cfg.train_days), cfg.test_days, cfg, positions=cpos)
        cfix.policy = "fixed_lambda_coldstart"
        for d in cfix.days:
            object.__setattr__(d, "policy", cfix.policy)
        reports += [crep, cfix]
    for r in reports:
        _check_report(r)
    emit_report(reports, out)
    pc = paired_compare(rep.column("score"), fixed.column("score"))
    with open(out / "paired.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["baseline", "mean_diff", "ci_low", "ci_high", "t_stat", "p_value", "n"])
        w.writerow(["fixed_lambda", repr(pc.mean_diff), repr(pc.ci_low), repr(pc.ci_high), repr(pc.t_stat),
                    repr(pc.p_value), pc.n])
    kvconf.dump_kv({f"level_{c}": v for c, v in levels.items()}, out / "fixed_levels.cfg")
    return (f"eval: score {rep.column('score').mean():.1f} vs fixed {fixed.column('score').mean():.1f} "
            f"(diff {pc.mean_diff:+.2f}, p={pc.p_value:.3g}), violations {rep.n_violations}/{len(rep.days)}")


def cmd_sweep_gamma(kv, cfg, out: Path) -> str:
    est = _load_model(kv, out)
    profiles = _profiles(kv, _data_dir(kv, out))
    main = [p for p in profiles if p.city_id in cfg.main_cities]
    pos = _positions(profiles, [p.city_id for p in main])
    reports, rows, rho = steering_sweep(est, main, cfg.test_days, cfg, positions=pos)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["gamma", "mean_score", "mean_rides", "mean_gmv", "mean_c_real", "violations"])
        for r in rows:
            w.writerow([repr(r.gamma), repr(r.mean_score), repr(r.mean_rides), repr(r.mean_gmv),
                        repr(r.mean_c_real), r.violations])
        w.writerow([])
        w.writerow(["spearman_gamma_rides", repr(rho)])
    return f"sweep-gamma: {len(rows)} points, spearman(gamma, rides) = {rho:+.3f}"


def cmd_report(kv, cfg, out: Path) -> str:
    src = Path(kv.get("rollouts", out / "rollouts.jsonl"))
    trajs = read_jsonl(_need(src, "rollout trajectories (run rollout)"))
    profiles = {p.city_id: p for p in _profiles(kv, _data_dir(kv, out))}
    rep = EvalReport(kv.get("policy", "planner"))
    for tr in trajs:
        p = profiles.get(tr.city_id)
        if p is None:
            raise ValidationError(f"no profile for city {tr.city_id}")
        rep.add(tr, p.cap_C, p.tolerance_delta, cfg.beta)
    _check_report(rep)
    emit_report([rep], out)
    return f"report: {len(trajs)} trajectories -> {out}"


COMMANDS = {
    "gen": cmd_gen,
    "train-diffusion": cmd_train_diffusion,
    "train-inverse": cmd_train_inverse,
    "finetune": cmd_finetune,
    "rollout": cmd_rollout,
    "eval": cmd_eval,
    "sweep-gamma": cmd_sweep_gamma,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="subsidyctl", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, help="worker processes for rollouts")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        kv = _settings(args)
        cfg = _desk(kv)
        if cfg.jobs < 1:
            raise ValidationError("jobs must be >= 1")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        msg = COMMANDS[args.command](kv, cfg, out)
        _write_resolved(out, args.command.replace("-", "_"), kv, cfg)
    except (ValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except InvariantError as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(msg)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
