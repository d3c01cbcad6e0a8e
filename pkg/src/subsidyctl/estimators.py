"""scikit-learn style wrappers around the planner and the fixed-multiplier baseline."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .controller import ControllerState, Planner, decide, run_day
from .core import LAMBDA_MAX, SeededRng
from .diffusion import cosine_schedule
from .evaluation import lambda_grid, tune_fixed_lambda
from .net import load_checkpoint, save_checkpoint
from .train import CityIndex, StateScaler, TrainConfig, finetune, pretrain
from .validation import ValidationError, check_positive, check_states, check_trajectories


class SubsidyPlanner(BaseEstimator):
    """Diffusion planner plus inverse decoder, trained on logged city-days.

    ``fit`` pretrains both networks on pooled cities; ``finetune`` adapts a
    per-city copy of the decoder; ``predict`` maps an observed history to the
    multiplier for its last window.
    """

    def __init__(self, epochs=40, inverse_epochs=200, ft_epochs=20, diffusion_steps=50,
                 lr_pretrain=3e-4, lr_finetune=3e-5, batch_size=16, anchor=1e-2,
                 weight_decay=1e-4, width=64, kernel=5, blocks=4, decoder_hidden=(128, 128),
                 loss_kind="mndl", decoder_noise=0.3, replan_every=1, clip_margin=0.5, seed=0):
        self.epochs = epochs
        self.inverse_epochs = inverse_epochs
        self.ft_epochs = ft_epochs
        self.diffusion_steps = diffusion_steps
        self.lr_pretrain = lr_pretrain
        self.lr_finetune = lr_finetune
        self.batch_size = batch_size
        self.anchor = anchor
        self.weight_decay = weight_decay
        self.width = width
        self.kernel = kernel
        self.blocks = blocks
        self.decoder_hidden = decoder_hidden
        self.loss_kind = loss_kind
        self.decoder_noise = decoder_noise
        self.replan_every = replan_every
        self.clip_margin = clip_margin
        self.seed = seed

    def _config(self) -> TrainConfig:
        try:
            return TrainConfig(**{k: v for k, v in self.get_params().items()
                                  if k in TrainConfig.__dataclass_fields__})
        except ValueError as exc:
            raise ValidationError(str(exc)) from exc

    def fit(self, X, y=None, deltas=None):
        """``X``: sequence of Trajectory objects spanning several cities."""
        trajs = check_trajectories(X)
        res = pretrain(trajs, self._config(), deltas=deltas)
        self.denoiser_ = res.denoiser
        self.decoder_ = res.decoder
        self.scaler_ = res.scaler
        self.cities_ = res.cities
        self.schedule_ = res.schedule
        self.window_minutes_ = trajs[0].window_minutes
        self.diffusion_curve_ = res.diffusion_curve
        self.inverse_curve_ = res.inverse_curve
        self.city_decoders_ = {}
        return self

    def finetune(self, X, city_id=None, deltas=None):
        """Anchored decoder-only adaptation on one target city's logs."""
        check_is_fitted(self, "decoder_")
        trajs = check_trajectories(X)
        city = city_id or trajs[0].city_id
        _, dec, curve = finetune(self.denoiser_, self.decoder_, trajs, self.scaler_, self.cities_,
                                 self._config(), deltas=deltas)
        self.city_decoders_[city] = dec
        self.finetune_curves_ = {**getattr(self, "finetune_curves_", {}), city: curve}
        return self

    def planner(self, city_id=None) -> Planner:
        check_is_fitted(self, "decoder_")
        dec = self.city_decoders_.get(city_id, self.decoder_)
        return Planner(self.denoiser_, dec, self.scaler_, self.cities_, self.schedule_,
                       self.window_minutes_, clip_margin=self.clip_margin)

    def controller(self, city_id, cap_C, delta, day_index=0, gamma=1.0, target=1.0) -> ControllerState:
        ctx = self.planner(city_id).context_for(city_id, day_index, cap_C, delta).with_target(target)
        return ControllerState(ctx, gamma=gamma, replan_every=self.replan_every)

    def predict(self, X, city_id=None, cap_C=0.1, delta=0.01, day_index=0, gamma=1.0, rng=None):
        """Multiplier for the last row of history ``X`` (shape ``(t+1, 20)``)."""
        X = check_states(X)
        pl = self.planner(city_id)
        st = self.controller(city_id, cap_C, delta, day_index, gamma)
        st.history = list(X)
        rng = rng if rng is not None else SeededRng(self.seed, 77)
        return decide(st, X.shape[0] - 1, pl, rng)

    def run_day(self, profile, day_index, rng, sample_rng=None, gamma=1.0):
        st = self.controller(profile.city_id, profile.cap_C, profile.tolerance_delta, day_index, gamma)
        return run_day(st, profile, self.planner(profile.city_id), day_index, rng, sample_rng)

    def save(self, path) -> None:
        check_is_fitted(self, "decoder_")
        out = Path(path)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "denoiser.json", self.denoiser_)
        save_checkpoint(out / "decoder.json", self.decoder_)
        for city, dec in sorted(self.city_decoders_.items()):
            save_checkpoint(out / f"decoder_{city}.json", dec)
        meta = {"params": {k: list(v) if isinstance(v, tuple) else v for k, v in self.get_params().items()},
                "scaler": self.scaler_.to_dict(), "cities": list(self.cities_.cities),
                "window_minutes": self.window_minutes_, "finetuned": sorted(self.city_decoders_)}
        (out / "planner.json").write_text(json.dumps(meta, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "SubsidyPlanner":
        src = Path(path)
        meta = json.loads((src / "planner.json").read_text())
        params = dict(meta["params"])
        params["decoder_hidden"] = tuple(params["decoder_hidden"])
        est = cls(**params)
        est.denoiser_ = load_checkpoint(src / "denoiser.json")
        est.decoder_ = load_checkpoint(src / "decoder.json")
        est.city_decoders_ = {c: load_checkpoint(src / f"decoder_{c}.json") for c in meta["finetuned"]}
        est.scaler_ = StateScaler.from_dict(meta["scaler"])
        est.cities_ = CityIndex(tuple(meta["cities"]))
        est.schedule_ = cosine_schedule(est.diffusion_steps)
        est.window_minutes_ = int(meta["window_minutes"])
        return est


class FixedLambdaPolicy(BaseEstimator):
    """Constant multiplier; ``fit`` picks the best level on a grid by mean Score."""

    def __init__(self, level=None, n_levels=15, lo=0.2, hi=LAMBDA_MAX, beta=0.5, seed=0):
        self.level = level
        self.n_levels = n_levels
        self.lo = lo
        self.hi = hi
        self.beta = beta
        self.seed = seed

    def fit(self, profile, days, window_minutes=10, city_pos=0):
        grid = lambda_grid(self.n_levels, self.lo, self.hi)
        self.level_, self.grid_scores_ = tune_fixed_lambda(profile, days, window_minutes, self.seed, grid,
                                                           self.beta, city_pos)
        self.grid_ = grid
        return self

    def _level(self) -> float:
        lvl = getattr(self, "level_", self.level)
        if lvl is None:
            raise ValidationError("set level or call fit first")
        check_positive("level", lvl)
        if lvl > LAMBDA_MAX:
            raise ValidationError(f"level must be <= {LAMBDA_MAX}")
        return float(lvl)

    def predict(self, X):
        X = check_states(X)
        return np.full(X.shape[0], self._level())

    def policy(self):
        lvl = self._level()
        return lambda x, t, ctx=None: lvl
