"""Two-stage training: pooled multi-city pretraining of the denoiser and the
inverse decoder, then anchored decoder-only fine-tuning per target city."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import STATE_DIM, Context, SeededRng, Trajectory, group_by_city
from .diffusion import NoiseSchedule, cosine_schedule
from .net import InverseDecoder, TemporalDenoiser, decoder_windows

log = logging.getLogger(__name__)

INV_EPS = 1e-8
N_CTX_SCALED = 3


@dataclass
class TrainConfig:
    lr_pretrain: float = 3e-4
    lr_finetune: float = 3e-5
    batch_size: int = 16
    epochs: int = 40
    inverse_epochs: int = 200
    ft_epochs: int = 20
    anchor: float = 1e-2
    weight_decay: float = 1e-4
    diffusion_steps: int = 50
    width: int = 64
    kernel: int = 5
    blocks: int = 4
    decoder_hidden: tuple = (128, 128)
    loss_kind: str = "mndl"
    decoder_noise: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not (self.lr_pretrain > 0 and self.lr_finetune > 0):
            raise ValueError("learning rates must be positive")
        if self.lr_finetune >= self.lr_pretrain:
            raise ValueError("lr_finetune must be smaller than lr_pretrain")
        if self.anchor < 0:
            raise ValueError("anchor weight must be >= 0")
        if self.decoder_noise < 0:
            raise ValueError("decoder_noise must be >= 0")
        if self.loss_kind not in ("mndl", "unnormalized"):
            raise ValueError("loss_kind must be 'mndl' or 'unnormalized'")
        self.decoder_hidden = tuple(int(h) for h in self.decoder_hidden)

    @classmethod
    def from_dict(cls, kv: dict) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        args = {}
        for k, v in kv.items():
            if k not in types:
                continue
            cur = getattr(cls, k, None)
            if k == "decoder_hidden":
                args[k] = tuple(int(x) for x in str(v).split(",")) if isinstance(v, str) else tuple(v)
            elif k == "loss_kind":
                args[k] = str(v)
            elif isinstance(cur, int) and not isinstance(cur, bool):
                args[k] = int(float(v))
            else:
                args[k] = float(v)
        return cls(**args)


class AdamW:
    """Adam with decoupled decay. ``center`` (if given) replaces zero as the
    point the decay pulls toward, applied as an exact proximal step."""

    def __init__(self, params: dict, lr: float, weight_decay: float = 0.0, betas=(0.9, 0.999),
                 eps: float = 1e-8, center: dict | None = None):
        self.params = params
        self.lr = lr
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.center = center
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k in sorted(self.params):
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p = self.params[k]
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd:
                if self.center is None:
                    p *= 1.0 - self.lr * self.wd
                else:
                    # prox of lr * wd * ||p - center||^2
                    c = self.center[k]
                    p[...] = c + (p - c) / (1.0 + 2.0 * self.lr * self.wd)


@dataclass
class StateScaler:
    """Per-feature standardisation; ``lo``/``hi`` bound the standardised
    training data (used to clip sampler estimates)."""

    mean: np.ndarray
    std: np.ndarray
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    cmean: np.ndarray | None = None
    cstd: np.ndarray | None = None

    def fit_context(self, ctx: np.ndarray) -> "StateScaler":
        """Standardise the trailing (cap, delta, target) context fields, whose
        raw spread is too small for the networks to pick up."""
        tail = np.asarray(ctx, dtype=float)[:, -N_CTX_SCALED:]
        self.cmean = tail.mean(axis=0)
        self.cstd = np.maximum(tail.std(axis=0), 1e-3)
        return self

    def scale_context(self, c) -> np.ndarray:
        c = np.array(c, dtype=float)
        if self.cmean is not None:
            c[..., -N_CTX_SCALED:] = (c[..., -N_CTX_SCALED:] - self.cmean) / self.cstd
        return c

    @classmethod
    def fit(cls, trajs: Sequence[Trajectory]) -> "StateScaler":
        rows = np.concatenate([tr.states[: tr.valid_length] for tr in trajs])
        mean, std = rows.mean(axis=0), np.maximum(rows.std(axis=0), 1e-3)
        z = (rows - mean) / std
        return cls(mean, std, z.min(axis=0), z.max(axis=0))

    def bounds(self, margin: float = 0.5):
        if self.lo is None:
            return None
        return self.lo - margin, self.hi + margin

    def transform(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def inverse(self, z):
        return np.asarray(z) * self.std + self.mean

    def to_dict(self):
        d = {"mean": self.mean.tolist(), "std": self.std.tolist()}
        for k in ("lo", "hi", "cmean", "cstd"):
            if getattr(self, k) is not None:
                d[k] = getattr(self, k).tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        arr = {k: np.asarray(d[k], float) if k in d else None
               for k in ("mean", "std", "lo", "hi", "cmean", "cstd")}
        return cls(**arr)


@dataclass
class MaskedBatch:
    z_noised: np.ndarray
    eps_true: np.ndarray
    mask: np.ndarray
    tau: np.ndarray
    contexts: np.ndarray
    actions: np.ndarray
    inv_mask: np.ndarray


def mndl_loss(pred, batch: MaskedBatch, kind: str = "mndl", with_grad: bool = False):
    """Masked denoising error normalised by the count of supervised positions.

    ``kind="unnormalized"`` divides by the batch size instead, so the value
    scales with how many suffix positions the batch happens to contain.
    """
    m = np.asarray(batch.mask, dtype=float)
    total = m.sum()
    if total <= 0:
        raise ValueError("mask selects no supervised positions")
    r = np.asarray(pred) - batch.eps_true
    sq = np.where(m[..., None] > 0, r * r, 0.0).sum(axis=-1)
    denom = total if kind == "mndl" else float(m.shape[0])
    loss = float((m * sq).sum() / denom)
    if not with_grad:
        return loss
    grad = np.where(m[..., None] > 0, 2.0 * r, 0.0) * m[..., None] / denom
    return loss, grad


def inverse_loss(pred, batch: MaskedBatch, with_grad: bool = False, eps: float = INV_EPS):
    m = np.asarray(batch.inv_mask, dtype=float)
    r = np.where(m > 0, np.asarray(pred) - batch.actions, 0.0)
    denom = m.sum() + eps
    loss = float((m * r * r).sum() / denom)
    if not with_grad:
        return loss
    return loss, 2.0 * m * r / denom


def sample_prefix_length(T: int, rng) -> int:
    """Uniform over ``{round(T/8), ..., round(7T/8)}``, clamped to ``[1, T-1]``."""
    if T < 2:
        raise ValueError("need T >= 2")
    lo = max(1, int(round(T / 8)))
    hi = min(T - 1, int(round(7 * T / 8)))
    return int(rng.integers(lo, hi + 1))


def prefix_support(T: int) -> tuple[int, int]:
    return max(1, int(round(T / 8))), min(T - 1, int(round(7 * T / 8)))


def hour_at(t, window_minutes: int):
    return ((np.asarray(t) * window_minutes) % 1440) / 60.0


@dataclass
class CityIndex:
    cities: tuple

    def index(self, city_id: str):
        return self.cities.index(city_id) if city_id in self.cities else None

    @property
    def n(self) -> int:
        return len(self.cities)

    @property
    def context_dim(self) -> int:
        return Context.dim(self.n)


def relabel_targets(trajs: Sequence[Trajectory], window: int = 7) -> dict:
    """Per ``(city, day)``: realised rides over the trailing ``window``-day mean.

    Days without history fall back to the mean of the city's other days.
    """
    out = {}
    for city, items in group_by_city(trajs).items():
        totals = {tr.day_index: tr.total("rides") for tr in items}
        for tr in items:
            prev = [totals[d] for d in range(tr.day_index - window, tr.day_index) if d in totals]
            if not prev:
                prev = [v for d, v in totals.items() if d != tr.day_index] or [totals[tr.day_index]]
            base = float(np.mean(prev))
            out[(city, tr.day_index)] = totals[tr.day_index] / base if base > 0 else 1.0
    return out


def training_context(tr: Trajectory, cities: CityIndex, hour: float, target: float,
                     delta: float) -> Context:
    """Hindsight context: the day's realised subsidy rate stands in for its cap."""
    cap = float(np.clip(tr.c_real, 1e-4, 0.99 - delta))
    return Context(cities.n, cities.index(tr.city_id), float(hour), tr.day_index % 7, cap, delta, target)


@dataclass
class TrainingData:
    trajs: list
    X: np.ndarray
    actions: np.ndarray
    valid: np.ndarray
    ctx_static: np.ndarray
    window_minutes: int

    @property
    def T(self) -> int:
        return self.X.shape[1]

    def context_rows(self, n_idx, hours) -> np.ndarray:
        """Full context vectors for trajectories ``n_idx`` at decision ``hours``."""
        base = self.ctx_static[n_idx].copy()
        h = 2 * np.pi * np.asarray(hours, dtype=float) / 24.0
        base[:, -7] = np.sin(h)
        base[:, -6] = np.cos(h)
        return base


def build_training_data(trajs: Sequence[Trajectory], scaler: StateScaler, cities: CityIndex,
                        deltas: dict | None = None, fit_context: bool = False) -> TrainingData:
    if not trajs:
        raise ValueError("empty dataset")
    wm = {tr.window_minutes for tr in trajs}
    if len(wm) != 1:
        raise ValueError("all trajectories must share one window size")
    targets = relabel_targets(trajs)
    X = np.stack([scaler.transform(tr.states) for tr in trajs])
    for n, tr in enumerate(trajs):
        X[n, tr.valid_length:] = 0.0
    acts = np.stack([tr.actions for tr in trajs])
    valid = np.array([tr.valid_length for tr in trajs])
    ctx = []
    for tr in trajs:
        delta = (deltas or {}).get(tr.city_id, 0.1 * max(tr.c_real, 1e-3))
        ctx.append(training_context(tr, cities, 0.0, targets[(tr.city_id, tr.day_index)], delta).to_vector())
    ctx = np.stack(ctx)
    if fit_context:
        scaler.fit_context(ctx)
    return TrainingData(list(trajs), X, acts, valid, scaler.scale_context(ctx), wm.pop())


def make_batch(data: TrainingData, idx: np.ndarray, schedule: NoiseSchedule, rng) -> tuple:
    """Forward-noised minibatch with per-sample prefix lengths and steps."""
    N = len(idx)
    T, d = data.T, data.X.shape[2]
    x0 = data.X[idx]
    Ks = np.empty(N, int)
    for i, n in enumerate(idx):
        Ks[i] = min(sample_prefix_length(T, rng), max(1, data.valid[n] - 1))
    taus = rng.integers(1, schedule.L + 1, size=N)
    eps = rng.standard_normal((N, T, d))
    t_idx = np.arange(T)[None, :]
    mask = ((t_idx >= Ks[:, None]) & (t_idx < data.valid[idx][:, None])).astype(float)
    eps = eps * (t_idx >= Ks[:, None])[..., None]
    ab = schedule.alpha_bar[taus][:, None, None]
    z = np.where((t_idx >= Ks[:, None])[..., None], np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps, x0)
    ctx = data.context_rows(idx, hour_at(Ks - 1, data.window_minutes))
    inv_mask = (t_idx < (data.valid[idx][:, None] - 1)).astype(float)
    batch = MaskedBatch(z, eps, mask, taus, ctx, data.actions[idx], inv_mask)
    return batch, Ks


def decoder_inputs(data: TrainingData, idx: np.ndarray):
    """Windows and per-window contexts over every position of ``idx`` trajectories."""
    T = data.T
    wins, ctxs = [], []
    t = np.arange(T)
    hours = hour_at(t, data.window_minutes)
    for n in idx:
        wins.append(decoder_windows(data.X[n], t, data.valid[n]))
        ctxs.append(data.context_rows(np.full(T, n), hours))
    return np.concatenate(wins), np.concatenate(ctxs)


def _decoder_step(dec, opt, data, idx, batch, anchor=None, anchor_weight=0.0, noise=0.0, rng=None):
    W, Cx = decoder_inputs(data, idx)
    if noise > 0:
        # jitter the clean windows so the decoder tolerates sampler error
        W = W + noise * rng.standard_normal(W.shape)
    pred = dec.forward(W, Cx).reshape(len(idx), data.T)
    loss, g = inverse_loss(pred, batch, with_grad=True)
    grads = dec.backward(g.reshape(-1))
    opt.step(grads)
    if anchor is not None and anchor_weight:
        loss += anchor_weight * sum(float(np.sum((dec.params[k] - anchor[k]) ** 2)) for k in anchor)
    return loss


@dataclass
class LossCurve:
    rows: list = field(default_factory=list)

    def add_epoch(self, epoch: int, losses: Sequence[float]):
        sd = float(np.std(losses)) if len(losses) > 1 else 0.0
        for b, v in enumerate(losses):
            self.rows.append((epoch, b, float(v), sd))

    def epoch_std(self) -> np.ndarray:
        eps = sorted({r[0] for r in self.rows})
        return np.array([next(r[3] for r in self.rows if r[0] == e) for e in eps])

    def losses(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "batch", "loss", "loss_std"])
            for e, b, v, s in self.rows:
                w.writerow([e, b, repr(v), repr(s)])


@dataclass
class PretrainResult:
    denoiser: TemporalDenoiser
    decoder: InverseDecoder
    scaler: StateScaler
    cities: CityIndex
    schedule: NoiseSchedule
    diffusion_curve: LossCurve
    inverse_curve: LossCurve


def _batches(n: int, size: int, rng):
    perm = rng.permutation(n)
    return [np.sort(perm[i:i + size]) for i in range(0, n, size)]


def _setup(trajs, cfg, deltas):
    if not trajs:
        raise ValueError("empty dataset")
    cities = CityIndex(tuple(sorted({tr.city_id for tr in trajs})))
    if cities.n < 2:
        log.warning("pretraining on a single city (%s)", cities.cities[0])
    scaler = StateScaler.fit(trajs)
    return cities, scaler, build_training_data(trajs, scaler, cities, deltas, fit_context=True)


def pretrain_denoiser(data: TrainingData, cities: CityIndex, cfg: TrainConfig):
    schedule = cosine_schedule(cfg.diffusion_steps)
    rng = SeededRng(cfg.seed, 1)
    den = TemporalDenoiser(STATE_DIM, cities.context_dim, width=cfg.width, kernel=cfg.kernel,
                           blocks=cfg.blocks, seed=cfg.seed)
    opt = AdamW(den.params, cfg.lr_pretrain, cfg.weight_decay)
    curve = LossCurve()
    for epoch in range(cfg.epochs):
        losses = []
        for idx in _batches(len(data.trajs), cfg.batch_size, rng):
            batch, _ = make_batch(data, idx, schedule, rng)
            pred = den.forward(batch.z_noised, batch.tau, batch.contexts)
            loss, g = mndl_loss(pred, batch, kind=cfg.loss_kind, with_grad=True)
            opt.step(den.backward(g))
            losses.append(loss)
        curve.add_epoch(epoch, losses)
        log.info("denoiser epoch %d loss %.4f", epoch, np.mean(losses))
    return den, schedule, curve


def pretrain_decoder(data: TrainingData, cities: CityIndex, cfg: TrainConfig):
    rng = SeededRng(cfg.seed, 3)
    dec = InverseDecoder(STATE_DIM, cities.context_dim, hidden=cfg.decoder_hidden, seed=cfg.seed + 1)
    opt = AdamW(dec.params, cfg.lr_pretrain, cfg.weight_decay)
    schedule = cosine_schedule(1)
    curve = LossCurve()
    for epoch in range(cfg.inverse_epochs):
        losses = []
        for idx in _batches(len(data.trajs), cfg.batch_size, rng):
            batch, _ = make_batch(data, idx, schedule, rng)
            losses.append(_decoder_step(dec, opt, data, idx, batch, noise=cfg.decoder_noise, rng=rng))
        curve.add_epoch(epoch, losses)
        log.info("decoder epoch %d loss %.4f", epoch, np.mean(losses))
    return dec, curve


def pretrain(trajs: Sequence[Trajectory], cfg: TrainConfig, deltas: dict | None = None,
             train_denoiser: bool = True, train_decoder: bool = True) -> PretrainResult:
    """Pooled multi-city training of both networks.

    The two networks share no parameters, so they are trained in separate
    loops with their own epoch budgets; a skipped network keeps its
    initialisation.
    """
    cities, scaler, data = _setup(trajs, cfg, deltas)
    if train_denoiser:
        den, schedule, dcurve = pretrain_denoiser(data, cities, cfg)
    else:
        den = TemporalDenoiser(STATE_DIM, cities.context_dim, width=cfg.width, kernel=cfg.kernel,
                               blocks=cfg.blocks, seed=cfg.seed)
        schedule, dcurve = cosine_schedule(cfg.diffusion_steps), LossCurve()
    if train_decoder:
        dec, icurve = pretrain_decoder(data, cities, cfg)
    else:
        dec = InverseDecoder(STATE_DIM, cities.context_dim, hidden=cfg.decoder_hidden, seed=cfg.seed + 1)
        icurve = LossCurve()
    return PretrainResult(den, dec, scaler, cities, schedule, dcurve, icurve)


def finetune(denoiser: TemporalDenoiser, decoder: InverseDecoder, trajs: Sequence[Trajectory],
             scaler: StateScaler, cities: CityIndex, cfg: TrainConfig, deltas: dict | None = None):
    """Decoder-only adaptation with an L2 anchor to the pretrained decoder.

    Returns ``(denoiser, tuned_decoder, curve)``; the denoiser is the same
    object, untouched.
    """
    if cfg.anchor < 0:
        raise ValueError("anchor weight must be >= 0")
    if not trajs:
        raise ValueError("empty fine-tuning dataset")
    data = build_training_data(trajs, scaler, cities, deltas)
    tuned = InverseDecoder(**decoder.config)
    tuned.params = decoder.copy_params()
    anchor = decoder.copy_params()
    opt = AdamW(tuned.params, cfg.lr_finetune, cfg.anchor, center=anchor)
    rng = SeededRng(cfg.seed, 2)
    schedule = cosine_schedule(1)
    curve = LossCurve()
    for epoch in range(cfg.ft_epochs):
        losses = []
        for idx in _batches(len(trajs), cfg.batch_size, rng):
            batch, _ = make_batch(data, idx, schedule, rng)
            losses.append(_decoder_step(tuned, opt, data, idx, batch, anchor, cfg.anchor,
                                        noise=cfg.decoder_noise, rng=rng))
        curve.add_epoch(epoch, losses)
    return denoiser, tuned, curve


def anchored_objective(decoder: InverseDecoder, anchor: dict, data: TrainingData, idx, anchor_weight: float,
                       with_grad: bool = False):
    """``L_inv(phi) + anchor_weight * ||phi - phi0||^2`` on fixed trajectories ``idx``."""
    T = data.T
    W, Cx = decoder_inputs(data, idx)
    inv_mask = (np.arange(T)[None, :] < (data.valid[idx][:, None] - 1)).astype(float)
    batch = MaskedBatch(None, None, None, None, None, data.actions[idx], inv_mask)
    pred = decoder.forward(W, Cx).reshape(len(idx), T)
    out = inverse_loss(pred, batch, with_grad=with_grad)
    reg = anchor_weight * sum(float(np.sum((decoder.params[k] - anchor[k]) ** 2)) for k in anchor)
    if not with_grad:
        return out + reg
    loss, g = out
    grads = decoder.backward(g.reshape(-1))
    for k in grads:
        grads[k] = grads[k] + 2.0 * anchor_weight * (decoder.params[k] - anchor[k])
    return loss + reg, grads


def params_distance(a: dict, b: dict) -> float:
    return math.sqrt(sum(float(np.sum((a[k] - b[k]) ** 2)) for k in a))


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["decoder_hidden"] = ",".join(str(h) for h in cfg.decoder_hidden)
    return d
