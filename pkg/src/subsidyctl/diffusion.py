"""Prefix-conditional DDPM: cosine schedule, clamped forward noising and
clamped reverse sampling.

Rows ``t < K`` of the diffusion variable hold the observed history and are
never noised; only the suffix moves along the chain. Diffusion steps are
indexed ``1..L``; step 0 is clean data.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

COSINE_OFFSET = 0.008
BETA_MAX = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays are stored 1-based: index 0 holds the clean-data convention
    (``alpha_bar[0] = 1``, ``beta[0] = 0``)."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_tilde: np.ndarray

    @property
    def L(self) -> int:
        return self.beta.shape[0] - 1


def cosine_schedule(L: int, s: float = COSINE_OFFSET) -> NoiseSchedule:
    if L < 1:
        raise ValueError("need at least one diffusion step")
    if not s > 0:
        raise ValueError("offset must be positive")
    u = np.arange(L + 1, dtype=float)
    f = np.cos(((u / L + s) / (1 + s)) * np.pi / 2) ** 2
    ab = f / f[0]
    beta = np.zeros(L + 1)
    beta[1:] = np.clip(1.0 - ab[1:] / ab[:-1], 1e-12, BETA_MAX)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    bt = np.zeros(L + 1)
    bt[1:] = beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:])
    return NoiseSchedule(beta, alpha, alpha_bar, bt)


@dataclass
class DiffusionVariable:
    z: np.ndarray
    K: int
    tau: int
    eps: np.ndarray | None = None


def forward_noise(x0: np.ndarray, K: int, tau: int, schedule: NoiseSchedule, rng=None,
                  eps: np.ndarray | None = None) -> DiffusionVariable:
    """Noise rows ``t >= K`` to step ``tau``; the prefix is copied unchanged.

    ``eps`` (shape of the suffix) may be supplied; otherwise it is drawn from
    ``rng``. The returned ``eps`` is full-length with zeros on the prefix.
    """
    x0 = np.asarray(x0, dtype=float)
    T = x0.shape[0]
    if not 0 <= K <= T:
        raise IndexError(f"prefix length {K} outside [0, {T}]")
    if not 1 <= tau <= schedule.L:
        raise IndexError(f"diffusion step {tau} outside [1, {schedule.L}]")
    if eps is None:
        eps = rng.standard_normal((T - K,) + x0.shape[1:])
    eps = np.asarray(eps, dtype=float)
    if eps.shape != (T - K,) + x0.shape[1:]:
        raise ValueError(f"noise shape {eps.shape} does not match suffix {(T - K,) + x0.shape[1:]}")
    ab = schedule.alpha_bar[tau]
    z = x0.copy()
    z[K:] = np.sqrt(ab) * x0[K:] + np.sqrt(1.0 - ab) * eps
    full = np.zeros_like(x0)
    full[K:] = eps
    return DiffusionVariable(z, K, tau, full)


def implied_clean(z, eps_hat, tau: int, schedule: NoiseSchedule) -> np.ndarray:
    if not 1 <= tau <= schedule.L:
        raise IndexError(f"diffusion step {tau} outside [1, {schedule.L}]")
    ab = schedule.alpha_bar[tau]
    return (np.asarray(z) - np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(ab)


def reverse_mean(z, eps_hat, tau: int, schedule: NoiseSchedule) -> np.ndarray:
    a, b, ab = schedule.alpha[tau], schedule.beta[tau], schedule.alpha_bar[tau]
    return (z - (b / np.sqrt(1.0 - ab)) * eps_hat) / np.sqrt(a)


Denoiser = Callable[[np.ndarray, int, np.ndarray], np.ndarray]


def reverse_sample(prefix: np.ndarray, context, schedule: NoiseSchedule, denoiser: Denoiser,
                   rng, T: int, deterministic: bool = False, trace: list | None = None,
                   clip: tuple | None = None) -> np.ndarray:
    """Draw a future suffix ``(T-K, d)`` given the clean prefix ``(K, d)``.

    ``denoiser(z, tau, context)`` sees the full ``(T, d)`` variable (or a
    leading batch axis, if ``prefix`` has one); only its suffix rows are used.
    With ``deterministic`` the per-step noise is replaced by zeros. If
    ``trace`` is a list, the clamped variable is appended after every step.

    ``clip=(lo, hi)`` bounds the implied clean estimate at every step and
    re-derives the noise estimate from the clipped value before taking the
    usual reverse mean; without it the update is the plain noise form.
    """
    prefix = np.asarray(prefix, dtype=float)
    batched = prefix.ndim == 3
    P = prefix if batched else prefix[None]
    N, K, d = P.shape
    if not 0 <= K <= T:
        raise IndexError(f"prefix length {K} outside [0, {T}]")
    if K == T:
        out = np.zeros((N, 0, d))
        return out if batched else out[0]
    z = np.empty((N, T, d))
    z[:, :K] = P
    z[:, K:] = rng.standard_normal((N, T - K, d))
    for tau in range(schedule.L, 0, -1):
        z[:, :K] = P
        zin = z if batched else z[0]
        eps_hat = np.asarray(denoiser(zin, tau, context))
        if eps_hat.shape != zin.shape:
            raise ValueError(f"denoiser returned shape {eps_hat.shape}, expected {zin.shape}")
        eps_hat = eps_hat if batched else eps_hat[None]
        if clip is not None:
            ab = schedule.alpha_bar[tau]
            x0 = np.clip(implied_clean(z[:, K:], eps_hat[:, K:], tau, schedule), clip[0], clip[1])
            eps_hat = eps_hat.copy()
            eps_hat[:, K:] = (z[:, K:] - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)
        mu = reverse_mean(z[:, K:], eps_hat[:, K:], tau, schedule)
        if tau > 1 and not deterministic:
            z[:, K:] = mu + np.sqrt(schedule.beta_tilde[tau]) * rng.standard_normal(mu.shape)
        else:
            z[:, K:] = mu
        z[:, :K] = P
        if trace is not None:
            trace.append(z.copy() if batched else z[0].copy())
    out = z[:, K:]
    return out if batched else out[0]
