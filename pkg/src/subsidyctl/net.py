"""The two trainable networks with hand-written reverse-mode gradients.

``TemporalDenoiser`` predicts per-window noise from a ``(N, T, d)`` diffusion
variable, the diffusion step and the context. It is a stack of residual
temporal convolutions whose pre-activations are modulated (scale and shift)
by an embedding of the step and the context.

``InverseDecoder`` maps a four-state window ``[z_{t-2}, z_{t-1}, z_t, z_{t+1}]``
plus context to a multiplier in ``(0, 30]``.

Both keep the activations of the last ``forward`` call and expose
``backward(cotangent) -> grads`` with the same keys as ``params``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from scipy.special import expit

from .core import LAMBDA_MAX

CHECKPOINT_VERSION = 1
LAMBDA_FLOOR = 1e-3
INIT_STD = 0.02


class StateError(RuntimeError):
    """``backward`` called without a preceding recorded ``forward``."""


def _sigmoid(v):
    # tanh form: same function, several times faster than expit on float32
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def _silu(v):
    return v * _sigmoid(v)


def _dsilu(v):
    s = _sigmoid(v)
    return s * (1.0 + v * (1.0 - s))


def step_embedding(tau, n_freq: int) -> np.ndarray:
    tau = np.asarray(tau, dtype=float).reshape(-1, 1)
    freqs = np.exp(-np.log(10000.0) * np.arange(n_freq) / n_freq)
    arg = tau * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


class _Net:
    params: dict
    config: dict
    kind: str

    def __init__(self):
        self._cache = None

    def init_params(self, shapes: dict, seed: int) -> dict:
        rng = np.random.default_rng(seed)
        out = {}
        for name, shape in shapes.items():
            if name.split("_")[-1].startswith("b"):
                out[name] = np.zeros(shape)
            else:
                out[name] = INIT_STD * rng.standard_normal(shape)
        return out

    def zero_grads(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy_params(self) -> dict:
        return {k: v.copy() for k, v in self.params.items()}

    def astype(self, dtype):
        clone = type(self)(**self.config)
        clone.params = {k: v.astype(dtype) for k, v in self.params.items()}
        return clone

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def _need_cache(self):
        if self._cache is None:
            raise StateError("backward() requires a preceding forward() with record=True")
        return self._cache

    def save(self, path) -> None:
        save_checkpoint(path, self)


class TemporalDenoiser(_Net):
    kind = "denoiser"

    def __init__(self, state_dim: int, context_dim: int, width: int = 64, kernel: int = 5,
                 blocks: int = 4, n_freq: int = 32, embed: int = 64, seed: int = 0):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError("kernel must be odd")
        self.config = dict(state_dim=state_dim, context_dim=context_dim, width=width, kernel=kernel,
                           blocks=blocks, n_freq=n_freq, embed=embed, seed=seed)
        d, H, E = state_dim, width, embed
        shapes = {
            "t_w": (2 * n_freq, E), "t_b": (E,),
            "c_w": (context_dim, E),
            "in_w": (d, H), "in_b": (H,),
            "out_w": (H, d), "out_b": (d,),
        }
        for i in range(blocks):
            shapes[f"conv{i}_w"] = (kernel * H, H)
            shapes[f"conv{i}_b"] = (H,)
            shapes[f"film{i}_w"] = (E, 2 * H)
            shapes[f"film{i}_b"] = (2 * H,)
            shapes[f"pw{i}_w"] = (H, H)
            shapes[f"pw{i}_b"] = (H,)
        self.shapes = shapes
        self.params = self.init_params(shapes, seed)

    def _conv(self, h, w):
        """'Same' zero-padded temporal convolution as a sum of shifted matmuls."""
        k = self.config["kernel"]
        p = k // 2
        N, T, H = h.shape
        hp = np.zeros((N, T + 2 * p, H), dtype=h.dtype)
        hp[:, p:p + T] = h
        wk = w.reshape(k, H, -1)
        u = hp[:, 0:T] @ wk[0]
        for j in range(1, k):
            u += hp[:, j:j + T] @ wk[j]
        return hp, u

    def _conv_backward(self, hp, du, w):
        k = self.config["kernel"]
        p = k // 2
        T = du.shape[1]
        H = hp.shape[2]
        wk = w.reshape(k, H, -1)
        gw = np.empty_like(wk)
        dhp = np.zeros_like(hp)
        for j in range(k):
            gw[j] = np.einsum("nth,ntk->hk", hp[:, j:j + T], du)
            dhp[:, j:j + T] += du @ wk[j].T
        return gw.reshape(w.shape), dhp[:, p:p + T]

    def forward(self, z, tau, c, record: bool = True) -> np.ndarray:
        P_ = self.params
        dt = self.dtype
        z = np.asarray(z, dtype=dt)
        single = z.ndim == 2
        if single:
            z = z[None]
        N, T, d = z.shape
        if d != self.config["state_dim"]:
            raise ValueError(f"state dim {d} != {self.config['state_dim']}")
        tau = np.broadcast_to(np.asarray(tau), (N,))
        c = np.asarray(c, dtype=dt).reshape(-1, self.config["context_dim"])
        if c.shape[0] == 1 and N > 1:
            c = np.broadcast_to(c, (N, c.shape[1]))
        if c.shape[0] != N:
            raise ValueError("context batch size mismatch")
        H = self.config["width"]
        semb = step_embedding(tau, self.config["n_freq"]).astype(dt)
        e1 = semb @ P_["t_w"] + P_["t_b"] + c @ P_["c_w"]
        cond = _silu(e1)
        h = z @ P_["in_w"] + P_["in_b"]
        blocks = []
        for i in range(self.config["blocks"]):
            hp, u = self._conv(h, P_[f"conv{i}_w"])
            u += P_[f"conv{i}_b"]
            fs = cond @ P_[f"film{i}_w"] + P_[f"film{i}_b"]
            scale, shift = fs[:, None, :H], fs[:, None, H:]
            v = u * (1.0 + scale) + shift
            a = _silu(v)
            h = h + a @ P_[f"pw{i}_w"] + P_[f"pw{i}_b"]
            if record:
                blocks.append((hp, u, scale, v, a))
        out = h @ P_["out_w"] + P_["out_b"]
        self._cache = dict(z=z, c=c, semb=semb, e1=e1, cond=cond, blocks=blocks, h=h,
                           single=single) if record else None
        return out[0] if single else out

    def __call__(self, z, tau, c):
        return self.forward(z, tau, c, record=False)

    def backward(self, dout) -> dict:
        cache = self._need_cache()
        P_ = self.params
        H = self.config["width"]
        dout = np.asarray(dout, dtype=self.dtype)
        if cache["single"]:
            dout = dout[None]
        T = dout.shape[1]
        g = {}
        h = cache["h"]
        g["out_w"] = np.einsum("nth,ntd->hd", h, dout)
        g["out_b"] = dout.sum(axis=(0, 1))
        dh = dout @ P_["out_w"].T
        dcond = np.zeros_like(cache["cond"])
        for i in reversed(range(self.config["blocks"])):
            hp, u, scale, v, a = cache["blocks"][i]
            g[f"pw{i}_w"] = np.einsum("nth,ntk->hk", a, dh)
            g[f"pw{i}_b"] = dh.sum(axis=(0, 1))
            da = dh @ P_[f"pw{i}_w"].T
            dv = da * _dsilu(v)
            du = dv * (1.0 + scale)
            dfs = np.concatenate([(dv * u).sum(axis=1), dv.sum(axis=1)], axis=1)
            g[f"film{i}_w"] = cache["cond"].T @ dfs
            g[f"film{i}_b"] = dfs.sum(axis=0)
            dcond += dfs @ P_[f"film{i}_w"].T
            g[f"conv{i}_w"], dh_conv = self._conv_backward(hp, du, P_[f"conv{i}_w"])
            g[f"conv{i}_b"] = du.sum(axis=(0, 1))
            dh = dh + dh_conv
        g["in_w"] = np.einsum("ntd,nth->dh", cache["z"], dh)
        g["in_b"] = dh.sum(axis=(0, 1))
        de1 = dcond * _dsilu(cache["e1"])
        g["t_w"] = cache["semb"].T @ de1
        g["t_b"] = de1.sum(axis=0)
        g["c_w"] = cache["c"].T @ de1
        return {k: g[k] for k in self.params}


class InverseDecoder(_Net):
    kind = "decoder"

    def __init__(self, state_dim: int, context_dim: int, hidden: tuple = (128, 128), seed: int = 0):
        super().__init__()
        hidden = tuple(int(h) for h in hidden)
        if not 2 <= len(hidden) <= 3:
            raise ValueError("decoder uses 2 or 3 hidden layers")
        self.config = dict(state_dim=state_dim, context_dim=context_dim, hidden=hidden, seed=seed)
        sizes = (4 * state_dim + context_dim,) + hidden + (1,)
        shapes = {}
        for i in range(len(sizes) - 1):
            shapes[f"l{i}_w"] = (sizes[i], sizes[i + 1])
            shapes[f"l{i}_b"] = (sizes[i + 1],)
        self.shapes = shapes
        self.n_layers = len(sizes) - 1
        self.params = self.init_params(shapes, seed)

    def forward(self, windows, c, record: bool = True) -> np.ndarray:
        dt = self.dtype
        w = np.asarray(windows, dtype=dt)
        M = w.shape[0]
        w = w.reshape(M, -1)
        if w.shape[1] != 4 * self.config["state_dim"]:
            raise ValueError(f"window width {w.shape[1]} != {4 * self.config['state_dim']}")
        if not np.all(np.isfinite(w)):
            raise ValueError("decoder input contains non-finite values")
        c = np.asarray(c, dtype=dt).reshape(-1, self.config["context_dim"])
        if c.shape[0] == 1 and M > 1:
            c = np.broadcast_to(c, (M, c.shape[1]))
        x = np.concatenate([w, c], axis=1)
        acts = [x]
        for i in range(self.n_layers - 1):
            x = np.tanh(x @ self.params[f"l{i}_w"] + self.params[f"l{i}_b"])
            acts.append(x)
        j = self.n_layers - 1
        u = (x @ self.params[f"l{j}_w"] + self.params[f"l{j}_b"])[:, 0]
        s = expit(u)
        lam = LAMBDA_MAX * s * (1.0 - LAMBDA_FLOOR) + LAMBDA_FLOOR
        self._cache = dict(acts=acts, s=s) if record else None
        return lam

    def __call__(self, windows, c):
        return self.forward(windows, c, record=False)

    def backward(self, dlam) -> dict:
        cache = self._need_cache()
        s = cache["s"]
        du = np.asarray(dlam, dtype=self.dtype).reshape(-1) * LAMBDA_MAX * (1.0 - LAMBDA_FLOOR) * s * (1.0 - s)
        g = {}
        dx = du[:, None]
        acts = cache["acts"]
        for i in reversed(range(self.n_layers)):
            a_in = acts[i]
            g[f"l{i}_w"] = a_in.T @ dx
            g[f"l{i}_b"] = dx.sum(axis=0)
            if i > 0:
                dx = (dx @ self.params[f"l{i}_w"].T) * (1.0 - a_in**2)
        return {k: g[k] for k in self.params}


def decoder_windows(z: np.ndarray, t, valid_length: int | None = None) -> np.ndarray:
    """Stack ``[z_{t-2}, z_{t-1}, z_t, z_{t+1}]`` for each index in ``t``.

    Indices falling outside ``[0, valid_length)`` repeat the nearest valid row.
    ``z`` is ``(T, d)``; returns ``(len(t), 4 d)``.
    """
    z = np.asarray(z)
    n = z.shape[0] if valid_length is None else int(valid_length)
    t = np.atleast_1d(np.asarray(t, dtype=int))
    idx = np.clip(t[:, None] + np.arange(-2, 2)[None, :], 0, n - 1)
    return z[idx].reshape(len(t), -1)


def relative_error(a, b, floor: float = 1e-7):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def gradcheck(net: _Net, run, n_params: int = 100, h: float = 1e-5, seed: int = 0) -> float:
    """Max relative error of ``net.backward`` against central differences.

    ``run()`` performs a recording forward pass and returns the output; the
    scalar probed is ``sum(out * R)`` for a fixed random cotangent ``R``.
    """
    rng = np.random.default_rng(seed)
    out = run()
    R = rng.standard_normal(np.shape(out))
    grads = net.backward(R)
    names = list(net.params)
    worst = 0.0
    for _ in range(n_params):
        k = names[int(rng.integers(len(names)))]
        flat = net.params[k].reshape(-1)
        j = int(rng.integers(flat.size))
        old = flat[j]
        flat[j] = old + h
        fp = float(np.sum(run() * R))
        flat[j] = old - h
        fm = float(np.sum(run() * R))
        flat[j] = old
        num = (fp - fm) / (2 * h)
        worst = max(worst, float(relative_error(grads[k].reshape(-1)[j], num)))
    run()
    return worst


def save_checkpoint(path, net: _Net) -> None:
    blob = {
        "version": CHECKPOINT_VERSION,
        "kind": net.kind,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in net.config.items()},
        "params": {k: {"shape": list(v.shape), "values": v.astype(float).ravel().tolist()}
                   for k, v in net.params.items()},
    }
    Path(path).write_text(json.dumps(blob, separators=(",", ":")))


def load_checkpoint(path) -> _Net:
    blob = json.loads(Path(path).read_text())
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')}")
    cls = {"denoiser": TemporalDenoiser, "decoder": InverseDecoder}.get(blob.get("kind"))
    if cls is None:
        raise ValueError(f"unknown checkpoint kind {blob.get('kind')!r}")
    cfg = dict(blob["config"])
    if "hidden" in cfg:
        cfg["hidden"] = tuple(cfg["hidden"])
    net = cls(**cfg)
    stored = blob["params"]
    if set(stored) != set(net.params):
        raise ValueError("checkpoint parameter names do not match the architecture")
    for k, ref in net.params.items():
        shape = tuple(stored[k]["shape"])
        if shape != ref.shape:
            raise ValueError(f"parameter {k}: checkpoint shape {shape} != expected {ref.shape}")
        vals = np.asarray(stored[k]["values"], dtype=float)
        if vals.size != ref.size:
            raise ValueError(f"parameter {k}: {vals.size} values for shape {shape}")
        net.params[k] = vals.reshape(shape)
    return net
