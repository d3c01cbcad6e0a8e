"""Flat ``key=value`` configuration files."""

from __future__ import annotations

import os
from pathlib import Path

SEED_ENV = "D3_SEED"


def parse_kv(text: str) -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key=value, got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ValueError(f"line {n}: empty key")
        out[k] = v
    return out


def load_kv(path) -> dict:
    return parse_kv(Path(path).read_text())


def dump_kv(d: dict, path) -> None:
    lines = [f"{k}={_text(v)}" for k, v in sorted(d.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def _text(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(_text(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def resolve(base: dict, overrides: dict | None = None, env=None) -> dict:
    """Defaults < config file < CLI overrides < ``D3_SEED``."""
    env = os.environ if env is None else env
    out = dict(base)
    out.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if env.get(SEED_ENV):
        out["seed"] = env[SEED_ENV]
    return out
