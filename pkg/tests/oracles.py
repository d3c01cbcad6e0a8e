"""Independent reference computations the tests compare against."""

import math

import numpy as np


def grid_argmax_linear(lam, budget, reward, slope, cap, step=1e-3):
    """Brute-force maximiser of the linear per-pair Lagrangian term on a grid."""
    b = np.arange(0.0, cap + 0.5 * step, step)
    val = (1.0 + lam * budget) * reward * slope * b - lam * slope * b * b
    return float(b[int(np.argmax(val))])


def grid_argmax_general(lam, budget, reward, p, cap, step=1e-4):
    b = np.arange(0.0, cap + 0.5 * step, step)
    val = ((1.0 + lam * budget) * reward - lam * b) * p(b)
    return float(b[int(np.argmax(val))])


def paired_t_textbook(a, b):
    """Paired t statistic written out from the definition, pure Python."""
    d = [x - y for x, y in zip(a, b)]
    n = len(d)
    mean = sum(d) / n
    var = sum((v - mean) ** 2 for v in d) / (n - 1)
    return mean / math.sqrt(var / n)


def golden_section_min(f, lo, hi, tol=1e-8):
    g = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - g * (b - a), a + g * (b - a)
    while b - a > tol:
        if f(c) < f(d):
            b = d
        else:
            a = c
        c, d = b - g * (b - a), a + g * (b - a)
    return 0.5 * (a + b)


def random_linear_instances(n, seed):
    rng = np.random.default_rng(seed)
    lam = rng.uniform(1e-3, 30.0, n)
    C = rng.uniform(0.05, 0.3, n)
    r = rng.uniform(1e-3, 100.0, n)
    a = rng.uniform(1e-4, 0.1, n)
    cap = rng.uniform(1e-3, 100.0, n)
    return lam, C, r, a, cap


def random_logistic_instances(n, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        out.append(dict(lam=rng.uniform(0.05, 30.0), C=rng.uniform(0.05, 0.3),
                        reward=rng.uniform(0.1, 20.0), cap=rng.uniform(0.5, 10.0),
                        scale=rng.uniform(0.5, 1.0), midpoint=rng.uniform(-3.0, 0.0),
                        steepness=rng.uniform(0.1, 2.0)))
    return out
