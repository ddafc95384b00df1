"""Slow, loop-based reference implementations used as test oracles.

They are written independently of the library code: thresholds come from
a linear scan for the smallest qualifying rank and membership is decided
element by element.
"""

from __future__ import annotations

import math


def brute_quantile(values, alpha):
    vals = sorted(float(v) for v in values)
    n = len(vals)
    if alpha == 0:
        return vals[0]
    for rank in range(1, n + 1):
        # smallest rank covering at least an alpha fraction of the list
        if rank >= alpha * n - 1e-9:
            return vals[rank - 1]
    return vals[-1]


def brute_alpha(t1, lam, scale=100.0, constant=False):
    a = lam if constant else lam * math.tanh(t1 / scale)
    return min(1.0, max(0.0, a))


def brute_pool(q, d, timesteps, horizon, lam, scale=100.0, constant=False, use_density=True):
    """Set of indices passing the per-step tests (q-only when ``use_density`` is False)."""
    pool = set()
    for t in range(horizon):
        members = [i for i in range(len(q)) if timesteps[i] == t]
        if not members:
            continue
        alpha = brute_alpha(t + 1, lam, scale, constant)
        q_t = brute_quantile([q[i] for i in members], alpha)
        d_t = brute_quantile([d[i] for i in members], 1.0 - alpha) if use_density else None
        for i in members:
            if q[i] >= q_t and (d_t is None or d[i] <= d_t):
                pool.add(i)
    return pool


def brute_ratio_pool(q, d, timesteps, horizon, lam, scale=100.0, floor=1e-12):
    ratio = [q[i] / max(d[i], floor) for i in range(len(q))]
    return brute_pool(ratio, ratio, timesteps, horizon, lam, scale, use_density=False)


def central_difference_grad(f, theta, h=1e-6):
    """Central finite-difference gradient of scalar ``f`` at flat vector ``theta``."""
    import numpy as np

    theta = np.array(theta, dtype=np.float64)
    g = np.zeros_like(theta)
    for i in range(len(theta)):
        old = theta[i]
        theta[i] = old + h
        up = f(theta)
        theta[i] = old - h
        down = f(theta)
        theta[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def max_relative_error(a, b, floor=1e-8):
    import numpy as np

    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))
