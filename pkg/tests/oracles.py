"""Independent reference implementations used as test oracles.

Deliberately naive: plain loops, itertools enumeration, pure-Python math.
Nothing here imports from the package under test.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def l2_loop(a, b) -> float:
    return sum(math.dist(p, q) for p, q in zip(a, b)) / len(a)


def chamfer_loop(a, b) -> float:
    ab = sum(min(math.dist(p, q) for q in b) for p in a) / len(a)
    ba = sum(min(math.dist(q, p) for p in a) for q in b) / len(b)
    return 0.5 * (ab + ba)


def emd_bruteforce(a, b) -> float:
    n = len(a)
    best = math.inf
    for perm in itertools.permutations(range(n)):
        best = min(best, sum(math.dist(a[i], b[j]) for i, j in enumerate(perm)) / n)
    return best


def mmd_loop(real, gen, dist) -> float:
    return sum(min(dist(r, g) for g in gen) for r in real) / len(real)


def radius_loop(real, i, k, dist) -> float:
    others = sorted(dist(real[i], real[j]) for j in range(len(real)) if j != i)
    return others[k - 1]


def coverage_loop(real, gen, k, dist) -> float:
    hit = 0
    for i in range(len(real)):
        r = radius_loop(real, i, k, dist)
        if any(dist(real[i], g) <= r for g in gen):
            hit += 1
    return hit / len(real)


def density_loop(real, gen, k, dist) -> float:
    radii = [radius_loop(real, i, k, dist) for i in range(len(real))]
    total = 0
    for g in gen:
        for i in range(len(real)):
            if dist(real[i], g) <= radii[i]:
                total += 1
    return total / (k * len(gen))


def schedule_scaled_linear(T, b0, b1) -> list[float]:
    if T == 1:
        return [b0]
    return [(math.sqrt(b0) + (t / (T - 1)) * (math.sqrt(b1) - math.sqrt(b0))) ** 2 for t in range(T)]


def schedule_sigmoid(T, b0, b1) -> list[float]:
    if T == 1:
        return [b0]
    return [b0 + (b1 - b0) / (1.0 + math.exp(6.0 - 12.0 * t / (T - 1))) for t in range(T)]


def alpha_bar_product(betas) -> float:
    out = 1.0
    for b in betas:
        out *= 1.0 - b
    return out


def finite_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at every coordinate of ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f(x)
        x[idx] = old - h
        down = f(x)
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def adam_scalar(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        p = p - lr * mh / (math.sqrt(vh) + eps)
    return p


def rft_row_loop(x, W, b, scale=None, shift=None, act=lambda v: max(v, 0.0)):
    """Per-row affine, optional scale-shift, activation, one row at a time."""
    out = []
    for row in x:
        y = [sum(row[i] * W[i][j] for i in range(len(row))) + b[j] for j in range(len(b))]
        if scale is not None:
            y = [y[j] + y[j] * scale[j] + shift[j] for j in range(len(y))]
        out.append([act(v) for v in y])
    return np.array(out)
