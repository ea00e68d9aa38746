"""Independent reference implementations used as test oracles.

Nothing here imports the package under test: each oracle re-derives its
quantity from the definition with plain loops.
"""
from __future__ import annotations

import math

import numpy as np


def matmul_loops(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            s = 0.0
            for r in range(k):
                s += a[i][r] * b[r][j]
            out[i][j] = s
    return np.array(out)


def tolerant_f1_bruteforce(pred, gt, t):
    """Literal reading: each predicted point marks every labeled point within t as found."""
    pred = [int(v) for v in pred]
    gt = [int(v) for v in gt]
    T = len(pred)
    adjusted = list(pred)
    for i in range(T):
        if pred[i] != 1:
            continue
        for j in range(T):
            if abs(i - j) <= t and gt[j] == 1:
                adjusted[j] = 1
    tp = sum(1 for j in range(T) if adjusted[j] == 1 and gt[j] == 1)
    fp = sum(1 for j in range(T) if adjusted[j] == 1 and gt[j] == 0)
    fn = sum(1 for j in range(T) if adjusted[j] == 0 and gt[j] == 1)
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def cosine(u, v):
    nu = math.sqrt(sum(x * x for x in u))
    nv = math.sqrt(sum(x * x for x in v))
    if nu < 1e-12 and nv < 1e-12:
        return 0.0
    return sum(x * y for x, y in zip(u, v)) / (max(nu, 1e-12) * max(nv, 1e-12))


def top_n_exhaustive(query, keys, n):
    """Sort every key by (-similarity, index) and keep the first n."""
    scored = [(-cosine(query, k), i) for i, k in enumerate(keys)]
    scored.sort()
    return [i for _, i in scored[:n]]


def kth_smallest_threshold(scores, r):
    T = len(scores)
    k = math.ceil((1 - r) * T - 1e-9)
    k = min(max(k, 1), T)
    return sorted(scores)[k - 1]


def window_origins(T, l_in, l_out, stride):
    out = []
    o = 0
    while o + l_in + l_out <= T:
        out.append(o)
        o += stride
    return out


def best_region_scan(errors, length):
    best, best_a = -math.inf, 0
    for a in range(len(errors) - length + 1):
        s = sum(errors[a:a + length])
        if s > best:
            best, best_a = s, a
    return best_a, best_a + length


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Numeric gradient of scalar ``f`` at ``x`` (``x`` is modified in place and restored)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)
