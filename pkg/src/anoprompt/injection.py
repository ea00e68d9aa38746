"""Synthetic anomaly injection with error-guided placement.

Every anomaly type is written as ``x_z = base + m * slope`` where ``m`` is
the effective (positive) magnitude. For seasonal resampling ``base`` and
``slope`` depend on ``m`` through the interpolation cell, so they are rebuilt
for each magnitude value; the expression is still exact and its derivative in
``m`` is ``slope`` away from cell boundaries.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .engine import Tensor
from .errors import ConfigError, UsageError

CONTEXT_HALF_WIDTH = 5
SHAPELET_NOISE = 0.1


class AnomalyType(str, enum.Enum):
    SEASONAL = "seasonal"
    GLOBAL = "global"
    TREND = "trend"
    CONTEXTUAL = "contextual"
    SHAPELET = "shapelet"


TYPES: tuple[AnomalyType, ...] = tuple(AnomalyType)
TYPE_INDEX = {t: i for i, t in enumerate(TYPES)}


def softplus_inverse(y: float) -> float:
    return float(y + math.log(-math.expm1(-y)))


@dataclass
class InjectionSpec:
    kind: AnomalyType
    region: tuple[int, int]
    channels: Sequence[int]
    magnitude_raw: Tensor | float = field(default_factory=lambda: softplus_inverse(1.0))

    def effective_magnitude(self) -> Tensor:
        raw = self.magnitude_raw
        if not isinstance(raw, Tensor):
            raw = Tensor(np.asarray(raw, dtype=np.float64))
        return raw.softplus()


@dataclass
class InjectionResult:
    x_z: Tensor          # [L, C]
    y_z: np.ndarray      # [L]


def local_mean(x: np.ndarray, half_width: int = CONTEXT_HALF_WIDTH) -> np.ndarray:
    """Mean over [j - w, j + w] clipped to the window, per step and channel."""
    L = len(x)
    cs = np.concatenate([np.zeros((1,) + x.shape[1:]), np.cumsum(x, axis=0)])
    j = np.arange(L)
    lo = np.maximum(0, j - half_width)
    hi = np.minimum(L, j + half_width + 1)
    return (cs[hi] - cs[lo]) / (hi - lo)[:, None]


def anomaly_terms(x: np.ndarray, kind: AnomalyType | str, a: int, b: int, channels: Sequence[int],
                  m: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(base, slope)`` with ``x_z = base + m * slope``.

    ``x`` is one window ``[L, C]`` and ``[a, b)`` the anomalous region.
    Channel scale is the population std of the window.
    """
    kind = AnomalyType(kind)
    x = np.asarray(x, dtype=np.float64)
    L = len(x)
    if not 0 <= a < b <= L:
        raise ConfigError(f"invalid region [{a}, {b}) for window length {L}")
    cols = np.asarray(channels, dtype=np.int64)
    if cols.size == 0:
        raise ConfigError("injection needs at least one channel")
    sigma = x.std(axis=0)[cols]
    base = x.copy()
    slope = np.zeros_like(x)
    n = b - a

    if kind is AnomalyType.GLOBAL:
        signs = rng.choice(np.array([-1.0, 1.0]), size=(n, cols.size))
        slope[a:b, cols] = sigma * signs
    elif kind is AnomalyType.CONTEXTUAL:
        mu = local_mean(x)[a:b][:, cols]
        base[a:b, cols] = mu
        slope[a:b, cols] = -(x[a:b][:, cols] - mu)
    elif kind is AnomalyType.SEASONAL:
        if n > 1:
            region = x[a:b][:, cols]
            i = np.arange(n, dtype=np.float64)
            pos = i * (1.0 + m)
            wraps = np.floor(pos / n)
            cell = np.floor(pos - n * wraps).astype(np.int64) % n
            nxt = (cell + 1) % n
            delta = region[nxt] - region[cell]
            frac_const = i - n * wraps - cell            # frac = frac_const + i * m
            base[a:b, cols] = region[cell] + frac_const[:, None] * delta
            slope[a:b, cols] = i[:, None] * delta
    elif kind is AnomalyType.TREND:
        ramp = np.ones(L - a)
        ramp[:n] = (np.arange(n) + 1.0) / n
        slope[a:, cols] = ramp[:, None] * sigma
    elif kind is AnomalyType.SHAPELET:
        region = x[a:b][:, cols]
        base[a:b, cols] = region.mean(axis=0)
        slope[a:b, cols] = SHAPELET_NOISE * sigma * rng.standard_normal((n, cols.size))
    return base, slope


def region_labels(length: int, a: int, b: int) -> np.ndarray:
    y = np.zeros(length, dtype=np.int64)
    y[a:b] = 1
    return y


def inject(x: np.ndarray, spec: InjectionSpec, rng: np.random.Generator) -> InjectionResult:
    """Apply one anomaly; the output is differentiable in ``spec.magnitude_raw``."""
    m = spec.effective_magnitude()
    a, b = spec.region
    base, slope = anomaly_terms(x, spec.kind, a, b, spec.channels, float(m.data), rng)
    dtype = m.dtype
    x_z = Tensor(base.astype(dtype)) + m * Tensor(slope.astype(dtype))
    return InjectionResult(x_z=x_z, y_z=region_labels(len(x), a, b))


# -- placement ---------------------------------------------------------------------

def best_region(step_errors: np.ndarray, region_len: int) -> tuple[int, int]:
    """Contiguous range of ``region_len`` steps with maximal error sum (first on ties)."""
    errs = np.asarray(step_errors, dtype=np.float64)
    if not 1 <= region_len <= len(errs):
        raise ConfigError(f"region length {region_len} invalid for window of {len(errs)}")
    sums = np.lib.stride_tricks.sliding_window_view(errs, region_len).sum(axis=1)
    start = int(np.argmax(sums))
    return start, start + region_len


def locate_injection_region(x: np.ndarray, bundle, region_len: int) -> tuple[int, int]:
    """Region of highest feature-extractor reconstruction error for one window ``[L, C]``."""
    if not getattr(bundle, "fftr_trained", False):
        raise UsageError("feature extractor must be pre-trained before locating injection regions")
    errors = bundle.fftr_step_errors(np.asarray(x)[None])[0]
    return best_region(errors, region_len)


def draw_region_length(window_len: int, rng: np.random.Generator, lo: int = 5, hi: int = 50) -> int:
    upper = min(hi, window_len // 4)
    lower = min(lo, window_len)
    upper = max(upper, lower)
    return int(rng.integers(lower, upper + 1))


@dataclass
class InjectionDraw:
    kind: AnomalyType
    region: tuple[int, int]
    signs_seed: int              # replays the type's random draws for any magnitude
    labels: np.ndarray

    def terms(self, x: np.ndarray, m: float, channels: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(self.signs_seed)
        return anomaly_terms(x, self.kind, self.region[0], self.region[1], channels, m, rng)


def draw_injection(x: np.ndarray, step_errors: np.ndarray, rng: np.random.Generator,
                   region_min: int = 5, region_max: int = 50,
                   kinds: Sequence[AnomalyType] = TYPES) -> InjectionDraw:
    kind = kinds[int(rng.integers(len(kinds)))]
    length = draw_region_length(len(x), rng, region_min, region_max)
    a, b = best_region(step_errors, length)
    seed = int(rng.integers(2**63 - 1))
    return InjectionDraw(kind=kind, region=(a, b), signs_seed=seed, labels=region_labels(len(x), a, b))


def batch_injection(x: np.ndarray, draws: Sequence[InjectionDraw], magnitudes: Tensor) -> Tensor:
    """Differentiable corrupted batch ``[B, L, C]`` from per-window draws.

    ``magnitudes`` holds the five effective magnitudes (one per type).
    """
    m_values = magnitudes.data
    B = len(draws)
    channels = np.arange(x.shape[-1])
    base = np.empty(x.shape, dtype=np.float64)
    slope = np.empty(x.shape, dtype=np.float64)
    type_idx = np.empty(B, dtype=np.int64)
    for i, d in enumerate(draws):
        k = TYPE_INDEX[d.kind]
        type_idx[i] = k
        base[i], slope[i] = d.terms(x[i], float(m_values[k]), channels)
    dtype = magnitudes.dtype
    m_sel = magnitudes[type_idx].reshape(B, 1, 1)
    return Tensor(base.astype(dtype)) + m_sel * Tensor(slope.astype(dtype))


def sample_random_injection(pair, bundle, rng: np.random.Generator, region_min: int = 5,
                            region_max: int = 50):
    """Corrupt both halves of a window pair with independently drawn anomaly types.

    Returns ``(x_in_z, x_out_z, y_in_z, y_out_z)`` as arrays at the bundle's
    current injection magnitudes.
    """
    if not getattr(bundle, "fftr_trained", False):
        raise UsageError("feature extractor must be pre-trained before injection")
    mags = bundle.magnitudes()
    out = []
    labels = []
    for x in (pair.x_in, pair.x_out):
        errs = bundle.fftr_step_errors(np.asarray(x)[None])[0]
        d = draw_injection(x, errs, rng, region_min, region_max)
        out.append(batch_injection(np.asarray(x)[None], [d], mags).data[0])
        labels.append(d.labels)
    return out[0], out[1], labels[0], labels[1]
