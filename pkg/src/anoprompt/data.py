"""CSV loading, standard scaling, windowing and synthetic series."""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ANOMALY_TYPES, SynthConfig
from .errors import ConfigError, ParseError

STD_FLOOR = 1e-8


class DataWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SeriesSet:
    train: np.ndarray                  # [T_train, C]
    test: np.ndarray                   # [T_test, C]
    test_labels: np.ndarray            # [T_test] of {0, 1}
    train_labels: np.ndarray | None = None
    labels_missing: bool = False

    def __post_init__(self):
        object.__setattr__(self, "train", np.array(self.train, dtype=np.float64))
        object.__setattr__(self, "test", np.array(self.test, dtype=np.float64))
        object.__setattr__(self, "test_labels", np.array(self.test_labels, dtype=np.int64))
        if self.train_labels is not None:
            object.__setattr__(self, "train_labels", np.array(self.train_labels, dtype=np.int64))
        if self.train.ndim != 2 or self.test.ndim != 2:
            raise ParseError("series must be 2-D [T, C]")
        if self.train.shape[1] != self.test.shape[1] or self.train.shape[1] < 1:
            raise ParseError("train and test must share a channel count >= 1")
        if len(self.test_labels) != len(self.test):
            raise ParseError("test label length differs from test length")
        if not np.isin(self.test_labels, (0, 1)).all():
            raise ParseError("labels must be 0/1")
        if self.train_labels is None:
            object.__setattr__(self, "train_labels", np.zeros(len(self.train), dtype=np.int64))
        for arr in (self.train, self.test, self.test_labels, self.train_labels):
            arr.setflags(write=False)

    @property
    def channels(self) -> int:
        return self.train.shape[1]

    @property
    def anomaly_ratio(self) -> float:
        return float(np.mean(self.test_labels)) if len(self.test_labels) else 0.0


@dataclass(frozen=True)
class WindowPair:
    x_in: np.ndarray     # [L_in, C]
    x_out: np.ndarray    # [L_out, C]
    y_out: np.ndarray    # [L_out]
    origin: int


@dataclass(frozen=True)
class ScalerStats:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def inverse(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean


# -- CSV -------------------------------------------------------------------------

def _read_rows(path: str | Path) -> list[list[str]]:
    text = Path(path).read_text(encoding="utf-8")
    return [row for row in csv.reader(io.StringIO(text)) if row and any(c.strip() for c in row)]


def _is_numeric_row(row: list[str]) -> bool:
    try:
        [float(c) for c in row]
    except ValueError:
        return False
    return True


def read_values_csv(path: str | Path) -> np.ndarray:
    rows = _read_rows(path)
    if not rows:
        raise ParseError(f"{path}: empty file")
    start = 0 if _is_numeric_row(rows[0]) else 1
    width = len(rows[start]) if start < len(rows) else 0
    out = []
    for i, row in enumerate(rows[start:], start=start + 1):
        if len(row) != width:
            raise ParseError(f"{path}: line {i}: expected {width} columns, got {len(row)}")
        try:
            out.append([float(c) for c in row])
        except ValueError as exc:
            raise ParseError(f"{path}: line {i}: non-numeric cell ({exc})") from None
    if not out:
        raise ParseError(f"{path}: no data rows")
    return np.asarray(out, dtype=np.float64)


def read_labels_csv(path: str | Path) -> np.ndarray:
    rows = _read_rows(path)
    start = 0 if rows and _is_numeric_row(rows[0]) else 1
    labels = []
    for i, row in enumerate(rows[start:], start=start + 1):
        if len(row) != 1:
            raise ParseError(f"{path}: line {i}: expected one label per row")
        try:
            value = int(float(row[0]))
        except ValueError:
            raise ParseError(f"{path}: line {i}: non-numeric label {row[0]!r}") from None
        if value not in (0, 1):
            raise ParseError(f"{path}: line {i}: label must be 0 or 1, got {value}")
        labels.append(value)
    return np.asarray(labels, dtype=np.int64)


def load_csv(values_path: str | Path, labels_path: str | Path | None = None) -> tuple[np.ndarray, np.ndarray, bool]:
    """Parse one values file and optional labels file.

    Returns ``(values [T, C], labels [T], labels_missing)``. Missing labels
    come back as zeros with the flag set.
    """
    values = read_values_csv(values_path)
    if labels_path is None:
        warnings.warn(f"{values_path}: no labels given, using all-zero labels", DataWarning, stacklevel=2)
        return values, np.zeros(len(values), dtype=np.int64), True
    labels = read_labels_csv(labels_path)
    if len(labels) != len(values):
        if len(labels) < len(values):
            where = f"line {len(labels)}: labels end here"
        else:
            where = f"line {len(values) + 1}: extra label"
        raise ParseError(f"{labels_path}: {where} ({len(labels)} labels for {len(values)} value rows)")
    return values, labels, False


def load_series_set(train_path, test_path, test_labels_path=None) -> SeriesSet:
    train = read_values_csv(train_path)
    test, labels, missing = load_csv(test_path, test_labels_path or None)
    return SeriesSet(train=train, test=test, test_labels=labels, labels_missing=missing)


def write_values_csv(path: str | Path, values: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        for row in np.asarray(values):
            writer.writerow([repr(float(v)) for v in row])


def write_labels_csv(path: str | Path, labels: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{int(v)}\n" for v in labels)


# -- scaling and windows --------------------------------------------------------

def standard_scale(series: SeriesSet) -> tuple[SeriesSet, ScalerStats]:
    """Fit per-channel mean/std (population) on train; apply to both splits."""
    if len(series.train) == 0:
        raise ParseError("cannot scale an empty train split")
    mean = series.train.mean(axis=0)
    std = np.maximum(series.train.std(axis=0), STD_FLOOR)
    stats = ScalerStats(mean=mean, std=std)
    scaled = SeriesSet(
        train=stats.transform(series.train),
        test=stats.transform(series.test),
        test_labels=series.test_labels.copy(),
        train_labels=series.train_labels.copy(),
        labels_missing=series.labels_missing,
    )
    return scaled, stats


def window_count(T: int, l_in: int, l_out: int, stride: int) -> int:
    if T < l_in + l_out:
        return 0
    return (T - l_in - l_out) // stride + 1


def window_arrays(series: np.ndarray, labels: np.ndarray | None, l_in: int, l_out: int,
                  stride: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Stacked windows: ``(x_in [n, L_in, C], x_out [n, L_out, C], y_out [n, L_out], origins [n])``."""
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    n = window_count(len(series), l_in, l_out, stride)
    C = series.shape[1]
    if n == 0:
        warnings.warn(f"series of length {len(series)} too short for L_in+L_out={l_in + l_out}",
                      DataWarning, stacklevel=2)
        return (np.zeros((0, l_in, C)), np.zeros((0, l_out, C)),
                np.zeros((0, l_out), dtype=np.int64), np.zeros(0, dtype=np.int64))
    origins = np.arange(n) * stride
    idx_in = origins[:, None] + np.arange(l_in)[None, :]
    idx_out = origins[:, None] + l_in + np.arange(l_out)[None, :]
    labels = np.zeros(len(series), dtype=np.int64) if labels is None else np.asarray(labels)
    return series[idx_in], series[idx_out], labels[idx_out], origins


def make_windows(series: np.ndarray, labels: np.ndarray | None, l_in: int, l_out: int,
                 stride: int) -> list[WindowPair]:
    x_in, x_out, y_out, origins = window_arrays(series, labels, l_in, l_out, stride)
    return [WindowPair(x_in[i], x_out[i], y_out[i], int(origins[i])) for i in range(len(origins))]


# -- synthetic data --------------------------------------------------------------

def synth_base(config: SynthConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Clean sum-of-sinusoids train and test series (no anomalies)."""
    rng = np.random.default_rng([seed, 0])
    C = config.synth_channels
    T = config.t_train + config.t_test
    t = np.arange(T, dtype=np.float64)
    out = np.zeros((T, C))
    for c in range(C):
        for k, (period, amp) in enumerate(zip(config.periods, config.amplitudes)):
            # channels get their own phases and a mild period stretch
            stretch = 1.0 + 0.1 * c * (k + 1) / len(config.periods)
            phase = rng.uniform(0, 2 * np.pi)
            out[:, c] += amp * np.sin(2 * np.pi * t / (period * stretch) + phase)
    out += config.noise * rng.standard_normal(out.shape)
    return out[: config.t_train], out[config.t_train:]


def _place_segments(T: int, target: int, lo: int, hi: int, rng: np.random.Generator,
                    margin: int) -> list[tuple[int, int]]:
    taken = np.zeros(T, dtype=bool)
    segments: list[tuple[int, int]] = []
    remaining = target
    attempts = 0
    while remaining > 0 and attempts < 10_000:
        attempts += 1
        length = int(rng.integers(lo, hi + 1))
        if remaining - length < lo:
            # last segment absorbs the remainder so the labeled count is exact
            length = remaining if remaining <= hi else remaining - lo
        first = margin
        last = T - length
        if last < first:
            break
        a = int(rng.integers(first, last + 1))
        b = a + length
        guard = slice(max(0, a - 5), min(T, b + 5))
        if taken[guard].any():
            continue
        taken[a:b] = True
        segments.append((a, b))
        remaining -= length
    return sorted(segments)


def synth_generate(config: SynthConfig, seed: int) -> SeriesSet:
    """Synthetic train (anomaly-free) and test (with labeled anomaly segments)."""
    from .injection import AnomalyType, anomaly_terms

    config.validate()
    train, test = synth_base(config, seed)
    rng = np.random.default_rng([seed, 1])
    target = int(round(config.anomaly_ratio * config.t_test))
    context = 50
    segments = _place_segments(config.t_test, target, config.seg_min, config.seg_max, rng, margin=context)
    kinds = [k for k in ANOMALY_TYPES if config.anomaly_types.get(k, 0) > 0]
    weights = np.array([config.anomaly_types[k] for k in kinds], dtype=np.float64)
    weights /= weights.sum()
    labels = np.zeros(config.t_test, dtype=np.int64)
    test = test.copy()
    all_channels = np.arange(config.synth_channels)
    for a, b in segments:
        kind = AnomalyType(kinds[int(rng.choice(len(kinds), p=weights))])
        m = float(rng.uniform(config.anomaly_mag_min, config.anomaly_mag_max))
        start = max(0, a - context)
        window = test[start:b]
        base, slope = anomaly_terms(window, kind, a - start, b - start, all_channels, m, rng)
        test[start:b] = base + m * slope
        labels[a:b] = 1
    return SeriesSet(train=train, test=test, test_labels=labels)
