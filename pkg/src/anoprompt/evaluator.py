"""Test-time anomaly prediction, ratio thresholding and tolerance-based F1."""
from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.stats import rankdata

from .backbone import ModelBundle
from .config import RunConfig, format_value
from .data import SeriesSet, window_arrays
from .engine import Tensor, no_grad
from .errors import DimensionError, MetricError, UsageError

INF_TOLERANCE = math.inf


@dataclass
class DetectionResult:
    flags: np.ndarray
    threshold: float
    ratio: float


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    tolerance: float
    forecast_mse: float
    threshold: float
    ratio: float
    seed: int
    config: dict = field(default_factory=dict)

    def row(self) -> dict:
        out = {k: v for k, v in dataclasses.asdict(self).items() if k != "config"}
        return out

    def to_text(self) -> str:
        t = "inf" if math.isinf(self.tolerance) else f"{self.tolerance:g}"
        lines = [
            f"seed           {self.seed}",
            f"tolerance t    {t}",
            f"precision      {self.precision:.4f}",
            f"recall         {self.recall:.4f}",
            f"f1             {self.f1:.4f}",
            f"forecast mse   {self.forecast_mse:.6f}",
            f"threshold      {self.threshold:.6g}",
            f"anomaly ratio  {self.ratio:.4f}",
            "config:",
        ]
        lines += [f"  {k} = {format_value(v)}" for k, v in self.config.items()]
        return "\n".join(lines) + "\n"


# -- scoring ---------------------------------------------------------------------------

def test_time_score(bundle: ModelBundle, x_in) -> tuple[np.ndarray, np.ndarray]:
    """Forecast, reconstruct the forecast with the AD path, score each future step.

    Returns ``(x_hat_out [B, L_out, C], scores [B, L_out])``. Forecasts longer
    than the AD window are reconstructed slice by slice.
    """
    with no_grad():
        x = bundle.as_batch(x_in)
        x_hat = bundle.forecast(x).data
        win = bundle.arch.ad_window
        recon = np.empty_like(x_hat)
        for s in range(0, x_hat.shape[1], win):
            recon[:, s:s + win] = bundle.reconstruct(Tensor(x_hat[:, s:s + win])).data
    scores = ((x_hat - recon) ** 2).mean(axis=-1)
    if np.ndim(x_in.data if isinstance(x_in, Tensor) else x_in) == 2:
        return x_hat[0], scores[0]
    return x_hat, scores


test_time_score.__test__ = False   # keep pytest from collecting it by name


def threshold_by_ratio(scores: np.ndarray, ratio: float) -> float:
    """k-th smallest score with k = ceil((1 - r) * T); steps strictly above are flagged."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise UsageError("cannot threshold an empty score series")
    if not 0 < ratio < 1:
        raise UsageError(f"ratio must lie in (0, 1), got {ratio}")
    x = (1.0 - ratio) * s.size
    nearest = round(x)
    k = nearest if abs(x - nearest) < 1e-9 else math.ceil(x)
    k = min(max(k, 1), s.size)
    return float(np.sort(s)[k - 1])


def detect(scores: np.ndarray, threshold: float, ratio: float = float("nan")) -> DetectionResult:
    s = np.asarray(scores, dtype=np.float64)
    return DetectionResult(flags=(s > threshold).astype(np.int64), threshold=float(threshold), ratio=ratio)


def adjust_predictions(pred: np.ndarray, gt: np.ndarray, t: float) -> np.ndarray:
    """Mark every true anomaly within ``t`` steps of a predicted one as detected."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise UsageError(f"prediction and label lengths differ: {pred.shape} vs {gt.shape}")
    T = pred.size
    adjusted = pred.copy()
    if T == 0 or not pred.any():
        return adjusted
    if math.isinf(t) or t >= T:
        near = np.ones(T, dtype=bool)
    else:
        w = int(t)
        cs = np.concatenate([[0], np.cumsum(pred)])
        j = np.arange(T)
        lo = np.maximum(0, j - w)
        hi = np.minimum(T, j + w + 1)
        near = (cs[hi] - cs[lo]) > 0
    adjusted |= gt & near
    return adjusted


def tolerant_f1(pred: np.ndarray, gt: np.ndarray, t: float) -> tuple[float, float, float]:
    """Precision, recall and F1 after tolerance-``t`` adjustment (0/0 -> 0)."""
    gt_b = np.asarray(gt).astype(bool)
    adjusted = adjust_predictions(pred, gt, t)
    tp = int(np.sum(adjusted & gt_b))
    fp = int(np.sum(adjusted & ~gt_b))
    fn = int(np.sum(~adjusted & gt_b))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties averaged)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs both classes")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


# -- whole-split evaluation -----------------------------------------------------------

@dataclass
class ScoredSplit:
    scores: np.ndarray
    labels: np.ndarray
    steps: np.ndarray          # index into the test split for each score
    forecast_mse: float


def score_series(bundle: ModelBundle, series: np.ndarray, labels: np.ndarray,
                 stride: int | None = None, batch_size: int = 64) -> ScoredSplit:
    arch = bundle.arch
    stride = arch.l_out if not stride else stride
    x_in, x_out, y_out, origins = window_arrays(series, labels, arch.l_in, arch.l_out, stride)
    if len(x_in) == 0:
        raise UsageError("test split too short for one prediction window")
    scores, errs = [], []
    for s in range(0, len(x_in), batch_size):
        x_hat, sc = test_time_score(bundle, x_in[s:s + batch_size])
        scores.append(sc)
        errs.append(((x_hat - x_out[s:s + batch_size]) ** 2).reshape(len(sc), -1))
    scores = np.concatenate(scores)
    err = np.concatenate(errs)
    steps = origins[:, None] + arch.l_in + np.arange(arch.l_out)[None, :]
    return ScoredSplit(scores=scores.ravel(), labels=y_out.ravel(), steps=steps.ravel(),
                       forecast_mse=float(err.mean()))


def forecast_mse(bundle: ModelBundle, x_in: np.ndarray, x_out: np.ndarray, batch_size: int = 64) -> float:
    """Mean squared forecast error over all windows, steps and channels."""
    x_in = np.asarray(x_in)
    x_out = np.asarray(x_out)
    if x_in.ndim == 2:
        x_in, x_out = x_in[None], x_out[None]
    if len(x_in) != len(x_out):
        raise DimensionError("x_in and x_out window counts differ")
    total, count = 0.0, 0
    with no_grad():
        for s in range(0, len(x_in), batch_size):
            pred = bundle.forecast(x_in[s:s + batch_size]).data
            diff = pred - x_out[s:s + batch_size]
            total += float(np.sum(diff.astype(np.float64) ** 2))
            count += diff.size
    return total / count


def evaluate(bundle: ModelBundle, series: SeriesSet, cfg: RunConfig, seed: int = 0,
             tolerances: Iterable[float] | None = None,
             scored: ScoredSplit | None = None) -> list[MetricsReport]:
    """Score the test split and report tolerance-F1 (one report per tolerance)."""
    if series.labels_missing:
        raise MetricError("test split has no labels; scores can still be dumped")
    if scored is None:
        scored = score_series(bundle, series.test, series.test_labels, cfg.eval_stride or None)
    ratio = cfg.threshold_ratio or series.anomaly_ratio
    if not 0 < ratio < 1:
        raise MetricError(f"anomaly ratio {ratio} unusable for thresholding")
    threshold = threshold_by_ratio(scored.scores, ratio)
    result = detect(scored.scores, threshold, ratio)
    tolerances = [cfg.arch.tolerance] if tolerances is None else list(tolerances)
    reports = []
    for t in tolerances:
        p, r, f = tolerant_f1(result.flags, scored.labels, t)
        reports.append(MetricsReport(precision=p, recall=r, f1=f, tolerance=float(t),
                                     forecast_mse=scored.forecast_mse, threshold=threshold,
                                     ratio=ratio, seed=seed, config=cfg.flat()))
    return reports


def aggregate(reports: list[MetricsReport]) -> dict[str, tuple[float, float]]:
    """Mean and population std per metric across seeds."""
    out = {}
    for key in ("precision", "recall", "f1", "forecast_mse"):
        vals = np.array([getattr(r, key) for r in reports], dtype=np.float64)
        out[key] = (float(vals.mean()), float(vals.std()))
    return out


def write_reports_csv(path: str | Path, reports: list[MetricsReport]) -> None:
    rows = [r.row() for r in reports]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def write_scores_csv(path: str | Path, scored: ScoredSplit, threshold: float | None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "score", "label", "threshold"])
        thr = "" if threshold is None else repr(float(threshold))
        for step, score, label in zip(scored.steps, scored.scores, scored.labels):
            writer.writerow([int(step), repr(float(score)), int(label), thr])


def aafn_auroc(bundle: ModelBundle, x_in: np.ndarray, x_out: np.ndarray, rng: np.random.Generator,
               region_min: int = 5, region_max: int = 50, batch_size: int = 64) -> float:
    """AUROC of the AAFN separating injected from clean future steps.

    Every held-out pair is corrupted with the training-time injection procedure;
    each future step is one sample (label 1 inside the injected region).
    """
    from .aafn import aafn_forward
    from .injection import batch_injection, draw_injection

    probs, labels = [], []
    with no_grad():
        mags = bundle.magnitudes()
        for s in range(0, len(x_in), batch_size):
            xi, xo = x_in[s:s + batch_size], x_out[s:s + batch_size]
            e_in = bundle.fftr_step_errors(xi)
            e_out = bundle.fftr_step_errors(xo)
            d_in = [draw_injection(xi[i], e_in[i], rng, region_min, region_max) for i in range(len(xi))]
            d_out = [draw_injection(xo[i], e_out[i], rng, region_min, region_max) for i in range(len(xo))]
            xi_z = batch_injection(xi, d_in, mags)
            xo_z = batch_injection(xo, d_out, mags)
            probs.append(aafn_forward(bundle.aafn, Tensor(xo_z.data.astype(bundle.dtype)),
                                      Tensor(xi_z.data.astype(bundle.dtype))).data)
            labels.append(np.stack([d.labels for d in d_out]))
    return auroc(np.concatenate(probs), np.concatenate(labels))
