import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anoprompt.backbone import ModelBundle
from anoprompt.config import ArchConfig, RunConfig
from anoprompt.data import SeriesSet
from anoprompt.errors import MetricError, UsageError
from anoprompt.evaluator import (MetricsReport, adjust_predictions, aggregate, auroc, detect, evaluate,
                                 forecast_mse, score_series, test_time_score, threshold_by_ratio,
                                 tolerant_f1)
from oracles import kth_smallest_threshold, tolerant_f1_bruteforce

ARCH = ArchConfig(l_in=20, l_out=20, d_model=8, n_layers=1, n_heads=2, fftr_layers=1, aafn_heads=2,
                  pool_size=4, top_n=2, prompt_len=2, ad_window=10)


@pytest.fixture(scope="module")
def bundle():
    return ModelBundle(ARCH, 2, seed=0, dtype="float64")


def test_threshold_examples():
    scores = np.arange(1.0, 11.0)
    thr = threshold_by_ratio(scores, 0.2)
    assert thr == 8.0 and detect(scores, thr).flags.sum() == 2
    assert threshold_by_ratio(scores, 1e-9) == 10.0
    assert detect(scores, threshold_by_ratio(scores, 1e-9)).flags.sum() == 0
    same = np.full(7, 0.3)
    assert detect(same, threshold_by_ratio(same, 0.4)).flags.sum() == 0
    with pytest.raises(UsageError):
        threshold_by_ratio(np.array([]), 0.1)
    with pytest.raises(UsageError):
        threshold_by_ratio(scores, 1.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=80, unique=True),
       st.floats(0.001, 0.999))
def test_threshold_fraction_bounds(scores, r):
    s = np.array(scores)
    thr = threshold_by_ratio(s, r)
    assert thr == kth_smallest_threshold(scores, r)
    frac = detect(s, thr).flags.mean()
    assert r - 1 / len(s) - 1e-12 <= frac <= r + 1e-12


def test_detect_examples():
    s = np.array([0.1, 0.5, 0.9])
    assert detect(s, -1).flags.tolist() == [1, 1, 1]
    assert detect(s, 1).flags.tolist() == [0, 0, 0]
    assert np.array_equal(detect(s, 0.5).flags, detect(s, 0.5).flags)


def test_tolerant_f1_examples():
    assert tolerant_f1([0, 1, 1, 0], [0, 1, 1, 0], 0) == (1.0, 1.0, 1.0)
    p, r, f = tolerant_f1([0, 1, 0, 0], [0, 0, 1, 0], 1)
    assert adjust_predictions([0, 1, 0, 0], [0, 0, 1, 0], 1).astype(int).tolist() == [0, 1, 1, 0]
    assert (p, r) == (0.5, 1.0) and f == pytest.approx(2 / 3)
    assert tolerant_f1([0, 0], [0, 0], 3) == (0.0, 0.0, 0.0)
    assert tolerant_f1([1, 0, 0, 0, 0], [0, 0, 0, 0, 1], math.inf) == (0.5, 1.0, pytest.approx(2 / 3))
    with pytest.raises(UsageError):
        tolerant_f1([0, 1], [0, 1, 0], 1)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=0, max_size=64),
       st.sampled_from([0, 1, 3, 50, math.inf]))
def test_tolerant_f1_matches_bruteforce(pairs, t):
    pred = [p for p, _ in pairs]
    gt = [g for _, g in pairs]
    assert tolerant_f1(np.array(pred, dtype=int), np.array(gt, dtype=int), t) == \
        tolerant_f1_bruteforce(pred, gt, t)


def test_auroc_examples():
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert auroc([0.5, 0.5], [0, 1]) == 0.5
    with pytest.raises(MetricError):
        auroc([0.1, 0.2], [1, 1])


def test_score_contract(bundle, rng):
    x_hat, scores = test_time_score(bundle, rng.standard_normal((20, 2)))
    assert x_hat.shape == (20, 2) and scores.shape == (20,) and np.all(scores >= 0)


def test_scores_zero_when_reconstruction_is_exact(rng):
    b = ModelBundle(ARCH, 2, seed=0, dtype="float64")
    b.reconstruct = lambda x: b.as_batch(x)     # identity reconstruction
    _, scores = test_time_score(b, rng.standard_normal((3, 20, 2)))
    assert np.array_equal(scores, np.zeros((3, 20)))


def test_long_horizon_scored_in_slices(rng):
    arch = ArchConfig(**{**ARCH.__dict__, "l_out": 35})
    b = ModelBundle(arch, 2, seed=0, dtype="float64")
    x_hat, scores = test_time_score(b, rng.standard_normal((20, 2)))
    assert scores.shape == (35,)
    manual = ((x_hat[10:20] - b.reconstruct(x_hat[10:20]).data) ** 2).mean(-1)
    assert np.allclose(scores[10:20], manual)


def test_forecast_mse_examples(bundle, rng):
    x_in = rng.standard_normal((5, 20, 2))
    pred = bundle.forecast(x_in).data
    assert forecast_mse(bundle, x_in, pred) == 0.0
    target = rng.standard_normal((5, 20, 2))
    zero = ModelBundle(ARCH, 2, seed=0, dtype="float64")
    for name in zero.component_params("o_F"):
        zero.store[name].data[:] = 0.0
    target = (target - target.mean()) / target.std()
    assert forecast_mse(zero, x_in, target) == pytest.approx(1.0)


def _series(rng, labeled=True):
    test = rng.standard_normal((100, 2))
    labels = np.zeros(100, dtype=int)
    labels[45:52] = 1
    return SeriesSet(train=rng.standard_normal((60, 2)), test=test, test_labels=labels,
                     labels_missing=not labeled)


def test_evaluate_report(bundle, rng):
    cfg = RunConfig(arch=ARCH)
    series = _series(rng)
    reports = evaluate(bundle, series, cfg, seed=4, tolerances=[1, 50])
    assert [r.tolerance for r in reports] == [1.0, 50.0]
    r = reports[0]
    assert 0 <= r.precision <= 1 and 0 <= r.recall <= 1
    if r.precision + r.recall:
        assert r.f1 == pytest.approx(2 * r.precision * r.recall / (r.precision + r.recall))
    assert r.seed == 4 and r.config["l_in"] == 20 and r.ratio == pytest.approx(series.anomaly_ratio)
    assert "seed           4" in r.to_text()
    again = evaluate(bundle, series, cfg, seed=4, tolerances=[1, 50])
    assert [x.row() for x in again] == [x.row() for x in reports]
    assert evaluate(bundle, series, cfg)[0].tolerance == 50.0


def test_evaluate_uses_non_overlapping_windows(bundle, rng):
    scored = score_series(bundle, _series(rng).test, _series(rng).test_labels)
    assert scored.steps.tolist() == list(range(20, 100))


def test_evaluate_needs_labels(bundle, rng):
    with pytest.raises(MetricError):
        evaluate(bundle, _series(rng, labeled=False), RunConfig(arch=ARCH))


def test_aggregate_mean_std():
    reps = [MetricsReport(p, p, p, 50, p, 0, 0.05, s) for s, p in enumerate([0.2, 0.4, 0.6])]
    agg = aggregate(reps)
    assert agg["f1"][0] == pytest.approx(0.4) and agg["f1"][1] == pytest.approx(np.std([0.2, 0.4, 0.6]))
