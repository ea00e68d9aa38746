import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anoprompt.config import SynthConfig
from anoprompt.data import (DataWarning, SeriesSet, load_csv, load_series_set, make_windows, standard_scale,
                            synth_generate, window_arrays, window_count, write_labels_csv, write_values_csv)
from anoprompt.errors import ConfigError, ParseError
from oracles import window_origins


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_csv_basic(tmp_path):
    v = _write(tmp_path, "v.csv", "1,2\n3,4\n5,6\n")
    l = _write(tmp_path, "l.csv", "0\n1\n0\n")
    values, labels, missing = load_csv(v, l)
    assert values.shape == (3, 2) and np.array_equal(labels, [0, 1, 0]) and not missing


def test_load_csv_header_detected(tmp_path):
    v = _write(tmp_path, "v.csv", "a,b\n1,2\n3,4\n")
    values, _, _ = load_csv(v, _write(tmp_path, "l.csv", "0\n0\n"))
    assert values.tolist() == [[1, 2], [3, 4]]


def test_load_csv_missing_labels_warns(tmp_path):
    v = _write(tmp_path, "v.csv", "1\n2\n")
    with pytest.warns(DataWarning):
        _, labels, missing = load_csv(v)
    assert missing and labels.tolist() == [0, 0]


def test_label_length_mismatch_reports_line(tmp_path):
    v = _write(tmp_path, "v.csv", "1,2\n3,4\n5,6\n")
    l = _write(tmp_path, "l.csv", "0\n1\n")
    with pytest.raises(ParseError, match="line 2"):
        load_csv(v, l)


@pytest.mark.parametrize("text,line", [("1,2\n3\n", "line 2"), ("1,2\n3,x\n", "line 2")])
def test_bad_rows_report_line(tmp_path, text, line):
    with pytest.raises(ParseError, match=line):
        load_csv(_write(tmp_path, "v.csv", text), _write(tmp_path, "l.csv", "0\n0\n"))


def test_csv_round_trip(tmp_path):
    s = synth_generate(SynthConfig(t_train=300, t_test=300), 3)
    write_values_csv(tmp_path / "tr.csv", s.train)
    write_values_csv(tmp_path / "te.csv", s.test)
    write_labels_csv(tmp_path / "lb.csv", s.test_labels)
    back = load_series_set(tmp_path / "tr.csv", tmp_path / "te.csv", tmp_path / "lb.csv")
    assert np.array_equal(back.train, s.train) and np.array_equal(back.test, s.test)
    assert np.array_equal(back.test_labels, s.test_labels)


def test_series_set_is_immutable():
    s = SeriesSet(train=np.zeros((3, 1)), test=np.zeros((2, 1)), test_labels=[0, 1])
    with pytest.raises(ValueError):
        s.train[0, 0] = 1.0
    with pytest.raises(ParseError):
        SeriesSet(train=np.zeros((3, 1)), test=np.zeros((2, 1)), test_labels=[0])


def test_scale_examples():
    s = SeriesSet(train=np.array([[2.0, 0.0], [2.0, 2.0]]), test=np.array([[2.0, 4.0]]), test_labels=[0])
    scaled, stats = standard_scale(s)
    assert np.array_equal(scaled.train[:, 0], [0.0, 0.0])
    assert np.allclose(stats.mean[1], 1.0) and np.allclose(stats.std[1], 1.0)
    assert np.allclose(scaled.train[:, 1], [-1.0, 1.0])
    # test split uses train statistics: (4 - 1) / 1
    assert scaled.test[0, 1] == pytest.approx(3.0)


def test_scale_round_trip(rng):
    s = SeriesSet(train=rng.standard_normal((50, 3)) * 5 + 2, test=rng.standard_normal((20, 3)),
                  test_labels=np.zeros(20))
    scaled, stats = standard_scale(s)
    assert np.max(np.abs(stats.inverse(scaled.test) - s.test)) <= 1e-9


def test_window_examples():
    x = np.arange(300, dtype=float)[:, None]
    assert len(make_windows(x, None, 100, 100, 100)) == 2
    assert len(make_windows(x[:200], None, 100, 100, 1)) == 1
    labels = (np.arange(300) % 7 == 0).astype(int)
    for w in make_windows(x, labels, 100, 100, 37):
        assert np.array_equal(w.y_out, labels[w.origin + 100:w.origin + 200])
        assert w.x_out[0, 0] == w.origin + 100 and w.x_in[-1, 0] == w.origin + 99


def test_short_series_warns_and_returns_empty():
    with pytest.warns(DataWarning):
        assert make_windows(np.zeros((150, 2)), None, 100, 100, 1) == []


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 400), st.integers(1, 60), st.integers(1, 60), st.integers(1, 50))
def test_window_count_matches_enumeration(T, l_in, l_out, stride):
    expected = window_origins(T, l_in, l_out, stride)
    assert window_count(T, l_in, l_out, stride) == len(expected)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DataWarning)
        _, _, _, origins = window_arrays(np.zeros((T, 1)), None, l_in, l_out, stride)
    assert origins.tolist() == expected


def test_window_rejects_bad_stride():
    with pytest.raises(ConfigError):
        window_arrays(np.zeros((10, 1)), None, 2, 2, 0)


def test_synth_deterministic_and_ratio():
    cfg = SynthConfig()
    a, b = synth_generate(cfg, 7), synth_generate(cfg, 7)
    assert np.array_equal(a.test, b.test) and np.array_equal(a.test_labels, b.test_labels)
    assert 80 <= a.test_labels.sum() <= 120
    assert a.train_labels.sum() == 0 and a.channels == 2
    assert a.train.shape == (8000, 2) and a.test.shape == (2000, 2)


@pytest.mark.parametrize("seed", range(5))
def test_synth_ratio_within_bounds(seed):
    for r in (0.01, 0.05, 0.2):
        s = synth_generate(SynthConfig(anomaly_ratio=r), seed)
        assert abs(s.anomaly_ratio - r) <= 0.2 * r


def test_synth_rejects_bad_ratio():
    with pytest.raises(ConfigError):
        synth_generate(SynthConfig(anomaly_ratio=0.6), 0)
    with pytest.raises(ConfigError):
        synth_generate(SynthConfig(anomaly_ratio=0.0), 0)


def test_synth_global_only_segments_are_spikes():
    from anoprompt.data import synth_base

    cfg = SynthConfig(anomaly_types={"global": 1.0})
    s = synth_generate(cfg, 1)
    _, base = synth_base(cfg, 1)
    lab = s.test_labels.astype(bool)
    diff = s.test - base
    assert np.all(diff[~lab] == 0)
    # a global spike moves each step by +-sigma*m: one magnitude per segment and channel
    edges = np.flatnonzero(np.diff(np.r_[0, lab.astype(int), 0]))
    for a, b in zip(edges[::2], edges[1::2]):
        mag = np.abs(diff[a:b])
        assert np.allclose(mag, mag[0]) and np.all(mag[0] > 0)
