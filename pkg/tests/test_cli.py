import numpy as np
import pytest

from anoprompt.cli import build_parser, main
from anoprompt.config import OUT_ENV
from anoprompt.data import load_series_set, synth_generate
from anoprompt.config import load_config

TINY = """\
# small model for fast command-line checks
l_in = 40
l_out = 40
ad_window = 40
d_model = 8
n_heads = 2
aafn_heads = 2
n_layers = 1
fftr_layers = 1
pool_size = 4
top_n = 2
prompt_len = 2
epochs = 1
fftr_epochs = 1
train_stride = 40
t_train = 600
t_test = 400
region_max = 10
lr = 1e-3
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.cfg").write_text(TINY)
    return d


@pytest.fixture(scope="module")
def trained(workdir):
    cfg = str(workdir / "tiny.cfg")
    assert main(["train", "--config", cfg, "--seeds", "0,1", "--out", str(workdir / "train")]) == 0
    return workdir / "train"


def test_synth_writes_files_and_round_trips(workdir):
    out = workdir / "data"
    assert main(["synth", "--config", str(workdir / "tiny.cfg"), "--out", str(out)]) == 0
    for name in ("train.csv", "test.csv", "test_labels.csv", "config.txt"):
        assert (out / name).stat().st_size > 0
    back = load_series_set(out / "train.csv", out / "test.csv", out / "test_labels.csv")
    ref = synth_generate(load_config(workdir / "tiny.cfg").synth, 0)
    assert np.array_equal(back.test, ref.test) and np.array_equal(back.test_labels, ref.test_labels)
    lines = (out / "test_labels.csv").read_text().splitlines()
    assert len(lines) == len((out / "test.csv").read_text().splitlines())
    first = (out / "test.csv").read_bytes()
    assert main(["synth", "--config", str(workdir / "tiny.cfg"), "--out", str(out)]) == 0
    assert (out / "test.csv").read_bytes() == first


def test_train_writes_checkpoints_and_echo(trained):
    for seed in (0, 1):
        run = trained / f"seed{seed}"
        assert (run / "checkpoint.npz").exists() and (run / "train_log.csv").exists()
        assert "epochs = 1" in (run / "config.txt").read_text()


def test_eval_sweep_and_aggregate(workdir, trained, capsys):
    out = workdir / "eval"
    code = main(["eval", "--config", str(workdir / "tiny.cfg"), "--t", "1,5,10,50", "--out", str(out),
                 str(trained)])
    assert code == 0
    rows = (out / "seed0" / "metrics.csv").read_text().splitlines()
    assert len(rows) == 1 + 4
    summary = (out / "summary.txt").read_text()
    assert "t=50 seeds=0,1" in summary and "+-" in summary
    assert (out / "config.txt").exists() and (out / "seed0" / "config.txt").exists()
    assert "t=1 " in capsys.readouterr().out


def test_eval_deterministic(workdir, trained):
    outs = []
    for name in ("a", "b"):
        main(["eval", "--config", str(workdir / "tiny.cfg"), "--out", str(workdir / name),
              str(trained / "seed0" / "checkpoint.npz")])
        outs.append((workdir / name / "metrics.csv").read_bytes() + (workdir / name / "scores.csv").read_bytes())
    assert outs[0] == outs[1]


def test_eval_missing_labels_emits_scores(workdir, trained, capsys):
    data = workdir / "nolabel"
    main(["synth", "--config", str(workdir / "tiny.cfg"), "--out", str(data)])
    out = workdir / "eval_nolabel"
    code = main(["eval", "--config", str(workdir / "tiny.cfg"), "--out", str(out),
                 "--train-path", str(data / "train.csv"), "--test-path", str(data / "test.csv"),
                 str(trained / "seed0")])
    assert code != 0
    assert (out / "scores.csv").exists()
    assert "MetricError" in capsys.readouterr().err


def test_eval_rejects_horizon_mismatch(workdir, trained):
    assert main(["eval", "--config", str(workdir / "tiny.cfg"), "--lout", "200",
                 "--out", str(workdir / "x"), str(trained)]) != 0


@pytest.mark.parametrize("l_out", ["100", "200", "400"])
def test_lout_override_accepted(l_out):
    args = build_parser().parse_args(["train", "--lout", l_out])
    from anoprompt.cli import build_config
    assert build_config(args).arch.l_out == int(l_out)


def test_ablation_flag_parses():
    from anoprompt.cli import build_config
    cfg = build_config(build_parser().parse_args(["train", "--ablate", "no_aaf,no_sap"]))
    assert cfg.train.ablate == frozenset({"no_aaf", "no_sap"})
    assert main(["train", "--ablate", "no_such_thing"]) != 0


def test_flag_beats_file_beats_default(workdir):
    from anoprompt.cli import build_config
    cfg = build_config(build_parser().parse_args(["train", "--config", str(workdir / "tiny.cfg"),
                                                  "--set", "epochs=4"]))
    assert cfg.train.epochs == 4 and cfg.arch.d_model == 8 and cfg.train.batch_size == 16


def test_unknown_config_key_rejected(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("epochs = 1\nwidth = 3\n")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) != 0


def test_env_output_root(monkeypatch, tmp_path, workdir):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "envroot"))
    assert main(["synth", "--config", str(workdir / "tiny.cfg")]) == 0
    assert (tmp_path / "envroot" / "test.csv").exists()


def test_plot_scores_and_loss(workdir, trained):
    main(["eval", "--config", str(workdir / "tiny.cfg"), "--out", str(workdir / "p"), str(trained / "seed0")])
    svg = workdir / "scores.svg"
    assert main(["plot", str(workdir / "p" / "scores.csv"), "--out", str(svg)]) == 0
    text = svg.read_text()
    assert text.lstrip().startswith("<?xml") and "</svg>" in text
    thr = (workdir / "p" / "metrics.csv").read_text().splitlines()[1].split(",")[5]
    assert f"threshold {float(thr):.4g}" in text
    loss_svg = workdir / "loss.svg"
    assert main(["plot", str(trained / "seed0" / "train_log.csv"), "--out", str(loss_svg)]) == 0
    assert loss_svg.stat().st_size > 0


def test_plot_errors(tmp_path, capsys):
    empty = tmp_path / "empty.csv"
    empty.write_text("step,score,label,threshold\n")
    assert main(["plot", str(empty), "--out", str(tmp_path / "e.svg")]) != 0
    assert not (tmp_path / "e.svg").exists()
    bad = tmp_path / "bad.csv"
    bad.write_text("step,score\n0,0.1\n1,oops\n")
    assert main(["plot", str(bad), "--out", str(tmp_path / "b.svg")]) != 0
    assert "line 3" in capsys.readouterr().err
