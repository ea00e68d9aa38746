"""Command-line entry point: ``synth``, ``train``, ``eval`` and ``plot`` subcommands."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, parse_config_text
from .data import (ScalerStats, SeriesSet, load_series_set, standard_scale, synth_generate,
                   write_labels_csv, write_values_csv)
from .errors import (ConfigError, DimensionError, DomainError, MetricError, NumericError, ParseError,
                     TrainingError, UsageError)
from .evaluator import (MetricsReport, aggregate, evaluate, score_series, write_reports_csv,
                        write_scores_csv)
from .trainer import train_pipeline

log = logging.getLogger("anoprompt")

KNOWN_ERRORS = (ConfigError, ParseError, UsageError, TrainingError, MetricError, DimensionError,
                DomainError, NumericError, OSError)


# -- shared helpers ----------------------------------------------------------------

def _split_list(text: str) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


def _overrides(args: argparse.Namespace) -> dict:
    out = {}
    for pair in getattr(args, "set", None) or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        out[key.strip()] = value.strip()
    if getattr(args, "seed", None) is not None:
        out["seeds"] = str(args.seed)
    if getattr(args, "seeds", None):
        out["seeds"] = args.seeds
    if getattr(args, "out", None):
        out["out_dir"] = args.out
    if getattr(args, "ablate", None) is not None:
        out["ablate"] = args.ablate
    if getattr(args, "t", None):
        out["tolerance"] = _split_list(args.t)[0]
    if getattr(args, "lout", None) is not None:
        out["l_out"] = str(args.lout)
    for key in ("train_path", "test_path", "test_labels_path"):
        if getattr(args, key, None):
            out[key] = getattr(args, key)
    return out


def build_config(args: argparse.Namespace) -> RunConfig:
    return load_config(args.config, _overrides(args))


def write_echo(directory: Path, cfg: RunConfig, extra: dict | None = None) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "config.txt"
    text = cfg.to_text()
    if extra:
        text += "".join(f"# {k} = {v}\n" for k, v in extra.items())
    path.write_text(text, encoding="utf-8")
    return path


def load_dataset(cfg: RunConfig) -> SeriesSet:
    """Raw (unscaled) series from the configured CSV paths, or synthesized."""
    if cfg.train_path or cfg.test_path:
        if not (cfg.train_path and cfg.test_path):
            raise ConfigError("both train_path and test_path are needed for CSV input")
        return load_series_set(cfg.train_path, cfg.test_path, cfg.test_labels_path or None)
    return synth_generate(cfg.synth, cfg.data_seed)


def scale_with(series: SeriesSet, stats: ScalerStats) -> SeriesSet:
    return SeriesSet(train=stats.transform(series.train), test=stats.transform(series.test),
                     test_labels=series.test_labels.copy(), train_labels=series.train_labels.copy(),
                     labels_missing=series.labels_missing)


# -- synth ----------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, out_dir: Path) -> list[Path]:
    series = synth_generate(cfg.synth, cfg.data_seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / "train.csv", out_dir / "test.csv", out_dir / "test_labels.csv"]
    write_values_csv(paths[0], series.train)
    write_values_csv(paths[1], series.test)
    write_labels_csv(paths[2], series.test_labels)
    paths.append(write_echo(out_dir, cfg, {"achieved_anomaly_ratio": f"{series.anomaly_ratio:.6f}"}))
    return paths


# -- train ------------------------------------------------------------------------------

def train_one(cfg: RunConfig, seed: int, out_dir: Path) -> Path:
    raw = load_dataset(cfg)
    series, stats = standard_scale(raw)
    run_dir = out_dir / f"seed{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    bundle, result = train_pipeline(series, cfg, seed)
    # output location and sibling seeds stay out of the checkpoint so same-seed runs match bytewise
    stored = parse_config_text(cfg.to_text())
    stored.update({"out_dir": "", "seeds": str(seed)})
    extra = {
        "scaler_mean": stats.mean.tolist(),
        "scaler_std": stats.std.tolist(),
        "config": stored.to_text(),
        "train_seed": seed,
        "probe_kl": result.pretrain.probe_kl,
    }
    ckpt = save_checkpoint(bundle, run_dir / "checkpoint.npz", extra)
    result.log.write_csv(run_dir / "train_log.csv")
    write_echo(run_dir, cfg, {"seed": seed})
    return ckpt


def _train_job(args):
    text, seed, out_dir = args
    return train_one(parse_config_text(text), seed, Path(out_dir))


def cmd_train(cfg: RunConfig, jobs: int = 1) -> list[Path]:
    out_dir = cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    write_echo(out_dir, cfg)
    if jobs > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_train_job, [(cfg.to_text(), s, str(out_dir)) for s in cfg.seeds]))
    return [train_one(cfg, seed, out_dir) for seed in cfg.seeds]


# -- eval ----------------------------------------------------------------------------------

def _scaler_from(meta: dict) -> ScalerStats:
    extra = meta.get("extra") or {}
    if "scaler_mean" not in extra:
        raise UsageError("checkpoint carries no scaler statistics")
    return ScalerStats(mean=np.asarray(extra["scaler_mean"]), std=np.asarray(extra["scaler_std"]))


def eval_one(cfg: RunConfig, checkpoint: Path, out_dir: Path, tolerances: Sequence[float],
             dump_scores: bool = True) -> list[MetricsReport]:
    bundle, meta = load_checkpoint(checkpoint)
    if bundle.arch.l_out != cfg.arch.l_out:
        raise UsageError(f"checkpoint predicts L_out={bundle.arch.l_out}, config asks for {cfg.arch.l_out}")
    series = scale_with(load_dataset(cfg), _scaler_from(meta))
    if series.channels != bundle.channels:
        raise DimensionError(f"dataset has {series.channels} channels, checkpoint expects {bundle.channels}")
    seed = int(meta.get("extra", {}).get("train_seed", meta["seed"]))
    out_dir.mkdir(parents=True, exist_ok=True)
    write_echo(out_dir, cfg, {"checkpoint": str(checkpoint), "seed": seed})
    scored = score_series(bundle, series.test, series.test_labels, cfg.eval_stride or None)
    if series.labels_missing:
        if dump_scores:
            write_scores_csv(out_dir / "scores.csv", scored, None)
        raise MetricError("test labels missing: scores written, metrics not computed")
    reports = evaluate(bundle, series, cfg, seed, tolerances, scored=scored)
    if dump_scores:
        write_scores_csv(out_dir / "scores.csv", scored, reports[0].threshold)
    write_reports_csv(out_dir / "metrics.csv", reports)
    (out_dir / "report.txt").write_text("\n".join(r.to_text() for r in reports), encoding="utf-8")
    return reports


def format_summary(reports: list[MetricsReport]) -> str:
    by_t: dict[float, list[MetricsReport]] = {}
    for r in reports:
        by_t.setdefault(r.tolerance, []).append(r)
    lines = []
    for t, group in by_t.items():
        agg = aggregate(group)
        seeds = ",".join(str(r.seed) for r in group)
        lines.append(f"t={t:g} seeds={seeds}")
        for key, (mean, std) in agg.items():
            lines.append(f"  {key:<13} {mean:.4f} +- {std:.4f}")
    return "\n".join(lines) + "\n"


def cmd_eval(cfg: RunConfig, checkpoints: Sequence[Path], tolerances: Sequence[float] | None = None,
             dump_scores: bool = True) -> list[MetricsReport]:
    out_dir = cfg.output_dir
    tolerances = list(tolerances) if tolerances else [cfg.arch.tolerance]
    reports: list[MetricsReport] = []
    for ckpt in checkpoints:
        ckpt = Path(ckpt)
        sub = out_dir / ckpt.parent.name if len(checkpoints) > 1 else out_dir
        reports += eval_one(cfg, ckpt, sub, tolerances, dump_scores)
    if len(checkpoints) > 1:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_reports_csv(out_dir / "metrics_all.csv", reports)
        (out_dir / "summary.txt").write_text(format_summary(reports), encoding="utf-8")
        write_echo(out_dir, cfg)
    return reports


def find_checkpoints(paths: Sequence[str]) -> list[Path]:
    found = []
    for p in map(Path, paths):
        if p.is_dir():
            direct = p / "checkpoint.npz"
            found += [direct] if direct.exists() else sorted(p.glob("seed*/checkpoint.npz"))
        elif p.exists():
            found.append(p)
        else:
            raise UsageError(f"checkpoint not found: {p}")
    if not found:
        raise UsageError(f"no checkpoints under {', '.join(paths)}")
    return found


# -- plot ------------------------------------------------------------------------------------

def _read_table(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty file")
    return rows[0], rows[1:]


def _column_floats(path: Path, header: list[str], rows: list[list[str]], name: str,
                   allow_blank: bool = False) -> np.ndarray:
    col = header.index(name)
    out = []
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise ParseError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
        cell = row[col].strip()
        if not cell and allow_blank:
            out.append(np.nan)
            continue
        try:
            out.append(float(cell))
        except ValueError:
            raise ParseError(f"{path}: line {lineno}: non-numeric {name} {cell!r}") from None
    return np.asarray(out, dtype=np.float64)


def _shade_regions(ax, steps: np.ndarray, labels: np.ndarray) -> None:
    on = labels > 0.5
    start = None
    for i, flag in enumerate(on):
        if flag and start is None:
            start = i
        if start is not None and (not flag or i == len(on) - 1):
            end = i if not flag else i + 1
            ax.axvspan(steps[start] - 0.5, steps[end - 1] + 0.5, color="tab:red", alpha=0.2, lw=0)
            start = None


def cmd_plot(csv_path: Path, out_svg: Path, threshold: float | None = None) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    header, rows = _read_table(csv_path)
    if not rows:
        raise ParseError(f"{csv_path}: no data rows to plot")
    fig, ax = plt.subplots(figsize=(10, 3.5))
    try:
        if "score" in header:
            scores = _column_floats(csv_path, header, rows, "score")
            steps = (_column_floats(csv_path, header, rows, "step") if "step" in header
                     else np.arange(len(scores), dtype=np.float64))
            if "label" in header:
                _shade_regions(ax, steps, _column_floats(csv_path, header, rows, "label"))
            ax.plot(steps, scores, lw=0.8, color="tab:blue", label="score")
            if threshold is None and "threshold" in header:
                thr = _column_floats(csv_path, header, rows, "threshold", allow_blank=True)
                threshold = None if np.isnan(thr).all() else float(np.nanmax(thr))
            if threshold is not None:
                ax.axhline(threshold, color="black", ls="--", lw=1.0, label=f"threshold {threshold:.4g}")
            ax.set_xlabel("test step")
            ax.set_ylabel("anomaly score")
        elif "phase" in header and "step" in header:
            terms = [h for h in header if h not in ("phase", "epoch", "step")]
            phases = [row[header.index("phase")] for row in rows]
            for term in terms:
                vals = _column_floats(csv_path, header, rows, term, allow_blank=True)
                if np.isnan(vals).all():
                    continue
                for ph in dict.fromkeys(phases):
                    mask = np.array([p == ph for p in phases]) & ~np.isnan(vals)
                    if mask.any():
                        ax.plot(np.flatnonzero(mask), vals[mask], lw=0.8, label=f"{ph} {term}")
            ax.set_xlabel("optimizer step (all phases)")
            ax.set_ylabel("loss")
        else:
            raise ParseError(f"{csv_path}: line 1: need a 'score' column or 'phase' and 'step' columns")
        ax.legend(loc="upper right", fontsize=7)
        fig.tight_layout()
        out_svg.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out_svg, format="svg")
    finally:
        plt.close(fig)
    return out_svg


# -- argument parsing ----------------------------------------------------------------------

def _add_shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="single seed (shorthand for --seeds N)")
    p.add_argument("--seeds", help="comma-separated seed list")
    p.add_argument("--out", help="output directory (default $ANOPROMPT_OUT or ./runs)")
    p.add_argument("--ablate", help="comma-separated: no_aaf,no_sap,no_shared,plain_mse_forecast,bce_aafn")
    p.add_argument("--t", help="tolerance list, e.g. 1,5,10,50,inf")
    p.add_argument("--lout", type=int, help="forecast horizon L_out")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--train-path", dest="train_path")
    p.add_argument("--test-path", dest="test_path")
    p.add_argument("--labels-path", dest="test_labels_path")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anoprompt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic train/test/labels dataset")
    _add_shared(p)

    p = sub.add_parser("train", help="run both training phases for each seed")
    _add_shared(p)
    p.add_argument("--jobs", type=int, default=1, help="parallel seed runs")

    p = sub.add_parser("eval", help="score the test split and report tolerance F1")
    _add_shared(p)
    p.add_argument("checkpoints", nargs="+", help="checkpoint files or training output directories")
    p.add_argument("--no-scores", action="store_true", help="skip the per-step score CSV")

    p = sub.add_parser("plot", help="draw a score or loss CSV as SVG")
    p.add_argument("csv", help="scores.csv or train_log.csv")
    p.add_argument("--out", required=True, help="output .svg path")
    p.add_argument("--threshold", type=float, help="override the threshold line")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "plot":
            out = Path(args.out)
            cmd_plot(Path(args.csv), out, args.threshold)
            print(out)
            return 0
        cfg = build_config(args)
        if args.command == "synth":
            for path in cmd_synth(cfg, cfg.output_dir):
                print(path)
        elif args.command == "train":
            for path in cmd_train(cfg, args.jobs):
                print(path)
        elif args.command == "eval":
            tolerances = ([float(x) for x in _split_list(args.t)] if args.t else None)
            reports = cmd_eval(cfg, find_checkpoints(args.checkpoints), tolerances,
                               dump_scores=not args.no_scores)
            print(format_summary(reports), end="")
        return 0
    except KNOWN_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
