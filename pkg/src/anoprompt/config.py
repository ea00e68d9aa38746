"""Run configuration: architecture, training, synthetic data and run keys.

All keys live in one flat namespace so a config file is plain ``key = value``
lines. Precedence is CLI flag > file > default.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError

ABLATIONS = frozenset({"no_aaf", "no_sap", "no_shared", "plain_mse_forecast", "bce_aafn"})
ANOMALY_TYPES = ("seasonal", "global", "trend", "contextual", "shapelet")
OUT_ENV = "ANOPROMPT_OUT"


@dataclass
class ArchConfig:
    l_in: int = 100
    l_out: int = 100
    d_model: int = 256
    n_layers: int = 3
    n_heads: int = 4
    fftr_layers: int = 3
    aafn_heads: int = 4
    pool_size: int = 10          # M
    top_n: int = 3               # N
    prompt_len: int = 5          # L_z
    ad_window: int = 100         # slice length when scoring long forecasts
    tolerance: float = 50.0      # t; inf for point adjustment

    def validate(self) -> None:
        for name in ("l_in", "l_out", "d_model", "n_layers", "n_heads", "fftr_layers",
                     "aafn_heads", "pool_size", "prompt_len", "ad_window"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.top_n < 0 or self.top_n > self.pool_size:
            raise ConfigError("top_n must satisfy 0 <= N <= M")
        if self.d_model % self.n_heads or self.d_model % self.aafn_heads:
            raise ConfigError("d_model must be divisible by the head counts")
        if self.tolerance < 0:
            raise ConfigError("tolerance must be >= 0")


@dataclass
class TrainConfig:
    epochs: int = 5
    fftr_epochs: int = 5
    batch_size: int = 16
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_aaf: float = 1.0
    lambda_d: float = 1.0
    lambda_f: float = 1.0
    lambda_r: float = 1.0
    lambda_af: float = 1.0
    lambda_k: float = 1.0
    grad_clip: float = 5.0
    kl_clamp: float = 10.0
    aafn_loss: str = "mse"
    train_stride: int = 1
    region_min: int = 5
    region_max: int = 50
    magnitude_init: float = 1.0
    inject_grad_to_forecast: bool = False
    dtype: str = "float32"
    seed: int = 0
    ablate: frozenset = frozenset()

    def validate(self) -> None:
        if self.epochs < 1 or self.fftr_epochs < 0:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1 or self.train_stride < 1:
            raise ConfigError("batch_size and train_stride must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        for name in ("lambda_aaf", "lambda_d", "lambda_f", "lambda_r", "lambda_af", "lambda_k"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.aafn_loss not in ("mse", "bce"):
            raise ConfigError("aafn_loss must be mse or bce")
        unknown = set(self.ablate) - ABLATIONS
        if unknown:
            raise ConfigError(f"unknown ablation flags: {sorted(unknown)}")
        if not 1 <= self.region_min <= self.region_max:
            raise ConfigError("need 1 <= region_min <= region_max")
        if self.magnitude_init <= 0:
            raise ConfigError("magnitude_init must be > 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @property
    def loss_type(self) -> str:
        return "bce" if "bce_aafn" in self.ablate else self.aafn_loss


@dataclass
class SynthConfig:
    synth_channels: int = 2
    t_train: int = 8000
    t_test: int = 2000
    periods: tuple = (50.0, 23.0)
    amplitudes: tuple = (1.0, 0.5)
    noise: float = 0.1
    anomaly_ratio: float = 0.05
    anomaly_types: dict = field(default_factory=lambda: {t: 1.0 for t in ANOMALY_TYPES})
    seg_min: int = 10
    seg_max: int = 40
    anomaly_mag_min: float = 1.5
    anomaly_mag_max: float = 3.0

    def validate(self) -> None:
        if not 0 < self.anomaly_ratio <= 0.5:
            raise ConfigError("anomaly_ratio must lie in (0, 0.5]")
        if self.synth_channels < 1:
            raise ConfigError("synth_channels must be >= 1")
        if len(self.periods) != len(self.amplitudes) or not self.periods:
            raise ConfigError("periods and amplitudes must be non-empty and equal length")
        unknown = set(self.anomaly_types) - set(ANOMALY_TYPES)
        if unknown:
            raise ConfigError(f"unknown anomaly types: {sorted(unknown)}")
        if sum(self.anomaly_types.values()) <= 0 or any(w < 0 for w in self.anomaly_types.values()):
            raise ConfigError("anomaly_types weights must be >= 0 with positive sum")
        if not 1 <= self.seg_min <= self.seg_max:
            raise ConfigError("need 1 <= seg_min <= seg_max")
        if not 0 < self.anomaly_mag_min <= self.anomaly_mag_max:
            raise ConfigError("need 0 < anomaly_mag_min <= anomaly_mag_max")


@dataclass
class RunConfig:
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    train_path: str = ""
    test_path: str = ""
    test_labels_path: str = ""
    out_dir: str = ""
    seeds: tuple = (0,)
    data_seed: int = 0             # synthetic dataset seed, shared by every training seed
    threshold_ratio: float = 0.0   # 0 means: use the test split's true anomaly ratio
    eval_stride: int = 0           # 0 means: l_out (non-overlapping)

    def validate(self) -> None:
        self.arch.validate()
        self.train.validate()
        self.synth.validate()
        if not 0 <= self.threshold_ratio < 1:
            raise ConfigError("threshold_ratio must lie in [0, 1)")
        if self.eval_stride < 0:
            raise ConfigError("eval_stride must be >= 0")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")

    @property
    def output_dir(self) -> Path:
        if self.out_dir:
            return Path(self.out_dir)
        return Path(os.environ.get(OUT_ENV, "runs"))

    # -- flat key access ---------------------------------------------------------
    def _sections(self):
        return (self.arch, self.train, self.synth, self)

    def flat(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for section in self._sections():
            for f in fields(section):
                if f.name in ("arch", "train", "synth"):
                    continue
                out[f.name] = getattr(section, f.name)
        return out

    def set(self, key: str, value: Any) -> None:
        for section in self._sections():
            for f in fields(section):
                if f.name == key and key not in ("arch", "train", "synth"):
                    setattr(section, key, _coerce(f, getattr(section, key), value))
                    return
        raise ConfigError(f"unknown config key {key!r}")

    def update(self, values: dict[str, Any]) -> "RunConfig":
        for k, v in values.items():
            self.set(k, v)
        return self

    def copy(self) -> "RunConfig":
        return dataclasses.replace(
            self,
            arch=dataclasses.replace(self.arch),
            train=dataclasses.replace(self.train),
            synth=dataclasses.replace(self.synth, anomaly_types=dict(self.synth.anomaly_types)),
        )

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.flat().items())


def format_value(v: Any) -> str:
    if isinstance(v, (frozenset, set)):
        return ",".join(sorted(v))
    if isinstance(v, dict):
        return ",".join(f"{k}:{w:g}" for k, w in v.items())
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_float(s: str) -> float:
    s = s.strip().lower()
    if s in ("inf", "infinity", "∞"):
        return float("inf")
    return float(s)


def _coerce(f: dataclasses.Field, current: Any, value: Any) -> Any:
    if not isinstance(value, str):
        if isinstance(current, frozenset):
            return frozenset(value)
        if isinstance(current, tuple):
            return tuple(value)
        return value
    text = value.strip()
    try:
        if isinstance(current, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(current, int) and f.name != "tolerance":
            return int(text)
        if isinstance(current, float) or f.name == "tolerance":
            return _parse_float(text)
        if isinstance(current, frozenset):
            return frozenset(p.strip() for p in text.split(",") if p.strip())
        if isinstance(current, dict):
            out = {}
            for part in text.split(","):
                if not part.strip():
                    continue
                k, _, w = part.partition(":")
                out[k.strip().lower()] = float(w) if w.strip() else 1.0
            return out
        if isinstance(current, tuple):
            parts = [p.strip() for p in text.split(",") if p.strip()]
            if f.name == "seeds":
                return tuple(int(p) for p in parts)
            return tuple(float(p) for p in parts)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {f.name!r}: {value!r}") from exc


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        try:
            cfg.set(key.strip(), value.strip())
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from exc
    return cfg


def load_config(path: str | os.PathLike | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        cfg = parse_config_text(Path(path).read_text(encoding="utf-8"), cfg)
    if overrides:
        cfg.update(overrides)
    cfg.validate()
    return cfg


def desk_config(**overrides: Any) -> RunConfig:
    """Small-model preset used for CPU experiments on synthetic data."""
    cfg = RunConfig()
    cfg.update({
        "d_model": 32,
        "n_heads": 4,
        "aafn_heads": 4,
        "lr": 1e-3,
        "train_stride": 20,
    })
    cfg.update(overrides)
    cfg.validate()
    return cfg
