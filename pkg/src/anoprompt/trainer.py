"""Two-phase training: pre-training (AAFN, prompt pool, forecaster) and main
training (shared backbone and heads), with per-term gradient routing."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .aafn import aafn_forward, aafn_loss, anomaly_weights
from .backbone import ModelBundle
from .config import RunConfig, TrainConfig
from .data import SeriesSet, window_arrays
from .engine import Tensor, adam_step, clip_grad_norm, mse, no_grad
from .errors import TrainingError, UsageError
from .injection import batch_injection, draw_injection
from .prompt_pool import divergence_loss

log = logging.getLogger(__name__)

PT_FROZEN = ("f_ftr", "e_AD", "o_AD")
MT_FROZEN = ("f_ftr", "aafn", "pool", "inject")


@dataclass
class PhaseState:
    phase: str
    frozen: dict[str, bool] = field(default_factory=dict)
    epoch_means: list[dict[str, float]] = field(default_factory=list)
    probe_kl: list[float] = field(default_factory=list)


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def add(self, **row) -> None:
        self.rows.append(row)

    def write_csv(self, path: str | Path) -> None:
        keys: list[str] = []
        for row in self.rows:
            keys.extend(k for k in row if k not in keys)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys)
            writer.writeheader()
            writer.writerows(self.rows)


@dataclass
class TrainResult:
    fftr: PhaseState | None
    pretrain: PhaseState
    main: PhaseState
    log: TrainLog


# -- batching --------------------------------------------------------------------

def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


def _optimizer_step(bundle: ModelBundle, terms: dict[str, Tensor], weights: dict[str, float],
                    cfg: TrainConfig, phase: str, step: int) -> dict[str, float]:
    values = {}
    total = None
    for name, loss in terms.items():
        v = float(loss.data)
        if not math.isfinite(v):
            raise TrainingError(f"{phase} step {step}: non-finite loss term {name} ({v})")
        values[name] = v
        w = weights[name]
        if w == 0:
            continue
        total = loss * w if total is None else total + loss * w
    if total is None:
        return values
    store = bundle.store
    store.zero_grad()
    total.backward()
    grads = store.grads()
    store.zero_grad()
    if grads:
        clip_grad_norm(grads, cfg.grad_clip)
        try:
            adam_step(store, grads, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        except TrainingError as exc:
            raise TrainingError(f"{phase} step {step}: {exc}") from None
    values["total"] = float(total.data)
    return values


def _cast(bundle: ModelBundle, x: np.ndarray) -> Tensor:
    return Tensor(np.asarray(x, dtype=bundle.dtype))


# -- feature extractor --------------------------------------------------------------

def pretrain_fftr(bundle: ModelBundle, windows: np.ndarray, cfg: TrainConfig,
                  log_: TrainLog | None = None) -> PhaseState:
    """Reconstruction pre-training of the feature extractor, then freeze it."""
    state = PhaseState("FFTR")
    rng = np.random.default_rng([cfg.seed, 3, 0])
    step = 0
    others = [n for n in bundle.components if n != "f_ftr"]
    bundle.store.reset_optimizer()
    with bundle.frozen(*others):
        for epoch in range(cfg.fftr_epochs):
            acc = []
            for idx in _batches(len(windows), cfg.batch_size, rng):
                x = _cast(bundle, windows[idx])
                loss = mse(bundle.fftr_reconstruct(x), x)
                vals = _optimizer_step(bundle, {"fftr": loss}, {"fftr": 1.0}, cfg, "FFTR", step)
                acc.append(vals["fftr"])
                if log_ is not None:
                    log_.add(phase="FFTR", epoch=epoch, step=step, **vals)
                step += 1
            state.epoch_means.append({"fftr": float(np.mean(acc))})
    bundle.set_frozen("f_ftr", True)
    bundle.fftr_trained = True
    state.frozen = {n: bundle.is_frozen(n) for n in bundle.components}
    return state


# -- loss terms --------------------------------------------------------------------

def forecasting_loss(bundle: ModelBundle, x_in, x_out, x_in_z=None, x_out_z=None) -> Tensor:
    """Mean of the clean and the injected forecast errors (each a per-element MSE).

    Without injected views only the clean term is used.
    """
    clean = mse(bundle.forecast(x_in), bundle.as_batch(x_out))
    if x_in_z is None:
        return clean
    injected = mse(bundle.forecast(x_in_z), bundle.as_batch(x_out_z))
    return (clean + injected) * 0.5


def reconstruction_loss(bundle: ModelBundle, x_in, use_prompts: bool = True) -> Tensor:
    """Mean of the prompted and plain reconstruction errors against ``x_in``."""
    x = bundle.as_batch(x_in)
    x_rec = bundle.reconstruct(x)
    plain = mse(x_rec, x)
    if not use_prompts:
        return plain
    rec_in = Tensor(x_rec.data)
    selected = bundle.select_prompts(rec_in)
    prompted = mse(bundle.reconstruct_prompted(rec_in, selected), x)
    return (prompted + plain) * 0.5


def anomaly_aware_forecast_loss(bundle: ModelBundle, x_in, x_out, plain: bool = False) -> Tensor:
    """Forecast squared error weighted per step by the frozen AAFN probabilities.

    The weights are broadcast across channels and carry no gradient.
    """
    x_hat = bundle.forecast(x_in)
    target = bundle.as_batch(x_out)
    diff = x_hat - target
    sq = diff * diff
    if plain:
        return sq.mean()
    w = anomaly_weights(bundle, bundle.as_batch(x_in), x_hat)
    return (sq * w.reshape(*w.shape, 1)).mean()


def injected_views(bundle: ModelBundle, x_in: np.ndarray, x_out: np.ndarray, cfg: TrainConfig,
                   rng: np.random.Generator):
    """Differentiable corrupted views of a batch plus their labels."""
    errs_in = bundle.fftr_step_errors(x_in)
    errs_out = bundle.fftr_step_errors(x_out)
    draws_in = [draw_injection(x_in[i], errs_in[i], rng, cfg.region_min, cfg.region_max)
                for i in range(len(x_in))]
    draws_out = [draw_injection(x_out[i], errs_out[i], rng, cfg.region_min, cfg.region_max)
                 for i in range(len(x_out))]
    mags = bundle.magnitudes()
    x_in_z = batch_injection(x_in, draws_in, mags)
    x_out_z = batch_injection(x_out, draws_out, mags)
    y_in = np.stack([d.labels for d in draws_in])
    y_out = np.stack([d.labels for d in draws_out])
    return x_in_z, x_out_z, y_in, y_out


def pretrain_terms(bundle: ModelBundle, x_in: np.ndarray, x_out: np.ndarray, cfg: TrainConfig,
                   rng: np.random.Generator) -> dict[str, Tensor]:
    ablate = cfg.ablate
    terms: dict[str, Tensor] = {}
    xi = _cast(bundle, x_in)
    xo = _cast(bundle, x_out)
    if "no_aaf" not in ablate:
        x_in_z, x_out_z, _, y_out_z = injected_views(bundle, x_in, x_out, cfg, rng)
        probs = aafn_forward(bundle.aafn, x_out_z, x_in_z)
        terms["aaf"] = aafn_loss(probs, y_out_z, cfg.loss_type)
        if cfg.inject_grad_to_forecast:
            terms["f"] = forecasting_loss(bundle, xi, xo, x_in_z, x_out_z)
        else:
            terms["f"] = forecasting_loss(bundle, xi, xo, Tensor(x_in_z.data), Tensor(x_out_z.data))
    else:
        terms["f"] = forecasting_loss(bundle, xi, xo)
    if "no_sap" not in ablate:
        terms["d"] = divergence_loss(bundle, xi, cfg.lambda_k, cfg.kl_clamp)
    return terms


def probe_kl(bundle: ModelBundle, probe: np.ndarray, cfg: TrainConfig) -> float:
    """Unclamped prompted-vs-plain attention divergence on a fixed batch."""
    with no_grad():
        _, kl, _ = divergence_loss(bundle, _cast(bundle, probe), cfg.lambda_k, None, return_parts=True)
    return float(kl.data)


def pretrain_phase(bundle: ModelBundle, x_in_all: np.ndarray, x_out_all: np.ndarray, cfg: TrainConfig,
                   log_: TrainLog | None = None, probe: np.ndarray | None = None) -> PhaseState:
    """Joint pre-training; afterwards the AAFN, pool and magnitudes are frozen."""
    ablate = cfg.ablate
    needs_fftr = "no_aaf" not in ablate or "no_sap" not in ablate
    if needs_fftr and not bundle.fftr_trained:
        raise UsageError("pre-training needs a trained, frozen feature extractor")
    state = PhaseState("PT")
    weights = {"aaf": cfg.lambda_aaf, "d": cfg.lambda_d, "f": cfg.lambda_f}
    shuffle = np.random.default_rng([cfg.seed, 3, 1])
    inj_rng = np.random.default_rng([cfg.seed, 4])
    bundle.store.reset_optimizer()
    step = 0
    with bundle.frozen(*PT_FROZEN):
        if "no_aaf" in ablate:
            bundle.set_frozen("inject", True)
        for epoch in range(cfg.epochs):
            sums: dict[str, list[float]] = {}
            for idx in _batches(len(x_in_all), cfg.batch_size, shuffle):
                terms = pretrain_terms(bundle, x_in_all[idx], x_out_all[idx], cfg, inj_rng)
                vals = _optimizer_step(bundle, terms, weights, cfg, "PT", step)
                for k, v in vals.items():
                    sums.setdefault(k, []).append(v)
                if log_ is not None:
                    log_.add(phase="PT", epoch=epoch, step=step, **vals)
                step += 1
            state.epoch_means.append({k: float(np.mean(v)) for k, v in sums.items()})
            if probe is not None and "no_sap" not in ablate:
                state.probe_kl.append(probe_kl(bundle, probe, cfg))
            log.info("PT epoch %d: %s", epoch, state.epoch_means[-1])
    for name in ("aafn", "pool", "inject"):
        bundle.set_frozen(name, True)
    bundle.aafn_trained = "no_aaf" not in ablate
    bundle.pool_trained = "no_sap" not in ablate
    state.frozen = {n: bundle.is_frozen(n) for n in bundle.components}
    return state


def main_terms(bundle: ModelBundle, x_in: np.ndarray, x_out: np.ndarray, cfg: TrainConfig) -> dict[str, Tensor]:
    ablate = cfg.ablate
    xi = _cast(bundle, x_in)
    xo = _cast(bundle, x_out)
    plain = "no_aaf" in ablate or "plain_mse_forecast" in ablate
    return {
        "r": reconstruction_loss(bundle, xi, use_prompts="no_sap" not in ablate),
        "af": anomaly_aware_forecast_loss(bundle, xi, xo, plain=plain),
    }


def main_train_phase(bundle: ModelBundle, x_in_all: np.ndarray, x_out_all: np.ndarray,
                     cfg: TrainConfig, log_: TrainLog | None = None) -> PhaseState:
    """Train the shared backbone and the four task heads; auxiliary modules stay frozen."""
    state = PhaseState("MT")
    weights = {"r": cfg.lambda_r, "af": cfg.lambda_af}
    shuffle = np.random.default_rng([cfg.seed, 3, 2])
    bundle.store.reset_optimizer()
    for name in MT_FROZEN:
        bundle.set_frozen(name, True)
    step = 0
    for epoch in range(cfg.epochs):
        sums: dict[str, list[float]] = {}
        for idx in _batches(len(x_in_all), cfg.batch_size, shuffle):
            terms = main_terms(bundle, x_in_all[idx], x_out_all[idx], cfg)
            vals = _optimizer_step(bundle, terms, weights, cfg, "MT", step)
            for k, v in vals.items():
                sums.setdefault(k, []).append(v)
            if log_ is not None:
                log_.add(phase="MT", epoch=epoch, step=step, **vals)
            step += 1
        state.epoch_means.append({k: float(np.mean(v)) for k, v in sums.items()})
        log.info("MT epoch %d: %s", epoch, state.epoch_means[-1])
    state.frozen = {n: bundle.is_frozen(n) for n in bundle.components}
    return state


# -- full pipeline -------------------------------------------------------------------

def build_bundle(cfg: RunConfig, channels: int, seed: int) -> ModelBundle:
    return ModelBundle(cfg.arch, channels, seed=seed, dtype=cfg.train.dtype,
                       shared="no_shared" not in cfg.train.ablate,
                       magnitude_init=cfg.train.magnitude_init)


def train_pipeline(series: SeriesSet, cfg: RunConfig, seed: int | None = None,
                   probe_size: int = 32) -> tuple[ModelBundle, TrainResult]:
    """Feature-extractor pre-training, joint pre-training, then main training.

    ``series`` must already be scaled.
    """
    seed = cfg.train.seed if seed is None else seed
    tcfg = TrainConfig(**{**cfg.train.__dict__, "seed": seed})
    arch = cfg.arch
    bundle = build_bundle(cfg, series.channels, seed)
    x_in, x_out, _, _ = window_arrays(series.train, None, arch.l_in, arch.l_out, tcfg.train_stride)
    if len(x_in) == 0:
        raise TrainingError("training split too short for one window")
    log_ = TrainLog()
    fftr_state = None
    if "no_aaf" not in tcfg.ablate or "no_sap" not in tcfg.ablate:
        fftr_state = pretrain_fftr(bundle, x_in, tcfg, log_)
    probe = x_in[:probe_size]
    pt = pretrain_phase(bundle, x_in, x_out, tcfg, log_, probe=probe)
    mt = main_train_phase(bundle, x_in, x_out, tcfg, log_)
    return bundle, TrainResult(fftr=fftr_state, pretrain=pt, main=mt, log=log_)
