"""Anomaly prediction: forecast a future window, then flag anomalous steps in it."""
from .backbone import ModelBundle, load_checkpoint, save_checkpoint
from .config import RunConfig, desk_config, load_config
from .data import SeriesSet, standard_scale, synth_generate
from .evaluator import evaluate, threshold_by_ratio, tolerant_f1
from .trainer import train_pipeline

__all__ = [
    "ModelBundle", "RunConfig", "SeriesSet", "desk_config", "evaluate", "load_checkpoint",
    "load_config", "save_checkpoint", "standard_scale", "synth_generate", "threshold_by_ratio",
    "tolerant_f1", "train_pipeline",
]
__version__ = "0.1.0"
