"""snnforge: convert trained ReLU CNNs into spiking networks and simulate them."""

from . import analysis, ann, convert, errors, netio, snnsim
from .analysis import (
    AccuracyCurve,
    TheoryReport,
    accuracy_curve,
    correlate,
    predict_rate_reset_zero,
    verify_rate_identity,
)
from .ann import ActivationRecord, forward
from .convert import (
    ActivationStats,
    ConversionReport,
    collect_stats,
    fold_batchnorm,
    normalize_params,
    percentile_scale,
)
from .netio import DatasetHandle, LayerSpec, NetworkSpec, load_idx, load_model, save_model
from .snnsim import SimConfig, SimTrace, classify, simulate, simulate_batch

__version__ = "0.1.0"

__all__ = [
    "AccuracyCurve",
    "ActivationRecord",
    "ActivationStats",
    "ConversionReport",
    "DatasetHandle",
    "LayerSpec",
    "NetworkSpec",
    "SimConfig",
    "SimTrace",
    "TheoryReport",
    "accuracy_curve",
    "analysis",
    "ann",
    "classify",
    "collect_stats",
    "convert",
    "correlate",
    "errors",
    "fold_batchnorm",
    "forward",
    "load_idx",
    "load_model",
    "netio",
    "normalize_params",
    "percentile_scale",
    "predict_rate_reset_zero",
    "save_model",
    "simulate",
    "simulate_batch",
    "snnsim",
    "verify_rate_identity",
]
