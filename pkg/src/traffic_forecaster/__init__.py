"""Traffic Forecaster - cellular traffic forecasting with hybrid graph convolution."""

__version__ = "0.1.0"

# Expose main classes and functions for external use
from .baselines import ha_fit, ha_predict, seasonal_naive_predict
from .config import RunConfig
from .data import SliceConfig, TrafficSeries, build_samples, load_traffic_csv
from .graphs import GraphKind, GraphSet
from .model import HybridGraphModel, forward, init_params, load_checkpoint, save_checkpoint
from .synth import SynthSpec, generate
from .training import TrainConfig, evaluate, fit

__all__ = [
    "GraphKind",
    "GraphSet",
    "RunConfig",
    "SliceConfig",
    "HybridGraphModel",
    "SynthSpec",
    "TrafficSeries",
    "TrainConfig",
    "build_samples",
    "evaluate",
    "fit",
    "forward",
    "generate",
    "ha_fit",
    "ha_predict",
    "init_params",
    "load_checkpoint",
    "load_traffic_csv",
    "save_checkpoint",
    "seasonal_naive_predict",
]
