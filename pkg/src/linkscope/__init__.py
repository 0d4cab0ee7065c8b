"""Wireless-link RSSI anomaly benchmark: traces, injectors, detectors, reports."""

__version__ = "0.1.0"

from .evaluation import ExperimentConfig, run_matrix
from .inject import AnomalyKind, AnomalySpec, Label, inject
from .traces import Dataset, RssiTrace, filter_lossless, generate_synthetic, ingest_rutgers

__all__ = [
    "__version__",
    "AnomalyKind",
    "AnomalySpec",
    "Dataset",
    "ExperimentConfig",
    "Label",
    "RssiTrace",
    "filter_lossless",
    "generate_synthetic",
    "ingest_rutgers",
    "inject",
    "run_matrix",
]
