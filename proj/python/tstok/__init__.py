"""Discrete time-series tokenizer: VQVAE tokenization, imputation, anomaly detection, forecasting."""

__path__ = __import__("pkgutil").extend_path(__path__, __name__)

from tstok._core import (  # noqa: E402
    Forecaster,
    OutputExists,
    Tokenizer,
    avg_wins,
    compare,
    generate_synthetic,
    permutation_test,
    point_adjust,
    precision_recall_f1,
    quantize,
    run_experiment,
)

__all__ = [
    "Forecaster",
    "OutputExists",
    "Tokenizer",
    "avg_wins",
    "compare",
    "generate_synthetic",
    "permutation_test",
    "point_adjust",
    "precision_recall_f1",
    "quantize",
    "run_experiment",
]
