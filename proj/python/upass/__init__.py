"""Training-dynamics uncertainty, data selection, active learning and deferral."""

import json as _json

from ._upass import (
    ConflictError,
    Error,
    NotFoundError,
    ValidationError,
    benchmark_config,
    deferral_scores,
    entropy_metrics,
    knn,
    load_log_metrics,
    next_query_batch,
    pick_threshold,
    rank_recordings,
    retention_curve,
    run_pipeline as _run_pipeline,
    sample_metrics,
    select_data,
    spearman,
)

__version__ = "0.1.0"


def run_pipeline(config, stages="all"):
    """Run the pipeline from a config dict or JSON string; returns the summary as a dict."""
    text = config if isinstance(config, str) else _json.dumps(config)
    return _json.loads(_run_pipeline(text, stages))


__all__ = [
    "ConflictError",
    "Error",
    "NotFoundError",
    "ValidationError",
    "benchmark_config",
    "deferral_scores",
    "entropy_metrics",
    "knn",
    "load_log_metrics",
    "next_query_batch",
    "pick_threshold",
    "rank_recordings",
    "retention_curve",
    "run_pipeline",
    "sample_metrics",
    "select_data",
    "spearman",
]
