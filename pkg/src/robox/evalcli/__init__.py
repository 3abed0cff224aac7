"""Checkpoints, evaluation protocol, reports and the command-line entry point."""

from .checkpoint import (
    CheckpointError,
    ChecksumError,
    FormatError,
    ParameterMismatchError,
    VersionError,
    load_checkpoint,
    save_checkpoint,
)
from .evaluate import (
    DEFAULT_BUCKETS,
    EvalConfig,
    EvalReport,
    PipelinePredictor,
    box_predictor,
    evaluate,
    oracle_predictor,
    pr_metric,
)
from .report import combine, plot_degradation, table_csv, write_table
