"""Backdoor-robust knowledge distillation on toy networks."""

from ._core import (
    Config,
    Network,
    RuntimeFailure,
    ValidationError,
    accuracy,
    attack_success_rate,
    detox_features,
    generate_blobs,
    parse_report,
    per_example_variance,
    run_ablation,
    run_pipeline,
    softmax_t,
    variance_loss,
)

__all__ = [
    "Config",
    "Network",
    "RuntimeFailure",
    "ValidationError",
    "accuracy",
    "attack_success_rate",
    "detox_features",
    "generate_blobs",
    "parse_report",
    "per_example_variance",
    "run_ablation",
    "run_pipeline",
    "softmax_t",
    "variance_loss",
]
