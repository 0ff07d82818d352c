"""Desk-scale transformer-to-hybrid-SSM conversion by distillation.

The heavy lifting lives in the C++ core; this package exposes the main
operations: tensor ops (softmax, silu, matmul, rms_norm), the KL distillation
loss, MIL weight mapping, synthetic tasks, and the Model type with forward /
decode / replace_layers / distill_from.
"""

from hybridlm._core import (
    ConfigError,
    IoError,
    Model,
    NumericError,
    ShapeError,
    generate_task,
    kl_loss,
    matmul,
    mil_init_slices,
    rms_norm,
    scan_step_max_diff,
    silu,
    softmax,
)

__all__ = [
    "ConfigError",
    "IoError",
    "Model",
    "NumericError",
    "ShapeError",
    "generate_task",
    "kl_loss",
    "matmul",
    "mil_init_slices",
    "rms_norm",
    "scan_step_max_diff",
    "silu",
    "softmax",
]
