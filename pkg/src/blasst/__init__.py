"""Blocked attention that skips key blocks whose softmax weights fall below a threshold.

Modules: ``tensor_io`` (tensors, file format, synthetic workloads), ``oracle``
(float64 reference), ``core`` (skipping forward pass), ``calibrate`` (λ = a / L
fitting), ``sparse_grad`` (frozen-mask gradients), ``pipeline`` (schedule
cost model) and ``cli``.
"""

from blasst.core import blasst_forward, sparsity_report
from blasst.geometry import AttentionSpec, MaskMode, SkipMask, ThresholdPolicy
from blasst.oracle import dense_attention, masked_oracle_attention

__version__ = "0.1.0"

__all__ = [
    "AttentionSpec",
    "MaskMode",
    "SkipMask",
    "ThresholdPolicy",
    "blasst_forward",
    "dense_attention",
    "masked_oracle_attention",
    "sparsity_report",
]
