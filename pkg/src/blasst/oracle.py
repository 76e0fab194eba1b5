"""Float64 reference attention, optionally restricted by a recorded skip mask.

Slow and dense on purpose: this is the ground truth the blocked engine and
the gradient path are checked against.
"""

from __future__ import annotations

import numpy as np

from blasst.geometry import AttentionSpec, SkipMask, element_keep_mask


def _attend(q, k, v, spec: AttentionSpec, allowed: np.ndarray, diagnostics: list | None):
    spec.check_shapes(q, k, v)
    q = np.asarray(q, dtype=np.float64)
    k = np.repeat(np.asarray(k, dtype=np.float64), spec.group_size, axis=0)
    v = np.repeat(np.asarray(v, dtype=np.float64), spec.group_size, axis=0)

    scores = spec.softmax_scale * (q @ k.transpose(0, 2, 1))
    scores = np.where(allowed, scores, -np.inf)
    row_max = scores.max(axis=-1, keepdims=True)
    empty = ~allowed.any(axis=-1)
    row_max[empty] = 0.0
    weights = np.exp(scores - row_max)
    denom = weights.sum(axis=-1, keepdims=True)
    denom[empty] = 1.0
    out = (weights / denom) @ v
    if diagnostics is not None:
        for h, i in zip(*np.nonzero(empty)):
            diagnostics.append(f"head {h} query {i}: no visible keys, output row set to zero")
    return out


def dense_attention(q, k, v, spec: AttentionSpec, diagnostics: list | None = None) -> np.ndarray:
    """softmax(scale * Q Kᵀ) V per head, honoring the element mask and GQA grouping.

    Rows with no visible key are returned as zeros and reported in ``diagnostics``.
    """
    return _attend(q, k, v, spec, element_keep_mask(spec, None), diagnostics)


def masked_oracle_attention(
    q, k, v, spec: AttentionSpec, mask: SkipMask, diagnostics: list | None = None
) -> np.ndarray:
    """Dense attention with every key in a non-kept block dropped from numerator and denominator."""
    return _attend(q, k, v, spec, element_keep_mask(spec, mask), diagnostics)
