"""Gradients of skipping attention with the skip mask held fixed.

Skipped blocks were never computed, so they carry no gradient: the backward
pass differentiates the masked softmax defined by the recorded decisions and
does not differentiate through the threshold comparison.  Everything runs in
float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from blasst.core import blasst_forward
from blasst.geometry import AttentionSpec, SkipMask, element_keep_mask


@dataclass
class GradBundle:
    dq: np.ndarray
    dk: np.ndarray
    dv: np.ndarray
    mask: SkipMask


def masked_attention_grads(q, k, v, spec: AttentionSpec, mask: SkipMask, d_out):
    """Output and (dQ, dK, dV) of the masked softmax attention at a frozen mask."""
    spec.check_shapes(q, k, v)
    g = spec.group_size
    scale = spec.softmax_scale
    q = np.asarray(q, dtype=np.float64)
    k = np.repeat(np.asarray(k, dtype=np.float64), g, axis=0)
    v = np.repeat(np.asarray(v, dtype=np.float64), g, axis=0)
    d_out = np.asarray(d_out, dtype=np.float64)
    allowed = element_keep_mask(spec, mask)

    s = np.where(allowed, scale * (q @ k.transpose(0, 2, 1)), -np.inf)
    empty = ~allowed.any(axis=-1, keepdims=True)
    row_max = np.where(empty, 0.0, s.max(axis=-1, keepdims=True))
    p = np.exp(s - row_max)
    p /= np.where(empty, 1.0, p.sum(axis=-1, keepdims=True))
    out = p @ v

    dv = p.transpose(0, 2, 1) @ d_out
    dp = d_out @ v.transpose(0, 2, 1)
    ds = p * (dp - (d_out * out).sum(axis=-1, keepdims=True))
    dq = scale * (ds @ k)
    dk = scale * (ds.transpose(0, 2, 1) @ q)

    def fold(x):  # sum query-head contributions into their shared kv head
        return x.reshape(spec.num_kv_heads, g, *x.shape[1:]).sum(axis=1)

    return out, dq, fold(dk), fold(dv)


def blasst_forward_backward(q, k, v, spec: AttentionSpec, d_out):
    """Run the skipping forward pass in float64, then the frozen-mask backward pass.

    Returns ``(O, GradBundle)``.
    """
    fwd = blasst_forward(q, k, v, spec, precision="f64")
    if np.shape(d_out) != fwd.output.shape:
        raise ValueError(f"dO has shape {np.shape(d_out)}, expected {fwd.output.shape}")
    out, dq, dk, dv = masked_attention_grads(q, k, v, spec, fwd.mask, d_out)
    return out, GradBundle(dq, dk, dv, fwd.mask)


@dataclass
class GradcheckReport:
    max_rel_error: float
    checked: int
    excluded: int  # coordinates whose ±step perturbation flipped a skip decision

    def passed(self, tol: float = 1e-5) -> bool:
        return self.max_rel_error <= tol


def gradcheck(q, k, v, spec: AttentionSpec, d_out, num_coords: int = 200, step: float = 1e-5,
              seed: int = 0, floor: float = 1e-4) -> GradcheckReport:
    """Central differences of ⟨O, dO⟩ at random input coordinates vs. the analytic gradient.

    Relative error is ``|fd - analytic| / max(|fd|, |analytic|, floor)``.
    """
    arrays = [np.array(x, dtype=np.float64) for x in (q, k, v)]
    d_out = np.asarray(d_out, dtype=np.float64)
    _, grads = blasst_forward_backward(*arrays, spec, d_out)
    analytic = (grads.dq, grads.dk, grads.dv)

    rng = np.random.default_rng(seed)
    sizes = np.array([a.size for a in arrays])
    picks = rng.choice(sizes.sum(), size=min(num_coords, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def loss_at(which, flat, delta):
        bumped = [a.copy() for a in arrays]
        bumped[which].ravel()[flat] += delta
        fwd = blasst_forward(*bumped, spec, precision="f64")
        return float(np.sum(fwd.output * d_out)), fwd.mask

    worst, checked, excluded = 0.0, 0, 0
    for pick in picks:
        which = int(np.searchsorted(offsets, pick, side="right") - 1)
        flat = int(pick - offsets[which])
        up, mask_up = loss_at(which, flat, step)
        down, mask_down = loss_at(which, flat, -step)
        if mask_up != grads.mask or mask_down != grads.mask:
            excluded += 1
            continue
        fd = (up - down) / (2 * step)
        an = float(analytic[which].ravel()[flat])
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), floor))
        checked += 1
    return GradcheckReport(worst, checked, excluded)
