"""Blocked online-softmax attention that skips negligible key blocks.

All (head, query tile) pairs are advanced together, one key block at a time
in ``spec.column_order()``.  For each block the engine

1. computes ``S = scale * Q_i K_jᵀ`` and masks dead elements to -inf,
2. takes the block row max and folds it into the running max,
3. skips the tile if every row with a live element has
   ``block_max - running_max < ln λ`` (strict),
4. otherwise rescales and accumulates the denominator and output.

Scores and exponentials are float32; the denominator and output accumulate
in float64.  A float64 engine is available for the gradient path.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from blasst.geometry import KEPT, MASKED_OUT, SKIPPED, AttentionSpec, SkipMask

_PRECISIONS = {"f32": np.float32, "f64": np.float64}


def block_skip_decision(block_row_maxes, running_maxes, ln_lambda: float, valid=None) -> str:
    """'skip' iff every participating row has block_max - running_max < ln_lambda.

    ``running_maxes`` must already include this block.  Rows flagged False in
    ``valid`` (padding, or no live element in the tile) do not vote.
    """
    diff = np.asarray(block_row_maxes, dtype=np.float64) - np.asarray(running_maxes, dtype=np.float64)
    if valid is not None:
        diff = diff[np.asarray(valid, dtype=bool)]
    if diff.size == 0:
        return "keep"
    return "skip" if bool(np.all(diff < ln_lambda)) else "keep"


@dataclass
class SparsityRow:
    head: int | str
    block_row: int | str
    kept: int
    skipped: int
    masked: int

    @property
    def sparsity(self) -> float:
        total = self.kept + self.skipped
        return self.skipped / total if total else 0.0


@dataclass
class SparsityReport:
    layout: str
    rows: list[SparsityRow]
    global_sparsity: float
    diagnostics: list[str] = field(default_factory=list)

    def values(self) -> np.ndarray:
        return np.array([r.sparsity for r in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["head", "block_row", "kept", "skipped", "masked", "sparsity"])
        for r in self.rows:
            w.writerow([r.head, r.block_row, r.kept, r.skipped, r.masked, f"{r.sparsity:.6f}"])
        return buf.getvalue()


def sparsity_report(mask: SkipMask, layout: str = "global") -> SparsityReport:
    """Skipped fraction of computable blocks; masked_out blocks are not counted."""
    s = mask.states
    kept = (s == KEPT)
    skipped = (s == SKIPPED)
    masked = (s == MASKED_OUT)
    if layout == "global":
        groups = [("*", "*", (slice(None),) * 3)]
    elif layout == "per_head":
        groups = [(h, "*", (h,)) for h in range(s.shape[0])]
    elif layout == "per_block_row":
        groups = [(h, i, (h, i)) for h in range(s.shape[0]) for i in range(s.shape[1])]
    else:
        raise ValueError(f"unknown layout {layout!r}")
    rows = [
        SparsityRow(h, i, int(kept[ix].sum()), int(skipped[ix].sum()), int(masked[ix].sum()))
        for h, i, ix in groups
    ]
    diagnostics = []
    countable = int(kept.sum() + skipped.sum())
    if countable == 0:
        diagnostics.append("no countable blocks: every block is masked out, sparsity reported as 0")
    return SparsityReport(layout, rows, mask.sparsity(), diagnostics)


@dataclass
class ForwardResult:
    output: np.ndarray
    mask: SkipMask
    report: SparsityReport
    row_max: np.ndarray  # [H, seq_len_q] final running max (scaled scores)
    denominator: np.ndarray  # [H, seq_len_q] final l, relative to the accumulator max
    diagnostics: list[str] = field(default_factory=list)

    def __iter__(self):
        return iter((self.output, self.mask, self.report))


class _Tiles:
    """Padded, tiled views of the inputs shared by the forward pass and the margin scan."""

    def __init__(self, q, k, v, spec: AttentionSpec, dtype):
        spec.check_shapes(q, k, v)
        self.spec = spec
        self.dtype = dtype
        br, bc = spec.block_rows, spec.block_cols
        lq, lk = spec.t_r * br, spec.t_c * bc
        h, d = spec.num_q_heads, spec.head_dim

        qp = np.zeros((h, lq, d), dtype=np.float64)
        qp[:, : spec.seq_len_q] = np.asarray(q, dtype=dtype)
        kp = np.zeros((spec.num_kv_heads, lk, d), dtype=np.float64)
        kp[:, : spec.seq_len_kv] = np.asarray(k, dtype=dtype)
        self.k = kp
        if v is not None:
            vp = np.zeros((spec.num_kv_heads, lk, d), dtype=np.float64)
            vp[:, : spec.seq_len_kv] = np.asarray(v, dtype=dtype)
            self.v = vp
        # Head grouping: q head h reads kv head h // group.  Q is regrouped to
        # [Hkv, group * Lq_pad, d] so one matmul per kv head serves the group.
        self.qg = qp.reshape(spec.num_kv_heads, spec.group_size * lq, d)

        qpos = np.arange(lq).reshape(spec.t_r, br)
        self.row_real = qpos < spec.seq_len_q  # [T_r, B_r]
        self.qpos = qpos

    def block(self, j: int):
        """Scores [H, T_r, B_r, B_c] for key block j (dead elements -inf) and the live mask."""
        spec = self.spec
        bc = spec.block_cols
        kpos = np.arange(j * bc, (j + 1) * bc)
        live = spec.mask.live(self.qpos[:, :, None], kpos[None, None, :], spec.mask_offset)
        live = live & self.row_real[:, :, None] & (kpos < spec.seq_len_kv)[None, None, :]
        kj = self.k[:, j * bc : (j + 1) * bc]
        s = np.matmul(self.qg, kj.transpose(0, 2, 1)) * spec.softmax_scale
        s = s.reshape(spec.num_q_heads, spec.t_r, spec.block_rows, bc).astype(self.dtype)
        s = np.where(live[None], s, self.dtype(-np.inf))
        return s, live


def _block_max_update(s, live, m):
    """Block row max, updated running max, rows that vote, tiles with any live element."""
    m_blk = s.max(axis=-1)
    m_new = np.maximum(m, m_blk)
    row_live = live.any(axis=-1)  # [T_r, B_r]
    tile_live = row_live.any(axis=-1)  # [T_r]
    return m_blk, m_new, row_live, tile_live


def _margins(m_blk, m_new, row_live):
    """Largest block_max - running_max over voting rows, per tile: [H, T_r]."""
    with np.errstate(invalid="ignore"):
        diff = m_blk.astype(np.float64) - m_new.astype(np.float64)
    diff = np.where(row_live[None], diff, -np.inf)
    return diff.max(axis=-1)


def blasst_forward(q, k, v, spec: AttentionSpec, precision: str = "f32") -> ForwardResult:
    """Run the skipping forward pass; returns output, decision grid and block sparsity report.

    Unpacks as ``O, mask, report = blasst_forward(...)``.
    """
    dtype = _PRECISIONS[precision]
    ln_lam = spec.threshold.ln_lambda(spec.seq_len_kv)
    t = _Tiles(q, k, v, spec, dtype)
    h, tr, br, bc, d = spec.num_q_heads, spec.t_r, spec.block_rows, spec.block_cols, spec.head_dim
    vg = np.repeat(t.v, spec.group_size, axis=0)

    m = np.full((h, tr, br), -np.inf, dtype=dtype)  # running max, includes skipped blocks
    m_acc = np.full((h, tr, br), -np.inf, dtype=dtype)  # max that l and o are referenced to
    l = np.zeros((h, tr, br))
    o = np.zeros((h, tr, br, d))
    states = np.empty((h, tr, spec.t_c), dtype=np.int8)

    for j in spec.column_order():
        s, live = t.block(j)
        m_blk, m_new, row_live, tile_live = _block_max_update(s, live, m)
        skip = (_margins(m_blk, m_new, row_live) < ln_lam) & tile_live[None]
        keep = ~skip & tile_live[None]
        states[:, :, j] = np.where(tile_live[None], np.where(skip, SKIPPED, KEPT), MASKED_OUT)
        m = m_new
        if not keep.any():
            continue

        hi, ti = np.nonzero(keep)
        mk = m_new[hi, ti]  # [n, B_r]
        with np.errstate(invalid="ignore"):
            p = np.exp(s[hi, ti] - mk[..., None])  # f32/f64 weights
            alpha = np.exp(m_acc[hi, ti].astype(np.float64) - mk.astype(np.float64))
        p = np.where(np.isnan(p), dtype(0), p)
        alpha = np.where(np.isnan(alpha), 1.0, alpha)  # rows still without any live key
        p64 = p.astype(np.float64)
        vj = vg[hi, j * bc : (j + 1) * bc]  # [n, B_c, d]
        l[hi, ti] = alpha * l[hi, ti] + p64.sum(axis=-1)
        o[hi, ti] = alpha[..., None] * o[hi, ti] + np.matmul(p64, vj)
        m_acc[hi, ti] = np.where(np.isneginf(mk), m_acc[hi, ti], mk)

    diagnostics = []
    dead = (l == 0) & t.row_real[None]
    safe = np.where(l > 0, l, 1.0)
    out = (o / safe[..., None]).reshape(h, tr * br, d)[:, : spec.seq_len_q]
    for hh, ii, rr in zip(*np.nonzero(dead)):
        diagnostics.append(f"head {hh} query {ii * br + rr}: denominator is zero, output row set to zero")

    mask = SkipMask(states, spec.column_order())
    report = sparsity_report(mask, "per_block_row")
    report.diagnostics.extend(diagnostics)
    return ForwardResult(
        output=out.astype(np.float64),
        mask=mask,
        report=report,
        row_max=m.reshape(h, tr * br)[:, : spec.seq_len_q].astype(np.float64),
        denominator=l.reshape(h, tr * br)[:, : spec.seq_len_q],
        diagnostics=diagnostics,
    )


def skip_margins(q, k, spec: AttentionSpec, precision: str = "f32") -> np.ndarray:
    """Per-block decision margin, [H, T_r, T_c].

    The running max does not depend on which blocks are skipped, so a block is
    skipped at threshold λ exactly when its margin is < ln λ.  Masked-out blocks
    get NaN.  One scan therefore answers the skip pattern for every λ.
    """
    dtype = _PRECISIONS[precision]
    t = _Tiles(q, k, None, spec, dtype)
    m = np.full((spec.num_q_heads, spec.t_r, spec.block_rows), -np.inf, dtype=dtype)
    out = np.full((spec.num_q_heads, spec.t_r, spec.t_c), np.nan)
    for j in spec.column_order():
        s, live = t.block(j)
        m_blk, m_new, row_live, tile_live = _block_max_update(s, live, m)
        out[:, :, j] = np.where(tile_live[None], _margins(m_blk, m_new, row_live), np.nan)
        m = m_new
    return out


def mask_from_margins(margins: np.ndarray, ln_lambda: float, order) -> SkipMask:
    states = np.where(np.isnan(margins), MASKED_OUT, np.where(margins < ln_lambda, SKIPPED, KEPT))
    return SkipMask(states.astype(np.int8), tuple(order))


def sparsity_from_margins(margins: np.ndarray, ln_lambda: float) -> float:
    countable = ~np.isnan(margins)
    n = int(countable.sum())
    return float((margins[countable] < ln_lambda).sum()) / n if n else 0.0
