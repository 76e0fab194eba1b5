"""Problem geometry shared by the oracle, the engine and the gradient path."""

from __future__ import annotations

import json
import math
import re
import warnings
from dataclasses import dataclass, field

import numpy as np

KEPT, SKIPPED, MASKED_OUT = 0, 1, 2
_STATE_CHARS = "KSM"


class GeometryError(ValueError):
    """Shapes or block parameters are inconsistent."""


@dataclass(frozen=True)
class MaskMode:
    """Element mask.  ``window`` is the number of most recent keys a query sees.

    When ``seq_len_q < seq_len_kv`` queries are aligned to the end of the key
    sequence, so query ``i`` sits at absolute position ``i + seq_len_kv - seq_len_q``.
    """

    kind: str = "none"
    window: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("none", "causal", "sliding_window"):
            raise GeometryError(f"unknown mask kind {self.kind!r}")
        if self.kind == "sliding_window" and (self.window is None or self.window < 1):
            raise GeometryError("sliding_window needs window >= 1")

    @classmethod
    def causal(cls) -> MaskMode:
        return cls("causal")

    @classmethod
    def sliding_window(cls, w: int) -> MaskMode:
        return cls("sliding_window", w)

    def live(self, qpos: np.ndarray, kpos: np.ndarray, offset: int = 0) -> np.ndarray:
        """Boolean visibility for broadcastable query/key index arrays."""
        qabs = qpos + offset
        if self.kind == "none":
            return np.ones(np.broadcast_shapes(np.shape(qpos), np.shape(kpos)), dtype=bool)
        vis = kpos <= qabs
        if self.kind == "sliding_window":
            vis &= kpos > qabs - self.window
        return vis

    def to_dict(self) -> dict:
        return {"kind": self.kind} if self.window is None else {"kind": self.kind, "window": self.window}


@dataclass(frozen=True)
class ThresholdPolicy:
    """Either a fixed λ or a calibrated constant ``a`` with λ = a / seq_len_kv."""

    kind: str = "fixed"
    value: float = 0.0

    def __post_init__(self) -> None:
        if self.kind == "fixed":
            if not self.value >= 0:
                raise GeometryError(f"fixed threshold must be >= 0, got {self.value}")
        elif self.kind == "calibrated":
            if not self.value > 0:
                raise GeometryError(f"calibrated constant must be > 0, got {self.value}")
        else:
            raise GeometryError(f"unknown threshold kind {self.kind!r}")

    @classmethod
    def fixed(cls, lam: float) -> ThresholdPolicy:
        return cls("fixed", float(lam))

    @classmethod
    def calibrated(cls, a: float) -> ThresholdPolicy:
        return cls("calibrated", float(a))

    def resolve(self, seq_len_kv: int) -> float:
        lam = self.value if self.kind == "fixed" else self.value / seq_len_kv
        if lam >= 1:
            warnings.warn(
                f"threshold λ={lam:g} >= 1 allows skipping blocks that hold the running max",
                stacklevel=2,
            )
        return lam

    def ln_lambda(self, seq_len_kv: int) -> float:
        lam = self.resolve(seq_len_kv)
        return -math.inf if lam == 0 else math.log(lam)

    def to_dict(self) -> dict:
        key = "lambda" if self.kind == "fixed" else "a"
        return {"kind": self.kind, key: self.value}

    @classmethod
    def from_dict(cls, d: dict) -> ThresholdPolicy:
        kind = d.get("kind", "fixed")
        if kind == "fixed":
            return cls.fixed(d.get("lambda", d.get("value", 0.0)))
        return cls.calibrated(d.get("a", d.get("value")))


@dataclass(frozen=True)
class AttentionSpec:
    seq_len_q: int
    seq_len_kv: int
    num_q_heads: int = 1
    num_kv_heads: int = 1
    head_dim: int = 64
    block_rows: int = 64
    block_cols: int = 64
    mask: MaskMode = field(default_factory=MaskMode)
    scale: float | None = None
    threshold: ThresholdPolicy = field(default_factory=ThresholdPolicy)
    col_order: str | tuple[int, ...] = "sequential"

    def __post_init__(self) -> None:
        for name in ("seq_len_q", "seq_len_kv", "num_q_heads", "num_kv_heads",
                     "head_dim", "block_rows", "block_cols"):
            if getattr(self, name) < 1:
                raise GeometryError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.num_q_heads % self.num_kv_heads:
            raise GeometryError(
                f"num_q_heads={self.num_q_heads} not divisible by num_kv_heads={self.num_kv_heads}"
            )
        if isinstance(self.col_order, str):
            if self.col_order not in ("sequential", "reverse"):
                raise GeometryError(f"unknown col_order {self.col_order!r}")
        else:
            perm = tuple(int(j) for j in self.col_order)
            if sorted(perm) != list(range(self.t_c)):
                raise GeometryError(f"col_order is not a permutation of 0..{self.t_c - 1}")
            object.__setattr__(self, "col_order", perm)

    @property
    def t_r(self) -> int:
        return -(-self.seq_len_q // self.block_rows)

    @property
    def t_c(self) -> int:
        return -(-self.seq_len_kv // self.block_cols)

    @property
    def group_size(self) -> int:
        return self.num_q_heads // self.num_kv_heads

    @property
    def softmax_scale(self) -> float:
        return 1.0 / math.sqrt(self.head_dim) if self.scale is None else float(self.scale)

    @property
    def mask_offset(self) -> int:
        return self.seq_len_kv - self.seq_len_q

    def column_order(self) -> tuple[int, ...]:
        if self.col_order == "sequential":
            return tuple(range(self.t_c))
        if self.col_order == "reverse":
            return tuple(range(self.t_c - 1, -1, -1))
        return self.col_order

    def kv_head(self, q_head: int) -> int:
        return q_head // self.group_size

    def with_(self, **changes) -> AttentionSpec:
        from dataclasses import replace

        return replace(self, **changes)

    def check_shapes(self, q, k, v) -> None:
        want_q = (self.num_q_heads, self.seq_len_q, self.head_dim)
        want_kv = (self.num_kv_heads, self.seq_len_kv, self.head_dim)
        for name, arr, want in (("Q", q, want_q), ("K", k, want_kv), ("V", v, want_kv)):
            if arr is not None and tuple(np.shape(arr)) != want:
                raise GeometryError(f"{name} has shape {tuple(np.shape(arr))}, expected {want}")

    def live_elements(self) -> np.ndarray:
        """[seq_len_q, seq_len_kv] visibility under the element mask."""
        qpos = np.arange(self.seq_len_q)[:, None]
        kpos = np.arange(self.seq_len_kv)[None, :]
        return self.mask.live(qpos, kpos, self.mask_offset)

    def masked_out_blocks(self) -> np.ndarray:
        """[T_r, T_c] True where the element mask removes every real element."""
        live = np.zeros((self.t_r * self.block_rows, self.t_c * self.block_cols), dtype=bool)
        live[: self.seq_len_q, : self.seq_len_kv] = self.live_elements()
        blocks = live.reshape(self.t_r, self.block_rows, self.t_c, self.block_cols)
        return ~blocks.any(axis=(1, 3))

    def to_dict(self) -> dict:
        return {
            "seq_len_q": self.seq_len_q,
            "seq_len_kv": self.seq_len_kv,
            "num_q_heads": self.num_q_heads,
            "num_kv_heads": self.num_kv_heads,
            "head_dim": self.head_dim,
            "block_rows": self.block_rows,
            "block_cols": self.block_cols,
            "mask": self.mask.to_dict(),
            "scale": self.scale,
            "threshold": self.threshold.to_dict(),
            "col_order": self.col_order if isinstance(self.col_order, str) else list(self.col_order),
        }

    @classmethod
    def from_dict(cls, d: dict) -> AttentionSpec:
        d = dict(d)
        if "mask" in d:
            d["mask"] = MaskMode(**d["mask"])
        if "threshold" in d:
            d["threshold"] = ThresholdPolicy.from_dict(d["threshold"])
        if isinstance(d.get("col_order"), list):
            d["col_order"] = tuple(d["col_order"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise GeometryError(str(exc)) from exc


@dataclass(eq=False)
class SkipMask:
    """Per (head, query block, key block) decision grid.

    ``states[h, i, j]`` is one of KEPT, SKIPPED, MASKED_OUT.  ``order`` is the
    key-block processing order that produced the decisions.
    """

    states: np.ndarray
    order: tuple[int, ...]

    @classmethod
    def empty(cls, spec: AttentionSpec) -> SkipMask:
        """All computable blocks kept; masked_out where the element mask says so."""
        states = np.where(spec.masked_out_blocks(), MASKED_OUT, KEPT).astype(np.int8)
        states = np.broadcast_to(states, (spec.num_q_heads, spec.t_r, spec.t_c)).copy()
        return cls(states, spec.column_order())

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.states.shape)

    @property
    def skipped(self) -> np.ndarray:
        return self.states == SKIPPED

    def counts(self) -> tuple[int, int, int]:
        s = self.states
        return int((s == KEPT).sum()), int((s == SKIPPED).sum()), int((s == MASKED_OUT).sum())

    def sparsity(self) -> float:
        kept, skipped, _ = self.counts()
        return skipped / (kept + skipped) if kept + skipped else 0.0

    def check_matches(self, spec: AttentionSpec) -> None:
        want = (spec.num_q_heads, spec.t_r, spec.t_c)
        if self.dims != want:
            raise GeometryError(f"skip mask dims {self.dims} do not match block grid {want}")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SkipMask):
            return NotImplemented
        return self.order == other.order and np.array_equal(self.states, other.states)

    def to_json(self) -> str:
        flat = "".join(_STATE_CHARS[s] for s in self.states.ravel())
        runs = [f"{len(m.group(0))}{m.group(1)}" for m in re.finditer(r"([KSM])\1*", flat)]
        doc = {
            "dims": list(self.dims),
            "layout": ["head", "block_row", "block_col"],
            "order": list(self.order),
            "states": "".join(runs),
        }
        return json.dumps(doc, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> SkipMask:
        doc = json.loads(text)
        dims = tuple(doc["dims"])
        flat = []
        for count, ch in re.findall(r"(\d+)([KSM])", doc["states"]):
            flat.extend([_STATE_CHARS.index(ch)] * int(count))
        if len(flat) != int(np.prod(dims)):
            raise GeometryError(f"run-length states cover {len(flat)} cells, dims need {int(np.prod(dims))}")
        return cls(np.array(flat, dtype=np.int8).reshape(dims), tuple(doc["order"]))


def element_keep_mask(spec: AttentionSpec, mask: SkipMask | None) -> np.ndarray:
    """[num_q_heads, seq_len_q, seq_len_kv] positions that enter the softmax."""
    live = spec.live_elements()
    if mask is None:
        return np.broadcast_to(live, (spec.num_q_heads, *live.shape))
    mask.check_matches(spec)
    kept = mask.states == KEPT
    rows = np.repeat(np.repeat(kept, spec.block_rows, axis=1), spec.block_cols, axis=2)
    rows = rows[:, : spec.seq_len_q, : spec.seq_len_kv]
    return rows & live[None]

