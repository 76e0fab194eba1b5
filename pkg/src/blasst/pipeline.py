"""Discrete-event model of the prefill and decode attention pipelines.

A ``PhaseModel`` expands into a DAG of ops (loads, matmuls, softmax pieces),
each bound to one resource.  ``build_schedule`` runs a deterministic list
scheduler over that DAG: whenever a resource is free it starts the ready op
with the smallest ``(loop_index, tile_row, kind)`` key.

Skipping a loop removes ops from the DAG before scheduling:

* prefill drops EX2_softmax, row_sum_scale and BMM2; the V load stays.
* decode drops load_V, BMM2 and row_sum_scale (and EX2_softmax when
  ``skip_softmax`` is set, the compute-bound MLA-style variant).

Anything that depended on a dropped op inherits that op's dependencies.

Decode loads run on ``tma_pipeline_stages`` independent TMA slots that share
HBM bandwidth: with ``n`` loads in flight each progresses at rate
``min(1, hbm_concurrency / n)``.  Times are exact rationals.

Dependency edges
----------------
prefill, tile row t, loop j::

    BMM1[t,j]       <- load_K[j]
    skip_check[t,j] <- BMM1[t,j]
    EX2[t,j]        <- BMM1[t,j], BMM2[t,j-1]      (P buffer reuse)
    row_sum[t,j]    <- EX2[t,j]
    BMM2[t,j]       <- EX2[t,j], skip_check[t,j], load_V[j]

decode, loop j::

    BMM1[j]         <- load_K[j]
    skip_check[j]   <- BMM1[j]
    load_V[j]       <- skip_check[j]                (scoreboard on the decision)
    EX2[j]          <- skip_check[j]
    row_sum[j]      <- EX2[j]
    BMM2[j]         <- load_V[j], skip_check[j], EX2[j]
"""

from __future__ import annotations

import csv
import io
import json
import random
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from typing import Iterable

KINDS = ("load_K", "load_V", "BMM1", "skip_check", "EX2_softmax", "row_sum_scale", "BMM2")
_KIND_RANK = {k: i for i, k in enumerate(KINDS)}
RESOURCE_KINDS = ("TMA_load", "MMA", "softmax_warpgroup_0", "softmax_warpgroup_1", "correction")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineOp:
    id: str
    kind: str
    loop_index: int
    tile_row: int
    duration: int
    deps: tuple[str, ...]
    resource: str  # resource kind; TMA ops may land on any stage slot

    @property
    def priority(self) -> tuple[int, int, int]:
        return (self.loop_index, self.tile_row, _KIND_RANK[self.kind])


@dataclass(frozen=True)
class PhaseModel:
    phase: str
    num_loops: int
    durations: dict
    num_tile_rows: int = 1
    tma_pipeline_stages: int = 1
    hbm_concurrency: int = 1
    skip_softmax: bool = False
    runtime_metric: str = "total"  # or "load_V": completion time of the last V load

    def __post_init__(self) -> None:
        if self.phase not in ("prefill", "decode"):
            raise ModelError(f"unknown phase {self.phase!r}")
        if self.num_loops < 1 or self.num_tile_rows < 1 or self.tma_pipeline_stages < 1:
            raise ModelError("loop, tile-row and stage counts must be >= 1")
        if self.hbm_concurrency < 1:
            raise ModelError("hbm_concurrency must be >= 1")
        if self.phase == "decode" and self.num_tile_rows != 1:
            raise ModelError("decode has a single query tile row")
        missing = [k for k in KINDS if k not in self.durations]
        if missing:
            raise ModelError(f"duration table lacks {missing}")
        for k, v in self.durations.items():
            if k not in _KIND_RANK:
                raise ModelError(f"unknown op kind {k!r} in duration table")
            if not isinstance(v, int) or v < 1:
                raise ModelError(f"duration of {k} must be a positive integer, got {v!r}")
        if self.runtime_metric not in ("total", "load_V"):
            raise ModelError(f"unknown runtime_metric {self.runtime_metric!r}")

    @classmethod
    def from_dict(cls, d: dict) -> PhaseModel:
        d = {k: v for k, v in d.items() if not k.startswith("_")}
        try:
            return cls(**d)
        except TypeError as exc:
            raise ModelError(str(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> PhaseModel:
        return cls.from_dict(json.loads(text))

    @classmethod
    def default(cls, phase: str) -> PhaseModel:
        """The shipped model for ``phase`` ('prefill' or 'decode')."""
        text = resources.files("blasst.data").joinpath(f"{phase}_model.json").read_text()
        return cls.from_json(text)

    def with_(self, **changes) -> PhaseModel:
        from dataclasses import replace

        return replace(self, **changes)


def _op_id(kind: str, loop: int, tile: int) -> str:
    return f"{kind}[L{loop}]" if tile < 0 else f"{kind}[T{tile}L{loop}]"


def build_ops(model: PhaseModel, skipped_loops: Iterable[int] = ()) -> list[PipelineOp]:
    """Expand the model into ops, drop the work of skipped loops, rewire dependencies."""
    skipped = set(skipped_loops)
    bad = [j for j in skipped if not 0 <= j < model.num_loops]
    if bad:
        raise ModelError(f"skipped loops {sorted(bad)} outside 0..{model.num_loops - 1}")
    dur = model.durations
    spec: list[tuple[str, str, int, int, list[str], str]] = []

    def add(kind, loop, tile, deps, resource):
        spec.append((_op_id(kind, loop, tile), kind, loop, max(tile, 0), deps, resource))

    if model.phase == "prefill":
        for j in range(model.num_loops):
            add("load_K", j, -1, [], "TMA_load")
            add("load_V", j, -1, [], "TMA_load")
            for t in range(model.num_tile_rows):
                sm = f"softmax_warpgroup_{t % 2}"
                add("BMM1", j, t, [_op_id("load_K", j, -1)], "MMA")
                add("skip_check", j, t, [_op_id("BMM1", j, t)], "correction")
                ex2_deps = [_op_id("BMM1", j, t)]
                if j > 0:
                    ex2_deps.append(_op_id("BMM2", j - 1, t))
                add("EX2_softmax", j, t, ex2_deps, sm)
                add("row_sum_scale", j, t, [_op_id("EX2_softmax", j, t)], "correction")
                add("BMM2", j, t, [_op_id("EX2_softmax", j, t), _op_id("skip_check", j, t),
                                   _op_id("load_V", j, -1)], "MMA")
        dropped = {"EX2_softmax", "row_sum_scale", "BMM2"}
    else:
        for j in range(model.num_loops):
            add("load_K", j, -1, [], "TMA_load")
            add("BMM1", j, -1, [_op_id("load_K", j, -1)], "MMA")
            add("skip_check", j, -1, [_op_id("BMM1", j, -1)], "softmax_warpgroup_0")
            add("load_V", j, -1, [_op_id("skip_check", j, -1)], "TMA_load")
            add("EX2_softmax", j, -1, [_op_id("skip_check", j, -1)], "softmax_warpgroup_0")
            add("row_sum_scale", j, -1, [_op_id("EX2_softmax", j, -1)], "correction")
            add("BMM2", j, -1, [_op_id("load_V", j, -1), _op_id("skip_check", j, -1),
                                _op_id("EX2_softmax", j, -1)], "MMA")
        dropped = {"load_V", "BMM2", "row_sum_scale"}
        if model.skip_softmax:
            dropped.add("EX2_softmax")

    removed: dict[str, list[str]] = {}
    for oid, kind, loop, _, deps, _ in spec:
        if loop in skipped and kind in dropped:
            removed[oid] = deps

    def resolve(deps: list[str]) -> list[str]:
        out: list[str] = []
        for dep in deps:
            for d in resolve(removed[dep]) if dep in removed else [dep]:
                if d not in out:
                    out.append(d)
        return out

    return [
        PipelineOp(oid, kind, loop, tile, dur[kind], tuple(resolve(deps)), res)
        for oid, kind, loop, tile, deps, res in spec
        if oid not in removed
    ]


@dataclass
class TraceEntry:
    op: PipelineOp
    resource: str
    start: Fraction
    end: Fraction


@dataclass
class ScheduleTrace:
    entries: list[TraceEntry]
    runtime_metric: str = "total"
    resources: list[str] = field(default_factory=list)

    @property
    def total_runtime(self) -> Fraction:
        return max((e.end for e in self.entries), default=Fraction(0))

    def completion(self, kind: str) -> Fraction:
        return max((e.end for e in self.entries if e.op.kind == kind), default=Fraction(0))

    @property
    def runtime(self) -> Fraction:
        """Runtime under the model's metric (total, or last V-load completion)."""
        return self.total_runtime if self.runtime_metric == "total" else self.completion("load_V")

    def utilization(self) -> dict[str, float]:
        total = self.total_runtime
        busy = {r: Fraction(0) for r in self.resources}
        for e in self.entries:
            busy[e.resource] += e.end - e.start
        return {r: float(b / total) if total else 0.0 for r, b in busy.items()}

    def by_id(self) -> dict[str, TraceEntry]:
        return {e.op.id: e for e in self.entries}

    def signature(self) -> list[tuple]:
        return [(e.op.id, e.resource, e.start, e.end) for e in self.entries]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["op", "resource", "start", "end"])
        for e in sorted(self.entries, key=lambda e: (e.start, e.resource, e.op.id)):
            w.writerow([e.op.id, e.resource, _fmt(e.start), _fmt(e.end)])
        return buf.getvalue()


def _fmt(x: Fraction) -> str:
    return str(x.numerator) if x.denominator == 1 else f"{float(x):.6f}"


def _check_acyclic(ops: list[PipelineOp]) -> None:
    ids = {op.id for op in ops}
    deps = {op.id: [d for d in op.deps] for op in ops}
    for op in ops:
        for d in op.deps:
            if d not in ids:
                raise ModelError(f"{op.id} depends on unknown op {d}")
    state: dict[str, int] = {}
    for root in deps:
        stack = [(root, iter(deps[root]))]
        if state.get(root) == 2:
            continue
        state[root] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                state[node] = 2
                stack.pop()
            elif state.get(nxt) == 1:
                raise ModelError(f"dependency cycle through {nxt}")
            elif state.get(nxt) is None:
                state[nxt] = 1
                stack.append((nxt, iter(deps[nxt])))


def simulate(ops: list[PipelineOp], model: PhaseModel) -> ScheduleTrace:
    _check_acyclic(ops)
    stages = model.tma_pipeline_stages if model.phase == "decode" else 1
    slots = [f"TMA_load[{s}]" for s in range(stages)] if stages > 1 else ["TMA_load"]
    resources = slots + [r for r in RESOURCE_KINDS[1:] if any(op.resource == r for op in ops)]
    busy: dict[str, PipelineOp | None] = {r: None for r in resources}
    pending = sorted(ops, key=lambda op: op.priority)
    done: set[str] = set()
    start: dict[str, Fraction] = {}
    remaining: dict[str, Fraction] = {}  # work left on in-flight loads
    entries: list[TraceEntry] = []
    now = Fraction(0)

    def load_rate(n: int) -> Fraction:
        return min(Fraction(1), Fraction(model.hbm_concurrency, n))

    while pending or any(busy.values()):
        for r in resources:
            if busy[r] is not None:
                continue
            kind = "TMA_load" if r in slots else r
            for op in pending:
                if op.resource == kind and all(d in done for d in op.deps):
                    busy[r] = op
                    start[op.id] = now
                    remaining[op.id] = Fraction(op.duration)
                    pending.remove(op)
                    break
        running = [(r, op) for r, op in busy.items() if op is not None]
        if not running:
            raise ModelError("scheduler stalled with unmet dependencies")
        n_loads = sum(1 for r, _ in running if r in slots)
        rates = {op.id: (load_rate(n_loads) if r in slots else Fraction(1)) for r, op in running}
        step = min(remaining[op.id] / rates[op.id] for _, op in running)
        now += step
        for r, op in running:
            remaining[op.id] -= step * rates[op.id]
            if remaining[op.id] == 0:
                busy[r] = None
                done.add(op.id)
                entries.append(TraceEntry(op, r, start[op.id], now))
    entries.sort(key=lambda e: (e.start, e.op.priority))
    return ScheduleTrace(entries, model.runtime_metric, resources)


def build_schedule(model: PhaseModel, skipped_loops: Iterable[int] = ()) -> ScheduleTrace:
    return simulate(build_ops(model, skipped_loops), model)


def speedup(model: PhaseModel, skipped_loops: Iterable[int]) -> Fraction:
    return build_schedule(model).runtime / build_schedule(model, skipped_loops).runtime


def speedup_curve(model: PhaseModel, sparsities, trials: int, seed: int) -> list[tuple[float, float]]:
    """Baseline runtime over mean runtime of random skip sets, per sparsity level.

    Each trial draws one random loop permutation and skips its first
    ``round(s * num_loops)`` entries, so skip sets are nested across levels
    within a trial (common random numbers).
    """
    if trials < 1:
        raise ModelError("trials must be >= 1")
    for s in sparsities:
        if not 0 <= s < 1:
            raise ModelError(f"sparsity {s} outside [0, 1)")
    rng = random.Random(seed)
    perms = [rng.sample(range(model.num_loops), model.num_loops) for _ in range(trials)]
    base = build_schedule(model).runtime
    cache: dict[frozenset, Fraction] = {}
    out = []
    for s in sparsities:
        k = round(s * model.num_loops)
        total = Fraction(0)
        for perm in perms:
            key = frozenset(perm[:k])
            if key not in cache:
                cache[key] = build_schedule(model, key).runtime
            total += cache[key]
        out.append((float(s), float(base / (total / trials))))
    return out
