import itertools
from dataclasses import replace
from fractions import Fraction

import pytest

from blasst.pipeline import (
    ModelError,
    PhaseModel,
    PipelineOp,
    build_ops,
    build_schedule,
    simulate,
    speedup,
    speedup_curve,
)

PREFILL = PhaseModel.default("prefill")
DECODE = PhaseModel.default("decode")


@pytest.mark.parametrize("model, skipped, expected", [
    (PREFILL, (), 18),
    (PREFILL, (1, 3), 14),
    (DECODE, (), 30),
    (DECODE, (1, 2, 4), 23),
])
def test_shipped_totals(model, skipped, expected):
    assert build_schedule(model, skipped).runtime == expected


def test_prefill_point_speedup():
    assert speedup(PREFILL, (1, 3)) == Fraction(18, 14)
    assert f"{float(speedup(PREFILL, (1, 3))):.3f}" == "1.286"


def test_empty_skip_set_is_the_baseline():
    for model in (PREFILL, DECODE):
        assert build_schedule(model, ()).signature() == build_schedule(model).signature()
        assert speedup(model, ()) == 1


def _kinds_for_loop(trace, loop):
    return {e.op.kind for e in trace.entries if e.op.loop_index == loop}


def test_prefill_keeps_v_loads_decode_drops_them():
    pre = build_schedule(PREFILL, (1,))
    dec = build_schedule(DECODE, (1,))
    assert "load_V" in _kinds_for_loop(pre, 1)
    assert "BMM2" not in _kinds_for_loop(pre, 1)
    assert "load_V" not in _kinds_for_loop(dec, 1)
    assert {"load_K", "BMM1", "skip_check"} <= _kinds_for_loop(dec, 1)


def test_skip_softmax_variant_drops_ex2():
    model = DECODE.with_(skip_softmax=True)
    trace = build_schedule(model, (1, 2, 4))
    assert "EX2_softmax" not in _kinds_for_loop(trace, 2)
    assert trace.runtime <= build_schedule(DECODE, (1, 2, 4)).runtime


@pytest.mark.parametrize("model", [PREFILL, DECODE, DECODE.with_(skip_softmax=True)])
def test_runtime_monotone_over_all_subsets(model):
    loops = range(model.num_loops)
    runtime = {}
    for r in range(model.num_loops + 1):
        for subset in itertools.combinations(loops, r):
            runtime[frozenset(subset)] = build_schedule(model, subset).runtime
    for subset, t in runtime.items():
        for extra in set(loops) - subset:
            assert runtime[subset | {extra}] <= t


@pytest.mark.parametrize("model, skipped", [(PREFILL, (0, 2)), (DECODE, (1, 2, 4)), (DECODE, ())])
def test_trace_respects_resources_and_dependencies(model, skipped):
    trace = build_schedule(model, skipped)
    by_id = trace.by_id()
    for e in trace.entries:
        for d in e.op.deps:
            assert by_id[d].end <= e.start
        if not e.op.kind.startswith("load"):
            assert e.end - e.start == e.op.duration
    by_res = {}
    for e in trace.entries:
        by_res.setdefault(e.resource, []).append(e)
    for entries in by_res.values():
        entries.sort(key=lambda e: e.start)
        for a, b in zip(entries, entries[1:]):
            assert a.end <= b.start


def test_skip_check_is_hidden():
    for model in (PREFILL, DECODE):
        ops = build_ops(model)
        gone = {op.id: op.deps for op in ops if op.kind == "skip_check"}
        stripped = [
            replace(op, deps=tuple(d2 for d in op.deps for d2 in (gone[d] if d in gone else (d,))))
            for op in ops if op.id not in gone
        ]
        assert simulate(stripped, model).runtime == build_schedule(model).runtime


def test_speedup_curve_properties():
    for model in (PREFILL, DECODE):
        levels = [0.0, 0.2, 0.4, 0.5, 0.6, 0.8]
        curve = speedup_curve(model, levels, trials=8, seed=3)
        assert curve[0] == (0.0, 1.0)
        values = [s for _, s in curve]
        assert values == sorted(values)
        assert speedup_curve(model, levels, trials=8, seed=3) == curve


def test_cycle_detected():
    ops = [
        PipelineOp("a", "BMM1", 0, 0, 1, ("b",), "MMA"),
        PipelineOp("b", "BMM2", 0, 0, 1, ("a",), "MMA"),
    ]
    with pytest.raises(ModelError, match="cycle"):
        simulate(ops, PREFILL)


@pytest.mark.parametrize("change", [
    dict(phase="train"),
    dict(num_loops=0),
    dict(durations={"load_K": 1}),
    dict(runtime_metric="p99"),
])
def test_model_validation(change):
    with pytest.raises(ModelError):
        PREFILL.with_(**change)


def test_out_of_range_skip():
    with pytest.raises(ModelError):
        build_ops(PREFILL, (4,))


def test_csv_and_json_roundtrip():
    trace = build_schedule(DECODE, (1,))
    lines = trace.to_csv().splitlines()
    assert lines[0] == "op,resource,start,end"
    assert len(lines) == 1 + len(trace.entries)
    d = {"phase": "prefill", "num_loops": 4, "num_tile_rows": 2, "durations": PREFILL.durations}
    assert PhaseModel.from_dict(d) == PREFILL
