import json
from fractions import Fraction

import numpy as np
import pytest

from blasst.calibrate import (
    CalibrationConfig,
    CalibrationError,
    CalibrationFit,
    SparsityMeter,
    best_fixed_lambda,
    calibrate,
    default_lambda_grid,
    fit_inverse_law,
    measure_sparsity,
    stability_csv,
    stability_eval,
)
from blasst.core import blasst_forward
from blasst.geometry import AttentionSpec, ThresholdPolicy
from blasst.tensor_io import SharedImportance, SinkBiased, SyntheticWorkloadSpec, generate_workload


def _cfg(target=0.5, lengths=(1024, 2048), grid=None, **kw):
    w = SyntheticWorkloadSpec(1024, 1, 1, 64, seed=5, distribution=SinkBiased(1.0, (0,), 96.0))
    return CalibrationConfig(target, list(lengths), w, AttentionSpec(1024, 1024, 1, 1, 64, 64, 64),
                             lambda_grid=grid or default_lambda_grid(), **kw)


class LawMeter:
    """Sparsity that crosses ``target`` exactly at λ = a0 / L."""

    def __init__(self, a0, target, gaps=None):
        self.a0, self.target, self.gaps = a0, target, gaps or {}

    def __call__(self, lam, L):
        s = self.target * lam * L / self.a0
        return min(s, 1.0) + self.gaps.get(L, 0.0)


def test_exact_law_two_points():
    a, resid = fit_inverse_law([(1 / 1024, 0.01), (1 / 2048, 0.005)])
    assert a == 10.24
    assert resid < 1e-15


@pytest.mark.parametrize("a0", [0.5, 4.0, 32.0])
def test_calibrate_recovers_exact_law(a0):
    lengths = [1024, 2048, 4096, 8192]
    grid = sorted({a0 / L for L in lengths} | {a0 / L * 1.5 for L in lengths})
    cfg = _cfg(0.6, lengths, grid)
    fit = calibrate(cfg, LawMeter(a0, 0.6))
    assert abs(fit.a - a0) / a0 < 1e-12
    assert [p.lambda_best for p in fit.points] == [a0 / L for L in lengths]
    assert fit.rejected_lengths == []


def test_single_point_fit():
    a, resid = fit_inverse_law([(1 / 3000, 0.0042)])
    assert a == pytest.approx(0.0042 * 3000, rel=1e-15)
    assert resid == 0.0


def test_noisy_points_closed_form():
    pts = [("1e-3", "0.011"), ("5e-4", "0.0048"), ("2.5e-4", "0.0026")]
    exact = [(Fraction(x), Fraction(y)) for x, y in pts]
    sxy = sum(x * y for x, y in exact)
    sxx = sum(x * x for x, _ in exact)
    want = sxy / sxx  # 1.405e-5 / 1.3125e-6
    assert want == Fraction(1405, 13125) * 100
    a, resid = fit_inverse_law([(float(x), float(y)) for x, y in pts])
    assert abs(a - float(want)) / float(want) < 1e-12
    want_resid = max(abs(y - want * x) for x, y in exact)
    assert abs(resid - float(want_resid)) < 1e-15


def test_tie_keeps_smaller_lambda():
    class Flat:
        def __call__(self, lam, L):
            return {1e-3: 0.375, 1e-2: 0.625}.get(lam, 0.0)

    fit = calibrate(_cfg(0.5, [1024], [1e-4, 1e-3, 1e-2], tolerance=0.2), Flat())
    assert fit.points[0].lambda_best == 1e-3
    assert fit.points[0].gap == 0.125


def test_rejected_lengths_are_dropped():
    lengths = [1024, 2048, 4096]
    grid = sorted(2.0 / L for L in lengths)
    fit = calibrate(_cfg(0.5, lengths, grid), LawMeter(2.0, 0.5, gaps={2048: 0.2}))
    assert fit.rejected_lengths == [2048]
    assert [p.length for p in fit.points] == [1024, 4096]
    assert all(p.gap < 0.03 for p in fit.points)
    assert fit.a == pytest.approx(2.0, rel=1e-12)


def test_nothing_accepted_raises_with_gaps():
    with pytest.raises(CalibrationError) as err:
        calibrate(_cfg(0.5, [1024, 2048], [1e-3]), lambda lam, L: 0.0)
    assert err.value.gaps == {1024: 0.5, 2048: 0.5}


@pytest.mark.parametrize("bad", [
    dict(target=1.2),
    dict(grid=[1e-2, 1e-3]),
    dict(lengths=(1024, 1024)),
    dict(lengths=(100,)),
    dict(tolerance=0.6),
])
def test_config_validation(bad):
    kwargs = {k: v for k, v in bad.items() if k == "tolerance"}
    args = {k: v for k, v in bad.items() if k != "tolerance"}
    with pytest.raises(ValueError):
        _cfg(**args, **kwargs)


def test_config_json_roundtrip():
    cfg = _cfg(samples_per_length=2)
    assert CalibrationConfig.from_json(json.dumps(cfg.to_dict())).to_dict() == cfg.to_dict()


def test_tiny_lambda_gives_no_sparsity():
    assert measure_sparsity(1e-300, 1024, _cfg()) == 0.0


def test_measured_sparsity_monotone():
    cfg = _cfg()
    meter = SparsityMeter(cfg)
    values = [measure_sparsity(lam, 1024, cfg, meter) for lam in cfg.lambda_grid]
    assert values == sorted(values)


# Skipped blocks out of 1024 for the seeded sink workload (L=2048, one head,
# 64x64 tiles) over the default 25-point grid.  992 is every block except the
# first of each row.
SINK_2048_SKIPPED = [0] * 7 + [6, 70, 237, 506, 775, 932, 978, 989] + [992] * 10


def test_sink_curve_golden():
    cfg = _cfg(lengths=[2048])
    meter = SparsityMeter(cfg)
    curve = [meter(lam, 2048) for lam in cfg.lambda_grid]
    assert curve == [n / 1024 for n in SINK_2048_SKIPPED]
    q, k, v = (t.data for t in generate_workload(cfg.workload.with_(seq_len=2048)))
    spec = cfg.attention.with_(seq_len_q=2048, seq_len_kv=2048)
    for i in (7, 10, 13):
        mask = blasst_forward(q, k, v, spec.with_(threshold=ThresholdPolicy.fixed(cfg.lambda_grid[i]))).mask
        assert mask.counts()[1] == SINK_2048_SKIPPED[i]


def test_fit_json_roundtrip():
    fit = calibrate(_cfg(0.6, [1024, 2048], [4.0 / 2048, 4.0 / 1024]), LawMeter(4.0, 0.6))
    back = CalibrationFit.from_json(fit.to_json())
    assert back == fit
    assert back.threshold().resolve(4096) == pytest.approx(4.0 / 4096)


def _shared_cfg(lengths, samples=2):
    w = SyntheticWorkloadSpec(1024, 2, 2, 64, seed=21, distribution=SharedImportance())
    grid = [float(x) for x in np.logspace(-4, -0.05, 60)]
    return CalibrationConfig(0.5, lengths, w, AttentionSpec(1024, 1024, 2, 2, 64, 64, 64),
                             lambda_grid=grid, samples_per_length=samples)


def test_stability_single_length_degenerates():
    cfg = _shared_cfg([1024])
    meter = SparsityMeter(cfg)
    fit = calibrate(cfg, meter)
    rows = stability_eval(fit, fit.a / 1024, [1024], cfg, meter)
    fixed, cal = rows
    assert (fixed.mode, cal.mode) == ("fixed", "calibrated")
    assert fixed.lam == cal.lam and fixed.achieved == cal.achieved


def test_fixed_lambda_drifts_with_length():
    lengths = [512, 1024, 2048, 4096]
    cfg = _shared_cfg(lengths)
    meter = SparsityMeter(cfg)
    fit = calibrate(cfg, meter)
    rows = stability_eval(fit, 0.05, lengths, cfg, meter)
    fixed = [r.deviation for r in rows if r.mode == "fixed"]
    assert fixed == sorted(fixed) and fixed[-1] - fixed[0] > 0.2
    for r in rows:
        if r.mode == "calibrated":
            assert abs(r.deviation) < cfg.tolerance + max(r.spread, 0.02)
    text = stability_csv(rows)
    assert text.splitlines()[0] == "length,mode,lambda,achieved,target,deviation"
    assert len(text.splitlines()) == 1 + 2 * len(lengths)
    lam, worst = best_fixed_lambda(cfg, lengths, meter)
    assert lam in cfg.lambda_grid and worst > 0
