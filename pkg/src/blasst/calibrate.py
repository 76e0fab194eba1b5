"""Threshold calibration: per-length grid search, then a through-origin fit of λ = a / L."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from blasst.core import skip_margins, sparsity_from_margins
from blasst.geometry import AttentionSpec, ThresholdPolicy
from blasst.tensor_io import SyntheticWorkloadSpec, generate_workload


class CalibrationError(RuntimeError):
    """No length produced a sparsity within tolerance of the target."""

    def __init__(self, message: str, gaps: dict[int, float]):
        super().__init__(message)
        self.gaps = gaps


def default_lambda_grid() -> list[float]:
    return [float(x) for x in np.logspace(-6, -1, 25)]


@dataclass
class CalibrationConfig:
    target_sparsity: float
    lengths: list[int]
    workload: SyntheticWorkloadSpec
    attention: AttentionSpec
    lambda_grid: list[float] = field(default_factory=default_lambda_grid)
    tolerance: float = 0.03
    samples_per_length: int = 1

    def __post_init__(self) -> None:
        self.lengths = [int(L) for L in self.lengths]
        self.lambda_grid = [float(x) for x in self.lambda_grid]
        if not 0 < self.target_sparsity < 1:
            raise ValueError("target_sparsity must lie in (0, 1)")
        if not self.lambda_grid:
            raise ValueError("lambda_grid is empty")
        if any(x <= 0 for x in self.lambda_grid) or self.lambda_grid != sorted(self.lambda_grid):
            raise ValueError("lambda_grid must be positive and sorted ascending")
        if not 0 < self.tolerance < 0.5:
            raise ValueError("tolerance must lie in (0, 0.5)")
        if len(set(self.lengths)) != len(self.lengths):
            raise ValueError("lengths must be distinct")
        short = [L for L in self.lengths if L < 2 * self.attention.block_cols]
        if short:
            raise ValueError(f"lengths {short} are shorter than two key blocks")
        if self.samples_per_length < 1:
            raise ValueError("samples_per_length must be >= 1")

    def to_dict(self) -> dict:
        return {
            "target_sparsity": self.target_sparsity,
            "lengths": self.lengths,
            "lambda_grid": self.lambda_grid,
            "tolerance": self.tolerance,
            "samples_per_length": self.samples_per_length,
            "workload": self.workload.to_dict(),
            "attention": self.attention.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> CalibrationConfig:
        d = dict(d)
        d["workload"] = SyntheticWorkloadSpec.from_dict(d["workload"])
        d["attention"] = AttentionSpec.from_dict(d["attention"])
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> CalibrationConfig:
        return cls.from_dict(json.loads(text))


class SparsityMeter:
    """Measures achieved sparsity for a config, caching the decision margins.

    Workload sample ``s`` at length ``L`` uses seed ``workload.seed + s``.
    The margins of a workload fix its skip pattern for every λ, so sweeping
    the grid costs one blocked scan per (length, sample).
    """

    def __init__(self, cfg: CalibrationConfig):
        self.cfg = cfg
        self._margins: dict[tuple[int, int], np.ndarray] = {}

    def margins(self, L: int, sample: int) -> np.ndarray:
        key = (L, sample)
        if key not in self._margins:
            w = self.cfg.workload
            q, k, _ = generate_workload(w.with_(seq_len=L, seed=w.seed + sample))
            spec = self.cfg.attention.with_(seq_len_q=L, seq_len_kv=L)
            self._margins[key] = skip_margins(q, k, spec)
        return self._margins[key]

    def samples(self, lam: float, L: int) -> list[float]:
        ln_lam = -math.inf if lam == 0 else math.log(lam)
        return [sparsity_from_margins(self.margins(L, s), ln_lam)
                for s in range(self.cfg.samples_per_length)]

    def __call__(self, lam: float, L: int) -> float:
        return float(np.mean(self.samples(lam, L)))


def measure_sparsity(lam: float, L: int, cfg: CalibrationConfig,
                     meter: SparsityMeter | None = None) -> float:
    """Mean global sparsity over the seeded workloads of length L at fixed λ."""
    if lam <= 0:
        raise ValueError("lambda must be > 0")
    return (meter or SparsityMeter(cfg))(lam, L)


@dataclass
class CalibrationPoint:
    length: int
    inv_length: float
    lambda_best: float
    achieved_sparsity: float
    gap: float


@dataclass
class CalibrationFit:
    a: float
    points: list[CalibrationPoint]
    rejected_lengths: list[int] = field(default_factory=list)
    max_abs_residual: float = 0.0
    target_sparsity: float | None = None

    def threshold(self) -> ThresholdPolicy:
        return ThresholdPolicy.calibrated(self.a)

    def lambda_for(self, L: int) -> float:
        return self.a / L

    def to_dict(self) -> dict:
        return {
            "a": self.a,
            "target_sparsity": self.target_sparsity,
            "points": [p.__dict__ for p in self.points],
            "rejected_lengths": self.rejected_lengths,
            "max_abs_residual": self.max_abs_residual,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> CalibrationFit:
        d = json.loads(text)
        d["points"] = [CalibrationPoint(**p) for p in d["points"]]
        return cls(**d)


def fit_inverse_law(points) -> tuple[float, float]:
    """Least-squares slope through the origin for (1/L, λ) pairs, plus max |residual|."""
    pts = sorted((float(x), float(y)) for x, y in points)
    if not pts:
        raise ValueError("no points to fit")
    sxy = math.fsum(x * y for x, y in pts)
    sxx = math.fsum(x * x for x, _ in pts)
    a = sxy / sxx
    return a, max(abs(y - a * x) for x, y in pts)


def grid_search(L: int, cfg: CalibrationConfig, meter: SparsityMeter) -> CalibrationPoint:
    """λ in the grid whose sparsity is closest to the target; ties keep the smaller λ."""
    best_lam, best_s, min_gap = None, None, math.inf
    for lam in cfg.lambda_grid:
        s = meter(lam, L)
        gap = abs(s - cfg.target_sparsity)
        if gap < min_gap:
            best_lam, best_s, min_gap = lam, s, gap
    return CalibrationPoint(L, 1.0 / L, best_lam, best_s, min_gap)


def calibrate(cfg: CalibrationConfig, meter: SparsityMeter | None = None) -> CalibrationFit:
    meter = meter or SparsityMeter(cfg)
    accepted, rejected, gaps = [], [], {}
    for L in cfg.lengths:
        p = grid_search(L, cfg, meter)
        gaps[L] = p.gap
        if p.gap < cfg.tolerance:
            accepted.append(p)
        else:
            rejected.append(L)
    if not accepted:
        table = ", ".join(f"L={L}: gap {g:.4f}" for L, g in gaps.items())
        raise CalibrationError(f"no length reached the target within δ={cfg.tolerance}: {table}", gaps)
    a, resid = fit_inverse_law((p.inv_length, p.lambda_best) for p in accepted)
    return CalibrationFit(a, accepted, rejected, resid, cfg.target_sparsity)


def best_fixed_lambda(cfg: CalibrationConfig, lengths, meter: SparsityMeter) -> tuple[float, float]:
    """Grid λ minimizing the worst-case |sparsity - target| over ``lengths``."""
    best = (math.inf, None)
    for lam in cfg.lambda_grid:
        worst = max(abs(meter(lam, L) - cfg.target_sparsity) for L in lengths)
        if worst < best[0]:
            best = (worst, lam)
    return best[1], best[0]


@dataclass
class StabilityRow:
    length: int
    mode: str
    lam: float
    achieved: float
    target: float
    spread: float  # max - min across seeded samples

    @property
    def deviation(self) -> float:
        return self.achieved - self.target


def stability_eval(fit: CalibrationFit, fixed_lambda: float, lengths, cfg: CalibrationConfig,
                   meter: SparsityMeter | None = None) -> list[StabilityRow]:
    """Achieved sparsity per length under fixed(fixed_lambda) and calibrated(fit.a)."""
    meter = meter or SparsityMeter(cfg)
    target = cfg.target_sparsity
    rows = []
    for L in lengths:
        for mode, lam in (("fixed", fixed_lambda), ("calibrated", fit.a / L)):
            per_sample = meter.samples(lam, L)
            rows.append(StabilityRow(L, mode, lam, float(np.mean(per_sample)), target,
                                     float(max(per_sample) - min(per_sample))))
    return rows


def stability_csv(rows: list[StabilityRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["length", "mode", "lambda", "achieved", "target", "deviation"])
    for r in rows:
        w.writerow([r.length, r.mode, f"{r.lam:.6e}", f"{r.achieved:.6f}", f"{r.target:.6f}",
                    f"{r.deviation:+.6f}"])
    return buf.getvalue()
