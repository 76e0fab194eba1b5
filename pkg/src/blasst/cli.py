"""Command line entry point: ``blasst <subcommand> [options]``.

Exit codes: 0 success, 1 I/O or file-format error, 2 validation error,
3 calibration failure.  Set BLASST_LOG=error|info|debug for logging.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from blasst import calibrate as cal
from blasst import pipeline
from blasst.core import blasst_forward, skip_margins, sparsity_from_margins
from blasst.geometry import AttentionSpec
from blasst.oracle import dense_attention, masked_oracle_attention
from blasst.sparse_grad import gradcheck
from blasst.tensor_io import (
    SyntheticWorkloadSpec,
    Tensor,
    TensorFormatError,
    gaussians,
    generate_workload,
    read_tensor,
    stream_key,
    write_tensor,
)

log = logging.getLogger("blasst")

EXIT_OK, EXIT_IO, EXIT_INVALID, EXIT_CALIBRATION = 0, 1, 2, 3


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    """Attention geometry plus exactly one input source.

    JSON form::

        {"attention": {...},
         "synthetic": {...} | "files": {"q": path, "k": path, "v": path},
         "outputs": {"output": "O.btsr", "mask": "mask.json", "report": "sparsity.csv"}}

    With a synthetic source, geometry fields missing from ``attention`` are
    taken from the workload (prefill: seq_len_q = seq_len_kv = seq_len).
    Relative file paths resolve against the config file's directory.
    """

    attention: AttentionSpec
    synthetic: SyntheticWorkloadSpec | None = None
    files: dict | None = None
    outputs: dict | None = None

    @classmethod
    def from_dict(cls, d: dict, base: Path = Path("."), seed: int | None = None) -> RunConfig:
        sources = [key for key in ("synthetic", "files") if key in d]
        if len(sources) != 1:
            raise UsageError("config needs exactly one input source: 'synthetic' or 'files'")
        att = dict(d.get("attention", {}))
        synthetic = files = None
        if "synthetic" in d:
            synthetic = SyntheticWorkloadSpec.from_dict(d["synthetic"])
            if seed is not None:
                synthetic = synthetic.with_(seed=seed)
            att.setdefault("seq_len_q", synthetic.seq_len)
            att.setdefault("seq_len_kv", synthetic.seq_len)
            att.setdefault("num_q_heads", synthetic.num_q_heads)
            att.setdefault("num_kv_heads", synthetic.num_kv_heads)
            att.setdefault("head_dim", synthetic.head_dim)
        else:
            missing = [k for k in ("q", "k", "v") if k not in d["files"]]
            if missing:
                raise UsageError(f"files: missing {missing}")
            files = {k: str(base / d["files"][k]) for k in ("q", "k", "v")}
        outputs = {"output": "O.btsr", "mask": "mask.json", "report": "sparsity.csv"}
        outputs.update(d.get("outputs", {}))
        return cls(AttentionSpec.from_dict(att), synthetic, files, outputs)

    def load_inputs(self):
        if self.synthetic is not None:
            return tuple(t.data for t in generate_workload(self.synthetic))
        return tuple(read_tensor(self.files[k]).data for k in ("q", "k", "v"))


def _load_json(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _run_config(args) -> RunConfig:
    if not args.config:
        raise UsageError("--config is required")
    return RunConfig.from_dict(_load_json(args.config), Path(args.config).parent, args.seed)


def _out(args, name: str) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out / name


def _rel_dev(a: np.ndarray, ref: np.ndarray) -> float:
    scale = float(np.abs(ref).max()) if ref.size else 0.0
    return float(np.abs(a - ref).max()) / scale if scale > 0 else float(np.abs(a - ref).max())


def cmd_run(args) -> int:
    cfg = _run_config(args)
    q, k, v = cfg.load_inputs()
    spec = cfg.attention
    res = blasst_forward(q, k, v, spec)
    write_tensor(Tensor(res.output.astype(np.float32)), _out(args, cfg.outputs["output"]))
    _out(args, cfg.outputs["mask"]).write_text(res.mask.to_json() + "\n")
    _out(args, cfg.outputs["report"]).write_text(res.report.to_csv())
    print(f"sparsity {res.mask.sparsity():.4f}")
    for msg in res.diagnostics:
        log.info(msg)
    if args.verify:
        dense = dense_attention(q, k, v, spec)
        masked = masked_oracle_attention(q, k, v, spec, res.mask)
        print(f"max_rel_deviation_dense {_rel_dev(res.output, dense):.3e}")
        print(f"max_rel_deviation_masked_oracle {_rel_dev(res.output, masked):.3e}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    if args.lambdas is not None:
        lams = [float(x) for x in args.lambdas.split(",") if x.strip()]
    else:
        lams = [float(x) for x in np.logspace(-6, -1, args.grid)] if args.grid else []
    if not lams:
        raise UsageError("sweep needs a non-empty --lambdas list or --grid N")
    if any(x < 0 for x in lams):
        raise UsageError("lambdas must be >= 0")
    cfg = _run_config(args)
    q, k, _ = cfg.load_inputs()
    margins = skip_margins(q, k, cfg.attention)
    lines = ["lambda,sparsity"]
    for lam in sorted(lams):
        ln_lam = -math.inf if lam == 0 else math.log(lam)
        lines.append(f"{lam:.6e},{sparsity_from_margins(margins, ln_lam):.6f}")
    text = "\n".join(lines) + "\n"
    _out(args, "sweep.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def _calibration_config(args) -> cal.CalibrationConfig:
    if not args.config:
        raise UsageError("--config is required")
    cfg = cal.CalibrationConfig.from_json(Path(args.config).read_text())
    if args.seed is not None:
        cfg.workload = cfg.workload.with_(seed=args.seed)
    return cfg


def cmd_calibrate(args) -> int:
    cfg = _calibration_config(args)
    fit = cal.calibrate(cfg)
    _out(args, "fit.json").write_text(fit.to_json() + "\n")
    print(f"a {fit.a:.6g}")
    for p in fit.points:
        print(f"L={p.length} lambda_best={p.lambda_best:.4e} achieved={p.achieved_sparsity:.4f} gap={p.gap:.4f}")
    if fit.rejected_lengths:
        print(f"rejected {fit.rejected_lengths}")
    return EXIT_OK


def cmd_stability(args) -> int:
    cfg = _calibration_config(args)
    if not args.fit:
        raise UsageError("--fit is required")
    fit = cal.CalibrationFit.from_json(Path(args.fit).read_text())
    lengths = [int(x) for x in args.lengths.split(",")] if args.lengths else cfg.lengths
    rows = cal.stability_eval(fit, args.fixed_lambda, lengths, cfg)
    text = cal.stability_csv(rows)
    _out(args, "stability.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _run_config(args)
    q, k, v = cfg.load_inputs()
    spec = cfg.attention
    seed = args.seed if args.seed is not None else (cfg.synthetic.seed if cfg.synthetic else 0)
    shape = (spec.num_q_heads, spec.seq_len_q, spec.head_dim)
    d_out = gaussians(stream_key(seed, 5), int(np.prod(shape))).reshape(shape)
    report = gradcheck(q, k, v, spec, d_out, num_coords=args.coords, step=args.step, seed=seed)
    print(f"max_rel_error {report.max_rel_error:.3e}")
    print(f"checked {report.checked}")
    print(f"excluded_boundary {report.excluded}")
    return EXIT_OK if report.passed(1e-5) else EXIT_INVALID


def cmd_simulate(args) -> int:
    if args.model:
        model = pipeline.PhaseModel.from_json(Path(args.model).read_text())
    else:
        model = pipeline.PhaseModel.default(args.phase)
    base = pipeline.build_schedule(model)
    if args.sparsity is not None:
        seed = args.seed if args.seed is not None else 0
        curve = pipeline.speedup_curve(model, [args.sparsity], args.trials, seed)
        s, sp = curve[0]
        print(f"baseline_runtime {pipeline._fmt(base.runtime)}")
        print(f"sparsity {s:.4f}")
        print(f"speedup {sp:.3f}")
        _out(args, "trace.csv").write_text(base.to_csv())
        return EXIT_OK
    skipped = [int(x) for x in (args.skip or "").split(",") if x.strip()]
    trace = pipeline.build_schedule(model, skipped)
    print(f"total_runtime {pipeline._fmt(trace.runtime)}")
    print(f"speedup {float(base.runtime / trace.runtime):.3f}")
    _out(args, "trace.csv").write_text(trace.to_csv())
    return EXIT_OK


def cmd_gen(args) -> int:
    if not args.config:
        raise UsageError("--config is required")
    spec = SyntheticWorkloadSpec.from_json(Path(args.config).read_text())
    if args.seed is not None:
        spec = spec.with_(seed=args.seed)
    for name, t in zip("qkv", generate_workload(spec)):
        write_tensor(t, _out(args, f"{name}.btsr"))
    print(f"wrote q.btsr k.btsr v.btsr to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", default=".", help="output directory (default: .)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--verify", action="store_true", help="compare against the dense oracle")

    parser = argparse.ArgumentParser(prog="blasst", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="run skipping attention on one input")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", parents=[common], help="sparsity as a function of λ")
    p.add_argument("--lambdas", help="comma-separated λ values")
    p.add_argument("--grid", type=int, help="use an N-point log grid over [1e-6, 1e-1]")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("calibrate", parents=[common], help="fit λ = a / L")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("stability", parents=[common], help="fixed vs calibrated sparsity per length")
    p.add_argument("--fit", help="CalibrationFit JSON from `calibrate`")
    p.add_argument("--lambda", dest="fixed_lambda", type=float, required=True, help="fixed λ to compare")
    p.add_argument("--lengths", help="comma-separated lengths (default: config lengths)")
    p.set_defaults(func=cmd_stability)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--coords", type=int, default=200)
    p.add_argument("--step", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("simulate", parents=[common], help="pipeline schedule cost model")
    p.add_argument("--phase", choices=["prefill", "decode"], default="prefill")
    p.add_argument("--model", help="PhaseModel JSON (default: shipped model for --phase)")
    p.add_argument("--skip", help="comma-separated skipped loop indices")
    p.add_argument("--sparsity", type=float, help="random skip sets at this sparsity")
    p.add_argument("--trials", type=int, default=10)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gen", parents=[common], help="write a synthetic workload as BTSR files")
    p.set_defaults(func=cmd_gen)
    return parser


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("BLASST_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, TensorFormatError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except cal.CalibrationError as exc:
        print(f"calibration failed: {exc}", file=sys.stderr)
        print("length,gap", file=sys.stderr)
        for L, gap in exc.gaps.items():
            print(f"{L},{gap:.6f}", file=sys.stderr)
        return EXIT_CALIBRATION
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, KeyError, TypeError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
