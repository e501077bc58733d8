"""Command line entry point: ``dpbilevel run <config>``, ``dpbilevel verify``, ``dpbilevel --print-defaults``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import sys
import tempfile
import time
import warnings
from pathlib import Path
from typing import Optional

import numpy as np

from . import experiments, oracles
from .config import KINDS, ConfigError, ExperimentConfig, build_problem, defaults, load_config
from .core import NumericalError, PreconditionError
from .outer import assign_outer_params, run_dp_bilevel
from .privacy import BudgetExceededError, PrivacyLedger
from .problems import TuningConfig, grid_search_omega, run_private_reg_tuning

OUT_DIR_ENV = "DPBILEVEL_OUT_DIR"
EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_BUDGET, EXIT_NUMERICAL = 0, 1, 2, 3, 4


def atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _empty_ledger() -> str:
    return _dumps(PrivacyLedger().to_dict())


def _point(value, dim: int) -> np.ndarray:
    x = np.zeros(dim) if value is None else np.asarray(value, float)
    if x.shape != (dim,):
        raise ConfigError(f"point has shape {x.shape}, expected ({dim},)")
    return x


def _run_bilevel(cfg: ExperimentConfig):
    problem, data = build_problem(cfg)
    outer_keys = {k: v for k, v in cfg.outer_overrides.items() if v is not None}
    params = assign_outer_params(problem.constants, cfg.run.alpha_target, cfg.budget, data.n, problem.dim_x,
                                 problem.dim_y, cfg.run.b_out, outer_keys, cfg.run.clip)
    x0 = _point(cfg.settings["x0"], problem.dim_x)
    inner = {k: v for k, v in cfg.inner_overrides.items() if v is not None}
    report = run_dp_bilevel(problem, data, x0, cfg.run, params, cfg.budget, inner_overrides=inner)
    body = report.to_dict(timing=False)
    if "hypergradient" in problem.references:
        grad = problem.references["hypergradient"](report.x_out)
        gm = problem.feasible_x.gradient_mapping(report.x_out, grad, params.eta)
        body["grad_mapping_norm"] = float(np.linalg.norm(gm))
    return body, {"trajectory.csv": report.trajectory_csv(), "ledger.json": _dumps(report.ledger.to_dict())}


def _run_reg_tuning(cfg: ExperimentConfig):
    problem, data = build_problem(cfg)
    s = cfg.settings
    inner = {k: v for k, v in cfg.inner_overrides.items() if v is not None}
    if s["noiseless"]:
        inner.setdefault("C_R", 100.0)
    tc = TuningConfig(lam=s["lam"], eta=s["eta"], T=s["T"], omega0=s["omega0"],
                      budget=None if s["noiseless"] else cfg.budget, seed=cfg.run.seed, noiseless=s["noiseless"],
                      clip=s["clip"], inner_overrides=inner)
    rep = run_private_reg_tuning(problem, data, tc)
    body = rep.to_dict()
    body.pop("ledger")
    if problem.metadata["regularizer"] == "ridge":
        body["omega_star"] = grid_search_omega(problem)
    body["problem_metadata"] = {k: v for k, v in problem.metadata.items() if k != "inner_constants"}
    rows = [[t, repr(rep.omegas[t]), repr(rep.displacements[t]) if t < len(rep.displacements) else ""]
            for t in range(len(rep.omegas))]
    return body, {"trajectory.csv": _csv(["t", "omega", "displacement"], rows),
                  "ledger.json": _dumps(rep.ledger.to_dict())}


def _run_leak(cfg: ExperimentConfig):
    problem, data = build_problem(cfg)
    x = _point(cfg.settings["x"], problem.dim_x)
    grad = oracles.exact_hypergradient(problem, data, x)
    mean = data.points.mean(axis=0)
    body = {"x": x.tolist(), "dataset_mean": mean.tolist(), "hypergradient": grad.tolist(),
            "leak_error": float(np.max(np.abs(grad - x - mean)))}
    return body, {"trajectory.csv": _csv(["t"], []), "ledger.json": _empty_ledger()}


def _run_scaling(cfg: ExperimentConfig):
    s = cfg.settings
    inner = {k: v for k, v in cfg.inner_overrides.items() if v is not None}
    rows = experiments.scaling_sweep(s["ns"], s["seeds"], s["dim"], s["eps_prime"], s["delta_prime"], inner,
                                     s["data_seed"], cfg.run.seed)
    slope = oracles.loglog_slope([r.n for r in rows], [r.median_error for r in rows])
    body = {"slope": slope, "rows": [dataclasses.asdict(r) for r in rows]}
    table = _csv(["n", "median_error", "max_ball_ratio"], [r.to_row() for r in rows])
    return body, {"trajectory.csv": table, "scaling.csv": table, "ledger.json": _empty_ledger()}


def _run_proposition(cfg: ExperimentConfig):
    s = cfg.settings
    runs, settings = experiments.proposition_check(s["alpha"], s["seeds"], s["dim"], s["gamma"],
                                                   s["bias_fraction"], s["noise_fraction"], seed=cfg.run.seed)
    body = {"settings": settings, "passed": sum(r.passed for r in runs), "runs": [dataclasses.asdict(r) for r in runs]}
    table = _csv(["seed", "t_out", "grad_mapping_norm", "passed"],
                 [[r.seed, r.t_out, repr(r.grad_mapping_norm), int(r.passed)] for r in runs])
    return body, {"trajectory.csv": table, "ledger.json": _empty_ledger()}


def _run_diagnostics(cfg: ExperimentConfig):
    problem, data = build_problem(cfg)
    x = _point(cfg.settings["x"], problem.dim_x)
    recs = oracles.diagnostics_sweep(problem, data, x, cfg.settings["lambdas"])
    slope = oracles.loglog_slope([r.lam for r in recs], [max(r.gradient_gap, 1e-300) for r in recs])
    body = {"gradient_gap_slope": slope, "records": [dataclasses.asdict(r) for r in recs],
            "all_within_bound": all(r.within_bound for r in recs)}
    table = _csv(["lam", "value_gap", "gradient_gap", "distance", "bound"],
                 [[repr(r.lam), repr(r.value_gap), repr(r.gradient_gap), repr(r.distance), repr(r.bound)]
                  for r in recs])
    return body, {"trajectory.csv": table, "diagnostics.csv": table, "ledger.json": _empty_ledger()}


RUNNERS = {
    "bilevel_full": _run_bilevel,
    "bilevel_minibatch": _run_bilevel,
    "reg_tuning": _run_reg_tuning,
    "leak_demo": _run_leak,
    "scaling_sweep": _run_scaling,
    "proposition_check": _run_proposition,
    "diagnostics_sweep": _run_diagnostics,
}


def run_experiment(cfg: ExperimentConfig, out_dir: Path) -> dict:
    """Run ``cfg`` and write ``report.json``, ``trajectory.csv``, ``ledger.json`` and
    ``timing.json`` (the only file with wall-clock data) into ``out_dir``."""
    start = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        body, files = RUNNERS[cfg.kind](cfg)
    notes = sorted({str(w.message) for w in caught})
    report = {"kind": cfg.kind, "config": cfg.resolved(), "result": body, "warnings": notes}
    atomic_write(out_dir / "report.json", _dumps(report))
    for name, text in files.items():
        atomic_write(out_dir / name, text)
    atomic_write(out_dir / "timing.json", _dumps({"wall_clock_seconds": time.perf_counter() - start}))
    return report


def _error(exc: BaseException, code: int, out_dir: Optional[Path]) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    path = getattr(exc, "path", None) or getattr(exc, "filename", None)
    if path:
        payload["path"] = str(path)
    text = json.dumps(payload, sort_keys=True)
    print(text, file=sys.stderr)
    if out_dir is not None:
        try:
            atomic_write(out_dir / "error.json", text + "\n")
        except OSError:
            pass
    return code


def _resolve_out_dir(cli_value: Optional[str], cfg: Optional[ExperimentConfig]) -> Path:
    if cli_value:
        return Path(cli_value)
    if cfg is not None and cfg.out_dir:
        return Path(cfg.out_dir)
    return Path(os.environ.get(OUT_DIR_ENV, "runs"))


def cmd_run(args) -> int:
    out_dir = Path(args.out_dir) if args.out_dir else None
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.run = dataclasses.replace(cfg.run, seed=args.seed)
        out_dir = _resolve_out_dir(args.out_dir, cfg)
        run_experiment(cfg, out_dir)
    except (ConfigError, PreconditionError, FileNotFoundError) as exc:
        return _error(exc, EXIT_CONFIG, out_dir)
    except BudgetExceededError as exc:
        return _error(exc, EXIT_BUDGET, out_dir)
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return _error(exc, EXIT_NUMERICAL, out_dir)
    except ValueError as exc:
        return _error(exc, EXIT_CONFIG, out_dir)
    print(json.dumps({"status": "ok", "out_dir": str(out_dir)}))
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import format_table, verify_suite
    scales = {}
    for item in args.scale or []:
        name, _, factor = item.partition("=")
        try:
            scales[name] = float(factor)
        except ValueError:
            print(json.dumps({"error": "ConfigError", "message": f"bad --scale {item!r}", "exit_code": 2}),
                  file=sys.stderr)
            return EXIT_CONFIG
    try:
        results = verify_suite(seed=args.seed or 0, constant_scales=scales, quick=args.quick)
    except ValueError as exc:
        return _error(exc, EXIT_CONFIG, None)
    print(format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpbilevel", description="Differentially private bilevel optimization")
    p.add_argument("--print-defaults", nargs="?", const="all", choices=["all", *KINDS], metavar="KIND",
                   help="print the default config (optionally for one experiment kind) and exit")
    sub = p.add_subparsers(dest="command")
    r = sub.add_parser("run", help="run the experiment described by a JSON config")
    r.add_argument("config")
    r.add_argument("--seed", type=int, default=None, help="override run.seed")
    r.add_argument("--out-dir", default=None, help=f"output directory (default: config out_dir, ${OUT_DIR_ENV}, ./runs)")
    v = sub.add_parser("verify", help="run the invariant battery and print a pass/fail table")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--quick", action="store_true", help="smaller sample counts")
    v.add_argument("--scale", action="append", metavar="NAME=FACTOR",
                   help="multiply a declared problem constant before checking (fault injection)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_defaults:
        print(_dumps(defaults(None if args.print_defaults == "all" else args.print_defaults)), end="")
        return EXIT_OK
    if args.command == "run":
        return cmd_run(args)
    if args.command == "verify":
        return cmd_verify(args)
    parser.print_help()
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
