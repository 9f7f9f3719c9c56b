"""Command line entry point ``bch``.

    bch <mode> --config <path> [--out <dir>] [--seed <u64>] [--threads <n>]

Exit codes: 0 success, 2 configuration error, 3 solver failure, 4 failed
verification.  ``BCH_LOG`` selects the log level (error, warn, info, debug).
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from bchopt import io
from bchopt.brinkman import BrinkmanConvergenceError, BrinkmanOperator, CoercivityError
from bchopt.config import MODES, ConfigError, RunConfig, build_problem, parse_config, serialize
from bchopt.optimizer import OptimizerError
from bchopt.state import StateBlowupError

log = logging.getLogger("bchopt")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_VERIFY = 0, 2, 3, 4
_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
           "info": logging.INFO, "debug": logging.DEBUG}


class VerificationFailure(RuntimeError):
    pass


def _setup_logging():
    level = _LEVELS.get(os.environ.get("BCH_LOG", "warn").strip().lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    logging.captureWarnings(True)


def _seeded_control(problem, seed: int, scale: float = 0.3) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return scale * rng.standard_normal(problem.control_shape) * problem.grid.velocity_mask()[None]


def _directions(problem, seed: int, count: int):
    rng = np.random.default_rng(seed)
    mask = problem.grid.velocity_mask()[None]
    return [rng.standard_normal(problem.control_shape) * mask for _ in range(count)]


# -- modes --------------------------------------------------------------------------------


def run_forward(cfg: RunConfig, problem, out: Path) -> dict:
    traj = problem.solve_state(problem.zero_control())
    io.write_trajectory(traj, out / "traj", every=max(1, cfg.run.checkpoint_every))
    io.export_plotdata(traj, "energy", out / "plots")
    return {"final_energy": traj.diagnostics[-1]["energy"]}


def run_optimize(cfg: RunConfig, problem, opt, out: Path) -> dict:
    from bchopt.optimizer import OptimizerError, optimize

    try:
        res = optimize(problem, opt)
    except OptimizerError as exc:
        if exc.iterate is not None:
            io.write_control(exc.iterate, problem.grid, out / "failed_iterate")
        raise
    io.write_csv(out / "optimize.csv", io.OPT_COLUMNS, res.report.rows)
    io.write_control(res.u, problem.grid, out / "control")
    io.write_gradient(res.gradient.smooth_part, problem.grid, out / "grad")
    io.write_trajectory(res.state, out / "traj", every=max(1, cfg.run.checkpoint_every))
    io.export_plotdata(res.report, "cost", out / "plots")
    rep = res.report
    return {"converged": rep.converged, "iterations": rep.iterations, "stationarity": rep.stationarity,
            "projection_defect": rep.projection_defect, "sparsity": list(rep.sparsity)}


def grad_check_rows(problem, u, directions, t):
    from bchopt.verify import fd_gradient

    grad, _, _ = problem.gradient(u)
    fd = fd_gradient(problem.smooth_cost, u, directions, t)
    rows = []
    for i, (h, f) in enumerate(zip(directions, fd)):
        a = problem.control_inner(grad.smooth_part, h)
        rows.append({"direction": i, "fd": f, "adjoint": a, "rel_err": abs(a - f) / max(abs(f), 1e-300)})
    return grad, rows


def run_grad_check(cfg: RunConfig, problem, out: Path, tol: float = 1e-5) -> dict:
    u = _seeded_control(problem, cfg.run.seed)
    dirs = _directions(problem, cfg.run.seed + 1, cfg.run.directions)
    grad, rows = grad_check_rows(problem, u, dirs, cfg.run.fd_t)
    io.write_csv(out / "grad_check.csv", ["direction", "fd", "adjoint", "rel_err"], rows)
    io.write_gradient(grad.smooth_part, problem.grid, out / "grad")
    worst = max(r["rel_err"] for r in rows)
    if worst > tol:
        raise VerificationFailure(f"gradient check failed: max relative error {worst:.3e} > {tol:g}")
    return {"max_rel_err": worst}


def run_taylor(cfg: RunConfig, problem, out: Path) -> dict:
    from bchopt.adjoint import frechet_remainder_test

    u = _seeded_control(problem, cfg.run.seed)
    (h,) = _directions(problem, cfg.run.seed + 1, 1)
    rows, slope = frechet_remainder_test(problem, u, h, cfg.run.taylor_scales)
    io.export_plotdata((rows, slope), "taylor", out)
    if not abs(slope - 2.0) <= 0.1:
        raise VerificationFailure(f"remainder slope {slope:.4f} outside 2.0 +- 0.1")
    return {"slope": slope}


def run_sweep(cfg: RunConfig, problem, opt, out: Path, threads: int) -> dict:
    from bchopt.optimizer import omega_at_zero, sparsity_sweep

    w0 = omega_at_zero(problem)
    grid_k = cfg.run.kappa_grid or tuple(float(x) for x in np.linspace(0.0, 2.0 * w0, 6))
    res = sparsity_sweep(problem, grid_k, opt, threads=threads)
    io.write_csv(out / "sweep.csv", io.SWEEP_COLUMNS, res.rows)
    last = res.rows[-1]
    if last["kappa"] >= 2.0 * w0 and (last["sparsity_fraction"] != 1.0 or last["omega_inf"] > last["kappa"]):
        raise VerificationFailure("the largest kappa did not give an identically zero control")
    return {"kappa_star": res.kappa_star, "omega0_inf": w0, "monotone": res.monotone}


def run_verify_all(cfg: RunConfig, problem, out: Path) -> dict:
    from bchopt.adjoint import duality_gap
    from bchopt.grid import Grid
    from bchopt.verify import appendix_inequality_check, small_instance_bruteforce, spectral_brinkman_oracle

    vdir = out / "verify"
    failures = []
    summary = {}

    bf_rows = []
    for bc in ("periodic", "box-neumann"):
        r = small_instance_bruteforce(4, 2, bc, seed=cfg.run.seed)
        bf_rows.append({"bc_mode": bc, "forward_error": r.forward_error, "tangent_error": r.tangent_error,
                        "adjoint_error": r.adjoint_error, "transpose_error": r.transpose_error,
                        "control_column_max": r.control_column_max, "pass": r.passes()})
        if not r.passes():
            failures.append(f"brute force ({bc})")
    io.write_csv(vdir / "bruteforce.csv", list(bf_rows[0]), bf_rows)

    g = Grid((8, 8), (2 * math.pi, 2 * math.pi), "periodic")
    rng = np.random.default_rng(cfg.run.seed)
    F = rng.standard_normal((2,) + g.n)
    v_ref = spectral_brinkman_oracle(g, 0.7, F)
    v, _ = BrinkmanOperator(g, np.full(g.n, 0.7)).solve(F)
    rel = float(np.linalg.norm(v - v_ref) / np.linalg.norm(v_ref))
    io.write_csv(vdir / "spectral_brinkman.csv", ["rel_err", "pass"], [{"rel_err": rel, "pass": rel <= 1e-9}])
    if rel > 1e-9:
        failures.append("spectral Brinkman oracle")

    app = appendix_inequality_check(seed=cfg.run.seed)
    io.write_csv(vdir / "appendix.csv", ["max_ratio", "sampled_max", "samples", "pass"],
                 [{"max_ratio": app.max_ratio, "sampled_max": app.sampled_max, "samples": app.samples,
                   "pass": app.passes()}])
    if not app.passes():
        failures.append("appendix inequality")

    u = _seeded_control(problem, cfg.run.seed)
    traj = problem.solve_state(u, diagnostics=False)
    rng = np.random.default_rng(cfg.run.seed + 7)
    mask = problem.grid.velocity_mask()
    d_rows = []
    for i in range(5):
        h = rng.standard_normal(u.shape) * mask[None]
        d0 = rng.standard_normal(problem.grid.n)
        lam = [rng.standard_normal(traj.phi.shape), rng.standard_normal(traj.v.shape) * mask[None],
               rng.standard_normal(traj.mu.shape), rng.standard_normal(traj.w.shape)]
        gap, scale = duality_gap(traj, h, d0, *lam)
        d_rows.append({"pair": i, "gap": gap, "scale": scale, "rel": gap / scale, "pass": gap <= 1e-11 * scale})
        if gap > 1e-11 * scale:
            failures.append(f"duality pair {i}")
    io.write_csv(vdir / "duality.csv", ["pair", "gap", "scale", "rel", "pass"], d_rows)

    try:
        summary.update(run_grad_check(cfg, problem, vdir))
    except VerificationFailure as exc:
        failures.append(str(exc))
    try:
        summary.update(run_taylor(cfg, problem, vdir))
    except VerificationFailure as exc:
        failures.append(str(exc))
    summary["failures"] = failures
    if failures:
        raise VerificationFailure("; ".join(failures))
    return summary


# -- driver -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bch", description="Brinkman / Cahn-Hilliard optimal control runs.")
    p.add_argument("mode", choices=MODES)
    p.add_argument("--config", required=True, help="INI-style run configuration")
    p.add_argument("--out", help="output directory (overrides [run] out)")
    p.add_argument("--seed", type=int, help="unsigned 64-bit seed (overrides [run] seed)")
    p.add_argument("--threads", type=int, help="worker threads for the sparsity sweep")
    return p


def run(cfg: RunConfig, mode: str, out: Path, threads: int = 1) -> dict:
    problem, opt = build_problem(cfg)
    t0 = time.perf_counter()
    with io.output_lock(out):
        if mode == "forward":
            summary = run_forward(cfg, problem, out)
        elif mode == "optimize":
            summary = run_optimize(cfg, problem, opt, out)
        elif mode == "grad-check":
            summary = run_grad_check(cfg, problem, out)
        elif mode == "taylor-test":
            summary = run_taylor(cfg, problem, out)
        elif mode == "sparsity-sweep":
            summary = run_sweep(cfg, problem, opt, out, threads)
        else:
            summary = run_verify_all(cfg, problem, out)
    return {"summary": summary, "seconds": time.perf_counter() - t0}


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError([])
            cfg = replace(cfg, run=replace(cfg.run, seed=args.seed))
        cfg = replace(cfg, run=replace(cfg.run, mode=args.mode))
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError([])
            cfg = replace(cfg, run=replace(cfg.run, threads=args.threads))
        out = Path(args.out) if args.out else Path(cfg.base_dir) / cfg.run.out
    except ConfigError as exc:
        print(str(exc) if exc.issues else "invalid --seed or --threads", file=sys.stderr)
        return EXIT_CONFIG

    config_text = Path(args.config).read_text(encoding="utf-8")
    status, message, result = EXIT_OK, "ok", {}
    t0 = time.perf_counter()
    try:
        result = run(cfg, args.mode, out, cfg.run.threads)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        status, message = EXIT_CONFIG, str(exc)
    except (StateBlowupError, BrinkmanConvergenceError, CoercivityError, OptimizerError,
            np.linalg.LinAlgError, ArithmeticError) as exc:
        status, message = EXIT_SOLVER, str(exc)
    except VerificationFailure as exc:
        status, message = EXIT_VERIFY, str(exc)
    except io.LockError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    if out.exists():
        io.write_manifest(out, config_text,
                          {"config": io.content_hash(config_text), "resolved": io.content_hash(serialize(cfg)),
                           "seed": cfg.run.seed, "mode": args.mode},
                          {"total": time.perf_counter() - t0},
                          {"status": status, "message": message, "summary": result.get("summary", {})})
    if status:
        print(f"bch {args.mode}: {message}", file=sys.stderr)
    else:
        log.info("bch %s finished: %s", args.mode, result.get("summary"))
    return status


if __name__ == "__main__":
    sys.exit(main())
