"""Projected proximal-gradient minimisation of the sparse control problem.

The objective is the smooth reduced cost plus ``sum_i kappa_i |u_i|_L1`` plus
the indicator of the box.  One iteration is

    u+ = prox_{s G}(u - s (b3 u + omega)),

accepted when the smooth part satisfies the usual sufficient-decrease test

    J(u+) <= J(u) + <g, u+ - u> + |u+ - u|^2 / (2 s)

(all pairings in L2 over space-time).  Its fixed points are exactly the
controls satisfying the pointwise projection formula, which doubles as the
termination test.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from bchopt.adjoint import AdjointTrajectory, ReducedGradient, ReducedProblem
from bchopt.model import BoxBounds, CostBreakdown, prox_box_l1
from bchopt.state import StateBlowupError, StateTrajectory

log = logging.getLogger(__name__)


class OptimizerError(RuntimeError):
    """Raised when the forward solve fails at an accepted iterate; carries the iterate."""

    def __init__(self, message, iterate=None):
        super().__init__(message)
        self.iterate = iterate


@dataclass(frozen=True)
class OptimizerConfig:
    """Settings of the proximal-gradient loop.

    ``step_tau=None`` starts from ``1/b3``; ``kappa=None`` keeps the weights of
    the problem's cost.  With ``bb=True`` each outer iteration starts from a
    safeguarded Barzilai-Borwein step instead of the last accepted one.
    """

    step_tau: float | None = None
    backtrack_factor: float = 0.5
    max_tries: int = 30
    stop_tol: float = 1e-6
    max_outer: int = 200
    kappa: tuple[float, ...] | None = None
    bounds: BoxBounds | None = None
    bb: bool = True
    step_max: float = 1e6

    def __post_init__(self):
        if self.step_tau is not None and not self.step_tau > 0:
            raise ValueError("step_tau must be positive")
        if not 0 < self.backtrack_factor < 1:
            raise ValueError("backtrack_factor must lie in (0, 1)")
        if self.max_tries < 1 or self.max_outer < 0:
            raise ValueError("max_tries must be >= 1 and max_outer >= 0")
        if not self.stop_tol > 0:
            raise ValueError("stop_tol must be positive")
        if self.kappa is not None:
            k = tuple(float(x) for x in self.kappa)
            if any(x < 0 for x in k):
                raise ValueError("kappa must be nonnegative")
            object.__setattr__(self, "kappa", k)


@dataclass
class OptimizerReport:
    rows: list[dict] = field(default_factory=list)
    stationarity: float = math.inf
    projection_defect: float = math.inf
    sparsity: tuple[float, ...] = ()
    converged: bool = False
    iterations: int = 0
    wall_time: float = 0.0
    message: str = ""

    @property
    def costs(self) -> list[float]:
        return [r["cost_total"] for r in self.rows]

    def monotone(self) -> bool:
        c = self.costs
        return all(b <= a for a, b in zip(c, c[1:]))


@dataclass(eq=False)
class OptimizeResult:
    u: np.ndarray
    state: StateTrajectory
    adjoint: AdjointTrajectory
    gradient: ReducedGradient
    report: OptimizerReport
    problem: ReducedProblem


def _kappa_array(kappa, u):
    k = np.asarray(kappa, dtype=float)
    if k.ndim == 0:
        k = np.full(u.shape[1], float(k))
    return k.reshape((1, -1) + (1,) * (u.ndim - 2))


def _bounds_arrays(bounds: BoxBounds | None, u):
    if bounds is None:
        return -np.inf, np.inf
    lo, hi = bounds.arrays(u.ndim - 2)
    return lo[None], hi[None]


def prox_grad_step(u, gradient, step: float, bounds: BoxBounds | None, kappa) -> np.ndarray:
    """``prox_box_l1(u - step * g, step * kappa_i, lo_i, hi_i)`` per component, cell and step."""
    if not step > 0:
        raise ValueError("step must be positive")
    g = gradient.smooth_part if isinstance(gradient, ReducedGradient) else np.asarray(gradient)
    u = np.asarray(u, dtype=float)
    if g.shape != u.shape:
        raise ValueError(f"gradient shape {g.shape} does not match control shape {u.shape}")
    lo, hi = _bounds_arrays(bounds, u)
    return prox_box_l1(u - step * g, step * _kappa_array(kappa, u), lo, hi)


def stationarity_residual(u, gradient, bounds: BoxBounds | None, kappa, probe_step: float) -> float:
    """Max-norm of ``(u - prox_grad_step(u, g, probe_step)) / probe_step``."""
    if not probe_step > 0:
        raise ValueError("probe_step must be positive")
    d = np.asarray(u) - prox_grad_step(u, gradient, probe_step, bounds, kappa)
    return float(np.max(np.abs(d))) / probe_step if d.size else 0.0


def sparsity_fractions(u: np.ndarray, mask: np.ndarray | None = None) -> tuple[float, ...]:
    """Fraction of space-time cells with ``u_i == 0`` exactly, per component.

    ``mask`` (shape ``(d, *n)``) restricts the count to faces that carry a control.
    """
    out = []
    for i in range(u.shape[1]):
        ui = u[:, i]
        if mask is None:
            out.append(float(np.count_nonzero(ui == 0.0)) / ui.size)
        else:
            act = np.broadcast_to(mask[i] > 0, ui.shape)
            n = np.count_nonzero(act)
            out.append(float(np.count_nonzero((ui == 0.0) & act)) / n if n else 1.0)
    return tuple(out)


# -- optimality audit ---------------------------------------------------------------------


@dataclass
class KKTAudit:
    lambda_star: np.ndarray
    defect: tuple[float, ...]
    equivalence_fraction: tuple[float, ...]

    @property
    def max_defect(self) -> float:
        return max(self.defect) if self.defect else 0.0

    @property
    def min_fraction(self) -> float:
        return min(self.equivalence_fraction) if self.equivalence_fraction else 1.0


def reconstruct_lambda(u, omega, kappa) -> np.ndarray:
    """Canonical subgradient: ``sign(u)`` off the zero set, ``clamp(-omega/kappa)`` on it."""
    u = np.asarray(u, dtype=float)
    k = _kappa_array(kappa, u)
    with np.errstate(divide="ignore", invalid="ignore"):
        on_zero = np.where(k > 0, np.clip(-np.asarray(omega) / k, -1.0, 1.0), 0.0)
    return np.where(u != 0.0, np.sign(u), on_zero)


def kkt_audit(u, omega, bounds: BoxBounds | None, kappa, b3: float, tol: float,
              mask: np.ndarray | None = None) -> KKTAudit:
    """Check the projection formula and the zero-set equivalence cell by cell."""
    u = np.asarray(u, dtype=float)
    omega = np.asarray(omega, dtype=float)
    if u.shape != omega.shape:
        raise ValueError("u and omega must have the same shape")
    lam = reconstruct_lambda(u, omega, kappa)
    k = _kappa_array(kappa, u)
    lo, hi = _bounds_arrays(bounds, u)
    target = np.minimum(np.maximum(-(omega + k * lam) / b3, lo), hi)
    err = np.abs(u - target)
    absw = np.abs(omega)
    ok = ((np.abs(u) <= tol) & (absw <= k + tol)) | ((np.abs(u) > tol) & (absw > k - tol))
    defect, frac = [], []
    for i in range(u.shape[1]):
        if mask is None:
            sel = np.ones(u[:, i].shape, dtype=bool)
        else:
            sel = np.broadcast_to(mask[i] > 0, u[:, i].shape)
        n = np.count_nonzero(sel)
        defect.append(float(np.max(err[:, i][sel])) if n else 0.0)
        frac.append(float(np.count_nonzero(ok[:, i] & sel)) / n if n else 1.0)
    return KKTAudit(lam, tuple(defect), tuple(frac))


# -- main loop ----------------------------------------------------------------------------


def _row(it, bd: CostBreakdown, res, step, backtracks, sparsity):
    return {"iter": it, "cost_total": bd.total, "tracking_Q": bd.tracking_Q, "tracking_T": bd.tracking_T,
            "tikhonov": bd.tikhonov, "l1": bd.l1, "stationarity": res, "step": step,
            "backtracks": backtracks,
            "sparsity_frac_c0": sparsity[0] if len(sparsity) > 0 else float("nan"),
            "sparsity_frac_c1": sparsity[1] if len(sparsity) > 1 else float("nan")}


def optimize(problem: ReducedProblem, config: OptimizerConfig = OptimizerConfig(),
             u0: np.ndarray | None = None, callback=None) -> OptimizeResult:
    """Run the proximal-gradient loop from ``u0`` (default: zero control)."""
    t_start = time.perf_counter()
    if config.kappa is not None:
        problem = replace(problem, cost=replace(problem.cost, kappa=config.kappa))
    grid = problem.grid
    b3 = problem.cost.b3
    kappa = problem.cost.kappa_for(grid.dim)
    bounds = config.bounds
    mask = grid.velocity_mask()
    mask_t = mask[None]
    probe = 1.0 / b3

    u = problem.zero_control() if u0 is None else np.array(u0, dtype=float)
    if u.shape != problem.control_shape:
        raise ValueError(f"initial control has shape {u.shape}, expected {problem.control_shape}")
    u = u * mask_t
    lo, hi = _bounds_arrays(bounds, u)
    u = np.minimum(np.maximum(u, lo), hi)
    try:
        traj = problem.solve_state(u, diagnostics=False)
    except StateBlowupError as exc:
        raise OptimizerError(f"forward solve failed at the initial control: {exc}", u) from exc
    grad, adj, _ = problem.gradient(u, traj)
    bd = problem.cost_breakdown(u, traj)

    report = OptimizerReport()
    step = config.step_tau if config.step_tau is not None else 1.0 / b3
    last_step, backtracks = 0.0, 0
    prev = None
    for it in range(config.max_outer + 1):
        res = stationarity_residual(u, grad, bounds, kappa, probe)
        report.rows.append(_row(it, bd, res, last_step, backtracks, sparsity_fractions(u, mask)))
        if callback is not None:
            callback(it, u, bd, res)
        log.info("iter %d  J=%.12g  stationarity=%.3e  step=%.3g", it, bd.total, res, last_step)
        if res <= config.stop_tol:
            report.converged = True
            report.message = "stationarity tolerance reached"
            break
        if it == config.max_outer:
            report.message = "iteration cap reached"
            break
        if config.bb and prev is not None:
            du = u - prev[0]
            dg = grad.smooth_part - prev[1]
            num = problem.control_inner(du, du)
            den = problem.control_inner(du, dg)
            step = min(num / den, config.step_max) if den > 0 and num > 0 else step
        accepted = False
        s = step
        J_smooth = bd.smooth
        for tries in range(config.max_tries):
            u_new = prox_grad_step(u, grad, s, bounds, kappa) * mask_t
            d = u_new - u
            try:
                traj_new = problem.solve_state(u_new, diagnostics=False)
            except StateBlowupError:
                s *= config.backtrack_factor
                continue
            bd_new = problem.cost_breakdown(u_new, traj_new)
            model = J_smooth + problem.control_inner(grad.smooth_part, d) + problem.control_inner(d, d) / (2 * s)
            if bd_new.smooth <= model and bd_new.total <= bd.total:
                accepted = True
                break
            s *= config.backtrack_factor
        if not accepted:
            warnings.warn("backtracking exhausted; returning the best iterate", RuntimeWarning, stacklevel=2)
            report.message = "backtracking exhausted"
            break
        prev = (u, grad.smooth_part)
        u, traj, bd = u_new, traj_new, bd_new
        grad, adj, _ = problem.gradient(u, traj)
        last_step, backtracks = s, tries
        step = s
        report.iterations = it + 1

    report.stationarity = report.rows[-1]["stationarity"]
    audit = kkt_audit(u, adj.omega, bounds, kappa, b3, 10 * config.stop_tol, mask)
    report.projection_defect = audit.max_defect
    report.sparsity = sparsity_fractions(u, mask)
    report.wall_time = time.perf_counter() - t_start
    return OptimizeResult(u, traj, adj, grad, report, problem)


# -- sparsity sweep -----------------------------------------------------------------------


@dataclass
class SweepResult:
    rows: list[dict]
    monotone: bool
    kappa_star: float | None


def sparsity_sweep(problem: ReducedProblem, kappa_grid, config: OptimizerConfig = OptimizerConfig(),
                   threads: int = 1) -> SweepResult:
    """One optimisation per ``kappa`` (same weight on every component)."""
    grid_k = [float(k) for k in kappa_grid]
    if any(b < a for a, b in zip(grid_k, grid_k[1:])):
        raise ValueError("kappa grid must be ascending")

    def run(k):
        res = optimize(problem, replace(config, kappa=(k,)))
        om = float(np.max(np.abs(res.adjoint.omega * problem.grid.velocity_mask()[None])))
        frac = min(res.report.sparsity)
        return {"kappa": k, "sparsity_fraction": frac, "omega_inf": om,
                "converged": res.report.converged, "iterations": res.report.iterations}

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            rows = list(ex.map(run, grid_k))
    else:
        rows = [run(k) for k in grid_k]
    fr = [r["sparsity_fraction"] for r in rows]
    monotone = all(b >= a for a, b in zip(fr, fr[1:]))
    if not monotone:
        warnings.warn("sparsity fraction is not monotone in kappa", RuntimeWarning, stacklevel=2)
    for r, ok in zip(rows, [True] + [b >= a for a, b in zip(fr, fr[1:])]):
        r["monotone"] = ok
    kappa_star = next((r["kappa"] for r in rows if r["sparsity_fraction"] == 1.0), None)
    return SweepResult(rows, monotone, kappa_star)


def omega_at_zero(problem: ReducedProblem) -> float:
    """``max |omega|`` at ``u = 0``; calibrates the upper end of a sweep."""
    u = problem.zero_control()
    _, adj, _ = problem.gradient(u)
    return float(np.max(np.abs(adj.omega)))
