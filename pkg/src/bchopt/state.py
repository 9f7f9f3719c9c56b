"""Forward time stepping of the coupled Brinkman / sixth-order Cahn-Hilliard system.

Each step is segregated and semi-implicit:

1. ``w = -lap(phi) + f(phi)`` and ``mu = -lap(w) + (f'(phi) + nu) w`` at level n;
2. velocity from the Brinkman problem with drag ``lambda(phi_n)`` and force
   ``mu_n grad(phi_n) + u_n``;
3. phi advance with the linear sixth-order part implicit and every
   nonlinearity lagged, stabilised by ``A * (-lap)(phi_{n+1} - phi_n)``:

       (1/tau - m lap^3 + m A lap^2) phi_{n+1}
           = phi_n/tau - v.grad(phi_n) + S(phi_n) + m A lap^2 phi_n + m lap R_n,

   with ``R_n = mu_n - lap^2 phi_n = -lap f(phi_n) + (f'(phi_n) + nu) w_n``.
   It is evaluated as ``phi_n`` plus the solve applied to
   ``-v.grad(phi_n) + S(phi_n) + m lap mu_n``, which is the same map.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from bchopt.brinkman import BrinkmanOperator
from bchopt.grid import Grid, ScalarField, TimeGrid, VectorField, array_inner
from bchopt.model import QUARTIC, ModelParams, Potential, energy_total, source_S

log = logging.getLogger(__name__)


class StateBlowupError(RuntimeError):
    pass


def flow_enabled(grid: Grid, params: ModelParams) -> bool:
    return params.flow and grid.dim >= 2


def chemical_potentials(grid: Grid, phi: np.ndarray, params: ModelParams, potential: Potential = QUARTIC):
    """Return ``(w, mu)`` evaluated at ``phi``."""
    w = -grid.lap(phi) + potential.f(phi)
    mu = -grid.lap(w) + (potential.df(phi) + params.nu) * w
    return w, mu


def convection(grid: Grid, v: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Cell-centred ``v . grad(phi)``: face products averaged back to cells."""
    out = np.zeros(grid.n)
    for a in range(grid.dim):
        out += grid.c2f_T(v[a] * grid.fwd(phi, a), a)
    return out


def implicit_coeffs(params: ModelParams, potential: Potential, tau: float) -> list[float]:
    """Coefficients of ``1/tau + m A (-lap)^2 + m (-lap)^3`` for :meth:`Grid.solve_poly`."""
    m = params.mobility
    A = params.stab_constant(potential)
    return [1.0 / tau, 0.0, m * A, m]


@dataclass
class StepOutput:
    phi_next: np.ndarray
    w: np.ndarray
    mu: np.ndarray
    v: np.ndarray
    pressure: np.ndarray
    operator: BrinkmanOperator | None
    brinkman_residual: float


def advance(grid: Grid, phi: np.ndarray, u: np.ndarray, params: ModelParams,
            potential: Potential, tau: float) -> StepOutput:
    """One step on raw arrays; ``u`` has shape ``(d, *n)``."""
    if params.eps != 1.0:
        raise ValueError("the state solver is normalised to eps = 1")
    m = params.mobility
    L = grid.lap
    w, mu = chemical_potentials(grid, phi, params, potential)
    op = None
    res = 0.0
    if flow_enabled(grid, params):
        op = BrinkmanOperator(grid, params.lam(phi), params.eta0)
        force = np.stack([grid.c2f(mu, a) * grid.fwd(phi, a) for a in range(grid.dim)])
        force = force + u * grid.velocity_mask()
        v, p = op.solve(force)
        res = op.residual(v, p, force)
        conv = convection(grid, v, phi)
    else:
        v = np.zeros((grid.dim,) + grid.n)
        p = np.zeros(grid.n)
        conv = 0.0
    # increment form of the update below: exactly zero at a steady state
    inc = -conv + source_S(phi, params) + m * L(mu)
    phi_next = phi + grid.solve_poly(inc, implicit_coeffs(params, potential, tau))
    return StepOutput(phi_next, w, mu, v, p, op, res)


def step_state(phi_n: ScalarField, u_n: VectorField, params: ModelParams,
               potential: Potential = QUARTIC, tau: float = 1e-3):
    """Advance one step; returns ``(phi_next, mu, w, v)`` with ``mu, w`` at the new level."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    grid = phi_n.grid
    out = advance(grid, phi_n.data, u_n.data, params, potential, tau)
    if not np.all(np.isfinite(out.phi_next)):
        raise StateBlowupError("non-finite phi after a single step")
    w1, mu1 = chemical_potentials(grid, out.phi_next, params, potential)
    return (ScalarField(grid, out.phi_next), ScalarField(grid, mu1), ScalarField(grid, w1),
            VectorField.from_array(grid, out.v))


@dataclass(eq=False)
class StateTrajectory:
    """Dense forward trajectory.

    ``phi`` has ``steps + 1`` levels; ``mu`` and ``w`` are stored at levels
    ``1..steps`` (index ``k`` holds level ``k + 1``); ``v[k]`` is the velocity
    used by step ``k``.
    """

    grid: Grid
    time_grid: TimeGrid
    params: ModelParams
    potential: Potential
    u: np.ndarray
    phi: np.ndarray
    mu: np.ndarray
    w: np.ndarray
    v: np.ndarray
    pressure: np.ndarray
    diagnostics: list[dict] = field(default_factory=list)
    operators: list = field(default_factory=list, repr=False)

    @property
    def phi0(self) -> np.ndarray:
        return self.phi[0]

    @property
    def steps(self) -> int:
        return self.time_grid.steps

    def operator(self, k: int) -> BrinkmanOperator | None:
        """Brinkman operator of step ``k``, refactorised on demand."""
        if not flow_enabled(self.grid, self.params):
            return None
        if len(self.operators) < self.steps:
            self.operators = [None] * self.steps
        if self.operators[k] is None:
            self.operators[k] = BrinkmanOperator(self.grid, self.params.lam(self.phi[k]), self.params.eta0)
        return self.operators[k]


def _diagnostics_row(grid, k, t, phi, params, potential, residual, brinkman_iters):
    E, Fp, Gp = energy_total(ScalarField(grid, phi), params, potential)
    mass = array_inner(grid, phi, np.ones(grid.n))
    return {"step": k, "t": t, "energy": E, "F_part": Fp, "G_part": Gp, "mass": mass,
            "brinkman_iters": brinkman_iters, "ch_iters": 1 if k > 0 else 0, "residual": residual}


def solve_forward(phi0, u: np.ndarray, params: ModelParams, potential: Potential = QUARTIC,
                  time_grid: TimeGrid | None = None, grid: Grid | None = None,
                  keep_operators: bool = True, diagnostics: bool = True,
                  checkpoint_dir=None, checkpoint_every: int = 0) -> StateTrajectory:
    """Integrate the state system from ``phi0`` under the control ``u``.

    ``phi0`` is a :class:`ScalarField` (or an array together with ``grid``);
    ``u`` has shape ``(steps, d, *n)``.
    """
    if isinstance(phi0, ScalarField):
        grid = phi0.grid
        phi0 = phi0.data
    if grid is None or time_grid is None:
        raise ValueError("solve_forward needs a grid and a time grid")
    phi0 = np.asarray(phi0, dtype=float).reshape(grid.n)
    if not np.all(np.isfinite(phi0)):
        raise ValueError("phi0 must be finite")
    N, tau = time_grid.steps, time_grid.tau
    u = np.asarray(u, dtype=float)
    if u.shape != (N, grid.dim) + grid.n:
        raise ValueError(f"control has shape {u.shape}, expected {(N, grid.dim) + grid.n}")

    phi = np.empty((N + 1,) + grid.n)
    mu = np.empty((N,) + grid.n)
    w = np.empty((N,) + grid.n)
    v = np.zeros((N, grid.dim) + grid.n)
    pressure = np.zeros((N,) + grid.n)
    phi[0] = phi0
    ops = []
    diag = []
    if diagnostics:
        diag.append(_diagnostics_row(grid, 0, 0.0, phi0, params, potential, 0.0, 0))
    for k in range(N):
        out = advance(grid, phi[k], u[k], params, potential, tau)
        if not np.all(np.isfinite(out.phi_next)):
            vmax = float(np.max(np.abs(out.v))) if np.all(np.isfinite(out.v)) else float("inf")
            cfl = tau * vmax / min(grid.h)
            raise StateBlowupError(f"non-finite phi at step {k + 1} (CFL number tau*|v|/h = {cfl:.3g})")
        phi[k + 1] = out.phi_next
        v[k] = out.v
        pressure[k] = out.pressure
        w[k], mu[k] = chemical_potentials(grid, out.phi_next, params, potential)
        ops.append(out.operator if keep_operators else None)
        if diagnostics:
            diag.append(_diagnostics_row(grid, k + 1, (k + 1) * tau, out.phi_next, params, potential,
                                         out.brinkman_residual, 1 if out.operator is not None else 0))
        log.debug("step %d/%d done", k + 1, N)
    traj = StateTrajectory(grid, time_grid, params, potential, u.copy(), phi, mu, w, v, pressure, diag,
                           ops if keep_operators else [])
    if checkpoint_dir is not None and checkpoint_every > 0:
        from bchopt.io import write_trajectory

        write_trajectory(traj, checkpoint_dir, every=checkpoint_every)
    return traj


def h1_norm(grid: Grid, f: np.ndarray) -> float:
    g = grid.grad(f)
    return math.sqrt(array_inner(grid, f, f) + array_inner(grid, g, g))


def control_l2_norm(grid: Grid, time_grid: TimeGrid, u: np.ndarray) -> float:
    return math.sqrt(time_grid.tau * array_inner(grid, u, u))


def lipschitz_probe(u1: np.ndarray, u2: np.ndarray, phi0, params: ModelParams,
                    potential: Potential = QUARTIC, time_grid: TimeGrid | None = None,
                    grid: Grid | None = None) -> float:
    """``max_t |phi_1 - phi_2|_H1 / |u_1 - u_2|_L2(Q)`` for two forward solves."""
    if isinstance(phi0, ScalarField):
        grid = phi0.grid
    if np.shape(u1) != np.shape(u2):
        raise ValueError("controls must have the same shape")
    den = control_l2_norm(grid, time_grid, np.asarray(u1) - np.asarray(u2))
    if den == 0.0:
        raise ZeroDivisionError("identical controls: the Lipschitz ratio is undefined")
    t1 = solve_forward(phi0, u1, params, potential, time_grid, grid, keep_operators=False, diagnostics=False)
    t2 = solve_forward(phi0, u2, params, potential, time_grid, grid, keep_operators=False, diagnostics=False)
    num = max(h1_norm(grid, a - b) for a, b in zip(t1.phi, t2.phi))
    return num / den
