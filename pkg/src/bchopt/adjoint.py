"""Tangent and adjoint of the discrete forward map, and the reduced gradient.

The production gradient is discretize-then-optimize: :func:`adjoint_core`
applies, step by step in reverse, the exact transpose of every linear map in
:func:`tangent_step`.  :func:`adjoint_sweep_continuous` discretises the
continuous adjoint system directly and agrees with the discrete adjoint only
in the limit of vanishing step sizes; it is kept as a consistency reference.

Sign conventions follow the continuous system: ``p`` is the adjoint of the
phase field with ``p(T) = b2 (phi(T) - phi_Omega)``, ``omega`` is the adjoint
velocity and the smooth part of the reduced gradient is ``b3 u + omega``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from bchopt.brinkman import BrinkmanOperator, face_lambda
from bchopt.grid import Grid, TimeGrid, array_inner
from bchopt.model import QUARTIC, CostBreakdown, CostSpec, ModelParams, Potential, cost_J
from bchopt.state import (
    StateTrajectory,
    chemical_potentials,
    convection,
    flow_enabled,
    h1_norm,
    implicit_coeffs,
    solve_forward,
)
from bchopt.model import source_S_prime


@dataclass(eq=False)
class TangentTrajectory:
    """Directional derivative of the state along ``(h, dphi0)``.

    Layout mirrors :class:`StateTrajectory`: ``psi`` has ``steps + 1`` levels,
    ``eta_mu``/``omega_w`` hold levels ``1..steps``, ``xi_v[k]`` belongs to step ``k``.
    """

    h: np.ndarray
    xi_v: np.ndarray
    psi: np.ndarray
    eta_mu: np.ndarray
    omega_w: np.ndarray


@dataclass(eq=False)
class AdjointTrajectory:
    """Adjoint quadruplet.

    ``p`` has ``steps + 1`` levels with ``p[-1] = g_Omega``; ``omega``, ``q``
    and ``r`` have one entry per step.
    """

    omega: np.ndarray
    p: np.ndarray
    q: np.ndarray
    r: np.ndarray


@dataclass(eq=False)
class ReducedGradient:
    """Smooth part ``b3 u + omega`` of the reduced gradient, one entry per step."""

    smooth_part: np.ndarray
    kappa: np.ndarray


# -- per-step linearisation ------------------------------------------------------------


class _StepLinearization:
    """Coefficient fields of step ``k`` needed by both tangent and adjoint."""

    def __init__(self, traj: StateTrajectory, k: int):
        grid, params, pot = traj.grid, traj.params, traj.potential
        phi = traj.phi[k]
        self.grid, self.params = grid, params
        self.phi = phi
        self.f1 = pot.df(phi)
        self.f2 = pot.d2f(phi)
        self.w, self.mu = chemical_potentials(grid, phi, params, pot)
        self.S1 = source_S_prime(phi, params)
        self.tau = traj.time_grid.tau
        self.m = params.mobility
        self.A = params.stab_constant(pot)
        self.coeffs = implicit_coeffs(params, pot, self.tau)
        self.flow = flow_enabled(grid, params)
        if self.flow:
            self.v = traj.v[k]
            self.op: BrinkmanOperator = traj.operator(k)
            self.dlam = params.dlam(phi)
            self.grad_phi = grid.grad(phi)
            self.mu_f = np.stack([grid.c2f(self.mu, a) for a in range(grid.dim)])
            self.mask = grid.velocity_mask()


def tangent_step(lin: _StepLinearization, dphi: np.ndarray, du: np.ndarray):
    """Exact Jacobian-vector product of one forward step; returns ``(dphi_next, dv)``."""
    g, L, nu = lin.grid, lin.grid.lap, lin.params.nu
    dw = -L(dphi) + lin.f1 * dphi
    dmu = -L(dw) + (lin.f1 + nu) * dw + lin.f2 * lin.w * dphi
    if lin.flow:
        dlam_f = face_lambda(g, lin.dlam * dphi)
        dF = np.stack([g.c2f(dmu, a) * lin.grad_phi[a] + lin.mu_f[a] * g.fwd(dphi, a)
                       for a in range(g.dim)])
        dF = dF + du * lin.mask - dlam_f * lin.v
        dv, _ = lin.op.solve(dF)
        dconv = convection(g, dv, lin.phi) + convection(g, lin.v, dphi)
    else:
        dv = np.zeros((g.dim,) + g.n)
        dconv = 0.0
    dR = -L(lin.f1 * dphi) + lin.f2 * lin.w * dphi + (lin.f1 + nu) * dw
    drhs = dphi / lin.tau - dconv + lin.S1 * dphi + lin.m * lin.A * L(L(dphi)) + lin.m * L(dR)
    return g.solve_poly(drhs, lin.coeffs), dv


def _level_tangent(grid, params, pot, phi, dphi):
    f1 = pot.df(phi)
    w, _ = chemical_potentials(grid, phi, params, pot)
    dw = -grid.lap(dphi) + f1 * dphi
    dmu = -grid.lap(dw) + (f1 + params.nu) * dw + pot.d2f(phi) * w * dphi
    return dw, dmu


def _level_adjoint(grid, params, pot, phi, s_w, s_mu):
    f1 = pot.df(phi)
    w, _ = chemical_potentials(grid, phi, params, pot)
    b_w = s_w - grid.lap(s_mu) + (f1 + params.nu) * s_mu
    return pot.d2f(phi) * w * s_mu - grid.lap(b_w) + f1 * b_w


def solve_tangent(traj: StateTrajectory, h: np.ndarray, dphi0: np.ndarray | None = None) -> TangentTrajectory:
    grid, N = traj.grid, traj.steps
    h = np.asarray(h, dtype=float)
    if h.shape != traj.u.shape:
        raise ValueError(f"increment has shape {h.shape}, expected {traj.u.shape}")
    psi = np.zeros((N + 1,) + grid.n)
    if dphi0 is not None:
        psi[0] = dphi0
    xi = np.zeros((N, grid.dim) + grid.n)
    eta = np.zeros((N,) + grid.n)
    om = np.zeros((N,) + grid.n)
    for k in range(N):
        lin = _StepLinearization(traj, k)
        psi[k + 1], xi[k] = tangent_step(lin, psi[k], h[k])
        om[k], eta[k] = _level_tangent(grid, traj.params, traj.potential, traj.phi[k + 1], psi[k + 1])
    return TangentTrajectory(h, xi, psi, eta, om)


# -- discrete adjoint ----------------------------------------------------------------------


def adjoint_step(lin: _StepLinearization, b_next: np.ndarray, b_v_src: np.ndarray | None = None):
    """Transpose of :func:`tangent_step`.

    Returns ``(b_phi, b_u, b_mu_total, b_rhs)`` where ``b_mu_total`` collects the
    sensitivity to the chemical potential through both the force and the
    phase-field update (reporting only).
    """
    g, L, nu = lin.grid, lin.grid.lap, lin.params.nu
    b_rhs = g.solve_poly(b_next, lin.coeffs)
    b_phi = b_rhs / lin.tau + lin.S1 * b_rhs + lin.m * lin.A * L(L(b_rhs))
    b_R = lin.m * L(b_rhs)
    b_phi += -lin.f1 * L(b_R) + lin.f2 * lin.w * b_R
    b_w = (lin.f1 + nu) * b_R
    b_mu = np.zeros(g.n)
    b_u = np.zeros((g.dim,) + g.n)
    if lin.flow:
        b_v = np.zeros((g.dim,) + g.n) if b_v_src is None else np.array(b_v_src, dtype=float)
        for a in range(g.dim):
            b_gf = g.c2f(-b_rhs, a)
            b_v[a] += b_gf * lin.grad_phi[a]
            b_phi += g.fwd_T(lin.v[a] * b_gf, a)
        y = lin.op.solve_T(b_v)
        b_u = y * lin.mask
        b_lam = np.zeros(g.n)
        for a in range(g.dim):
            b_mu += g.c2f_T(y[a] * lin.grad_phi[a], a)
            b_phi += g.fwd_T(lin.mu_f[a] * y[a], a)
            b_lam += g.c2f_T(-y[a] * lin.v[a], a)
        b_phi += lin.dlam * b_lam
    b_w += -L(b_mu) + (lin.f1 + nu) * b_mu
    b_phi += lin.f2 * lin.w * b_mu
    b_phi += -L(b_w) + lin.f1 * b_w
    return b_phi, b_u, b_mu + b_R, b_rhs


@dataclass(eq=False)
class AdjointCore:
    b_u: np.ndarray
    b_phi: np.ndarray
    b_mu: np.ndarray


def adjoint_core(traj: StateTrajectory, src_phi=None, src_v=None, src_mu=None, src_w=None) -> AdjointCore:
    """Apply the transposed tangent map to output sensitivities (Euclidean pairing).

    ``src_phi`` has ``steps + 1`` levels, the others one entry per step in the
    trajectory layout.  Returns sensitivities with respect to the control and
    every phase-field level (``b_phi[0]`` is the sensitivity to ``phi0``).
    """
    grid, N = traj.grid, traj.steps
    b_phi = np.zeros((N + 1,) + grid.n)
    if src_phi is not None:
        b_phi += src_phi
    if src_mu is not None or src_w is not None:
        zero = np.zeros((N,) + grid.n)
        s_mu = zero if src_mu is None else src_mu
        s_w = zero if src_w is None else src_w
        for k in range(N):
            b_phi[k + 1] += _level_adjoint(grid, traj.params, traj.potential, traj.phi[k + 1], s_w[k], s_mu[k])
    b_u = np.zeros_like(traj.u)
    b_mu = np.zeros((N,) + grid.n)
    for k in reversed(range(N)):
        lin = _StepLinearization(traj, k)
        bp, b_u[k], b_mu[k], _ = adjoint_step(lin, b_phi[k + 1], None if src_v is None else src_v[k])
        b_phi[k] += bp
    return AdjointCore(b_u, b_phi, b_mu)


def tracking_sources(traj: StateTrajectory, spec: CostSpec) -> np.ndarray:
    """Euclidean derivative of the tracking terms with respect to every phi level."""
    vol = traj.grid.cell_volume
    wts = traj.time_grid.trapezoid_weights()
    e = traj.phi - spec.phi_Q
    src = spec.b1 * vol * wts[(slice(None),) + (None,) * traj.grid.dim] * e
    src[-1] += spec.b2 * vol * (traj.phi[-1] - spec.phi_Omega)
    return src


def adjoint_sweep_discrete(traj: StateTrajectory, spec: CostSpec):
    """Discrete adjoint of the tracking cost; returns ``(AdjointTrajectory, ReducedGradient)``."""
    grid, tg = traj.grid, traj.time_grid
    if spec.phi_Q.shape != traj.phi.shape:
        raise ValueError("cost targets do not match the trajectory")
    vol, tau = grid.cell_volume, tg.tau
    core = adjoint_core(traj, src_phi=tracking_sources(traj, spec))
    omega = core.b_u / (tau * vol)
    p = core.b_phi / vol
    p[-1] = spec.b2 * (traj.phi[-1] - spec.phi_Omega)
    q = -core.b_mu / (tau * vol)
    r = np.stack([-grid.lap(qk) + (traj.potential.df(traj.phi[k]) + traj.params.nu) * qk
                  for k, qk in enumerate(q)])
    adj = AdjointTrajectory(omega, p, q, r)
    return adj, assemble_reduced_gradient(traj.u, omega, spec)


def assemble_reduced_gradient(u: np.ndarray, omega: np.ndarray, spec: CostSpec) -> ReducedGradient:
    if np.shape(u) != np.shape(omega):
        raise ValueError(f"shape mismatch: u {np.shape(u)} vs omega {np.shape(omega)}")
    return ReducedGradient(spec.b3 * np.asarray(u) + omega, spec.kappa_for(np.shape(u)[1]))


# -- continuous-form adjoint --------------------------------------------------------------


def adjoint_sweep_continuous(traj: StateTrajectory, spec: CostSpec) -> AdjointTrajectory:
    """Backward solve of the adjoint equations written in strong form.

    Per step (state data at level ``k``):

    * ``omega`` from the Brinkman operator with force ``-p grad(phi)``;
    * ``q = -grad(phi) . omega - m lap p`` and ``r = -lap q + (f'(phi) + nu) q``;
    * ``p`` advanced backward with the sixth-order leading part implicit.
    """
    grid, tg, params, pot = traj.grid, traj.time_grid, traj.params, traj.potential
    N, tau, m = tg.steps, tg.tau, params.mobility
    A = params.stab_constant(pot)
    L = grid.lap
    coeffs = implicit_coeffs(params, pot, tau)
    flow = flow_enabled(grid, params)
    d = grid.dim
    p = np.zeros((N + 1,) + grid.n)
    omega = np.zeros((N, d) + grid.n)
    q = np.zeros((N,) + grid.n)
    r = np.zeros((N,) + grid.n)
    p[N] = spec.b2 * (traj.phi[N] - spec.phi_Omega)
    for k in reversed(range(N)):
        phi = traj.phi[k]
        w, mu = chemical_potentials(grid, phi, params, pot)
        f1 = pot.df(phi)
        pn = p[k + 1]
        gphi = grid.grad(phi)
        if flow:
            op = traj.operator(k)
            v = traj.v[k]
            force = -np.stack([grid.c2f(pn, a) * gphi[a] for a in range(d)])
            omega[k], _ = op.solve(force)
            grad_dot_omega = sum(grid.c2f_T(gphi[a] * omega[k][a], a) for a in range(d))
        else:
            v = np.zeros((d,) + grid.n)
            grad_dot_omega = 0.0
        q[k] = -grad_dot_omega - m * L(pn)
        r[k] = -L(q[k]) + (f1 + params.nu) * q[k]
        gQ = spec.b1 * (phi - spec.phi_Q[k])
        E = gQ + source_S_prime(phi, params) * pn - pot.d2f(phi) * w * q[k] - (-L(r[k]) + f1 * r[k])
        if flow:
            v_dot_omega = sum(grid.c2f_T(v[a] * omega[k][a], a) for a in range(d))
            mu_f = [grid.c2f(mu, a) for a in range(d)]
            p_f = [grid.c2f(pn, a) for a in range(d)]
            E = E - params.dlam(phi) * v_dot_omega
            E = E - sum(grid.fwd_T(p_f[a] * v[a], a) for a in range(d))
            E = E + sum(grid.fwd_T(mu_f[a] * omega[k][a], a) for a in range(d))
        rhs = pn / tau + E - m * L(L(L(pn))) + m * A * L(L(pn))
        p[k] = grid.solve_poly(rhs, coeffs)
    return AdjointTrajectory(omega, p, q, r)


# -- reduced problem ----------------------------------------------------------------------


@dataclass(eq=False)
class ReducedProblem:
    """Control-to-cost map ``u -> J(S(u), u)`` with its adjoint gradient."""

    grid: Grid
    time_grid: TimeGrid
    params: ModelParams
    phi0: np.ndarray
    cost: CostSpec
    potential: Potential = QUARTIC

    @property
    def control_shape(self) -> tuple[int, ...]:
        return (self.time_grid.steps, self.grid.dim) + self.grid.n

    def zero_control(self) -> np.ndarray:
        return np.zeros(self.control_shape)

    def solve_state(self, u: np.ndarray, **kw) -> StateTrajectory:
        return solve_forward(self.phi0, u, self.params, self.potential, self.time_grid, self.grid, **kw)

    def cost_breakdown(self, u: np.ndarray, traj: StateTrajectory | None = None) -> CostBreakdown:
        if traj is None:
            traj = self.solve_state(u, keep_operators=False, diagnostics=False)
        return cost_J(traj.phi, u, self.cost, self.grid, self.time_grid)

    def smooth_cost(self, u: np.ndarray, traj: StateTrajectory | None = None) -> float:
        return self.cost_breakdown(u, traj).smooth

    def gradient(self, u: np.ndarray, traj: StateTrajectory | None = None):
        """Return ``(ReducedGradient, AdjointTrajectory, StateTrajectory)`` at ``u``."""
        if traj is None:
            traj = self.solve_state(u, diagnostics=False)
        adj, grad = adjoint_sweep_discrete(traj, self.cost)
        return grad, adj, traj

    def control_inner(self, a: np.ndarray, b: np.ndarray) -> float:
        """L2(Q) pairing of two controls."""
        return self.time_grid.tau * array_inner(self.grid, a, b)

    def scaled(self, s: float) -> "ReducedProblem":
        return ReducedProblem(self.grid, self.time_grid, self.params, self.phi0, self.cost.scaled(s), self.potential)


# -- remainder test ------------------------------------------------------------------------


def state_x_norm(grid: Grid, tg: TimeGrid, v, phi, mu, w) -> float:
    """``max_t |phi|_H1`` plus L2-in-time norms of the velocity, mu and w."""
    tau = tg.tau
    return (max(h1_norm(grid, x) for x in phi)
            + math.sqrt(tau * array_inner(grid, v, v))
            + math.sqrt(tau * array_inner(grid, mu, mu))
            + math.sqrt(tau * array_inner(grid, w, w)))


def frechet_remainder_test(problem: ReducedProblem, u: np.ndarray, h: np.ndarray, scales=(1e-1, 1e-2, 1e-3)):
    """Rows ``(t, remainder, remainder / t^2)`` and the fitted log-log slope."""
    base = problem.solve_state(u, diagnostics=False)
    tan = solve_tangent(base, h)
    rows = []
    for t in scales:
        pert = problem.solve_state(u + t * h, keep_operators=False, diagnostics=False)
        rem = state_x_norm(problem.grid, problem.time_grid,
                           pert.v - base.v - t * tan.xi_v,
                           pert.phi - base.phi - t * tan.psi,
                           pert.mu - base.mu - t * tan.eta_mu,
                           pert.w - base.w - t * tan.omega_w)
        rows.append((t, rem, rem / t**2))
    ts = np.array([r[0] for r in rows])
    rs = np.array([r[1] for r in rows])
    if np.all(rs > 0):
        slope = float(np.polyfit(np.log(ts), np.log(rs), 1)[0])
    else:
        slope = float("nan")
    return rows, slope


def duality_gap(traj: StateTrajectory, h: np.ndarray, dphi0, lam_phi, lam_v, lam_mu, lam_w) -> tuple[float, float]:
    """Return ``(|<T h, lam> - <h, T^* lam>|, |h| |lam|)`` in the Euclidean pairing."""
    tan = solve_tangent(traj, h, dphi0)
    core = adjoint_core(traj, lam_phi, lam_v, lam_mu, lam_w)

    def dot(a, b):
        return math.fsum((np.ravel(a) * np.ravel(b)).tolist())

    lhs = dot(tan.psi, lam_phi) + dot(tan.xi_v, lam_v) + dot(tan.eta_mu, lam_mu) + dot(tan.omega_w, lam_w)
    rhs = dot(h, core.b_u) + (dot(dphi0, core.b_phi[0]) if dphi0 is not None else 0.0)
    hn = math.sqrt(dot(h, h) + (dot(dphi0, dphi0) if dphi0 is not None else 0.0))
    ln = math.sqrt(dot(lam_phi, lam_phi) + dot(lam_v, lam_v) + dot(lam_mu, lam_mu) + dot(lam_w, lam_w))
    return abs(lhs - rhs), hn * ln
