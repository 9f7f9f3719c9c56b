"""Structural data of the control problem.

Potential, viscosity and source nonlinearities, the free energy, the cost
functional and the pointwise proximal map for box constraints plus an L1
penalty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from bchopt.grid import Grid, ScalarField, TimeGrid, array_inner


class Potential:
    """Quartic double well ``F(s) = (s^2 - 1)^2 / 4`` and its derivatives."""

    kind = "quartic"
    max_order = 4

    def F(self, s):
        return 0.25 * (s * s - 1.0) ** 2

    def f(self, s):
        return s**3 - s

    def df(self, s):
        return 3.0 * s * s - 1.0

    def d2f(self, s):
        return 6.0 * s

    def d3f(self, s):
        return 6.0 + 0.0 * s

    def d4f(self, s):
        return 0.0 * s

    def derivative(self, s, order: int):
        if order not in range(self.max_order + 1):
            raise ValueError(f"order must be in 0..{self.max_order}, got {order}")
        return (self.F, self.f, self.df, self.d2f, self.d3f)[order](s)

    def stabilization(self, nu: float) -> float:
        """``max |f'(s) + nu|`` over ``s in [-2, 2]``."""
        s = np.linspace(-2.0, 2.0, 4001)
        return float(np.max(np.abs(self.df(s) + nu)))


QUARTIC = Potential()


def potential_eval(s: float, order: int, potential: Potential = QUARTIC) -> float:
    """Return ``F`` (order 0), ``f = F'`` (order 1), ``f'`` (order 2), up to ``f'''`` (order 4)."""
    return float(potential.derivative(s, order))


@dataclass(frozen=True)
class ModelParams:
    """Coefficients of the state system.

    ``lambda_profile`` is ``"constant"`` (``lambda = lambda_hi``) or
    ``"smooth-bounded"`` (``lambda_lo + (lambda_hi - lambda_lo) / (1 + s^2)``).
    ``h_source`` is ``"zero"`` or ``"tanh"`` (``h_amp * tanh(s)``).
    ``flow = False`` switches the velocity off (always the case in 1D).
    """

    eps: float = 1.0
    mobility: float = 1.0
    eta0: float = 1.0
    nu: float = 0.0
    sigma: float = 0.0
    lambda_lo: float = 0.5
    lambda_hi: float = 2.0
    lambda_profile: str = "smooth-bounded"
    h_source: str = "zero"
    h_amp: float = 1.0
    flow: bool = True
    stabilization: float | None = None

    def __post_init__(self):
        for name in ("eps", "mobility", "eta0", "lambda_lo", "lambda_hi"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be positive, got {value}")
        if self.lambda_lo > self.lambda_hi:
            raise ValueError("lambda_lo must not exceed lambda_hi")
        if self.lambda_profile not in ("constant", "smooth-bounded"):
            raise ValueError(f"unknown lambda_profile {self.lambda_profile!r}")
        if self.h_source not in ("zero", "tanh"):
            raise ValueError(f"unknown h_source {self.h_source!r}")
        if self.stabilization is not None and self.stabilization < 0:
            raise ValueError("stabilization must be nonnegative")

    def lam(self, s):
        if self.lambda_profile == "constant":
            return self.lambda_hi + 0.0 * s
        return self.lambda_lo + (self.lambda_hi - self.lambda_lo) / (1.0 + s * s)

    def dlam(self, s):
        if self.lambda_profile == "constant":
            return 0.0 * s
        return -2.0 * (self.lambda_hi - self.lambda_lo) * s / (1.0 + s * s) ** 2

    def h(self, s):
        if self.h_source == "zero":
            return 0.0 * s
        return self.h_amp * np.tanh(s)

    def dh(self, s):
        if self.h_source == "zero":
            return 0.0 * s
        return self.h_amp / np.cosh(s) ** 2

    def stab_constant(self, potential: Potential = QUARTIC) -> float:
        if self.stabilization is not None:
            return self.stabilization
        return potential.stabilization(self.nu)


def source_S(s, params: ModelParams):
    return -params.sigma * s + params.h(s)


def source_S_prime(s, params: ModelParams):
    return -params.sigma + params.dh(s)


def energy_total(phi: ScalarField, params: ModelParams, potential: Potential = QUARTIC):
    """Return ``(E, F_part, G_part)`` with ``E = F_part + nu * G_part``."""
    g = phi.grid
    eps = params.eps
    x = phi.data
    w = -eps * g.lap(x) + potential.f(x) / eps
    f_part = 0.5 * array_inner(g, w, w)
    gx = g.grad(x)
    g_part = 0.5 * eps * array_inner(g, gx, gx) + array_inner(g, potential.F(x), np.ones(g.n)) / eps
    return f_part + params.nu * g_part, f_part, g_part


def energy_total_expanded(phi: ScalarField, params: ModelParams, potential: Potential = QUARTIC):
    """Same quantities as :func:`energy_total`, from the expanded square and by parts."""
    g = phi.grid
    eps = params.eps
    x = phi.data
    lap = g.lap(x)
    fx = potential.f(x)
    one = np.ones(g.n)
    f_part = (
        0.5 * eps**2 * array_inner(g, lap, lap)
        - array_inner(g, lap, fx)
        + 0.5 * array_inner(g, fx, fx) / eps**2
    )
    g_part = -0.5 * eps * array_inner(g, x, lap) + array_inner(g, potential.F(x), one) / eps
    return f_part + params.nu * g_part, f_part, g_part


# -- cost ----------------------------------------------------------------------


@dataclass(frozen=True)
class BoxBounds:
    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(x) for x in np.atleast_1d(self.lo))
        hi = tuple(float(x) for x in np.atleast_1d(self.hi))
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if len(lo) != len(hi):
            raise ValueError("lo and hi need the same number of components")
        if any(a > b for a, b in zip(lo, hi)):
            raise ValueError(f"box bounds need lo <= hi, got lo={lo}, hi={hi}")

    @classmethod
    def symmetric(cls, dim: int, bound: float) -> "BoxBounds":
        return cls((-bound,) * dim, (bound,) * dim)

    def straddles_zero(self) -> bool:
        return all(a < 0 < b for a, b in zip(self.lo, self.hi))

    def arrays(self, ndim: int):
        """Bounds shaped ``(d, 1, ..., 1)`` for broadcasting against ``(d, *n)``."""
        shape = (len(self.lo),) + (1,) * ndim
        return np.reshape(self.lo, shape), np.reshape(self.hi, shape)

    def clip(self, u: np.ndarray) -> np.ndarray:
        lo, hi = self.arrays(u.ndim - 2)
        return np.minimum(np.maximum(u, lo), hi)


@dataclass(frozen=True, eq=False)
class CostSpec:
    """Weights and targets of the tracking cost.

    ``phi_Q`` holds one target per time level (``steps + 1`` arrays);
    ``kappa`` one sparsity weight per control component.
    """

    b1: float
    b2: float
    b3: float
    phi_Q: np.ndarray
    phi_Omega: np.ndarray
    kappa: tuple[float, ...] = ()

    def __post_init__(self):
        if self.b1 < 0 or self.b2 < 0:
            raise ValueError("b1 and b2 must be nonnegative")
        if not (self.b3 > 0):
            raise ValueError("b3 must lie in (0, +inf)")
        kappa = tuple(float(k) for k in self.kappa)
        if any(k < 0 for k in kappa):
            raise ValueError("kappa must be nonnegative")
        object.__setattr__(self, "kappa", kappa)
        object.__setattr__(self, "phi_Q", np.asarray(self.phi_Q, dtype=float))
        object.__setattr__(self, "phi_Omega", np.asarray(self.phi_Omega, dtype=float))

    def kappa_for(self, dim: int) -> np.ndarray:
        if not self.kappa:
            return np.zeros(dim)
        if len(self.kappa) == 1:
            return np.full(dim, self.kappa[0])
        if len(self.kappa) != dim:
            raise ValueError(f"kappa has {len(self.kappa)} entries for {dim} components")
        return np.array(self.kappa)

    def scaled(self, s: float) -> "CostSpec":
        return CostSpec(self.b1 * s, self.b2 * s, self.b3 * s, self.phi_Q, self.phi_Omega,
                        tuple(k * s for k in self.kappa))

    @classmethod
    def constant_targets(cls, grid: Grid, time_grid: TimeGrid, b1, b2, b3, value=0.0, kappa=()):
        phi_Q = np.full((time_grid.steps + 1,) + grid.n, float(value))
        return cls(b1, b2, b3, phi_Q, np.full(grid.n, float(value)), kappa)


@dataclass(frozen=True)
class CostBreakdown:
    tracking_Q: float
    tracking_T: float
    tikhonov: float
    l1: float

    @property
    def smooth(self) -> float:
        return self.tracking_Q + self.tracking_T + self.tikhonov

    @property
    def total(self) -> float:
        return self.smooth + self.l1


def l1_term(u: np.ndarray, kappa: Sequence[float], grid: Grid, time_grid: TimeGrid) -> float:
    """``sum_i kappa_i * int_Q |u_i|`` with piecewise-constant controls in time."""
    total = 0.0
    for i, k in enumerate(kappa):
        if k:
            total += k * time_grid.tau * grid.cell_volume * math.fsum(np.abs(u[:, i]).ravel().tolist())
    return total


def cost_J(phi_traj: np.ndarray, u: np.ndarray, spec: CostSpec, grid: Grid,
           time_grid: TimeGrid) -> CostBreakdown:
    """Evaluate the cost.

    ``phi_traj`` has shape ``(steps + 1, *n)``; ``u`` has shape
    ``(steps, d, *n)`` and is constant on each time interval.  The tracking
    integral over Q uses the trapezoid rule in time.
    """
    steps = time_grid.steps
    if phi_traj.shape != (steps + 1,) + grid.n:
        raise ValueError(f"phi trajectory has shape {phi_traj.shape}, expected {(steps + 1,) + grid.n}")
    if u.shape[0] != steps or u.shape[2:] != grid.n:
        raise ValueError(f"control has shape {u.shape}, expected ({steps}, d, *{grid.n})")
    if spec.phi_Q.shape != phi_traj.shape or spec.phi_Omega.shape != grid.n:
        raise ValueError("cost targets do not match the trajectory shape")
    vol = grid.cell_volume
    e = phi_traj - spec.phi_Q
    wts = time_grid.trapezoid_weights()
    tq = 0.5 * spec.b1 * vol * math.fsum(
        (wts[k] * math.fsum((e[k] ** 2).ravel().tolist()) for k in range(steps + 1))
    )
    eT = phi_traj[-1] - spec.phi_Omega
    tt = 0.5 * spec.b2 * vol * math.fsum((eT**2).ravel().tolist())
    tk = 0.5 * spec.b3 * vol * time_grid.tau * math.fsum((u**2).ravel().tolist())
    l1 = l1_term(u, spec.kappa_for(u.shape[1]), grid, time_grid)
    return CostBreakdown(tq, tt, tk, l1)


# -- proximal map ----------------------------------------------------------------


def soft_threshold(v, k):
    return np.sign(v) * np.maximum(np.abs(v) - k, 0.0)


def prox_box_l1(v, step_kappa, lo, hi):
    """Proximal map of ``step_kappa * |x|`` plus the indicator of ``[lo, hi]``.

    Works on scalars or broadcastable arrays.  With ``step_kappa = 0`` this is
    the plain projection onto the box.
    """
    if np.any(np.asarray(lo) > np.asarray(hi)):
        raise ValueError("prox_box_l1 needs lo <= hi")
    if np.any(np.asarray(step_kappa) < 0):
        raise ValueError("step_kappa must be nonnegative")
    out = np.minimum(np.maximum(soft_threshold(v, step_kappa), lo), hi)
    return float(out) if np.ndim(out) == 0 else out


def subgradient_j(u: float) -> tuple[float, float]:
    """Subdifferential of ``|u|`` as a closed interval."""
    if u > 0:
        return (1.0, 1.0)
    if u < 0:
        return (-1.0, -1.0)
    return (-1.0, 1.0)
