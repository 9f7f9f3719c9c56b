import math

import numpy as np
import pytest

from bchopt.adjoint import (
    ReducedProblem,
    adjoint_sweep_continuous,
    adjoint_sweep_discrete,
    assemble_reduced_gradient,
    duality_gap,
    frechet_remainder_test,
    solve_tangent,
)
from bchopt.grid import Grid, TimeGrid
from bchopt.model import CostSpec, ModelParams
from bchopt.verify import fd_gradient

from conftest import smooth_phi0

TWO_PI = 2 * math.pi


def _problem(bc="periodic", n=(10, 10), steps=4, nu=0.5, b=(1.0, 1.0, 0.1), params=None):
    g = Grid(n, (TWO_PI,) * len(n), bc)
    tg = TimeGrid(0.01 * steps, steps)
    coords = g.cell_coords()
    target = 0.3 * np.cos(coords[0])
    phi_Q = np.stack([target * (1 + 0.1 * k) for k in range(steps + 1)])
    spec = CostSpec(*b, phi_Q, 0.5 * np.sin(coords[-1]))
    params = params or ModelParams(nu=nu, sigma=0.2, h_source="tanh")
    return ReducedProblem(g, tg, params, smooth_phi0(g), spec)


def _control(prob, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    return scale * rng.standard_normal(prob.control_shape) * prob.grid.velocity_mask()[None]


def test_zero_increment_gives_zero_tangent(bc_mode):
    prob = _problem(bc_mode)
    tr = prob.solve_state(_control(prob))
    tan = solve_tangent(tr, np.zeros(prob.control_shape))
    assert np.all(tan.psi == 0.0) and np.all(tan.xi_v == 0.0)
    assert np.all(tan.eta_mu == 0.0) and np.all(tan.omega_w == 0.0)


def test_tangent_superposition():
    prob = _problem()
    tr = prob.solve_state(_control(prob))
    h1, h2 = _control(prob, 1), _control(prob, 2)
    a = solve_tangent(tr, h1).psi + solve_tangent(tr, h2).psi
    b = solve_tangent(tr, h1 + h2).psi
    assert np.linalg.norm(a - b) <= 1e-12 * np.linalg.norm(b)


def test_tangent_vs_directional_difference():
    prob = _problem()
    u, h = _control(prob), _control(prob, 3)
    tr = prob.solve_state(u)
    psi = solve_tangent(tr, h).psi
    t = 1e-6
    fd = (prob.solve_state(u + t * h).phi - prob.solve_state(u - t * h).phi) / (2 * t)
    assert np.linalg.norm(fd - psi) <= 1e-5 * np.linalg.norm(psi)


def test_psi0_is_zero():
    prob = _problem()
    tr = prob.solve_state(_control(prob))
    assert np.all(solve_tangent(tr, _control(prob, 4)).psi[0] == 0.0)


@pytest.mark.parametrize("nu", [-0.5, 0.0, 1.0])
def test_duality(bc_mode, nu):
    prob = _problem(bc_mode, nu=nu)
    tr = prob.solve_state(_control(prob))
    rng = np.random.default_rng(11)
    mask = prob.grid.velocity_mask()[None]
    for _ in range(4):
        h = rng.standard_normal(tr.u.shape) * mask
        d0 = rng.standard_normal(prob.grid.n)
        lam = (rng.standard_normal(tr.phi.shape), rng.standard_normal(tr.v.shape) * mask,
               rng.standard_normal(tr.mu.shape), rng.standard_normal(tr.w.shape))
        gap, scale = duality_gap(tr, h, d0, *lam)
        assert gap <= 1e-11 * scale


def test_zero_weights_give_zero_adjoint():
    prob = _problem(b=(0.0, 0.0, 0.3))
    u = _control(prob)
    adj, grad = adjoint_sweep_discrete(prob.solve_state(u), prob.cost)
    assert np.all(adj.omega == 0.0) and np.all(adj.p == 0.0)
    np.testing.assert_array_equal(grad.smooth_part, 0.3 * u)


def test_terminal_condition_exact():
    prob = _problem()
    tr = prob.solve_state(_control(prob))
    adj, _ = adjoint_sweep_discrete(tr, prob.cost)
    assert np.array_equal(adj.p[-1], prob.cost.b2 * (tr.phi[-1] - prob.cost.phi_Omega))
    cont = adjoint_sweep_continuous(tr, prob.cost)
    assert np.array_equal(cont.p[-1], adj.p[-1])


@pytest.mark.parametrize("bc", ["periodic", "box-neumann"])
def test_gradient_matches_finite_differences(bc):
    prob = _problem(bc)
    u = _control(prob)
    grad, _, _ = prob.gradient(u)
    dirs = [_control(prob, s) for s in range(10, 15)]
    fd = fd_gradient(prob.smooth_cost, u, dirs, 1e-4)
    for h, f in zip(dirs, fd):
        a = prob.control_inner(grad.smooth_part, h)
        assert abs(a - f) <= 1e-5 * abs(f)


def test_fd_exact_for_quadratic():
    prob = _problem(b=(0.0, 0.0, 0.7))
    u, h = _control(prob), _control(prob, 1)
    (fd,) = fd_gradient(prob.smooth_cost, u, [h], 1e-3)
    assert fd == pytest.approx(0.7 * prob.control_inner(u, h), rel=1e-9)


def test_fd_plateau():
    prob = _problem()
    u, h = _control(prob), _control(prob, 6)
    a, b = fd_gradient(prob.smooth_cost, u, [h, h], 1e-3)[0], fd_gradient(prob.smooth_cost, u, [h], 5e-4)[0]
    assert abs(a - b) <= 1e-4 * abs(b)


def test_remainder_is_second_order():
    prob = _problem()
    rows, slope = frechet_remainder_test(prob, _control(prob), _control(prob, 7))
    assert abs(slope - 2.0) <= 0.1
    ratios = [r[2] for r in rows]
    assert max(ratios) <= 5 * min(ratios)
    rows0, _ = frechet_remainder_test(prob, _control(prob), np.zeros(prob.control_shape))
    assert all(r[1] == 0.0 for r in rows0)


def test_reduced_gradient_assembly():
    prob = _problem()
    u = _control(prob)
    om = _control(prob, 9)
    spec = prob.cost
    np.testing.assert_array_equal(assemble_reduced_gradient(u, np.zeros_like(u), spec.scaled(1 / spec.b3)).smooth_part, u)
    np.testing.assert_array_equal(assemble_reduced_gradient(np.zeros_like(u), om, spec).smooth_part, om)
    a = assemble_reduced_gradient(u + 2 * u, om - om / 3, spec).smooth_part
    b = 3 * assemble_reduced_gradient(u, np.zeros_like(u), spec).smooth_part + (2 / 3) * om
    assert np.max(np.abs(a - b)) <= 1e-14 * np.max(np.abs(a))
    with pytest.raises(ValueError):
        assemble_reduced_gradient(u, om[:-1], spec)


def test_continuous_adjoint_consistency():
    errs = []
    for steps in (5, 20, 80):
        g = Grid((10, 10), (TWO_PI, TWO_PI))
        X, Y = g.cell_coords()
        tg = TimeGrid(0.05, steps)
        spec = CostSpec(1.0, 1.0, 0.1, np.stack([0.3 * np.cos(X)] * (steps + 1)), 0.5 * np.sin(Y))
        prob = ReducedProblem(g, tg, ModelParams(nu=0.5), smooth_phi0(g, 0.1), spec)
        u = np.stack([np.stack([0.3 * np.sin(Y) * (1 + t), 0.2 * np.cos(X)]) for t in tg.times()[:-1]])
        _, adj, tr = prob.gradient(u)
        cont = adjoint_sweep_continuous(tr, spec)
        errs.append(np.linalg.norm(cont.omega[0] - adj.omega[0]) / np.linalg.norm(adj.omega[0]))
        # the algebraic relation for q holds exactly by construction
        k = steps // 2
        gphi = g.grad(tr.phi[k])
        rel = -sum(g.c2f_T(gphi[a] * cont.omega[k][a], a) for a in range(2)) - g.lap(cont.p[k + 1])
        assert np.max(np.abs(cont.q[k] - rel)) <= 1e-10 * max(1.0, np.max(np.abs(cont.q[k])))
    assert errs[0] > errs[1] > errs[2]


def test_continuous_adjoint_homogeneous():
    prob = _problem(b=(0.0, 0.0, 1.0))
    tr = prob.solve_state(_control(prob))
    cont = adjoint_sweep_continuous(tr, prob.cost)
    assert np.all(cont.p == 0.0) and np.all(cont.omega == 0.0) and np.all(cont.q == 0.0)


def test_gradient_scaling():
    prob = _problem()
    u = _control(prob)
    g1, _, _ = prob.gradient(u)
    g2, _, _ = prob.scaled(3.0).gradient(u)
    assert np.max(np.abs(g2.smooth_part - 3 * g1.smooth_part)) <= 1e-12 * np.max(np.abs(g2.smooth_part))
