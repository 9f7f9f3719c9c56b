# ---
# jupyter:
#   jupytext:
#     text_representation:
#       extension: .py
#       format_name: light
#       format_version: '1.5'
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# # Sparse controls
#
# Adding an L1 penalty `kappa |u|` to the cost switches the control off
# wherever the adjoint velocity is small: at an optimum `u_i = 0` exactly when
# `|omega_i| <= kappa_i`.  We solve the problem for a few weights and watch the
# zero set grow until the control vanishes.

# +
import math

import numpy as np

from bchopt.adjoint import ReducedProblem
from bchopt.grid import Grid, TimeGrid
from bchopt.model import BoxBounds, CostSpec, ModelParams
from bchopt.optimizer import OptimizerConfig, kkt_audit, omega_at_zero, optimize, sparsity_sweep

grid = Grid((16, 16), (2 * math.pi, 2 * math.pi), "box-neumann")
tg = TimeGrid(0.1, 10)
X, Y = grid.cell_coords()
phi0 = 0.6 * np.cos(X / 2) * np.cos(Y / 2)
phi_Q = np.stack([0.4 * np.cos(X / 2)] * (tg.steps + 1))
spec = CostSpec(10.0, 10.0, 0.1, phi_Q, 0.4 * np.cos(X / 2))
problem = ReducedProblem(grid, tg, ModelParams(nu=0.5), phi0, spec)
bounds = BoxBounds(-2.0, 2.0)
# -

# `omega` at the zero control sets the scale: any weight above its max norm
# makes `u = 0` optimal.

w0 = omega_at_zero(problem)
print("max |omega(0)| =", w0)

# One optimisation at a moderate weight.

cfg = OptimizerConfig(stop_tol=1e-6, bounds=bounds, kappa=(0.3 * w0,))
res = optimize(problem, cfg)
rep = res.report
print(f"converged={rep.converged} after {rep.iterations} iterations, sparsity per component {rep.sparsity}")
print("cost per iteration:", [round(float(c), 6) for c in rep.costs[:6]], "...")

# Cell by cell, the zero set should match the adjoint criterion.

audit = kkt_audit(res.u, res.adjoint.omega, bounds, res.problem.cost.kappa_for(2), problem.cost.b3, 1e-5,
                  grid.velocity_mask())
print("projection defect", audit.max_defect, " equivalence fraction", audit.min_fraction)

# ## Sweep

sweep = sparsity_sweep(problem, np.linspace(0.0, 2 * w0, 5), OptimizerConfig(stop_tol=1e-6, bounds=bounds))
for row in sweep.rows:
    print(f"kappa={row['kappa']:.4f}  zero fraction={row['sparsity_fraction']:.3f}  |omega|={row['omega_inf']:.4f}")
print("first weight with u == 0:", sweep.kappa_star)
