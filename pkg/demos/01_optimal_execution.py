"""
Transient impact and optimal liquidation
========================================

Build the discrete impact operator for the three kernel families, then
solve for the optimal selling rate with both ground-truth solvers.
"""

import numpy as np

from iconexec.grid import KernelSpec, TimeGrid, apply_impact, build_impact_matrix
from iconexec.gt_solver import prop1_solve, solve_qp
from iconexec.objective import ObjectiveParams

grid = TimeGrid(1.0, 100)

# %%
# A constant selling rate under an exponential kernel builds impact that
# saturates at lambda / beta.
exp = KernelSpec.exponential(0.2, 0.5)
y = apply_impact(build_impact_matrix(exp, grid), np.ones(grid.n_steps), include_terminal=True)
print("Y(T) =", y[-1], " closed form:", 0.2 * (1 - np.exp(-0.5)) / 0.5)

# %%
# Optimal strategies for x = 0.1 of ADV.  The rates are positive and dip in
# the middle of the horizon.
params = ObjectiveParams(x=0.1, grid=grid)
for spec in (exp, KernelSpec.power_law(0.2, 0.45), KernelSpec.singular_power_law(0.2, 0.45)):
    mat = build_impact_matrix(spec, grid)
    qp = solve_qp(params, mat)
    pr = prop1_solve(params, mat)
    gap = np.linalg.norm(pr.u_star - qp.u_star) / np.linalg.norm(qp.u_star)
    k = int(np.argmin(qp.u_star))
    print(f"{spec.family.short:5s} J*={qp.value:.6f}  u(0)={qp.u_star[0]:.4f}  "
          f"min u={qp.u_star[k]:.4f} at t={grid.left_nodes[k]:.2f}  "
          f"u(T-)={qp.u_star[-1]:.4f}  X_N={qp.terminal_inventory:.2e}  prop1 gap={gap:.1e}")
