"""
Learning an execution policy
============================

Train a small policy network against the exact impact operator and compare
it with the QP optimum.  With a trained operator network, swap
``ControlProblem.exact`` for ``ControlProblem.surrogate``.
"""

from iconexec.grid import KernelSpec, TimeGrid, build_impact_matrix
from iconexec.gt_solver import solve_qp
from iconexec.objective import ObjectiveParams
from iconexec.ocnet import ControlProblem, OcnetTrainConfig, evaluate_policy, train_ocnet

grid = TimeGrid(1.0, 100)
thetas = [KernelSpec.exponential(0.3, 2.0), KernelSpec.singular_power_law(0.3, 0.4)]
params = [ObjectiveParams(x=0.1, grid=grid), ObjectiveParams(x=0.05, grid=grid)]
mats = [build_impact_matrix(t, grid) for t in thetas]
gts = [solve_qp(p, m) for p, m in zip(params, mats)]

problem = ControlProblem.exact(params, mats)
policy, hist = train_ocnet(problem, OcnetTrainConfig(iterations=2000, eval_every=250), seed=0, gts=gts)
for step, best, eu in zip(hist.steps, hist.best_objective, hist.err_u):
    print(f"iter {step:5d}  best mean J {best:.7f}  mean u error {eu:.3e}")

for th, e in zip(thetas, evaluate_policy(policy, problem, gts)):
    print(f"{th.family.short:5s} u err {e.u:.2e}  J err {e.objective:.2e}  "
          f"J={e.J_policy:.6f} vs J*={e.J_star:.6f}")
