"""Ground-truth optimal liquidation strategies.

Two independent routes are provided:

* ``solve_qp`` maximizes the exact quadratic form of the discrete objective
  through its first-order condition ``(A + A^T) u = b``.
* ``prop1_solve`` discretizes the resolvent representation
  ``u_t = a_t + int_0^t B(t, s) u_s ds`` with
  ``D_t = 2 eps id + K_t + K_t^*`` and
  ``K(t, s) = Ctilde(t - s) + lam G(t - s) 1{s <= t}``.

Both use the causal cell convention of :mod:`iconexec.grid` (the cell
``[t_i, t_{i+1})`` acts strictly after ``t_i``), and they agree to first
order in ``dt``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import GridMismatch, SingularMatrix
from .grid import ImpactMatrix, apply_impact
from .objective import ObjectiveParams, assemble_lq, direct_objective, inventory_path


@dataclass(frozen=True, eq=False)
class GroundTruth:
    u_star: np.ndarray
    x_path: np.ndarray
    y_path: np.ndarray
    value: float
    method: str

    @property
    def terminal_inventory(self) -> float:
        return float(self.x_path[-1])


def _package(params, mat, u, method) -> GroundTruth:
    if not np.all(np.isfinite(u)):
        raise SingularMatrix(f"{method} solve produced non-finite rates")
    return GroundTruth(
        u_star=u,
        x_path=inventory_path(params, u),
        y_path=apply_impact(mat, u),
        value=direct_objective(params, mat, u),
        method=method,
    )


def _check(params: ObjectiveParams, mat: ImpactMatrix):
    if mat.grid != params.grid:
        raise GridMismatch("impact matrix and objective use different grids")


def solve_qp(params: ObjectiveParams, mat: ImpactMatrix) -> GroundTruth:
    _check(params, mat)
    qf = assemble_lq(params, mat)
    H = qf.A + qf.A.T
    try:
        factor = scipy.linalg.cho_factor(H, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrix(f"Hessian of the quadratic form is not positive definite: {exc}")
    u = scipy.linalg.cho_solve(factor, qf.b)
    return _package(params, mat, u, "QP")


def prop1_build_kernel_K(params: ObjectiveParams, mat: ImpactMatrix,
                         diag_weight: float = 0.0) -> np.ndarray:
    """Discrete ``K[i, j] ~ K(t_i, t_j)`` on the left nodes.

    Off-diagonal entries follow the causal cell convention.  ``diag_weight``
    scales the ``s = t`` entries of the indicator terms (the continuous
    kernel jumps there); the default keeps K strictly lower triangular.
    """
    _check(params, mat)
    grid = params.grid
    n, T = grid.n_steps, grid.horizon
    t = grid.left_nodes
    ind = np.tril(np.ones((n, n)), -1) + diag_weight * np.eye(n)
    K = (2.0 * params.rho + 2.0 * params.phi * (T - t))[:, None] * ind
    impact = mat.lam * mat.entries
    if diag_weight:
        # cell average of G over the first lag cell stands in for G(0)
        impact = impact + diag_weight * mat.lam * mat.full[1, 0] * np.eye(n)
    return K + impact


def _b_profile(params: ObjectiveParams) -> np.ndarray:
    t = params.grid.left_nodes
    return 2.0 * (params.phi * (params.grid.horizon - t) + params.rho) * params.x


def prop1_coefficients(params: ObjectiveParams, mat: ImpactMatrix, K=None):
    """Return ``(a, B)`` with ``B`` supported on ``j <= i``."""
    if K is None:
        K = prop1_build_kernel_K(params, mat)
    n, dt, eps = params.grid.n_steps, params.grid.dt, params.eps
    b = _b_profile(params)
    a = np.zeros(n)
    B = np.zeros((n, n))
    for i in range(n):
        Kb = K[i:, i:]
        D = 2.0 * eps * np.eye(n - i) + dt * (Kb + Kb.T)
        try:
            # D is symmetric, so D^{-1} K(., t_i) serves both inner products
            w = scipy.linalg.cho_solve(scipy.linalg.cho_factor(D, lower=True), K[i:, i])
        except np.linalg.LinAlgError as exc:
            raise SingularMatrix(f"D_t not positive definite at index {i}: {exc}")
        a[i] = (b[i] - dt * w @ b[i:]) / (2.0 * eps)
        B[i, : i + 1] = (dt * w @ K[i:, : i + 1] - K[i, : i + 1]) / (2.0 * eps)
    return a, B


def volterra_forward(a, B, dt) -> np.ndarray:
    """Solve ``u_i = a_i + dt * sum_{j<i} B[i, j] u_j`` by forward substitution.

    Only strictly past rates enter: the cell ``[t_i, t_{i+1})`` has not been
    traded at ``t_i``.
    """
    a = np.asarray(a, dtype=float)
    u = np.zeros_like(a)
    for i in range(len(a)):
        u[i] = a[i] + dt * (B[i, :i] @ u[:i])
    return u


def prop1_solve(params: ObjectiveParams, mat: ImpactMatrix, diag_weight: float = 0.0) -> GroundTruth:
    _check(params, mat)
    K = prop1_build_kernel_K(params, mat, diag_weight)
    a, B = prop1_coefficients(params, mat, K)
    u = volterra_forward(a, B, params.grid.dt)
    return _package(params, mat, u, "Prop1")


def solve(params: ObjectiveParams, mat: ImpactMatrix, method: str = "qp") -> GroundTruth:
    method = method.lower()
    if method == "qp":
        return solve_qp(params, mat)
    if method == "prop1":
        return prop1_solve(params, mat)
    raise ValueError(f"unknown ground-truth method {method!r}")
