"""Discrete execution objective and its quadratic form.

With ``S = 0`` the discrete objective is

    J(u) = sum_i (-Y_i u_i - eps u_i^2 - phi X_i^2) dt - rho X_N^2,

where ``X_i = x - dt * sum_{j<i} u_j``.  ``assemble_lq`` expands this
exactly into ``-u^T A u + b^T u + c``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, GridMismatch, NonFiniteValue
from .grid import ImpactMatrix, TimeGrid, apply_impact


@dataclass(frozen=True)
class ObjectiveParams:
    eps: float = 0.5
    phi: float = 0.0
    rho: float = 10.0
    x: float = 0.1
    grid: TimeGrid = field(default_factory=TimeGrid)

    def __post_init__(self):
        if not self.eps > 0:
            raise DomainError(f"eps must be > 0, got {self.eps}")
        if not (self.phi >= 0 and self.rho >= 0):
            raise DomainError(f"phi and rho must be >= 0, got phi={self.phi}, rho={self.rho}")
        if not math.isfinite(self.x):
            raise DomainError(f"initial inventory must be finite, got {self.x}")

    def with_x(self, x) -> "ObjectiveParams":
        return ObjectiveParams(self.eps, self.phi, self.rho, x, self.grid)


@dataclass(frozen=True, eq=False)
class QuadraticForm:
    A: np.ndarray
    b: np.ndarray
    c: float

    def value(self, u) -> float:
        u = np.asarray(u, dtype=float)
        return float(-u @ self.A @ u + self.b @ u + self.c)

    def gradient(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return -(self.A + self.A.T) @ u + self.b


def _check_rates(params: ObjectiveParams, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape != (params.grid.n_steps,):
        raise GridMismatch(f"expected {params.grid.n_steps} rates, got shape {u.shape}")
    return u


def inventory_path(params: ObjectiveParams, u) -> np.ndarray:
    """``X_0 .. X_N`` with ``X_i = x - dt * sum_{j<i} u_j``."""
    u = _check_rates(params, u)
    return params.x - params.grid.dt * np.concatenate(([0.0], np.cumsum(u)))


def direct_objective(params: ObjectiveParams, mat: ImpactMatrix, u, y=None) -> float:
    """Evaluate the discrete objective term by term.

    ``y`` overrides the impact path (used for surrogate impact models);
    by default it is ``apply_impact(mat, u)``.
    """
    u = _check_rates(params, u)
    if mat is not None and mat.grid != params.grid:
        raise GridMismatch("impact matrix and objective use different grids")
    if y is None:
        y = apply_impact(mat, u)
    else:
        y = np.asarray(y, dtype=float)
        if y.shape != u.shape:
            raise GridMismatch(f"impact path has shape {y.shape}, rates {u.shape}")
    X = inventory_path(params, u)
    running = (-y * u - params.eps * u**2 - params.phi * X[:-1] ** 2).sum() * params.grid.dt
    J = float(running - params.rho * X[-1] ** 2)
    if not math.isfinite(J):
        raise NonFiniteValue("objective is not finite")
    return J


def assemble_lq(params: ObjectiveParams, mat: ImpactMatrix, alpha=None) -> QuadraticForm:
    """Exact quadratic form of ``direct_objective``.

    ``alpha`` is an optional deterministic signal profile on the left
    nodes; it adds ``dt * alpha`` to the linear term.
    """
    grid = params.grid
    if mat.grid != grid:
        raise GridMismatch("impact matrix and objective use different grids")
    n, dt, T = grid.n_steps, grid.dt, grid.horizon
    eps, phi, rho, x = params.eps, params.phi, params.rho, params.x

    # rows carry t, columns s; strictly-lower entries plus half-weighted diagonal
    # reproduce (sum_j u_j)^2 = u^T (2L + I) u exactly
    lower = np.tril(np.ones((n, n)), -1) + 0.5 * np.eye(n)
    # T - t_{i+1}: number of running-penalty nodes after the rate u_i has acted
    tail = T - grid.nodes[1:]

    A = mat.lam * dt * dt * mat.entries
    A = A + eps * dt * np.eye(n)
    A = A + 2.0 * rho * dt * dt * lower
    A = A + 2.0 * phi * dt * dt * tail[:, None] * lower

    b = 2.0 * dt * x * (phi * tail + rho)
    if alpha is not None:
        b = b + dt * np.asarray(alpha, dtype=float)
    c = -phi * x * x * T - rho * x * x
    return QuadraticForm(A, b, float(c))
