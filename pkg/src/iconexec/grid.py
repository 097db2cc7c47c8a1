"""Time grids, propagator kernels and the discretized impact operator.

Strategies are piecewise constant on the cells ``[t_j, t_{j+1})`` and the
impact ``Y`` is reported at grid nodes.  A trade executed during
``[t_i, t_{i+1})`` first shows up in ``Y`` at ``t_{i+1}``, so ``Y_0 = 0``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DomainError, GridMismatch, SchemaError


@dataclass(frozen=True)
class TimeGrid:
    horizon: float = 1.0
    n_steps: int = 100

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 2:
            raise DomainError(f"n_steps must be an integer >= 2, got {self.n_steps}")
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise DomainError(f"horizon must be positive, got {self.horizon}")
        object.__setattr__(self, "n_steps", int(self.n_steps))
        object.__setattr__(self, "horizon", float(self.horizon))

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        """All ``N + 1`` nodes ``t_0 .. t_N``."""
        return np.arange(self.n_steps + 1) * self.dt

    @property
    def left_nodes(self) -> np.ndarray:
        """Left cell endpoints ``t_0 .. t_{N-1}`` where rates and impact live."""
        return np.arange(self.n_steps) * self.dt


class Family(str, Enum):
    EXPONENTIAL = "Exponential"
    POWER_LAW_NONSINGULAR = "PowerLawNonSingular"
    POWER_LAW_SINGULAR = "PowerLawSingular"

    @property
    def short(self) -> str:
        return _SHORT_NAMES[self]

    @classmethod
    def parse(cls, name) -> "Family":
        if isinstance(name, cls):
            return name
        key = str(name)
        for fam in cls:
            if key in (fam.value, fam.short, fam.name):
                return fam
        raise DomainError(f"unknown kernel family {name!r}")


_SHORT_NAMES = {
    Family.EXPONENTIAL: "ode",
    Family.POWER_LAW_NONSINGULAR: "ker",
    Family.POWER_LAW_SINGULAR: "sker",
}

_SPEC_FIELDS = ("family", "lambda", "beta", "gamma", "ell")


@dataclass(frozen=True)
class KernelSpec:
    """Propagator family and its hyperparameters.

    ``lam`` is the push factor.  ``beta`` is used by the exponential family
    only, ``gamma`` and ``ell`` by the power-law families.
    """

    family: Family
    lam: float
    beta: float | None = None
    gamma: float | None = None
    ell: float | None = None

    def __post_init__(self):
        fam = Family.parse(self.family)
        object.__setattr__(self, "family", fam)
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise DomainError(f"lambda must be > 0, got {self.lam}")
        if fam is Family.EXPONENTIAL:
            if self.beta is None or not self.beta > 0:
                raise DomainError(f"Exponential kernel requires beta > 0, got {self.beta}")
            if self.gamma is not None or self.ell is not None:
                raise DomainError("Exponential kernel takes no gamma/ell")
        else:
            if self.beta is not None:
                raise DomainError(f"{fam.value} kernel takes no beta")
            ell_default = 1.0 if fam is Family.POWER_LAW_NONSINGULAR else 0.0
            ell = ell_default if self.ell is None else float(self.ell)
            if ell != ell_default:
                raise DomainError(f"{fam.value} kernel requires ell = {ell_default}, got {ell}")
            object.__setattr__(self, "ell", ell)
            g = self.gamma
            if g is None or not math.isfinite(g):
                raise DomainError(f"{fam.value} kernel requires gamma")
            if fam is Family.POWER_LAW_NONSINGULAR and not g > 0:
                raise DomainError(f"PowerLawNonSingular requires gamma > 0, got {g}")
            if fam is Family.POWER_LAW_SINGULAR and not 0 < g < 0.5:
                raise DomainError(
                    f"PowerLawSingular requires gamma in the open interval (0, 0.5), got {g}")

    @classmethod
    def exponential(cls, lam, beta):
        return cls(Family.EXPONENTIAL, lam, beta=beta)

    @classmethod
    def power_law(cls, lam, gamma):
        return cls(Family.POWER_LAW_NONSINGULAR, lam, gamma=gamma, ell=1.0)

    @classmethod
    def singular_power_law(cls, lam, gamma):
        return cls(Family.POWER_LAW_SINGULAR, lam, gamma=gamma, ell=0.0)

    @property
    def shape_param(self) -> float:
        """The decay hyperparameter: beta or gamma."""
        return self.beta if self.family is Family.EXPONENTIAL else self.gamma

    def with_lambda(self, lam) -> "KernelSpec":
        return KernelSpec(self.family, lam, self.beta, self.gamma, self.ell)

    def to_dict(self) -> dict:
        return {"family": self.family.value, "lambda": self.lam, "beta": self.beta,
                "gamma": self.gamma, "ell": self.ell}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        if not isinstance(d, dict):
            raise SchemaError("kernel spec must be a JSON object")
        unknown = set(d) - set(_SPEC_FIELDS)
        if unknown:
            raise SchemaError(f"unknown kernel spec fields: {sorted(unknown)}")
        if "family" not in d or "lambda" not in d:
            raise SchemaError("kernel spec needs 'family' and 'lambda'")
        return cls(d["family"], d["lambda"], d.get("beta"), d.get("gamma"), d.get("ell"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "KernelSpec":
        return cls.from_dict(json.loads(text))


def kernel_value(spec: KernelSpec, t: float) -> float:
    """G(t), without the push factor."""
    if t < 0:
        raise DomainError(f"kernel evaluated at negative time {t}")
    if spec.family is Family.EXPONENTIAL:
        return math.exp(-spec.beta * t)
    if spec.ell + t == 0:
        raise DomainError("singular power-law kernel is infinite at t = 0")
    return (spec.ell + t) ** (-spec.gamma)


def _lag_integral(spec: KernelSpec, a, b):
    # int_a^b G(r) dr for lags 0 <= a <= b, vectorized
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if spec.family is Family.EXPONENTIAL:
        beta = spec.beta
        return np.exp(-beta * a) * -np.expm1(-beta * (b - a)) / beta
    g, ell = spec.gamma, spec.ell
    if g == 1.0:
        return np.log1p((b - a) / (ell + a)) if ell > 0 else np.log(b / a)
    p = 1.0 - g
    return ((ell + b) ** p - (ell + a) ** p) / p


def kernel_cell_integral(spec: KernelSpec, t_i: float, s_lo: float, s_hi: float) -> float:
    """Integral of ``G(t_i - s)`` over ``s`` in ``[s_lo, s_hi]``.

    The integrand carries the causal indicator ``s <= t_i``, so a cell
    reaching past ``t_i`` only contributes its part before ``t_i``.
    """
    if not s_lo <= s_hi:
        raise DomainError(f"inverted cell bounds [{s_lo}, {s_hi}]")
    if s_lo < 0:
        raise DomainError(f"cell starts before time 0: {s_lo}")
    s_hi = min(s_hi, t_i)
    if s_hi <= s_lo:
        return 0.0
    return float(_lag_integral(spec, t_i - s_hi, t_i - s_lo))


@dataclass(frozen=True, eq=False)
class ImpactMatrix:
    """Cell-averaged kernel on a grid.

    ``full`` has shape ``(N + 1, N)``: row ``i`` gives the weights of the
    rates ``u_0 .. u_{N-1}`` in ``Y(t_i)``, for ``i = 0 .. N``.  Only
    ``j < i`` entries are nonzero.
    """

    grid: TimeGrid
    lam: float
    full: np.ndarray = field(repr=False)

    @property
    def entries(self) -> np.ndarray:
        """Square ``N x N`` part for the nodes ``t_0 .. t_{N-1}``."""
        return self.full[:-1]

    @property
    def operator(self) -> np.ndarray:
        """``lam * dt * entries``: maps ``u`` to ``Y`` at the left nodes."""
        return self.lam * self.grid.dt * self.entries


def build_impact_matrix(spec: KernelSpec, grid: TimeGrid) -> ImpactMatrix:
    n, dt = grid.n_steps, grid.dt
    k = np.arange(1, n + 1)
    # weight of cell j in Y(t_i) depends on the lag k = i - j only
    cell = _lag_integral(spec, (k - 1) * dt, k * dt) / dt
    lag = np.arange(n + 1)[:, None] - np.arange(n)[None, :]
    full = np.where(lag >= 1, cell[np.clip(lag - 1, 0, n - 1)], 0.0)
    full.setflags(write=False)
    return ImpactMatrix(grid, float(spec.lam), full)


def apply_impact(mat: ImpactMatrix, u, include_terminal: bool = False) -> np.ndarray:
    """Impact path ``Y`` at ``t_0 .. t_{N-1}`` (or ``t_N`` too)."""
    u = np.asarray(u, dtype=float)
    if u.shape != (mat.grid.n_steps,):
        raise GridMismatch(f"expected {mat.grid.n_steps} rates, got shape {u.shape}")
    w = mat.full if include_terminal else mat.entries
    return mat.lam * mat.grid.dt * (w @ u)
