"""Synthetic (rate, impact) trajectories for training and testing ICON."""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Iterator

import numpy as np

from .errors import FactorizationFailure, ParseError, SchemaError
from .grid import Family, KernelSpec, TimeGrid, apply_impact, build_impact_matrix

GP_STD = 0.05
GP_DECAY = 2.0
RATE_SHIFT = 0.1

LAMBDA_RANGE = (0.1, 0.5)
DEFAULT_RANGES = {
    Family.EXPONENTIAL: (0.462, 9.011),
    Family.POWER_LAW_NONSINGULAR: (0.3, 1.5),
    Family.POWER_LAW_SINGULAR: (0.35, 0.45),
}

FAMILY_INDEX = {Family.EXPONENTIAL: 0, Family.POWER_LAW_NONSINGULAR: 1,
                Family.POWER_LAW_SINGULAR: 2}


def make_spec(family: Family, lam: float, shape: float) -> KernelSpec:
    """Build a kernel from ``(lambda, beta or gamma)``."""
    family = Family.parse(family)
    if family is Family.EXPONENTIAL:
        return KernelSpec.exponential(lam, shape)
    if family is Family.POWER_LAW_NONSINGULAR:
        return KernelSpec.power_law(lam, shape)
    return KernelSpec.singular_power_law(lam, shape)


@dataclass(frozen=True)
class ThetaSampler:
    family: Family
    lam_range: tuple = LAMBDA_RANGE
    shape_range: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "family", Family.parse(self.family))
        if self.shape_range is None:
            object.__setattr__(self, "shape_range", DEFAULT_RANGES[self.family])

    def sample(self, rng: np.random.Generator) -> KernelSpec:
        lam = _uniform_open(rng, *self.lam_range)
        shape = _uniform_open(rng, *self.shape_range)
        return make_spec(self.family, lam, shape)


def _uniform_open(rng, lo, hi):
    while True:
        v = rng.uniform(lo, hi)
        if lo < v < hi:
            return float(v)


@lru_cache(maxsize=16)
def _gp_factor(horizon: float, n_steps: int, jitter: float = 1e-10) -> np.ndarray:
    t = TimeGrid(horizon, n_steps).left_nodes
    cov = GP_STD**2 * np.exp(-GP_DECAY * (t[:, None] - t[None, :]) ** 2)
    eye = np.eye(n_steps)
    for _ in range(8):
        try:
            L = np.linalg.cholesky(cov + jitter * eye)
            L.setflags(write=False)
            return L
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise FactorizationFailure(f"GP covariance not factorizable on a grid with N={n_steps}")


def gp_draw(grid: TimeGrid, rng: np.random.Generator) -> np.ndarray:
    """One unconstrained draw ``0.1 + GP`` on the left nodes."""
    L = _gp_factor(grid.horizon, grid.n_steps)
    return RATE_SHIFT + L @ rng.standard_normal(grid.n_steps)


def sample_gp_rate(grid: TimeGrid, seed, max_tries: int = 1000) -> np.ndarray:
    """Strictly positive selling rate ``0.1 + GP`` on the left nodes.

    ``seed`` may be an int, a sequence of ints, or a ``numpy`` Generator.
    Draws with a non-positive entry are rejected and redrawn, so the
    returned path follows the GP conditioned on positivity.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    for _ in range(max_tries):
        u = gp_draw(grid, rng)
        if u.min() > 0:
            return u
    raise FactorizationFailure("could not draw a strictly positive rate path")


@dataclass(eq=False)
class DatasetRecord:
    theta: KernelSpec
    us: np.ndarray  # (n_traj, N)
    ys: np.ndarray  # (n_traj, N)

    @property
    def n_traj(self) -> int:
        return self.us.shape[0]

    @property
    def grid_n(self) -> int:
        return self.us.shape[1]

    def __eq__(self, other):
        return (isinstance(other, DatasetRecord) and self.theta == other.theta
                and np.array_equal(self.us, other.us) and np.array_equal(self.ys, other.ys))


def family_cycle(family) -> list[Family]:
    """Families a dataset name covers; ``all3`` cycles through all three."""
    if str(family) == "all3":
        return [Family.EXPONENTIAL, Family.POWER_LAW_NONSINGULAR, Family.POWER_LAW_SINGULAR]
    return [Family.parse(family)]


def make_record(theta: KernelSpec, grid: TimeGrid, n_traj: int, rng) -> DatasetRecord:
    mat = build_impact_matrix(theta, grid)
    us = np.stack([sample_gp_rate(grid, rng) for _ in range(n_traj)])
    ys = np.stack([apply_impact(mat, u) for u in us])
    return DatasetRecord(theta, us, ys)


def record_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def generate_dataset(family, n_theta: int, traj_per_theta: int = 10,
                     grid: TimeGrid | None = None, seed: int = 0,
                     samplers: dict | None = None) -> Iterator[DatasetRecord]:
    """Yield ``n_theta`` records; record ``k`` depends only on ``(seed, k)``."""
    if n_theta < 1:
        raise ValueError("n_theta must be >= 1")
    grid = grid or TimeGrid()
    fams = family_cycle(family)
    samplers = samplers or {}
    for k in range(n_theta):
        fam = fams[k % len(fams)]
        rng = record_rng(seed, k)
        theta = samplers.get(fam, ThetaSampler(fam)).sample(rng)
        yield make_record(theta, grid, traj_per_theta, rng)


# -- serialization ----------------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _fmt_list(a) -> str:
    return "[" + ",".join(_fmt(v) for v in a) + "]"


def _fmt_opt(v) -> str:
    return "null" if v is None else _fmt(v)


def record_to_line(rec: DatasetRecord) -> str:
    th = rec.theta
    theta = (f'{{"family": "{th.family.value}", "lambda": {_fmt(th.lam)}, '
             f'"beta": {_fmt_opt(th.beta)}, "gamma": {_fmt_opt(th.gamma)}, '
             f'"ell": {_fmt_opt(th.ell)}}}')
    traj = ", ".join(f'{{"u": {_fmt_list(u)}, "y": {_fmt_list(y)}}}'
                     for u, y in zip(rec.us, rec.ys))
    return f'{{"theta": {theta}, "grid_n": {rec.grid_n}, "traj": [{traj}]}}'


def record_from_obj(obj, line=None) -> DatasetRecord:
    try:
        if not isinstance(obj, dict):
            raise SchemaError("record must be a JSON object")
        for key in ("theta", "grid_n", "traj"):
            if key not in obj:
                raise SchemaError(f"missing field {key!r}")
        theta = KernelSpec.from_dict(obj["theta"])
        n = obj["grid_n"]
        if not isinstance(n, int) or n < 2:
            raise SchemaError(f"bad grid_n {n!r}")
        traj = obj["traj"]
        if not isinstance(traj, list) or not traj:
            raise SchemaError("traj must be a non-empty list")
        us, ys = [], []
        for t in traj:
            if not isinstance(t, dict) or "u" not in t or "y" not in t:
                raise SchemaError("each trajectory needs 'u' and 'y'")
            if len(t["u"]) != n or len(t["y"]) != n:
                raise SchemaError(f"trajectory length does not match grid_n = {n}")
            us.append(t["u"])
            ys.append(t["y"])
        return DatasetRecord(theta, np.array(us, dtype=float), np.array(ys, dtype=float))
    except SchemaError as exc:
        if line is not None:
            raise SchemaError(f"line {line}: {exc}") from None
        raise
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"line {line}: {exc}" if line is not None else str(exc)) from None


def atomic_write_text(path, text: str):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_dataset(path, records: Iterable[DatasetRecord]):
    atomic_write_text(path, "".join(record_to_line(r) + "\n" for r in records))


def iter_dataset(path) -> Iterator[DatasetRecord]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", line=lineno) from None
            yield record_from_obj(obj, line=lineno)


def read_dataset(path) -> list[DatasetRecord]:
    return list(iter_dataset(path))


@dataclass
class TrajectoryBank:
    """Dataset stacked into arrays for fast prompt sampling."""

    us: np.ndarray  # (R, n_traj, N)
    ys: np.ndarray
    thetas: list = field(default_factory=list)

    @classmethod
    def from_records(cls, records) -> "TrajectoryBank":
        records = list(records)
        if not records:
            raise ValueError("empty dataset")
        return cls(np.stack([r.us for r in records]), np.stack([r.ys for r in records]),
                   [r.theta for r in records])

    def __len__(self):
        return self.us.shape[0]
