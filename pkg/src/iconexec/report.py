"""Error metrics, cross-family error tables and parameter heatmaps.

CSV schemas
-----------
error table (``table_to_csv``)::

    test_set,model,mean,std,count

heatmap (``heatmap_to_csv``)::

    target,family,lambda_lo,lambda_hi,shape_name,shape_lo,shape_hi,mean,std,count

Numbers are written with :func:`fmt`; the SVG rendering prints exactly the
same strings in its cells.
"""

from __future__ import annotations

import html
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .datagen import LAMBDA_RANGE, DEFAULT_RANGES, make_spec, sample_gp_rate
from .errors import ConfigError, GridMismatch, ZeroReference
from .grid import Family, KernelSpec, TimeGrid, apply_impact, build_impact_matrix


def fmt(v: float) -> str:
    return f"{v:.6g}"


def rel_l2(pred, truth) -> float:
    """``||pred - truth|| / ||truth||`` over the whole trajectory."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise GridMismatch(f"shapes differ: {pred.shape} vs {truth.shape}")
    ref = np.linalg.norm(truth)
    if ref == 0:
        raise ZeroReference("reference trajectory is identically zero")
    return float(np.linalg.norm(pred - truth) / ref)


@dataclass(frozen=True)
class ErrorReport:
    mean: float
    std: float
    count: int
    keys: tuple = ()

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError("an error report needs at least one sample")
        if not self.std >= 0:
            raise ConfigError("standard deviation must be non-negative")

    @classmethod
    def from_values(cls, values, keys=()):
        v = np.asarray(values, dtype=float).ravel()
        return cls(float(v.mean()), float(v.std()), int(v.size), tuple(keys))

    def __str__(self):
        return f"{self.mean:.4f} ± {self.std:.4f}"


# -- prompt sampling for ICON evaluation ------------------------------------

@dataclass
class PromptCase:
    theta: KernelSpec
    ex_us: np.ndarray
    ex_ys: np.ndarray
    question_u: np.ndarray
    truth: np.ndarray


def sample_case(theta: KernelSpec, grid: TimeGrid, n_examples: int, rng, question_u=None) -> PromptCase:
    """Fresh examples for ``theta`` plus a question (a GP rate unless given)."""
    mat = build_impact_matrix(theta, grid)
    us = np.stack([sample_gp_rate(grid, rng) for _ in range(n_examples)])
    ys = np.stack([apply_impact(mat, u) for u in us])
    q = sample_gp_rate(grid, rng) if question_u is None else np.asarray(question_u, dtype=float)
    return PromptCase(theta, us, ys, q, apply_impact(mat, q))


def icon_errors(model, cases: Sequence[PromptCase], grid: TimeGrid, example_stride: int,
                chunk: int = 32) -> np.ndarray:
    """Relative l2 error of the model's impact prediction for each case."""
    from .icon import forward, make_prompt

    out = []
    for i in range(0, len(cases), chunk):
        part = cases[i:i + chunk]
        prompts = [make_prompt(grid, c.ex_us, c.ex_ys, c.question_u, example_stride) for c in part]
        pred = np.atleast_2d(forward(model, prompts))
        out.extend(rel_l2(p, c.truth) for p, c in zip(pred, part))
    return np.array(out)


def test_cases(family: Family, n: int, grid: TimeGrid, n_examples: int, seed: int) -> list[PromptCase]:
    """``n`` cases with theta drawn from the family's training ranges."""
    from .datagen import ThetaSampler

    fam = Family.parse(family)
    cases = []
    for k in range(n):
        rng = np.random.default_rng([int(seed), 31, list(Family).index(fam), k])
        cases.append(sample_case(ThetaSampler(fam).sample(rng), grid, n_examples, rng))
    return cases


# -- error table -------------------------------------------------------------

def error_table(models: dict, test_families: Sequence, grid: TimeGrid, n_samples: int, seed: int,
                n_examples: int = 5, example_stride: int = 4) -> dict:
    """``{(test_family, model_name): ErrorReport}`` over shared test prompts."""
    table = {}
    for fam in test_families:
        fam = Family.parse(fam)
        cases = test_cases(fam, n_samples, grid, n_examples, seed)
        for name, model in models.items():
            errs = icon_errors(model, cases, grid, example_stride)
            table[(fam.short, name)] = ErrorReport.from_values(errs, (fam.short, name))
    return table


def table_to_csv(table: dict) -> str:
    buf = io.StringIO()
    buf.write("test_set,model,mean,std,count\n")
    for (test, model), r in table.items():
        buf.write(f"{test},{model},{fmt(r.mean)},{fmt(r.std)},{r.count}\n")
    return buf.getvalue()


# -- heatmaps ----------------------------------------------------------------

HEATMAP_TARGETS = ("icon-id", "icon-ood-ustar", "ocnet-u", "ocnet-X", "ocnet-Y")


@dataclass(frozen=True)
class HeatmapSpec:
    family: Family
    lam_range: tuple = LAMBDA_RANGE
    shape_range: tuple | None = None
    n_bins: int = 6
    samples_per_box: int = 16
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "family", Family.parse(self.family))
        if self.shape_range is None:
            object.__setattr__(self, "shape_range", DEFAULT_RANGES[self.family])
        if self.n_bins < 1 or self.samples_per_box < 1:
            raise ConfigError("bins and samples per box must be positive")
        for lo, hi in (self.lam_range, self.shape_range):
            if not hi > lo:
                raise ConfigError("heatmap ranges need lo < hi")

    @property
    def shape_name(self) -> str:
        return "beta" if self.family is Family.EXPONENTIAL else "gamma"

    def edges(self):
        """Bin edges; the outer edges are exactly the configured range."""
        lam = np.linspace(*self.lam_range, self.n_bins + 1)
        shp = np.linspace(*self.shape_range, self.n_bins + 1)
        lam[0], lam[-1] = self.lam_range
        shp[0], shp[-1] = self.shape_range
        return lam, shp

    def box_rng(self, i: int, j: int) -> np.random.Generator:
        """Generator for box (lambda bin i, shape bin j); independent of other boxes."""
        return np.random.default_rng([int(self.seed), 577, i, j])

    def box_thetas(self, i: int, j: int) -> list[KernelSpec]:
        lam, shp = self.edges()
        rng = self.box_rng(i, j)
        out = []
        for _ in range(self.samples_per_box):
            a = rng.uniform(lam[i], lam[i + 1])
            b = rng.uniform(shp[j], shp[j + 1])
            out.append(make_spec(self.family, a, b))
        return out


@dataclass
class Heatmap:
    spec: HeatmapSpec
    target: str
    cells: list = field(default_factory=list)  # cells[i][j] is an ErrorReport

    def means(self) -> np.ndarray:
        return np.array([[c.mean for c in row] for row in self.cells])


BoxEvaluator = Callable[[list, np.random.Generator], np.ndarray]


def heatmap(spec: HeatmapSpec, target: str, evaluate_box: BoxEvaluator) -> Heatmap:
    """Evaluate every box.

    ``evaluate_box(thetas, rng)`` returns one error per theta; ``rng`` is a
    box-specific generator for any further randomness.
    """
    if target not in HEATMAP_TARGETS:
        raise ConfigError(f"unknown heatmap target {target!r}")
    hm = Heatmap(spec, target)
    for i in range(spec.n_bins):
        row = []
        for j in range(spec.n_bins):
            thetas = spec.box_thetas(i, j)
            errs = evaluate_box(thetas, np.random.default_rng([int(spec.seed), 578, i, j]))
            row.append(ErrorReport.from_values(errs, (i, j)))
        hm.cells.append(row)
    return hm


def icon_box_evaluator(model, grid: TimeGrid, n_examples: int = 5, example_stride: int = 4,
                       question: str = "gp", x: float = 0.1, params=None) -> BoxEvaluator:
    """Box evaluator for ICON heatmaps.

    ``question="gp"`` asks about a fresh GP rate; ``"ustar"`` asks about the
    theta's optimal execution rate for initial inventory ``x``.
    """
    from .gt_solver import solve_qp
    from .objective import ObjectiveParams

    if question not in ("gp", "ustar"):
        raise ConfigError("question must be 'gp' or 'ustar'")
    base = params if params is not None else ObjectiveParams(grid=grid)

    def evaluate(thetas, rng):
        cases = []
        for th in thetas:
            q = None
            if question == "ustar":
                q = solve_qp(base.with_x(x), build_impact_matrix(th, grid)).u_star
            cases.append(sample_case(th, grid, n_examples, rng, q))
        return icon_errors(model, cases, grid, example_stride)

    return evaluate


def heatmap_to_csv(hm: Heatmap) -> str:
    lam, shp = hm.spec.edges()
    buf = io.StringIO()
    buf.write("target,family,lambda_lo,lambda_hi,shape_name,shape_lo,shape_hi,mean,std,count\n")
    for i, row in enumerate(hm.cells):
        for j, c in enumerate(row):
            buf.write(f"{hm.target},{hm.spec.family.short},{fmt(lam[i])},{fmt(lam[i + 1])},"
                      f"{hm.spec.shape_name},{fmt(shp[j])},{fmt(shp[j + 1])},"
                      f"{fmt(c.mean)},{fmt(c.std)},{c.count}\n")
    return buf.getvalue()


def _color(v: float, lo: float, hi: float) -> str:
    # monotone white -> dark blue ramp
    s = 0.0 if hi <= lo else (v - lo) / (hi - lo)
    s = min(1.0, max(0.0, s))
    r = round(255 - s * (255 - 8))
    g = round(255 - s * (255 - 48))
    b = round(255 - s * (255 - 107))
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_to_svg(hm: Heatmap, cell: int = 80) -> str:
    """Self-contained SVG; lambda runs left to right, the shape parameter bottom to top."""
    means = hm.means()
    lo, hi = float(means.min()), float(means.max())
    lam, shp = hm.spec.edges()
    n = hm.spec.n_bins
    left, top = 70, 40
    w, h = left + n * cell + 20, top + n * cell + 50
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
             f'font-family="sans-serif" font-size="11">',
             f'<text x="{left}" y="20" font-size="13">{html.escape(hm.target)} '
             f'({hm.spec.family.short}), mean relative l2 error</text>']
    for i in range(n):
        for j in range(n):
            v = means[i, j]
            x, y = left + i * cell, top + (n - 1 - j) * cell
            fill = _color(v, lo, hi)
            ink = "#000000" if (hi <= lo or (v - lo) / (hi - lo) < 0.55) else "#ffffff"
            parts.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{fill}" '
                         f'stroke="#888888"/>')
            parts.append(f'<text x="{x + cell / 2}" y="{y + cell / 2 + 4}" text-anchor="middle" '
                         f'fill="{ink}" class="cell" data-i="{i}" data-j="{j}">{fmt(v)}</text>')
    for i in range(n + 1):
        parts.append(f'<text x="{left + i * cell}" y="{top + n * cell + 15}" '
                     f'text-anchor="middle">{fmt(lam[i])}</text>')
    for j in range(n + 1):
        parts.append(f'<text x="{left - 5}" y="{top + (n - j) * cell + 4}" '
                     f'text-anchor="end">{fmt(shp[j])}</text>')
    parts.append(f'<text x="{left + n * cell / 2}" y="{top + n * cell + 35}" '
                 f'text-anchor="middle">lambda</text>')
    parts.append(f'<text x="15" y="{top + n * cell / 2}" '
                 f'transform="rotate(-90 15 {top + n * cell / 2})">{hm.spec.shape_name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
