"""Acceptance checks; each prints one PASS/FAIL line.

Checks on trained desk-scale models read the artifacts written by
``iconexec repro --scale desk``.  Set ``ICONEXEC_DESK_RUNS`` to two run
directories separated by ``:`` (default ``artifacts/desk_a:artifacts/desk_b``
under the repository root); the first is used for accuracy checks and both
for the reproducibility check.
"""

import csv
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from iconexec import pipeline
from iconexec.datagen import ThetaSampler, sample_gp_rate
from iconexec.grid import Family, ImpactMatrix, KernelSpec, TimeGrid, apply_impact, build_impact_matrix
from iconexec.gt_solver import prop1_solve, solve_qp
from iconexec.icon import IconConfig, IconModel, forward, make_prompt, surrogate_path
from iconexec.objective import ObjectiveParams, assemble_lq, direct_objective
from iconexec.ocnet import ControlProblem, PolicyNet, rollout_torch

ROOT = Path(__file__).resolve().parents[1]
RUNS = [Path(p) if os.path.isabs(p) else ROOT / p for p in
        os.environ.get("ICONEXEC_DESK_RUNS", "artifacts/desk_a:artifacts/desk_b").split(":")]


@pytest.fixture
def verdict(capsys):
    def emit(num, name, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {num:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
        assert ok, f"criterion {num} ({name}) failed: {detail}"
    return emit


def desk_run(k=0):
    d = RUNS[k]
    if not (d / "reports" / "acceptance.csv").exists():
        return None
    return d


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def zero_impact(grid):
    return ImpactMatrix(grid, 0.0, np.zeros((grid.n_steps + 1, grid.n_steps)))


def sampled(n_per_family, seed):
    rng = np.random.default_rng(seed)
    return [(fam, ThetaSampler(fam).sample(rng), float(rng.uniform(0.01, 0.2)))
            for fam in Family for _ in range(n_per_family)]


def test_01_lq_equivalence(verdict):
    t0 = time.perf_counter()
    g = TimeGrid()
    rng = np.random.default_rng(1)
    worst = 0.0
    for fam, th, x in sampled(1, 11):
        p = ObjectiveParams(x=x, phi=0.3, grid=g)
        mat = build_impact_matrix(th, g)
        q = assemble_lq(p, mat)
        for _ in range(100):
            u = rng.normal(0.1, 0.1, g.n_steps)
            j = direct_objective(p, mat, u)
            worst = max(worst, abs(q.value(u) - j) / (1 + abs(j)))
    dt = time.perf_counter() - t0
    verdict(1, "LQ form equals direct objective", worst <= 1e-10 and dt < 1.0,
            f"max |dJ|/(1+|J|) = {worst:.2e} (<= 1e-10), runtime {dt:.2f}s (< 1s)")


def test_02_analytic_control(verdict):
    ref = 0.1 * 10 / (10 + 0.5)
    qp = solve_qp(ObjectiveParams(x=0.1, grid=TimeGrid(1.0, 100)), zero_impact(TimeGrid(1.0, 100)))
    e_qp = float(np.max(np.abs(qp.u_star - ref)))
    gaps = []
    for n in (100, 200):
        g = TimeGrid(1.0, n)
        gaps.append(float(np.max(np.abs(prop1_solve(ObjectiveParams(x=0.1, grid=g), zero_impact(g)).u_star - ref))))
    ok = e_qp <= 1e-6 and gaps[0] <= 5e-3 and gaps[0] / gaps[1] >= 1.5
    verdict(2, "analytic constant control", ok,
            f"QP err {e_qp:.1e} (<= 1e-6), Prop1 err {gaps[0]:.2e} (<= 5e-3), "
            f"refinement ratio {gaps[0] / gaps[1]:.2f} (>= 1.5)")


def test_03_oracle_agreement(verdict):
    g = TimeGrid()
    rng = np.random.default_rng(3)
    worst, violations = 0.0, 0
    for fam, th, x in sampled(16, 33):
        p = ObjectiveParams(x=x, grid=g)
        mat = build_impact_matrix(th, g)
        qp, pr = solve_qp(p, mat), prop1_solve(p, mat)
        worst = max(worst, np.linalg.norm(pr.u_star - qp.u_star) / np.linalg.norm(qp.u_star))
        scale = 1e-2 * np.abs(qp.u_star).mean()
        for sol in (qp, pr):
            noise = rng.normal(scale=scale, size=(1000, g.n_steps))
            vals = [direct_objective(p, mat, sol.u_star + z) for z in noise]
            violations += int(np.sum(np.array(vals) > direct_objective(p, mat, sol.u_star)))
    verdict(3, "Prop1 vs QP oracle agreement", worst <= 5e-2 and violations == 0,
            f"max rel l2 {worst:.3e} (<= 5e-2) over 48 cases, certificate violations {violations}/96000")


def test_04_solution_shape(verdict):
    g = TimeGrid()
    pos = ushape = True
    worst, fails = 0.0, []
    for fam, th, x in sampled(16, 44):
        p = ObjectiveParams(x=x, phi=0.0, grid=g)
        u = solve_qp(p, build_impact_matrix(th, g))
        d = np.sign(np.diff(u.u_star))
        d = d[d != 0]
        k = int(np.argmin(u.u_star))
        pos &= bool(u.u_star.min() > 0)
        ushape &= bool(np.sum(d[1:] != d[:-1]) == 1 and 0 < k < g.n_steps - 1)
        r = abs(u.terminal_inventory) / (1.5 * x * p.eps / (p.eps + p.rho * g.horizon))
        worst = max(worst, r)
        if r > 1:
            fails.append(f"{fam.short}(lam={th.lam:.3f}, gamma={th.shape_param:.3f})")
    verdict(4, "positive U-shaped strategies with liquidation bound", pos and ushape and worst <= 1.0,
            f"positive={pos}, single interior minimum={ushape}, "
            f"max |X_N|/bound = {worst:.3f} (<= 1); {len(fails)}/48 over bound: {', '.join(fails) or 'none'}")


def test_05_impact_exactness(verdict):
    g = TimeGrid(1.0, 1000)
    y = apply_impact(build_impact_matrix(KernelSpec.exponential(0.2, 0.5), g), np.ones(1000), include_terminal=True)
    err = float(np.max(np.abs(y - 0.2 * (1 - np.exp(-0.5 * g.nodes)) / 0.5)))
    spec = KernelSpec.singular_power_law(0.3, 0.45)
    ys = []
    for n in (50, 100, 200):
        gn = TimeGrid(1.0, n)
        u = 0.1 + 0.05 * np.sin(3 * gn.left_nodes)
        ys.append(apply_impact(build_impact_matrix(spec, gn), u, include_terminal=True)[:: n // 50])
    order = math.log2(np.max(np.abs(ys[0] - ys[1])) / np.max(np.abs(ys[1] - ys[2])))
    verdict(5, "impact operator exactness", err <= 1e-10 and order >= 1.0,
            f"exponential constant-rate err {err:.1e} (<= 1e-10), singular refinement order {order:.2f} (>= 1)")


def _icon_setup():
    torch.manual_seed(0)
    m = IconModel(IconConfig()).double()
    torch.nn.init.normal_(m.head.weight, std=0.5)
    torch.nn.init.normal_(m.head.bias, std=0.1)
    g = TimeGrid()
    rng = np.random.default_rng(0)
    mat = build_impact_matrix(KernelSpec.power_law(0.3, 0.7), g)
    us = np.stack([sample_gp_rate(g, rng) for _ in range(5)])
    ys = np.stack([apply_impact(mat, u) for u in us])
    return m.eval(), g, us, ys, sample_gp_rate(g, rng)


def test_06_icon_invariants(verdict):
    t0 = time.perf_counter()
    m, g, us, ys, q = _icon_setup()
    base = forward(m, make_prompt(g, us, ys, q, 4))
    causal = True
    for k in (0, 30, 77):
        v = q.copy()
        v[k + 1:] = np.random.default_rng(k).uniform(0, 0.3, g.n_steps - k - 1)
        causal &= bool(np.array_equal(forward(m, make_prompt(g, us, ys, v, 4))[: k + 1], base[: k + 1]))
    perm = max(float(np.max(np.abs(forward(m, make_prompt(g, us[p], ys[p], q, 4)) - base)))
               for p in ([4, 3, 2, 1, 0], [2, 0, 4, 1, 3]))
    equiv2 = bool(np.array_equal(forward(m, make_prompt(g, us, 2 * ys, q, 4)), 2 * base))
    equiv = float(np.max(np.abs(forward(m, make_prompt(g, us, 0.37 * ys, q, 4)) - 0.37 * base)))
    dt = time.perf_counter() - t0
    tol = 1e-12 * np.abs(base).max()
    ok = causal and perm <= tol and equiv2 and equiv <= tol and dt < 60
    verdict(6, "ICON structural invariants", ok,
            f"non-anticipative bit-exact={causal}, permutation max diff {perm:.1e}, "
            f"lambda x2 bit-exact={equiv2}, lambda x0.37 max diff {equiv:.1e} (tol {tol:.1e}), {dt:.1f}s")


def test_07_icon_desk_accuracy(verdict):
    d = desk_run()
    if d is None:
        verdict(7, "ICON desk accuracy", False, f"desk run not found at {RUNS[0]}")
    table = {(r["test_set"], r["model"]): float(r["mean"]) for r in read_rows(d / "reports" / "table_icon.csv")}
    fams = pipeline.FAMILIES
    curve_steps = [int(read_rows(d / "icon" / f"{f}_curve.csv")[-1]["step"]) for f in fams]
    n_train = sum(1 for _ in open(d / "data" / "ode_train.jsonl"))
    counts = {int(r["count"]) for r in read_rows(d / "reports" / "table_icon.csv")}
    diag = {f: table[(f, f)] for f in fams}
    struct = all(table[(f, f)] < table[(g, f)] for f in fams for g in fams if g != f)
    ok = max(diag.values()) <= 0.05 and struct and min(curve_steps) >= 20000 and n_train == 2000 and counts == {100}
    verdict(7, "ICON desk accuracy", ok,
            "in-distribution " + ", ".join(f"{f}={v:.4f}" for f, v in diag.items())
            + f" (<= 0.05); in-dist < transfer for every model={struct}; steps {min(curve_steps)}, "
            f"train thetas {n_train}, prompts per cell {sorted(counts)}")


def test_08_gradient_checks(verdict):
    m, g, us, ys, q = _icon_setup()
    _, jac = surrogate_path(m, (us, ys), q, g, 4, with_grad=True)
    w = np.random.default_rng(3).normal(size=g.n_steps)
    h = 1e-4 * np.abs(q).max()
    worst_s = 0.0
    for j in np.random.default_rng(4).choice(g.n_steps, 10, replace=False):
        e = np.zeros(g.n_steps)
        e[j] = h
        fd = (w @ surrogate_path(m, (us, ys), q + e, g, 4) - w @ surrogate_path(m, (us, ys), q - e, g, 4)) / (2 * h)
        worst_s = max(worst_s, abs((w @ jac)[j] - fd) / max(abs(fd), 1e-3 * np.abs(w @ jac).max()))

    ths = [KernelSpec.exponential(0.3, 2.0), KernelSpec.singular_power_law(0.4, 0.4)]
    pr = ControlProblem.exact([ObjectiveParams(x=0.1, grid=g)] * 2, [build_impact_matrix(t, g) for t in ths])
    torch.manual_seed(0)
    pol = PolicyNet(2).double()
    pol.zero_grad()
    rollout_torch(pol, pr)[2].sum().backward()
    params = list(pol.parameters())
    rng = np.random.default_rng(5)
    worst_p = 0.0
    for _ in range(10):
        p = params[int(rng.integers(len(params)))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        hh = 1e-4 * max(1.0, abs(p.data[idx].item()))
        with torch.no_grad():
            old = p[idx].item()
            p[idx] = old + hh
            jp = rollout_torch(pol, pr)[2].sum().item()
            p[idx] = old - hh
            jm = rollout_torch(pol, pr)[2].sum().item()
            p[idx] = old
        fd = (jp - jm) / (2 * hh)
        worst_p = max(worst_p, abs(p.grad[idx].item() - fd) / max(abs(fd), 1e-6))
    verdict(8, "gradient checks", worst_s <= 1e-4 and worst_p <= 1e-4,
            f"surrogate input-gradient max rel err {worst_s:.1e}, policy parameter-gradient {worst_p:.1e} (<= 1e-4)")


def test_09_ocnet_desk(verdict):
    d = desk_run()
    if d is None:
        verdict(9, "OCnet desk accuracy", False, f"desk run not found at {RUNS[0]}")
    parts, ok = [], True
    for src, u_tol, j_tol in (("exact", 1e-2, 1e-3), ("surrogate", 0.1, 5e-2)):
        recs = [r for f in pipeline.FAMILIES for r in read_rows(d / "reports" / f"ocnet_{src}_{f}.csv")]
        eu = max(float(r["err_u"]) for r in recs)
        ej = max(float(r["err_objective"]) for r in recs)
        mono = True
        for f in pipeline.FAMILIES:
            best = [float(r["best_objective"]) for r in read_rows(d / "reports" / f"ocnet_{src}_{f}_curve.csv")]
            mono &= all(b2 >= b1 for b1, b2 in zip(best, best[1:]))
        ok &= eu <= u_tol and ej <= j_tol and mono and len(recs) == 48
        parts.append(f"{src}: max u err {eu:.2e} (<= {u_tol:g}), max J err {ej:.2e} (<= {j_tol:g}), "
                     f"best-so-far monotone={mono}, n={len(recs)}")
    verdict(9, "OCnet desk accuracy", ok, "; ".join(parts))


def test_10_reproducibility(verdict):
    a, b = desk_run(0), desk_run(1)
    if a is None or b is None:
        verdict(10, "byte-identical desk reports", False, f"need two desk runs at {RUNS[0]} and {RUNS[1]}")
    fa = {p.relative_to(a): p.read_bytes() for p in sorted(a.rglob("*.csv"))}
    fb = {p.relative_to(b): p.read_bytes() for p in sorted(b.rglob("*.csv"))}
    diff = sorted(str(k) for k in set(fa) | set(fb) if fa.get(k) != fb.get(k))
    verdict(10, "byte-identical desk reports", not diff and len(fa) > 0,
            f"{len(fa)} CSV files compared, {len(diff)} differ{': ' + ', '.join(diff[:5]) if diff else ''}")
