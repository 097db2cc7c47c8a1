"""End-to-end reproduction stages shared by the command line and the demos.

Each stage is a pure function of its inputs and seed; outputs are written
atomically and recorded in the directory manifest.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import report
from .datagen import TrajectoryBank, ThetaSampler, atomic_write_text, generate_dataset, read_dataset, write_dataset
from .errors import ConfigError
from .grid import Family, KernelSpec, TimeGrid, build_impact_matrix
from .gt_solver import prop1_solve, solve_qp
from .icon import IconConfig, IconSurrogate, IconTrainConfig, load_icon, save_icon, train_icon
from .objective import ObjectiveParams
from .ocnet import (
    ControlProblem,
    OcnetTrainConfig,
    evaluate_policy,
    save_policy,
    train_ocnet,
)

log = logging.getLogger(__name__)

FAMILIES = ("ode", "ker", "sker")
MODEL_NAMES = ("ode", "ker", "sker", "all3")
X_RANGE = (0.01, 0.2)


@dataclass(frozen=True)
class Scale:
    name: str
    grid_n: int = 100
    n_theta_train: int = 2000
    n_theta_test: int = 100
    traj: int = 10
    icon: IconConfig = IconConfig()
    icon_train: IconTrainConfig = IconTrainConfig()
    table_samples: int = 100
    n_examples: int = 5
    ocnet_instances: int = 16
    ocnet_iterations: int = 10_000
    surrogate_iterations: int = 10_000
    heat_bins: int = 6
    heat_samples: int = 16
    ocnet_heat_samples: int = 1
    ocnet_heat_iterations: int = 2000
    gt_cases: int = 16

    def to_dict(self):
        d = asdict(self)
        d["icon"] = self.icon.to_dict()
        d["icon_train"] = self.icon_train.to_dict()
        return d


SCALES = {
    "desk": Scale("desk"),
    "smoke": Scale(
        "smoke", grid_n=40, n_theta_train=60, n_theta_test=12, traj=10,
        icon=IconConfig(n_layers=1, d_model=16, n_heads=2),
        icon_train=IconTrainConfig(steps=40, eval_every=20, n_eval_prompts=8),
        table_samples=6, ocnet_instances=3, ocnet_iterations=60, surrogate_iterations=30,
        heat_bins=2, heat_samples=2, ocnet_heat_samples=1, ocnet_heat_iterations=20, gt_cases=3),
}


# -- files and manifests -----------------------------------------------------

def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def update_manifest(directory, name: str, config: dict, seeds: dict, files):
    """Record how the files of one run were produced in ``directory/manifest.json``."""
    directory = os.fspath(directory)
    path = os.path.join(directory, "manifest.json")
    manifest = {}
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    manifest[name] = {
        "config": config,
        "seeds": seeds,
        "files": {os.path.relpath(f, directory): sha256(f) for f in sorted(map(os.fspath, files))},
    }
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def write_csv(path, header, rows):
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(report.fmt(v) if isinstance(v, (float, np.floating)) else str(v) for v in r))
    atomic_write_text(path, "\n".join(lines) + "\n")


def _in_pool(fn, jobs, threads: int):
    """Run ``fn(*job)`` for each job; results in job order whatever ``threads`` is."""
    if threads <= 1 or len(jobs) <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads, initializer=torch.set_num_threads,
                             initargs=(1,)) as pool:
        return list(pool.map(fn, *zip(*jobs)))


# -- stages ------------------------------------------------------------------

def stage_data(out, scale: Scale, seed: int):
    """Training and test datasets for every model and family."""
    g = TimeGrid(1.0, scale.grid_n)
    os.makedirs(out, exist_ok=True)
    files = []
    for k, name in enumerate(MODEL_NAMES):
        for split, n, off in (("train", scale.n_theta_train, 0), ("test", scale.n_theta_test, 100)):
            path = os.path.join(out, f"{name}_{split}.jsonl")
            write_dataset(path, generate_dataset(name, n, scale.traj, g, seed=seed * 1000 + off + k))
            files.append(path)
    update_manifest(out, "data", {"scale": scale.to_dict()}, {"seed": seed}, files)
    return files


def _train_one(name, data_dir, out, scale_dict, seed):
    torch.set_num_threads(1)
    scale = scale_from_dict(scale_dict)
    g = TimeGrid(1.0, scale.grid_n)
    bank = TrajectoryBank.from_records(read_dataset(os.path.join(data_dir, f"{name}_train.jsonl")))
    test = TrajectoryBank.from_records(read_dataset(os.path.join(data_dir, f"{name}_test.jsonl")))
    model, hist = train_icon(bank, g, scale.icon, scale.icon_train, seed=seed, test_bank=test)
    ckpt = os.path.join(out, f"{name}.ckpt")
    save_icon(ckpt, model, {"train": scale.icon_train.to_dict(), "data": f"{name}_train.jsonl",
                            "seed": seed, "grid_n": scale.grid_n})
    curve = os.path.join(out, f"{name}_curve.csv")
    write_csv(curve, ["step", "train_loss", "train_rel_l2", "test_rel_l2"], hist.rows())
    return [ckpt, curve]


def stage_icon(data_dir, out, scale: Scale, seed: int, threads: int = 1):
    os.makedirs(out, exist_ok=True)
    jobs = [(name, data_dir, out, scale.to_dict(), seed + k) for k, name in enumerate(MODEL_NAMES)]
    files = [f for fs in _in_pool(_train_one, jobs, threads) for f in fs]
    update_manifest(out, "icon", {"scale": scale.to_dict()}, {"seed": seed}, files)
    return files


def load_models(icon_dir, names=MODEL_NAMES, dtype=torch.float32):
    return {n: load_icon(os.path.join(icon_dir, f"{n}.ckpt"), dtype)[0] for n in names}


def stage_table(icon_dir, out, scale: Scale, seed: int):
    g = TimeGrid(1.0, scale.grid_n)
    models = load_models(icon_dir)
    table = report.error_table(models, FAMILIES, g, scale.table_samples, seed, scale.n_examples,
                               scale.icon_train.example_stride)
    path = os.path.join(out, "table_icon.csv")
    atomic_write_text(path, report.table_to_csv(table))
    return table, [path]


def stage_icon_heatmaps(icon_dir, out, scale: Scale, seed: int):
    g = TimeGrid(1.0, scale.grid_n)
    models = load_models(icon_dir, FAMILIES)
    files, maps = [], {}
    for k, fam in enumerate(FAMILIES):
        spec = report.HeatmapSpec(fam, n_bins=scale.heat_bins, samples_per_box=scale.heat_samples,
                                  seed=seed + k)
        for target, question in (("icon-id", "gp"), ("icon-ood-ustar", "ustar")):
            ev = report.icon_box_evaluator(models[fam], g, scale.n_examples,
                                           scale.icon_train.example_stride, question)
            hm = report.heatmap(spec, target, ev)
            maps[(target, fam)] = hm
            files += write_heatmap(os.path.join(out, f"heatmap_{target}_{fam}"), hm)
    return maps, files


def write_heatmap(prefix, hm):
    atomic_write_text(prefix + ".csv", report.heatmap_to_csv(hm))
    atomic_write_text(prefix + ".svg", report.heatmap_to_svg(hm))
    return [prefix + ".csv", prefix + ".svg"]


# -- ground-truth checks -----------------------------------------------------

def sample_instances(family, n: int, seed: int):
    """``n`` pairs ``(theta, x)`` with x uniform on [0.01, 0.2]."""
    fam = Family.parse(family)
    rng = np.random.default_rng([int(seed), 4099, list(Family).index(fam)])
    sampler = ThetaSampler(fam)
    out = []
    for _ in range(n):
        th = sampler.sample(rng)
        out.append((th, float(rng.uniform(*X_RANGE))))
    return out


def gt_checks(scale: Scale, seed: int):
    """Oracle agreement and solution-shape statistics per family."""
    g = TimeGrid(1.0, scale.grid_n)
    rows = []
    for fam in FAMILIES:
        for k, (th, x) in enumerate(sample_instances(fam, scale.gt_cases, seed + 17)):
            p = ObjectiveParams(x=x, grid=g)
            mat = build_impact_matrix(th, g)
            qp = solve_qp(p, mat)
            pr = prop1_solve(p, mat)
            u = qp.u_star
            d = np.sign(np.diff(u))
            d = d[d != 0]
            sign_changes = int(np.sum(d[1:] != d[:-1]))
            bound = 1.5 * x * p.eps / (p.eps + p.rho * g.horizon)
            rows.append({
                "family": fam, "index": k, "lambda": th.lam, "shape": th.shape_param, "x": x,
                "prop1_rel_l2": report.rel_l2(pr.u_star, u),
                "min_rate": float(u.min()), "sign_changes": sign_changes,
                "interior_min": bool(0 < int(np.argmin(u)) < len(u) - 1),
                "terminal_inventory": qp.terminal_inventory, "liquidation_bound": bound,
            })
    return rows


GT_COLUMNS = ["family", "index", "lambda", "shape", "x", "prop1_rel_l2", "min_rate", "sign_changes",
              "interior_min", "terminal_inventory", "liquidation_bound"]


# -- OCnet -------------------------------------------------------------------

@dataclass
class OcnetResult:
    family: str
    source: str
    instances: list
    errors: list
    history: object = None
    files: list = field(default_factory=list)


def context_for(theta: KernelSpec, grid: TimeGrid, n_examples: int, seed):
    """Fresh in-context examples for ``theta``."""
    case = report.sample_case(theta, grid, n_examples, np.random.default_rng(seed))
    return case.ex_us, case.ex_ys


def run_ocnet(family, instances, grid: TimeGrid, iterations: int, seed: int, model=None,
              n_examples: int = 5, example_stride: int = 4, eval_every: int = 500):
    """Train one policy per ``(theta, x)``; exact source when ``model`` is None."""
    params = [ObjectiveParams(x=x, grid=grid) for _, x in instances]
    mats = [build_impact_matrix(th, grid) for th, _ in instances]
    gts = [solve_qp(p, m) for p, m in zip(params, mats)]
    if model is None:
        problem = ControlProblem.exact(params, mats)
        source = "exact"
    else:
        ctxs = [context_for(th, grid, n_examples, [seed, 61, k]) for k, (th, _) in enumerate(instances)]
        problem = ControlProblem.surrogate(params, mats, IconSurrogate(model, ctxs, grid, example_stride))
        source = "surrogate"
    cfg = OcnetTrainConfig(iterations=iterations, eval_every=min(eval_every, iterations))
    policy, hist = train_ocnet(problem, cfg, seed=seed, gts=gts)
    return policy, OcnetResult(Family.parse(family).short, source, instances,
                               evaluate_policy(policy, problem, gts), hist)


OCNET_COLUMNS = ["family", "source", "index", "lambda", "shape", "x", "err_u", "err_X", "err_Y",
                 "err_objective", "J_policy", "J_star", "terminal_inventory"]


def ocnet_rows(res: OcnetResult):
    for k, ((th, x), e) in enumerate(zip(res.instances, res.errors)):
        yield [res.family, res.source, k, th.lam, th.shape_param, x, e.u, e.X, e.Y, e.objective,
               e.J_policy, e.J_star, e.terminal_inventory]


def _ocnet_job(family, source, out, icon_dir, scale_dict, seed):
    torch.set_num_threads(1)
    scale = scale_from_dict(scale_dict)
    g = TimeGrid(1.0, scale.grid_n)
    model = None
    its = scale.ocnet_iterations
    if source == "surrogate":
        model = load_icon(os.path.join(icon_dir, f"{family}.ckpt"))[0]
        its = scale.surrogate_iterations
    inst = sample_instances(family, scale.ocnet_instances, seed)
    policy, res = run_ocnet(family, inst, g, its, seed, model, scale.n_examples,
                            scale.icon_train.example_stride)
    stem = os.path.join(out, f"ocnet_{source}_{family}")
    write_csv(stem + ".csv", OCNET_COLUMNS, ocnet_rows(res))
    h = res.history
    write_csv(stem + "_curve.csv", ["iteration", "mean_objective", "best_objective", "err_u", "err_X",
                                    "err_Y", "err_objective"],
              zip(h.steps, h.objective, h.best_objective, h.err_u, h.err_X, h.err_Y, h.err_J))
    save_policy(stem + ".ckpt", policy, {"family": family, "source": source,
                                          "instances": [[t.to_dict(), x] for t, x in inst]})
    return [stem + ".csv", stem + "_curve.csv", stem + ".ckpt"]


def stage_ocnet(icon_dir, out, scale: Scale, seed: int, threads: int = 1):
    jobs = [(fam, src, out, icon_dir, scale.to_dict(), seed + 11 * k)
            for k, fam in enumerate(FAMILIES) for src in ("exact", "surrogate")]
    return [f for fs in _in_pool(_ocnet_job, jobs, threads) for f in fs]


def _ocnet_heat_job(fam, k, out, icon_dir, scale_dict, seed):
    torch.set_num_threads(1)
    scale = scale_from_dict(scale_dict)
    g = TimeGrid(1.0, scale.grid_n)
    model = load_icon(os.path.join(icon_dir, f"{fam}.ckpt"))[0]
    spec = report.HeatmapSpec(fam, n_bins=scale.heat_bins, samples_per_box=scale.ocnet_heat_samples,
                              seed=seed + k)
    # every box's instances train together as one ensemble
    boxes = [(i, j) for i in range(spec.n_bins) for j in range(spec.n_bins)]
    inst = []
    for i, j in boxes:
        thetas = spec.box_thetas(i, j)
        xr = np.random.default_rng([int(spec.seed), 4111, i, j])
        inst += [(th, float(xr.uniform(*X_RANGE))) for th in thetas]
    _, res = run_ocnet(fam, inst, g, scale.ocnet_heat_iterations, seed + k, model, scale.n_examples,
                       scale.icon_train.example_stride)
    n = spec.samples_per_box
    per_box = {b: res.errors[m * n:(m + 1) * n] for m, b in enumerate(boxes)}
    files = []
    for comp in ("u", "X", "Y"):
        lookup = {tuple(t.to_json() for t in spec.box_thetas(*b)): per_box[b] for b in boxes}
        ev = lambda thetas, rng, comp=comp: np.array(
            [getattr(e, comp) for e in lookup[tuple(t.to_json() for t in thetas)]])
        hm = report.heatmap(spec, f"ocnet-{comp}", ev)
        files += write_heatmap(os.path.join(out, f"heatmap_ocnet-{comp}_{fam}"), hm)
    return files


def stage_ocnet_heatmaps(icon_dir, out, scale: Scale, seed: int, threads: int = 1):
    jobs = [(fam, k, out, icon_dir, scale.to_dict(), seed) for k, fam in enumerate(FAMILIES)]
    return [f for fs in _in_pool(_ocnet_heat_job, jobs, threads) for f in fs]


def scale_from_dict(d: dict) -> Scale:
    d = dict(d)
    d["icon"] = IconConfig.from_dict(d["icon"])
    d["icon_train"] = IconTrainConfig.from_dict(d["icon_train"])
    unknown = set(d) - set(Scale.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown scale keys: {sorted(unknown)}")
    return Scale(**d)


def resolve_scale(name: str, overrides: dict | None = None) -> Scale:
    if name not in SCALES:
        raise ConfigError(f"unknown scale {name!r}; choose from {sorted(SCALES)}")
    base = SCALES[name]
    if not overrides:
        return base
    d = base.to_dict()
    for k, v in overrides.items():
        if k in ("icon", "icon_train"):
            d[k] = {**d[k], **v}
        else:
            d[k] = v
    return scale_from_dict(d)


# -- acceptance summary ------------------------------------------------------

def read_csv_rows(path):
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    header = lines[0].split(",")
    return [dict(zip(header, ln.split(","))) for ln in lines[1:]]


def acceptance_rows(reports_dir, gt_rows, table):
    """Summary of the trained-model criteria plus ground-truth shape checks."""
    rows = []
    # solution shape and oracle agreement
    worst_gap = max(r["prop1_rel_l2"] for r in gt_rows)
    rows.append(["oracle_agreement", worst_gap <= 5e-2, worst_gap, 5e-2])
    pos = all(r["min_rate"] > 0 for r in gt_rows)
    ushape = all(r["sign_changes"] == 1 and r["interior_min"] for r in gt_rows)
    rows.append(["strictly_positive", pos, min(r["min_rate"] for r in gt_rows), 0.0])
    rows.append(["single_interior_minimum", ushape, max(r["sign_changes"] for r in gt_rows), 1])
    ratio = max(abs(r["terminal_inventory"]) / r["liquidation_bound"] for r in gt_rows)
    rows.append(["liquidation_bound", ratio <= 1.0, ratio, 1.0])
    # ICON accuracy and transfer structure
    diag = [table[(f, f)].mean for f in FAMILIES]
    rows.append(["icon_in_distribution", max(diag) <= 0.05, max(diag), 0.05])
    struct = all(table[(f, f)].mean < table[(g, f)].mean for f in FAMILIES for g in FAMILIES if g != f)
    rows.append(["icon_transfer_structure", struct, min(
        table[(g, f)].mean - table[(f, f)].mean for f in FAMILIES for g in FAMILIES if g != f), 0.0])
    mixed = max(table[(f, "all3")].mean / table[(f, f)].mean for f in FAMILIES)
    rows.append(["icon_mixed_within_2x", mixed <= 2.0, mixed, 2.0])
    # OCnet
    for src, u_tol, j_tol in (("exact", 1e-2, 1e-3), ("surrogate", 0.1, 5e-2)):
        recs = [r for f in FAMILIES for r in read_csv_rows(os.path.join(reports_dir, f"ocnet_{src}_{f}.csv"))]
        eu = max(float(r["err_u"]) for r in recs)
        ej = max(float(r["err_objective"]) for r in recs)
        rows.append([f"ocnet_{src}_u", eu <= u_tol, eu, u_tol])
        rows.append([f"ocnet_{src}_objective", ej <= j_tol, ej, j_tol])
        mono = True
        for f in FAMILIES:
            best = [float(r["best_objective"]) for r in
                    read_csv_rows(os.path.join(reports_dir, f"ocnet_{src}_{f}_curve.csv"))]
            mono &= all(b2 >= b1 for b1, b2 in zip(best, best[1:]))
        rows.append([f"ocnet_{src}_best_monotone", mono, 1.0 if mono else 0.0, 1.0])
    return rows


def repro(out, scale_name: str = "desk", seed: int = 0, threads: int = 1, overrides=None):
    """Run every stage into ``out``; returns the acceptance summary rows."""
    scale = resolve_scale(scale_name, overrides)
    data, icon_dir, rep = (os.path.join(out, d) for d in ("data", "icon", "reports"))
    os.makedirs(rep, exist_ok=True)
    log.info("repro %s: data", scale.name)
    stage_data(data, scale, seed)
    log.info("repro %s: icon training", scale.name)
    stage_icon(data, icon_dir, scale, seed, threads)
    log.info("repro %s: tables and heatmaps", scale.name)
    table, files = stage_table(icon_dir, rep, scale, seed)
    _, hfiles = stage_icon_heatmaps(icon_dir, rep, scale, seed)
    files += hfiles
    gt_rows = gt_checks(scale, seed)
    path = os.path.join(rep, "gt_checks.csv")
    write_csv(path, GT_COLUMNS, ([r[c] for c in GT_COLUMNS] for r in gt_rows))
    files.append(path)
    log.info("repro %s: ocnet", scale.name)
    files += stage_ocnet(icon_dir, rep, scale, seed, threads)
    files += stage_ocnet_heatmaps(icon_dir, rep, scale, seed, threads)
    rows = acceptance_rows(rep, gt_rows, table)
    path = os.path.join(rep, "acceptance.csv")
    write_csv(path, ["check", "pass", "value", "threshold"], rows)
    files.append(path)
    update_manifest(rep, "reports", {"scale": scale.to_dict()}, {"seed": seed, "threads": threads},
                    files)
    update_manifest(out, "repro", {"scale": scale.to_dict()}, {"seed": seed},
                    [os.path.join(rep, "manifest.json"), os.path.join(icon_dir, "manifest.json"),
                     os.path.join(data, "manifest.json")])
    return rows
