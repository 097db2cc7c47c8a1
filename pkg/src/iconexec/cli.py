"""Command-line entry point.

Every subcommand accepts ``--config FILE`` with a JSON object whose keys
are the long option names (dashes or underscores).  Values from the file
replace the built-in defaults; flags given on the command line replace
values from the file.  ``ICONEXEC_SEED`` sets the default seed.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np
import torch

from . import pipeline, report
from .datagen import atomic_write_text, generate_dataset, read_dataset, write_dataset
from .errors import ConfigError, IconExecError
from .grid import Family, KernelSpec, TimeGrid, build_impact_matrix, apply_impact
from .gt_solver import solve
from .icon import (
    IconConfig,
    IconTrainConfig,
    TrajectoryBank,
    fixed_eval_prompts,
    evaluate_prompts,
    load_icon,
    save_icon,
    train_icon,
)
from .objective import ObjectiveParams

log = logging.getLogger("iconexec")


def default_seed() -> int:
    raw = os.environ.get("ICONEXEC_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"ICONEXEC_SEED must be an integer, got {raw!r}") from None


# -- argument helpers --------------------------------------------------------

def _kernel_args(p, required=False):
    p.add_argument("--family", choices=["ode", "ker", "sker"], required=required)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--theta", help="kernel as JSON object or path to a JSON file")


def _objective_args(p):
    p.add_argument("--x", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--phi", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--horizon", type=float)
    p.add_argument("--grid-n", type=int)


def _common(p):
    p.add_argument("--config", help="JSON file with option values")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="cap on parallel workers (results do not depend on it)")


DEFAULTS = {
    "x": 0.1, "eps": 0.5, "phi": 0.0, "rho": 10.0, "horizon": 1.0, "grid_n": 100,
    "method": "qp", "traj": 10, "examples": 5, "n_prompts": 100, "threads": 1,
    "scale": "desk", "n_samples": 100, "bins": 6, "samples_per_box": 16,
}


def resolve(args, parser):
    """Merge defaults, the config file and explicit flags (in increasing precedence)."""
    opts = {k: v for k, v in DEFAULTS.items() if hasattr(args, k)}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        for k, v in cfg.items():
            key = k.replace("-", "_")
            key = "lam" if key == "lambda" else key
            if not hasattr(args, key) and key not in ("icon", "icon_train", "overrides"):
                raise ConfigError(f"unknown config key {k!r} for this command")
            opts[key] = v
    for k, v in vars(args).items():
        if v is not None and k not in ("func", "config"):
            opts[k] = v
    if opts.get("seed") is None:
        opts["seed"] = default_seed()
    return argparse.Namespace(**{**{k: None for k in vars(args)}, **opts})


def kernel_from(o) -> KernelSpec:
    if o.theta:
        text = o.theta
        if os.path.exists(text):
            with open(text, encoding="utf-8") as fh:
                text = fh.read()
        return KernelSpec.from_json(text) if isinstance(text, str) else KernelSpec.from_dict(text)
    if o.family is None or o.lam is None:
        raise ConfigError("give --theta or --family with --lambda and --beta/--gamma")
    fam = Family.parse(o.family)
    if fam is Family.EXPONENTIAL:
        if o.beta is None:
            raise ConfigError("--beta is required for the ode family")
        return KernelSpec.exponential(o.lam, o.beta)
    if o.gamma is None:
        raise ConfigError(f"--gamma is required for the {o.family} family")
    if fam is Family.POWER_LAW_NONSINGULAR:
        return KernelSpec.power_law(o.lam, o.gamma)
    return KernelSpec.singular_power_law(o.lam, o.gamma)


def grid_from(o) -> TimeGrid:
    return TimeGrid(float(o.horizon), int(o.grid_n))


def params_from(o, grid) -> ObjectiveParams:
    return ObjectiveParams(eps=o.eps, phi=o.phi, rho=o.rho, x=o.x, grid=grid)


def _resolved(o) -> dict:
    return {k: v for k, v in sorted(vars(o).items()) if k != "func" and not callable(v)}


# -- subcommands -------------------------------------------------------------

def cmd_datagen(o):
    g = grid_from(o)
    write_dataset(o.out, generate_dataset(o.family, o.n_theta, o.traj, g, seed=o.seed))
    pipeline.update_manifest(os.path.dirname(os.path.abspath(o.out)), os.path.basename(o.out),
                             _resolved(o), {"seed": o.seed}, [o.out])
    print(f"wrote {o.n_theta} records to {o.out}")


def cmd_gt_solve(o):
    g = grid_from(o)
    theta = kernel_from(o)
    mat = build_impact_matrix(theta, g)
    gt = solve(params_from(o, g), mat, o.method)
    y_full = apply_impact(mat, gt.u_star, include_terminal=True)
    lines = ["t,u_star,X,Y"]
    for i, t in enumerate(g.nodes):
        u = report.fmt(gt.u_star[i]) if i < g.n_steps else ""
        lines.append(f"{report.fmt(t)},{u},{report.fmt(gt.x_path[i])},{report.fmt(y_full[i])}")
    text = "\n".join(lines) + "\n"
    side = {"theta": theta.to_dict(), "method": gt.method, "objective": gt.value,
            "terminal_inventory": gt.terminal_inventory, "x": o.x, "eps": o.eps, "phi": o.phi,
            "rho": o.rho, "horizon": o.horizon, "grid_n": o.grid_n}
    if o.out:
        atomic_write_text(o.out, text)
        atomic_write_text(os.path.splitext(o.out)[0] + ".json", json.dumps(side, indent=2, sort_keys=True) + "\n")
        pipeline.update_manifest(os.path.dirname(os.path.abspath(o.out)), os.path.basename(o.out),
                                 _resolved(o), {"seed": o.seed},
                                 [o.out, os.path.splitext(o.out)[0] + ".json"])
    else:
        sys.stdout.write(text)
    log.info("objective %.10g, terminal inventory %.3g", gt.value, gt.terminal_inventory)


def _icon_cfgs(o):
    model_cfg = IconConfig.from_dict(o.icon or {}) if getattr(o, "icon", None) else IconConfig()
    t = dict(o.icon_train or {}) if getattr(o, "icon_train", None) else {}
    for key in ("steps", "lr", "batch_size", "example_stride"):
        if getattr(o, key, None) is not None:
            t[key] = getattr(o, key)
    if o.examples is not None:
        t["n_examples"] = o.examples
    return model_cfg, IconTrainConfig.from_dict(t)


def cmd_icon_train(o):
    records = read_dataset(o.data)
    if not records:
        raise ConfigError(f"{o.data} holds no records")
    g = TimeGrid(float(o.horizon), records[0].grid_n)
    bank = TrajectoryBank.from_records(records)
    test = TrajectoryBank.from_records(read_dataset(o.test_data)) if o.test_data else None
    model_cfg, train_cfg = _icon_cfgs(o)
    model, hist = train_icon(bank, g, model_cfg, train_cfg, seed=o.seed, test_bank=test)
    save_icon(o.out, model, {"train": train_cfg.to_dict(), "data": os.path.basename(o.data),
                             "seed": o.seed, "grid_n": g.n_steps})
    curve = os.path.splitext(o.out)[0] + "_curve.csv"
    pipeline.write_csv(curve, ["step", "train_loss", "train_rel_l2", "test_rel_l2"], hist.rows())
    pipeline.update_manifest(os.path.dirname(os.path.abspath(o.out)), os.path.basename(o.out),
                             {**_resolved(o), "model": model_cfg.to_dict(), "train": train_cfg.to_dict()},
                             {"seed": o.seed}, [o.out, curve])
    print(f"trained {train_cfg.steps} steps; final train rel l2 {hist.train_rel[-1]:.4f}")


def cmd_icon_eval(o):
    model, cfg = load_icon(o.ckpt)
    records = read_dataset(o.test_data)
    g = TimeGrid(float(o.horizon), records[0].grid_n)
    stride = int(cfg.get("train", {}).get("example_stride", 1))
    ev = fixed_eval_prompts(TrajectoryBank.from_records(records), g, o.n_prompts, o.examples, stride, o.seed)
    errs = evaluate_prompts(model, ev)
    r = report.ErrorReport.from_values(errs)
    lines = ["prompt,lambda,shape,rel_l2"]
    for k, (th, e) in enumerate(zip(ev.thetas, errs)):
        lines.append(f"{k},{report.fmt(th.lam)},{report.fmt(th.shape_param)},{report.fmt(e)}")
    lines.append(f"mean,,,{report.fmt(r.mean)}")
    lines.append(f"std,,,{report.fmt(r.std)}")
    text = "\n".join(lines) + "\n"
    if o.report and o.report != "-":
        atomic_write_text(o.report, text)
    else:
        sys.stdout.write(text)
    print(f"rel l2 {r} over {r.count} prompts", file=sys.stderr)


def _instances_from(o):
    if o.context:
        rec = read_dataset(o.context)[0]
        theta = kernel_from(o) if (o.theta or o.family) else rec.theta
        n = o.examples
        if rec.n_traj < n:
            raise ConfigError(f"context holds {rec.n_traj} trajectories, need {n}")
        return theta, (rec.us[:n], rec.ys[:n]), rec.grid_n
    return kernel_from(o), None, o.grid_n


def cmd_ocnet_train(o):
    from .icon import IconSurrogate
    from .ocnet import ControlProblem, OcnetTrainConfig, PolicyConfig, PolicyNet, save_policy, train_ocnet
    from .gt_solver import solve_qp

    theta, ctx, n = _instances_from(o)
    g = TimeGrid(float(o.horizon), n)
    p = params_from(o, g)
    mat = build_impact_matrix(theta, g)
    if o.icon_ckpt:
        model, mcfg = load_icon(o.icon_ckpt)
        if ctx is None:
            ctx = pipeline.context_for(theta, g, o.examples, [o.seed, 61, 0])
        stride = int(mcfg.get("train", {}).get("example_stride", 1))
        problem = ControlProblem.surrogate([p], [mat], IconSurrogate(model, [ctx], g, stride))
    else:
        problem = ControlProblem.exact([p], [mat])
    cfg = OcnetTrainConfig(iterations=o.iterations or OcnetTrainConfig.iterations)
    gt = solve_qp(p, mat)
    policy, hist = train_ocnet(problem, cfg, seed=o.seed, gts=[gt])
    save_policy(o.out, policy, {"theta": theta.to_dict(), "x": o.x, "eps": o.eps, "phi": o.phi,
                                "rho": o.rho, "horizon": o.horizon, "grid_n": n,
                                "source": "surrogate" if o.icon_ckpt else "exact", "seed": o.seed})
    curve = os.path.splitext(o.out)[0] + "_curve.csv"
    pipeline.write_csv(curve, ["iteration", "objective", "best_objective", "err_u", "err_X", "err_Y",
                               "err_objective"],
                       zip(hist.steps, hist.objective, hist.best_objective, hist.err_u, hist.err_X,
                           hist.err_Y, hist.err_J))
    pipeline.update_manifest(os.path.dirname(os.path.abspath(o.out)), os.path.basename(o.out),
                             _resolved(o), {"seed": o.seed}, [o.out, curve])
    print(f"best objective {hist.best_objective[-1]:.8g} (ground truth {gt.value:.8g})")


def cmd_ocnet_eval(o):
    from .ocnet import ControlProblem, evaluate_policy, load_policy

    policy, cfg = load_policy(o.policy)
    g = TimeGrid(float(cfg["horizon"]), int(cfg["grid_n"]))
    theta = KernelSpec.from_dict(cfg["theta"])
    p = ObjectiveParams(eps=cfg["eps"], phi=cfg["phi"], rho=cfg["rho"], x=cfg["x"], grid=g)
    mat = build_impact_matrix(theta, g)
    gt = solve(p, mat, o.gt_method)
    e = evaluate_policy(policy, ControlProblem.exact([p], [mat]), [gt])[0]
    text = ("metric,value\n" + "".join(f"{k},{report.fmt(v)}\n" for k, v in (
        ("err_u", e.u), ("err_X", e.X), ("err_Y", e.Y), ("err_objective", e.objective),
        ("J_policy", e.J_policy), ("J_star", e.J_star), ("terminal_inventory", e.terminal_inventory))))
    if o.report and o.report not in ("-", "csv"):
        atomic_write_text(o.report, text)
    else:
        sys.stdout.write(text)


def _ckpt_map(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--ckpt expects name=path, got {item!r}")
        name, path = item.split("=", 1)
        out[name] = path
    return out


def cmd_report_table(o):
    paths = _ckpt_map(o.ckpt)
    if not paths:
        raise ConfigError("give at least one --ckpt name=path")
    models = {n: load_icon(p)[0] for n, p in paths.items()}
    cfgs = {n: load_icon(p)[1] for n, p in paths.items()}
    stride = int(next(iter(cfgs.values())).get("train", {}).get("example_stride", 1))
    g = TimeGrid(float(o.horizon), o.grid_n)
    table = report.error_table(models, o.families, g, o.n_samples, o.seed, o.examples, stride)
    text = report.table_to_csv(table)
    if o.out:
        atomic_write_text(o.out, text)
        pipeline.update_manifest(os.path.dirname(os.path.abspath(o.out)), os.path.basename(o.out),
                                 _resolved(o), {"seed": o.seed}, [o.out])
    else:
        sys.stdout.write(text)


def cmd_report_heatmap(o):
    g = TimeGrid(float(o.horizon), o.grid_n)
    model, cfg = load_icon(o.ckpt)
    stride = int(cfg.get("train", {}).get("example_stride", 1))
    spec = report.HeatmapSpec(o.family, n_bins=o.bins, samples_per_box=o.samples_per_box, seed=o.seed)
    if o.target.startswith("ocnet-"):
        comp = o.target.split("-", 1)[1]
        cache = {}

        def ev(thetas, rng):
            key = tuple(t.to_json() for t in thetas)
            if key not in cache:
                inst = [(t, float(rng.uniform(*pipeline.X_RANGE))) for t in thetas]
                _, res = pipeline.run_ocnet(o.family, inst, g, o.iterations or 2000,
                                            int(rng.integers(2**31)), model, o.examples, stride)
                cache[key] = res.errors
            return np.array([getattr(e, comp) for e in cache[key]])
    else:
        question = "ustar" if o.target == "icon-ood-ustar" else "gp"
        ev = report.icon_box_evaluator(model, g, o.examples, stride, question)
    hm = report.heatmap(spec, o.target, ev)
    files = pipeline.write_heatmap(o.out, hm)
    pipeline.update_manifest(os.path.dirname(os.path.abspath(o.out)), os.path.basename(o.out),
                             _resolved(o), {"seed": o.seed}, files)
    print(f"wrote {files[0]} and {files[1]}")


def cmd_repro(o):
    overrides = getattr(o, "overrides", None)
    rows = pipeline.repro(o.out, o.scale, o.seed, o.threads, overrides)
    width = max(len(r[0]) for r in rows)
    for name, ok, value, thr in rows:
        print(f"{'PASS' if ok else 'FAIL'}  {name:<{width}}  value={report.fmt(value)}  threshold={report.fmt(thr)}")


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="iconexec", description=__doc__.splitlines()[0])
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate a (rate, impact) dataset")
    p.add_argument("--family", choices=["ode", "ker", "sker", "all3"], required=True)
    p.add_argument("--n-theta", type=int, required=True)
    p.add_argument("--traj", type=int)
    p.add_argument("--grid-n", type=int)
    p.add_argument("--horizon", type=float)
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_datagen)

    gt = sub.add_parser("gt", help="ground-truth optimal execution").add_subparsers(dest="gt_cmd", required=True)
    p = gt.add_parser("solve")
    _kernel_args(p)
    _objective_args(p)
    p.add_argument("--method", choices=["qp", "prop1"])
    p.add_argument("--out", help="CSV path (stdout if omitted); a JSON sidecar is written next to it")
    _common(p)
    p.set_defaults(func=cmd_gt_solve)

    icon = sub.add_parser("icon", help="in-context operator network").add_subparsers(dest="icon_cmd", required=True)
    p = icon.add_parser("train")
    p.add_argument("--data", required=True)
    p.add_argument("--test-data")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--example-stride", type=int)
    p.add_argument("--examples", type=int)
    p.add_argument("--horizon", type=float)
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_icon_train)
    p = icon.add_parser("eval")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--examples", type=int)
    p.add_argument("--n-prompts", type=int)
    p.add_argument("--horizon", type=float)
    p.add_argument("--report", help="CSV path, or - for stdout")
    _common(p)
    p.set_defaults(func=cmd_icon_eval)

    oc = sub.add_parser("ocnet", help="neural execution policy").add_subparsers(dest="ocnet_cmd", required=True)
    p = oc.add_parser("train")
    p.add_argument("--icon-ckpt", help="surrogate model; the exact operator is used when omitted")
    p.add_argument("--context", help="dataset file whose first record supplies theta and examples")
    p.add_argument("--examples", type=int)
    p.add_argument("--iterations", type=int)
    _kernel_args(p)
    _objective_args(p)
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_ocnet_train)
    p = oc.add_parser("eval")
    p.add_argument("--policy", required=True)
    p.add_argument("--gt-method", choices=["qp", "prop1"], default="qp")
    p.add_argument("--report", help="CSV path, or csv/- for stdout")
    _common(p)
    p.set_defaults(func=cmd_ocnet_eval)

    rep = sub.add_parser("report", help="error tables and heatmaps").add_subparsers(dest="report_cmd", required=True)
    p = rep.add_parser("table")
    p.add_argument("--ckpt", action="append", help="name=path, repeatable")
    p.add_argument("--families", nargs="+", default=["ode", "ker", "sker"])
    p.add_argument("--n-samples", type=int)
    p.add_argument("--examples", type=int)
    p.add_argument("--grid-n", type=int)
    p.add_argument("--horizon", type=float)
    p.add_argument("--out")
    _common(p)
    p.set_defaults(func=cmd_report_table)
    p = rep.add_parser("heatmap")
    p.add_argument("--target", choices=list(report.HEATMAP_TARGETS), required=True)
    p.add_argument("--family", choices=["ode", "ker", "sker"], required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bins", type=int)
    p.add_argument("--samples-per-box", type=int)
    p.add_argument("--examples", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--grid-n", type=int)
    p.add_argument("--horizon", type=float)
    p.add_argument("--out", required=True, help="path prefix for .csv and .svg")
    _common(p)
    p.set_defaults(func=cmd_report_heatmap)

    p = sub.add_parser("repro", help="run the whole reproduction")
    p.add_argument("--scale", choices=sorted(pipeline.SCALES))
    p.add_argument("--out", default="artifacts/repro")
    _common(p)
    p.set_defaults(func=cmd_repro)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        o = resolve(args, parser)
        torch.set_num_threads(1)
        args.func(o)
    except IconExecError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: missing input: {exc.filename}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
