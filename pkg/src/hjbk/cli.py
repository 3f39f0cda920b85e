"""Command-line front end: ``hjbk synthesize | simulate | verify | reproduce | convergence-study``."""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import PRESETS, load_config, load_preset
from .errors import BlowUpError, HJBKError, InputError, SynthesisError
from .io import atomic_write_text, read_json, to_jsonable, write_json
from .riccati import solve_are
from .simulate import batch_to_csv, run_batch
from .synthesis import ValueFunction, equilibrium_residuals, synthesize
from .system import check_model, linearize
from .verify import build_report, convergence_study

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2
OUT_ENV = "HJBK_OUT_DIR"


class _Console:
    def __init__(self, quiet):
        self.quiet = quiet

    def __call__(self, text=""):
        if not self.quiet:
            print(text)


def _out_dir(args, cfg):
    if args.out:
        return Path(args.out)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    return Path(cfg.output_dir)


def _config(args):
    path = args.config or getattr(args, "config_pos", None)
    if not path:
        raise InputError("no config given (use --config)")
    cfg = load_config(path)
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    return cfg


def _pipeline_inputs(cfg):
    model = cfg.build_model()
    kernel = cfg.build_kernel(model.n)
    centers = cfg.build_centers(model)
    grid = cfg.build_grid(model, centers)
    return model, kernel, centers, grid


def _run_synthesis(cfg, args, say):
    model, kernel, centers, grid = _pipeline_inputs(cfg)
    issues = check_model(model, rng=np.random.default_rng(cfg.seed))
    for issue in issues:
        say(f"warning: {issue}")
    settings = cfg.solver.build(args.solver_tol, verbose=False)
    centers.validate(model.domain)
    result = synthesize(model, kernel, centers, grid, settings, cfg.hessian_relaxation)
    return model, result


def _load_vf(path, model):
    path = Path(path)
    if not path.is_file():
        raise InputError(f"value-function file not found: {path}")
    data = read_json(path)
    if data.get("system") not in (None, model.name):
        raise InputError(f"value function was built for {data['system']!r}, config describes {model.name!r}")
    return ValueFunction.from_dict(data, model)


def _equilibrium_block(result):
    return {
        "P": result.P,
        "riccati_method": result.riccati.method.value,
        "riccati_residual": result.riccati.residual_norm,
        "hessian_relaxation": result.problem.hessian_relaxation,
        **equilibrium_residuals(result.value_function, result.P),
    }


def cmd_synthesize(args):
    say = _Console(args.quiet)
    cfg = _config(args)
    out = _out_dir(args, cfg)
    model, result = _run_synthesis(cfg, args, say)
    write_json(out / "vf.json", result.value_function.to_dict())
    stats = {k: v for k, v in result.stats.items() if k != "raw_residuals"}
    eq = _equilibrium_block(result)
    write_json(out / "synthesis.json", {"equilibrium": eq, "solver": stats,
                                        "centers": result.value_function.centers.count})
    if args.dump_conic:
        write_json(out / "conic.json", result.program.to_json_dict())
    say(f"{model.name}: M={result.value_function.centers.count}, status {stats['status']}, "
        f"solve {stats['solve_time']:.2f}s")
    say(f"  |V(0)| {eq['value_at_origin']:.2e}  |grad V(0)| {eq['gradient_norm']:.2e}  "
        f"|hess V(0) - P|_F {eq['hessian_residual']:.2e}")
    say(f"wrote {out / 'vf.json'}")
    return EXIT_OK


def _simulate(cfg, model, vf):
    sim = cfg.build_simulation(model.n)
    return run_batch(model, vf.control, sim, value=vf.value)


def cmd_simulate(args):
    say = _Console(args.quiet)
    cfg = _config(args)
    out = _out_dir(args, cfg)
    model = cfg.build_model()
    sim = cfg.build_simulation(model.n)
    vf = _load_vf(args.vf, model)
    batch = run_batch(model, vf.control, sim, value=vf.value)
    atomic_write_text(out / "trajectories.csv", batch_to_csv(batch))
    summary = batch.summary()
    write_json(out / "summary.json", summary)
    say(_batch_table(summary))
    return EXIT_OK


def _batch_table(summary):
    lines = [f"{'#':>3} {'label':>8} {'x0':>28} {'|x(T)|':>11} {'cost':>10}"]
    for row in summary["trajectories"]:
        x0 = "(" + ", ".join(f"{v:.3f}" for v in row["x0"]) + ")"
        lines.append(f"{row['index']:>3} {str(row['label'] or ''):>8} {x0:>28} {row['final_norm']:>11.3e} "
                     f"{row['cost']:>10.4f}")
    lines.append(f"max |x(T)| {summary['max_final_norm']:.3e}, mean {summary['mean_final_norm']:.3e}, "
                 f"decay beta {summary['decay_beta']:.3g}")
    return "\n".join(lines)


def cmd_verify(args):
    say = _Console(args.quiet)
    cfg = _config(args)
    out = _out_dir(args, cfg)
    model, _, centers, grid = _pipeline_inputs(cfg)
    vf = _load_vf(args.vf, model)
    P = solve_are(linearize(model), model.D).P
    batch = _simulate(cfg, model, vf) if cfg.simulation is not None else None
    report = build_report(vf, model, P, grid.points, batch)
    write_json(out / "report.json", report.to_dict())
    text = report.text_summary()
    atomic_write_text(out / "report.txt", text)
    say(text.rstrip())
    return EXIT_OK


def _gates(name, eq, lmi_min, batch):
    """``(label, value, threshold, passed)`` rows; solve time is reported separately and never gated."""
    beta = batch.decay[1]
    rows = []
    if name == "poly1d":
        rows += [
            ("|V(0)| < 1e-6", eq["value_at_origin"], 1e-6, eq["value_at_origin"] < 1e-6),
            ("|grad V(0)| < 1e-6", eq["gradient_norm"], 1e-6, eq["gradient_norm"] < 1e-6),
            ("|hess V(0) - P| < 1e-4", eq["hessian_residual"], 1e-4, eq["hessian_residual"] < 1e-4),
            ("min collocation LMI eig >= -1e-6", lmi_min, -1e-6, lmi_min >= -1e-6),
            ("max |x(10)| <= 1e-4", batch.max_final_norm, 1e-4, batch.max_final_norm <= 1e-4),
        ]
    elif name == "radial2d":
        rows += [
            ("|hess V(0) - P|_F <= 1.0", eq["hessian_residual"], 1.0, eq["hessian_residual"] <= 1.0),
            ("max |x(10)| <= 1e-2", batch.max_final_norm, 1e-2, batch.max_final_norm <= 1e-2),
        ]
    else:
        rows += [
            ("|hess V(0) - P|_F <= 1.5", eq["hessian_residual"], 1.5, eq["hessian_residual"] <= 1.5),
            ("max |x(20)| <= 1e-5", batch.max_final_norm, 1e-5, batch.max_final_norm <= 1e-5),
            ("mean |x(20)| <= 1e-5", batch.mean_final_norm, 1e-5, batch.mean_final_norm <= 1e-5),
        ]
    rows.append(("decay rate beta > 0", beta, 0.0, bool(math.isfinite(beta) and beta > 0)))
    return [{"gate": g, "value": v, "threshold": t, "passed": bool(p)} for g, v, t, p in rows]


def reproduce(name, out, solver_tol=None, seed=None):
    """Run one preset end to end; returns ``(summary, passed)`` and writes all artifacts under ``out``."""
    cfg = load_preset(name)
    if seed is not None:
        cfg = cfg.model_copy(update={"seed": seed})
    args = argparse.Namespace(solver_tol=solver_tol)
    t0 = time.perf_counter()
    model, result = _run_synthesis(cfg, args, _Console(True))
    vf = result.value_function
    t1 = time.perf_counter()
    batch = _simulate(cfg, model, vf)
    t2 = time.perf_counter()
    report = build_report(vf, model, result.P, result.problem.grid.points, batch)
    eq = report.equilibrium
    gates = _gates(name, eq, report.lmi["collocation_min_eig"], batch)
    passed = all(g["passed"] for g in gates)
    summary = {
        "experiment": name,
        "table": {
            "dimension": model.n,
            "centers": vf.centers.count,
            "initial_conditions": len(batch.trajectories),
            "horizon": batch.horizon,
            "max_final_norm": batch.max_final_norm,
            "mean_final_norm": batch.mean_final_norm,
            "hessian_residual": eq["hessian_residual"],
            "decay_beta": batch.decay[1],
            "solver_status": result.stats["status"],
        },
        "gates": gates,
        "passed": passed,
        "timing": {"solve_time": result.stats["solve_time"], "synthesis_wall": t1 - t0,
                   "simulation_wall": t2 - t1},
    }
    write_json(out / "vf.json", vf.to_dict())
    write_json(out / "report.json", report.to_dict())
    atomic_write_text(out / "report.txt", report.text_summary())
    write_json(out / "simulation.json", batch.summary())
    atomic_write_text(out / "trajectories.csv", batch_to_csv(batch))
    write_json(out / "summary.json", summary)
    return to_jsonable(summary), passed


def _summary_table(summary):
    t = summary["table"]
    lines = [
        f"experiment          {summary['experiment']}",
        f"dimension           {t['dimension']}",
        f"centers M           {t['centers']}",
        f"initial conditions  {t['initial_conditions']}",
        f"max final norm      {t['max_final_norm']:.3e}",
        f"mean final norm     {t['mean_final_norm']:.3e}",
        f"hessian residual    {t['hessian_residual']:.3e}",
        f"solve time          {summary['timing']['solve_time']:.2f} s (reported only)",
        "",
    ]
    for g in summary["gates"]:
        lines.append(f"[{'PASS' if g['passed'] else 'FAIL'}] {g['gate']}: {g['value']:.3e}")
    return "\n".join(lines)


def cmd_reproduce(args):
    say = _Console(args.quiet)
    names = list(PRESETS) if args.experiment == "all" else [args.experiment]
    base = Path(args.out) if args.out else Path(os.environ.get(OUT_ENV, "out"))
    ok = True
    for name in names:
        out = base / name if len(names) > 1 or not args.out else base
        summary, passed = reproduce(name, out, args.solver_tol, args.seed)
        ok &= passed
        say(_summary_table(summary))
        say()
    if not ok and args.quiet:
        print("one or more gates failed", file=sys.stderr)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_convergence(args):
    say = _Console(args.quiet)
    cfg = _config(args)
    out = _out_dir(args, cfg)
    model, kernel, _, grid = _pipeline_inputs(cfg)
    settings = cfg.solver.build(args.solver_tol)
    study = convergence_study(model, kernel, args.m, settings,
                              grid=None if cfg.collocation == "centers" else grid,
                              hessian_relaxation=cfg.hessian_relaxation)
    write_json(out / "convergence.json", study.to_dict())
    for e in study.entries:
        err = "-" if e["error"] is None else f"{e['error']:.4e}"
        say(f"M={e['M']:>4}  h={e['fill_distance']:.4f}  {e['status']:>10}  {err}")
    say(f"log-log slope {study.slope:.3f}")
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help=f"output directory (default: ${OUT_ENV}, then the config's output_dir)")
    common.add_argument("--seed", type=int, help="seed for sampled model checks")
    common.add_argument("--solver-tol", type=float, help="override the solver tolerance")
    common.add_argument("--quiet", action="store_true", help="suppress console output")

    parser = argparse.ArgumentParser(prog="hjbk", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", parents=[common], help="solve the SDP and write vf.json")
    p.add_argument("config_pos", nargs="?", metavar="CONFIG")
    p.add_argument("--config")
    p.add_argument("--dump-conic", action="store_true", help="also write the conic program to conic.json")
    p.set_defaults(func=cmd_synthesize)

    for name, func, help_ in (("simulate", cmd_simulate, "closed-loop simulation of a value function"),
                              ("verify", cmd_verify, "verification report for a value function")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("config_pos", nargs="?", metavar="CONFIG")
        p.add_argument("--config")
        p.add_argument("--vf", required=True, help="value-function JSON written by synthesize")
        p.set_defaults(func=func)

    p = sub.add_parser("reproduce", parents=[common], help="run a benchmark experiment with its gates")
    p.add_argument("experiment", choices=list(PRESETS) + ["all"])
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("convergence-study", parents=[common], help="gradient error versus center count")
    p.add_argument("config_pos", nargs="?", metavar="CONFIG")
    p.add_argument("--config")
    p.add_argument("--m", type=int, nargs="+", default=[9, 15, 25], help="center counts")
    p.set_defaults(func=cmd_convergence)
    return parser


def _report_error(exc, kind):
    payload = {"error": kind, "type": type(exc).__name__, "message": str(exc)}
    details = getattr(exc, "details", None) or getattr(exc, "failures", None)
    if details:
        payload["details"] = details
    print(json.dumps(to_jsonable(payload), sort_keys=True), file=sys.stderr)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        _report_error(exc, "input")
        return EXIT_INPUT
    except OSError as exc:
        _report_error(exc, "io")
        return EXIT_INPUT
    except (SynthesisError, BlowUpError) as exc:
        _report_error(exc, "synthesis" if isinstance(exc, SynthesisError) else "blowup")
        return EXIT_FAIL
    except HJBKError as exc:
        _report_error(exc, "numerical")
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
