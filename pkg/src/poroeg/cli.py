"""Command line entry point: ``poroeg run`` and ``poroeg verify``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .config import ConfigError, SimulationConfig, convert_value, parse_config
from .diagnostics import write_diagnostics_csv
from .io import OutputError, export_fields, write_manifest
from .mesh import MeshError
from .physics import MaterialError, write_fields_csv
from .scenarios import ScenarioError, build_problem
from .solver import SolverError, next_step_system, run
from .spaces import SpaceError
from .verification import convergence_study, write_convergence_csv

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_ACCEPTANCE = 0, 2, 3, 4
CONFIG_ERRORS = (ConfigError, ScenarioError, MaterialError, MeshError, SpaceError)

log = logging.getLogger("poroeg")


def run_poisson_study(cfg: SimulationConfig, out: Path):
    """Convergence tables for every requested method and degree."""
    beta = cfg["solver.beta"] if "solver.beta" in cfg.explicit else None
    penalty = cfg.get("solver.penalty", "trace")
    summary = {}
    for method in cfg["poisson.methods"]:
        for k in cfg["poisson.degrees"]:
            rows = convergence_study(cfg["mesh.dim"], method, k, cfg["mesh.levels"], beta, penalty)
            write_convergence_csv(out / f"convergence_{method}{k}.csv", rows)
            summary[f"{method}{k}"] = [r.l2_error for r in rows]
            log.info("%s%d errors %s", method, k, ", ".join(f"{r.l2_error:.3e}" for r in rows))
    return summary


def run_simulation(cfg: SimulationConfig, out: Path):
    setup = build_problem(cfg)
    pb = setup.problem
    if cfg.scenario in ("random_2d", "random_3d") and not cfg.get("random.fields_file"):
        write_fields_csv(out / "fields.csv", pb.materials.phi, pb.materials.kappa0())
    t0 = time.perf_counter()
    res = run(pb)
    write_diagnostics_csv(out / "diagnostics.csv", res.diagnostics)
    if cfg.get("output.vtk", True):
        for t, state in sorted(res.snapshots.items()):
            export_fields(out / f"fields_t{t:g}s.vtk", pb.u_space, pb.p_space, state,
                          title=f"{cfg.scenario} {cfg.method} t={t:g} s")
    if cfg.get("output.matrices", False):
        dt = pb.time.steps[-1]
        next_step_system(pb, res.final, dt).export_matrix_market(out / "matrices")
    last = res.diagnostics[-1]
    log.info("%s %s: %d steps in %.1f s, RF %.6e, max r_mass %.3e", cfg.scenario, cfg.method, last.step,
             time.perf_counter() - t0, last.RF, max(r.max_r_mass_rate for r in res.diagnostics))
    return {"steps": last.step, "RF": last.RF, "picard_iterations": res.iteration_counts}


def run_one(cfg: SimulationConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.serialize())
    if cfg.scenario == "poisson_convergence":
        summary = run_poisson_study(cfg, out)
    else:
        summary = run_simulation(cfg, out)
    write_manifest(out / "manifest.json", cfg.serialize(), cfg.get("seed", 0),
                   {"scenario": cfg.scenario, "method": cfg.method, "resolved_sha256": cfg.digest()})
    return summary


def parse_sweep(spec: str):
    if "=" not in spec:
        raise ConfigError(f"--sweep: expected key=v1,v2,... (got {spec!r})")
    key, values = (s.strip() for s in spec.split("=", 1))
    vals = [v.strip() for v in values.split(",") if v.strip()]
    if not vals:
        raise ConfigError(f"--sweep {key}: no values")
    for v in vals:
        convert_value(key, v)  # fail before any compute
    return key, vals


def _error_report(exc, out: Path = None):
    info = getattr(exc, "info", {})
    report = {"error": type(exc).__name__, "message": str(exc),
              "info": {k: v if isinstance(v, (int, float, str, list)) else repr(v) for k, v in info.items()}}
    print(json.dumps(report, indent=2, default=repr), file=sys.stderr)
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "error.json").write_text(json.dumps(report, indent=2, default=repr) + "\n")
        except OSError:
            pass


def cmd_run(args) -> int:
    try:
        cfg = parse_config(args.config)
        if args.seed is not None:
            cfg = cfg.override("seed", args.seed)
        out = Path(args.out or cfg.get("output.dir", "out"))
        cases = [(cfg, out)]
        if args.sweep:
            key, vals = parse_sweep(args.sweep)
            cases = [(cfg.override(key, convert_value(key, v)), out / f"{key}={v.replace(' ', '')}") for v in vals]
    except (CONFIG_ERRORS + (OSError,)) as exc:
        _error_report(exc)
        return EXIT_CONFIG
    for case, case_out in cases:
        try:
            run_one(case, case_out)
        except CONFIG_ERRORS as exc:
            _error_report(exc, case_out)
            return EXIT_CONFIG
        except (SolverError, OutputError, ArithmeticError, ValueError) as exc:
            _error_report(exc, case_out)
            return EXIT_SOLVER
    return EXIT_OK


def cmd_verify(args) -> int:
    from .acceptance import run_acceptance
    only = None
    if args.only:
        try:
            only = {int(v) for v in args.only.split(",")}
        except ValueError:
            print(f"--only: expected comma separated criterion numbers (got {args.only!r})", file=sys.stderr)
            return EXIT_CONFIG
    lines = []

    def report(line):
        lines.append(line)
        print(line, flush=True)

    t0 = time.perf_counter()
    try:
        results = run_acceptance(only, report=report)
    except SolverError as exc:
        _error_report(exc)
        return EXIT_SOLVER
    summary = f"{sum(r.passed for r in results)}/{len(results)} criteria passed in {time.perf_counter() - t0:.0f} s"
    report(summary)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "acceptance.txt").write_text("\n".join(lines) + "\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_ACCEPTANCE


def build_parser():
    parser = argparse.ArgumentParser(prog="poroeg", description="Biot poroelasticity with CG, EG and DG pressure.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run a scenario from a config file")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (overrides output.dir)")
    p.add_argument("--seed", type=int, help="random-field seed (overrides seed)")
    p.add_argument("--sweep", help="key=v1,v2,... runs one case per value in its own subdirectory")
    p.set_defaults(func=cmd_run)
    v = sub.add_parser("verify", help="run the acceptance suite")
    v.add_argument("--only", help="comma separated criterion numbers")
    v.add_argument("--out", help="directory for acceptance.txt")
    v.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
