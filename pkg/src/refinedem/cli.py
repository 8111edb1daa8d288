"""Command line entry point: ``refinedem <command> [options]``.

Exit codes: 0 success, 2 invalid input or configuration, 3 experiment fault.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import (BuildTimeout, ConfigError, ExperimentFault, InvalidComparison, InvalidInput,
                     InvalidParameter, SingularFit, SolverDiverged)

EXIT_OK, EXIT_INVALID, EXIT_FAULT = 0, 2, 3

DEFAULT_D = {"paper": 0.0085, "desk": 0.0085, "tiny": 0.01}


def _config(args, experiment: str) -> dict:
    from .io import load_config, validate_config
    if args.config:
        cfg = load_config(args.config)
        if "cells" in cfg:
            raise ConfigError("expected a single run config, got a batch matrix")
    else:
        preset = args.preset or "desk"
        cfg = validate_config({"schema_version": 1, "experiment": experiment, "preset": preset,
                               "bed": {"d_min": DEFAULT_D[preset]}})
    if args.preset:
        cfg["preset"] = args.preset
    if args.seed is not None:
        cfg["seed"] = args.seed
    cfg["experiment"] = experiment if experiment != "bed" else cfg["experiment"]
    return validate_config(cfg)


def _say(msg):
    print(msg, file=sys.stderr, flush=True)


def cmd_plan(args) -> int:
    from .io import bed_spec_from_config
    from .planner import RefinementProfile, plan
    cfg = _config(args, "bed")
    spec = bed_spec_from_config(cfg)
    s = spec.schedule
    prof = RefinementProfile(s.d_min, s.d_max, s.gamma if not s.is_uniform else 0.0, spec.gradient_axis)
    est = plan(spec.dims, prof, s.thickness_factor if not s.is_uniform else 1.0,
               eps=cfg["solver"]["error_tolerance"], rho=spec.material.density, jitter=spec.size_jitter)
    out = dict(est.to_dict(), dims=list(spec.dims), schedule=s.to_dict())
    print(json.dumps(out, indent=2, default=float))
    return EXIT_OK


def _load_or_build(args, cfg):
    from .bed import build_bed
    from .io import bed_spec_from_config, load_bed
    if getattr(args, "bed", None):
        return load_bed(args.bed)
    return build_bed(bed_spec_from_config(cfg), progress=_say)


def cmd_build_bed(args) -> int:
    from .analysis import RunRecord
    from .bed import audit_bed, build_bed
    from .io import bed_spec_from_config, config_hash, write_outputs
    cfg = _config(args, "bed")
    spec = bed_spec_from_config(cfg)
    world = build_bed(spec, progress=_say)
    cell = max(float(world.diam.max()), min(spec.dims) / 4) if world.n_particles else 0.05
    audit = audit_bed(world, cell, spec.schedule, spec.dims)
    rec = RunRecord(cfg["label"], cfg, config_hash(cfg), cfg["seed"], bed_audit=audit.summary(),
                    n_particles=world.n_particles)
    write_outputs(rec, args.out, world)
    print(json.dumps(audit.summary(), indent=2))
    return EXIT_OK


def cmd_run_triaxial(args) -> int:
    from .analysis import RunRecord
    from .experiments.triaxial import TriaxialConfig, run_triaxial
    from .io import config_hash, write_json, write_outputs
    cfg = _config(args, "triaxial")
    world = _load_or_build(args, cfg)
    tc = TriaxialConfig(**cfg["triaxial"])
    tc.timestep = tc.timestep or cfg["solver"]["timestep"]
    tc.pgs_iterations = tc.pgs_iterations or cfg["solver"]["pgs_iterations"]
    res = run_triaxial(world, tc, progress=_say)
    rec = RunRecord(cfg["label"], cfg, config_hash(cfg), cfg["seed"], metrics=res.summary(),
                    n_particles=world.n_particles)
    out = write_outputs(rec, args.out)
    from .io import write_series_csv
    for r in res.runs:
        write_series_csv(r.series, out / f"triaxial_{int(round(r.sigma3))}Pa.csv")
    write_json(res.summary(), out / "metrics.json")
    print(json.dumps(res.summary(), indent=2))
    return EXIT_OK


def cmd_run_plate(args) -> int:
    from .analysis import RunRecord
    from .experiments.plate import SERIES_COLUMNS, PlateTestConfig, run_plate_test
    from .io import config_hash, write_outputs
    cfg = _config(args, "plate")
    world = _load_or_build(args, cfg)
    pc = PlateTestConfig.preset_config(cfg["preset"], **cfg["plate"])
    pc.timestep = pc.timestep or cfg["solver"]["timestep"]
    pc.pgs_iterations = pc.pgs_iterations or cfg["solver"]["pgs_iterations"]
    series, metrics, _ = run_plate_test(world, pc, progress=_say)
    rec = RunRecord(cfg["label"], cfg, config_hash(cfg), cfg["seed"],
                    metrics=dict(metrics.to_dict(), grouser_depth=pc.grouser_depth, normal_load=pc.normal_load),
                    n_particles=world.n_particles)
    write_outputs(rec, args.out, None, series, SERIES_COLUMNS)
    print(json.dumps(metrics.to_dict(), indent=2))
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .analysis import RunRecord, cost_report, format_table, group_medians, reference_errors
    from .io import write_json
    root = Path(args.out)
    reports = sorted(root.glob("cells/*/report.json")) or sorted(root.glob("*/report.json"))
    if not reports:
        raise InvalidInput(f"no run reports under {root}")
    records = [RunRecord.from_dict(json.loads(p.read_text(encoding="utf-8"))) for p in reports]
    errs = reference_errors(records)
    costs = cost_report(records)
    result = {"errors": [e.to_dict() for e in errs], "group_medians": group_medians(errs, records),
              "cost": costs}
    write_json(result, root / "analysis.json")
    if errs:
        print(format_table([{"label": e.label, "aggregate": e.aggregate, "spread": e.spread} for e in errs]))
    if costs:
        print(format_table(costs, ["label", "gamma", "n_particles", "count_reduction", "speedup",
                                   "mean_iterations"]))
    return EXIT_OK


def cmd_batch(args) -> int:
    from .batch import batch_run
    from .io import load_config
    if not args.config:
        raise ConfigError("batch needs --config pointing at a matrix document")
    matrix = load_config(args.config)
    if "cells" not in matrix:
        raise ConfigError("expected a batch matrix with a 'cells' list")
    if args.seed is not None:
        matrix["seeds"] = [args.seed]
    _, _, summary = batch_run(matrix, args.out, jobs=args.jobs, progress=_say)
    print(json.dumps({k: summary[k] for k in ("n_cells", "n_done", "incomplete")}, indent=2))
    return EXIT_OK if not summary["incomplete"] else EXIT_FAULT


COMMANDS = {"plan": cmd_plan, "build-bed": cmd_build_bed, "run-triaxial": cmd_run_triaxial,
            "run-plate": cmd_run_plate, "analyze": cmd_analyze, "batch": cmd_batch}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="refinedem", description="Variable-resolution granular DEM toolkit.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON run config (batch: matrix document)")
        s.add_argument("--out", default="out", help="output directory")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--jobs", type=int, default=1)
        s.add_argument("--preset", choices=["paper", "desk", "tiny"], default=None)
        if name in ("run-triaxial", "run-plate"):
            s.add_argument("--bed", help="reuse a saved bed (bed.json.gz) instead of building one")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, InvalidParameter, InvalidInput, InvalidComparison, SingularFit) as exc:
        _say(f"error: {exc}")
        return EXIT_INVALID
    except (ExperimentFault, BuildTimeout, SolverDiverged) as exc:
        _say(f"fault: {exc}")
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
