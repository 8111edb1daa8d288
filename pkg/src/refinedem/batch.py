"""Batch execution of (config x seed) cells with a resumable manifest.

Each cell gets its own output directory named by the hash of its validated
config (seed included).  Only the scheduler process writes the manifest,
atomically, after every finished cell; rerunning a batch skips every cell
whose hash is already recorded as done.
"""
from __future__ import annotations

import copy
import json
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .analysis import RunRecord, reference_errors
from .errors import RefineDEMError
from .io import bed_spec_from_config, config_hash, validate_config, write_json, write_outputs

MANIFEST = "manifest.json"


def expand_cells(matrix: dict) -> list[dict]:
    """Validated per-seed configs, reference cells first."""
    out = []
    for cfg in matrix["cells"]:
        for seed in matrix.get("seeds", [0]):
            c = copy.deepcopy(cfg)
            c["seed"] = int(seed)
            out.append(validate_config(c))
    return sorted(out, key=lambda c: not c["reference"])


def run_cell(cfg: dict):
    """Build the bed and run the configured experiment.

    Returns ``(record, world, series, columns)``.
    """
    from .bed import audit_bed, build_bed
    from .core import SolverConfig
    from .experiments.plate import SERIES_COLUMNS, PlateTestConfig, run_plate_test
    from .experiments.triaxial import TriaxialConfig, run_triaxial

    cfg = validate_config(cfg)
    spec = bed_spec_from_config(cfg)
    t0 = time.perf_counter()
    world = build_bed(spec)
    t_build = time.perf_counter() - t0
    s = cfg["solver"]
    world.config = SolverConfig(timestep=world.config.timestep, pgs_iterations=world.config.pgs_iterations,
                                error_tolerance=s["error_tolerance"], damping_factor=s["damping_factor"],
                                rolling_diameter=s["rolling_diameter"])
    cell = max(world.diam.max(), min(spec.dims) / 4) if world.n_particles else 0.05
    audit = audit_bed(world, float(cell), spec.schedule, spec.dims)
    rec = RunRecord(cfg["label"], cfg, config_hash(cfg), cfg["seed"], cfg["reference"],
                    bed_audit=audit.summary(), n_particles=world.n_particles, build_time=t_build)
    series, columns = None, None
    iters = []
    t0 = time.perf_counter()
    if cfg["experiment"] == "plate":
        pc = PlateTestConfig.preset_config(cfg["preset"], **cfg["plate"])
        pc.timestep = pc.timestep or s["timestep"]
        pc.pgs_iterations = pc.pgs_iterations or s["pgs_iterations"] or world.config.pgs_iterations
        series, metrics, _ = run_plate_test(world, pc)
        rec.metrics = dict(metrics.to_dict(), grouser_depth=pc.grouser_depth, normal_load=pc.normal_load)
        iters = [pc.pgs_iterations]
        columns = SERIES_COLUMNS
    elif cfg["experiment"] == "triaxial":
        tc = TriaxialConfig(**cfg["triaxial"])
        tc.timestep = tc.timestep or s["timestep"]
        tc.pgs_iterations = tc.pgs_iterations or s["pgs_iterations"]
        res = run_triaxial(world, tc)
        rec.metrics = res.summary()
        r0 = res.runs[0]
        series, columns = r0.series, list(r0.series)
    rec.wall_time = time.perf_counter() - t0
    rec.mean_iterations = float(np.mean(iters)) if iters else float(world.config.pgs_iterations)
    return rec, world, series, columns


def _cell_job(cfg: dict, out_dir: str) -> dict:
    """Worker entry point: run one cell and write its outputs; never raises."""
    h = config_hash(cfg)
    cell_dir = Path(out_dir) / "cells" / h[:16]
    try:
        rec, world, series, columns = run_cell(cfg)
        write_outputs(rec, cell_dir, world, series, columns)
    except (RefineDEMError, ValueError, ArithmeticError, OSError) as exc:
        rec = RunRecord(cfg.get("label", ""), cfg, h, cfg.get("seed", 0), cfg.get("reference", False),
                        status="failed", error=f"{type(exc).__name__}: {exc}")
        write_outputs(rec, cell_dir)
    except Exception as exc:  # keep the batch alive; the trace goes into the record
        rec = RunRecord(cfg.get("label", ""), cfg, h, cfg.get("seed", 0), cfg.get("reference", False),
                        status="failed", error=f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}")
        write_outputs(rec, cell_dir)
    return rec.to_dict()


def _load_manifest(path: Path) -> dict:
    if path.exists():
        return json.loads(path.read_text(encoding="utf-8"))
    return {"cells": {}}


def _save_manifest(path: Path, manifest: dict) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def batch_run(matrix: dict, out_dir, jobs: int = 1, progress: Optional[Callable[[str], None]] = None,
              retry_failed: bool = False):
    """Run every cell not yet done; returns ``(records, error_reports, summary)``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mpath = out / MANIFEST
    manifest = _load_manifest(mpath)
    cells = expand_cells(matrix)
    done = manifest["cells"]
    todo = []
    for cfg in cells:
        h = config_hash(cfg)
        entry = done.get(h)
        if entry and (entry["status"] == "ok" or not retry_failed):
            if progress:
                progress(f"skip {cfg['label']} seed={cfg['seed']} ({entry['status']})")
            continue
        todo.append(cfg)

    def finish(d):
        done[d["config_hash"]] = {"status": d["status"], "label": d["label"], "seed": d["seed"],
                                  "dir": f"cells/{d['config_hash'][:16]}"}
        _save_manifest(mpath, manifest)
        if progress:
            progress(f"{d['status']:6s} {d['label']} seed={d['seed']}")

    # reference cells first so a partial batch always has its baseline
    refs = [c for c in todo if c["reference"]]
    rest = [c for c in todo if not c["reference"]]
    for stage in (refs, rest):
        if jobs <= 1 or len(stage) <= 1:
            for cfg in stage:
                finish(_cell_job(cfg, str(out)))
        else:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                futs = [pool.submit(_cell_job, cfg, str(out)) for cfg in stage]
                for f in as_completed(futs):
                    finish(f.result())

    records = []
    for cfg in cells:
        h = config_hash(cfg)
        rp = out / "cells" / h[:16] / "report.json"
        if rp.exists():
            records.append(RunRecord.from_dict(json.loads(rp.read_text(encoding="utf-8"))))
    reports = reference_errors(records) if any(r.config["experiment"] == "plate" for r in records) else []
    failed = [r.label + f" seed={r.seed}" for r in records if r.status != "ok"]
    summary = {"n_cells": len(cells), "n_done": sum(r.status == "ok" for r in records),
               "incomplete": failed, "errors": [e.to_dict() for e in reports]}
    write_json(summary, out / "summary.json")
    return records, reports, summary
