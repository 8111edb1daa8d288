"""Run configuration (JSON schema), bed-state files and run outputs.

Bed files are gzip-compressed JSON with every float printed at 17
significant digits and gzip's header timestamp zeroed, so two identical
worlds produce byte-identical files.
"""
from __future__ import annotations

import copy
import csv
import gzip
import hashlib
import json
import math
import os
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from .core import Material, Plane, SimWorld, SolverConfig
from .errors import ConfigError, InvalidParameter
from .planner import HORIZONTAL, VERTICAL, gamma_from_ratio, layer_schedule, ratio_from_gamma

SCHEMA_VERSION = 1

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_OPT_POS = {"type": ["number", "null"], "exclusiveMinimum": 0, "default": None}

MATERIAL_SCHEMA = {
    "type": "object", "additionalProperties": False, "default": {},
    "properties": {
        "density": dict(_POS, default=2200.0),
        "youngs_modulus": dict(_POS, default=1.0e9),
        "poisson_ratio": {"type": "number", "minimum": 0, "exclusiveMaximum": 0.5, "default": 0.15},
        "friction_coeff": {"type": "number", "minimum": 0, "default": 0.3},
        "rolling_coeff": {"type": "number", "minimum": 0, "default": 0.02},
        "restitution": {"type": "number", "minimum": 0, "maximum": 1, "default": 0.0},
    },
}

BED_SCHEMA = {
    "type": "object", "additionalProperties": False, "required": ["d_min"], "default": {},
    "properties": {
        "dims": {"type": ["array", "null"], "items": _POS, "minItems": 3, "maxItems": 3, "default": None},
        "d_min": _POS,
        "d_max": _OPT_POS,
        "r": {"type": ["number", "null"], "minimum": 1, "default": None},
        "eta": {"type": "number", "minimum": 1, "default": 1.0},
        "gamma": {"type": ["number", "null"], "minimum": 0, "default": None},
        "gradient_axis": {"enum": ["vertical", "horizontal"], "default": "vertical"},
        "size_jitter": {"type": "number", "minimum": 0, "maximum": 0.2, "default": 0.1},
        "relaxation_friction": {"type": "array", "items": {"type": "number", "minimum": 0},
                                "minItems": 2, "maxItems": 2, "default": [0.1, 0.01]},
        "material": MATERIAL_SCHEMA,
    },
}

SOLVER_SCHEMA = {
    "type": "object", "additionalProperties": False, "default": {},
    "properties": {
        "error_tolerance": dict(_POS, default=0.02),
        "timestep": _OPT_POS,
        "pgs_iterations": {"type": ["integer", "null"], "minimum": 1, "default": None},
        "damping_factor": {"type": "number", "minimum": 0, "default": 4.5},
        "rolling_diameter": {"enum": ["mean", "effective", "min"], "default": "mean"},
    },
}

PLATE_SCHEMA = {
    "type": "object", "additionalProperties": False, "default": {},
    "properties": {k: _NUM for k in (
        "plate_length", "plate_thickness", "grouser_depth", "grouser_length", "grouser_pitch",
        "normal_load", "shear_speed", "shear_ramp", "load_ramp", "t_I_end", "t_II_end", "t_end",
        "plate_mass", "plate_start", "stress_for_timestep", "sinkage_window", "traction_window",
        "contact_loss_window")} | {
        "container": {"type": "array", "items": _POS, "minItems": 3, "maxItems": 3},
        "n_grousers": {"type": "integer", "minimum": 0},
        "record_every": {"type": "integer", "minimum": 1},
    },
}

TRIAXIAL_SCHEMA = {
    "type": "object", "additionalProperties": False, "default": {},
    "properties": {k: _NUM for k in (
        "width", "axial_rate", "max_strain", "consolidation_time", "hold_time", "servo_gain",
        "servo_speed_limit", "planning_stress", "peak_window", "control_window", "fault_window")} | {
        "confining_stresses": {"type": "array", "items": _POS, "minItems": 1},
        "gravity": {"type": "boolean"},
        "record_every": {"type": "integer", "minimum": 1},
    },
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "refinedem run configuration",
    "type": "object", "additionalProperties": False,
    "required": ["schema_version", "experiment", "bed"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "experiment": {"enum": ["bed", "plate", "triaxial"]},
        "label": {"type": "string", "default": ""},
        "reference": {"type": "boolean", "default": False},
        "seed": {"type": "integer", "minimum": 0, "default": 0},
        "preset": {"enum": ["paper", "desk", "tiny"], "default": "desk"},
        "bed": BED_SCHEMA,
        "solver": SOLVER_SCHEMA,
        "plate": PLATE_SCHEMA,
        "triaxial": TRIAXIAL_SCHEMA,
    },
}

MATRIX_SCHEMA = {
    "type": "object", "additionalProperties": False,
    "required": ["schema_version", "cells"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1, "default": [0]},
        "base": {"type": "object", "default": {}},
        "cells": {"type": "array", "items": {"type": "object"}, "minItems": 1},
    },
}


def _fill_defaults(schema: dict, doc):
    if not isinstance(doc, dict):
        return doc
    for key, sub in schema.get("properties", {}).items():
        if key not in doc and "default" in sub:
            doc[key] = copy.deepcopy(sub["default"])
        if key in doc and sub.get("type") == "object":
            _fill_defaults(sub, doc[key])
    return doc


def _validate(doc, schema):
    errors = sorted(jsonschema.Draft202012Validator(schema).iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        pointer = "/" + "/".join(str(p) for p in e.absolute_path)
        raise ConfigError(e.message, pointer)


def _check_refinement(bed: dict) -> None:
    """Resolve ``d_max``/``r``/``gamma`` and reject inconsistent combinations."""
    d_min = bed["d_min"]
    d_max = bed["d_max"] if bed["d_max"] is not None else d_min
    if d_max < d_min:
        raise ConfigError(f"d_max {d_max} is below d_min {d_min}", "/bed/d_max")
    bed["d_max"] = d_max
    r, gamma, eta = bed["r"], bed["gamma"], bed["eta"]
    if d_max == d_min:
        if (r not in (None, 1.0)) or (gamma not in (None, 0.0)):
            raise ConfigError("a uniform bed (d_max == d_min) needs r = 1 and gamma = 0", "/bed")
        bed["r"], bed["gamma"] = 1.0, 0.0
        return
    if r is None and gamma is None:
        raise ConfigError("a refined bed needs r or gamma", "/bed")
    if r is not None and gamma is not None:
        g = gamma_from_ratio(r, eta)
        if not math.isclose(g, gamma, rel_tol=1e-6, abs_tol=1e-12):
            raise ConfigError(f"gamma = {gamma} contradicts r = {r}, eta = {eta}, "
                              f"which give gamma = (r-1)/(r*eta) = {g:.6g}", "/bed/gamma")
    elif gamma is not None:
        try:
            r = ratio_from_gamma(gamma, eta)
        except InvalidParameter as exc:
            raise ConfigError(f"{exc}", "/bed/gamma") from None
    if r <= 1.0:
        raise ConfigError("a refined bed needs r > 1", "/bed/r")
    bed["r"], bed["gamma"] = float(r), gamma_from_ratio(r, eta)


def validate_config(doc: dict) -> dict:
    """Validated copy of a run config with every default filled in."""
    doc = copy.deepcopy(doc)
    _validate(doc, CONFIG_SCHEMA)
    _fill_defaults(CONFIG_SCHEMA, doc)
    _check_refinement(doc["bed"])
    return doc


def load_config(path) -> dict:
    """Read and validate a run config or a batch matrix (``cells`` key)."""
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("top level must be an object")
    if "cells" in doc:
        return validate_matrix(doc)
    return validate_config(doc)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else copy.deepcopy(v)
    return out


def validate_matrix(doc: dict) -> dict:
    doc = copy.deepcopy(doc)
    _validate(doc, MATRIX_SCHEMA)
    _fill_defaults(MATRIX_SCHEMA, doc)
    cells = []
    for i, cell in enumerate(doc["cells"]):
        merged = _merge(doc["base"], cell)
        merged.setdefault("schema_version", SCHEMA_VERSION)
        try:
            cells.append(validate_config(merged))
        except ConfigError as exc:
            raise ConfigError(str(exc).split(": ", 1)[-1], f"/cells/{i}{exc.pointer}") from None
    if sum(c["reference"] for c in cells) != 1:
        raise ConfigError("exactly one cell must be marked as the reference", "/cells")
    doc["cells"] = cells
    return doc


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(doc: dict) -> str:
    """SHA-256 of the canonical (sorted-key, compact) JSON text."""
    return hashlib.sha256(canonical_json(doc).encode()).hexdigest()


def bed_spec_from_config(cfg: dict):
    from .bed import BedSpec
    from .experiments.plate import PlateTestConfig
    b = cfg["bed"]
    dims = b["dims"]
    if dims is None:
        if cfg["experiment"] == "triaxial":
            w = cfg["triaxial"].get("width", 0.3)
            dims = (w, w, w)
        else:
            dims = PlateTestConfig.preset_config(cfg["preset"]).container
    axis = VERTICAL if b["gradient_axis"] == "vertical" else HORIZONTAL
    sched = layer_schedule(b["d_min"], b["d_max"], b["r"], b["eta"])
    mat = Material(**b["material"])
    s = cfg["solver"]
    return BedSpec(tuple(dims), sched, size_jitter=b["size_jitter"],
                   relaxation_friction=tuple(b["relaxation_friction"]), material=mat,
                   rng_seed=cfg["seed"], gradient_axis=axis, error_tolerance=s["error_tolerance"])


# ---- bed state ------------------------------------------------------------
def _fmt(x) -> str:
    if isinstance(x, bool) or x is None:
        return json.dumps(x)
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x) + 0.0  # -0.0 -> 0.0, which JSON would read back as an int anyway
        if not math.isfinite(x):
            raise InvalidParameter("bed state contains a non-finite value")
        return format(x, ".17g")
    if isinstance(x, str):
        return json.dumps(x)
    if isinstance(x, np.ndarray):
        return _fmt(x.tolist())
    if isinstance(x, (list, tuple)):
        return "[" + ",".join(_fmt(v) for v in x) + "]"
    if isinstance(x, dict):
        return "{" + ",".join(json.dumps(str(k)) + ":" + _fmt(x[k]) for k in sorted(x)) + "}"
    raise TypeError(f"cannot serialize {type(x).__name__}")


def world_to_dict(world: SimWorld) -> dict:
    c = world.config
    return {
        "format": "refinedem-bed", "version": 1,
        "time": world.time, "gravity": world.gravity, "rng_seed": world.rng_seed, "next_id": world.next_id,
        "materials": [dict(m.__dict__) for m in world.materials],
        "walls": [{"normal": p.normal, "point": p.point, "material": dict(p.material.__dict__)}
                  for p in world.walls],
        "bounds_lo": world.bounds_lo, "bounds_hi": world.bounds_hi,
        "config": dict(c.__dict__),
        "particles": {"ids": world.ids, "pos": world.pos, "vel": world.vel, "omega": world.omega,
                      "quat": world.quat, "diam": world.diam, "layer": world.layer, "mat": world.mat},
    }


def bed_text(world: SimWorld) -> str:
    return _fmt(world_to_dict(world)) + "\n"


def save_bed(world: SimWorld, path) -> None:
    """Write ``.json.gz`` (deterministic gzip) or plain ``.json`` by suffix."""
    data = bed_text(world).encode("utf-8")
    path = Path(path)
    if path.suffix == ".gz":
        with open(path, "wb") as raw, gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as gz:
            gz.write(data)
    else:
        path.write_bytes(data)


def world_from_dict(d: dict) -> SimWorld:
    if d.get("format") != "refinedem-bed":
        raise InvalidParameter("not a bed-state document")
    mats = [Material(**m) for m in d["materials"]]
    world = SimWorld(SolverConfig(**d["config"]), gravity=d["gravity"], materials=mats, rng_seed=d["rng_seed"])
    p = d["particles"]
    n = len(p["ids"])
    world.ids = np.asarray(p["ids"], dtype=np.int64).reshape(n)
    world.pos = np.asarray(p["pos"], dtype=float).reshape(n, 3)
    world.vel = np.asarray(p["vel"], dtype=float).reshape(n, 3)
    world.omega = np.asarray(p["omega"], dtype=float).reshape(n, 3)
    world.quat = np.asarray(p["quat"], dtype=float).reshape(n, 4)
    world.diam = np.asarray(p["diam"], dtype=float).reshape(n)
    world.layer = np.asarray(p["layer"], dtype=np.int64).reshape(n)
    world.mat = np.asarray(p["mat"], dtype=np.int64).reshape(n)
    world.next_id = int(d["next_id"])
    world.time = float(d["time"])
    world.walls = [Plane(np.asarray(w["normal"]), np.asarray(w["point"]), Material(**w["material"]))
                   for w in d["walls"]]
    world.bounds_lo = None if d["bounds_lo"] is None else np.asarray(d["bounds_lo"], dtype=float)
    world.bounds_hi = None if d["bounds_hi"] is None else np.asarray(d["bounds_hi"], dtype=float)
    return world


def load_bed(path) -> SimWorld:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return world_from_dict(json.loads(raw.decode("utf-8")))


# ---- series and outputs ---------------------------------------------------
def write_series_csv(series: dict, path, columns=None) -> None:
    """Header row plus one row per sample; floats round-trip exactly (``repr``)."""
    columns = list(columns or series.keys())
    n = len(series[columns[0]]) if columns else 0
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(columns)
        cols = [np.asarray(series[c]) for c in columns]
        for i in range(n):
            w.writerow([repr(float(c[i])) if c.dtype.kind == "f" else str(c[i].item()) for c in cols])


def read_series_csv(path) -> dict:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    return {h: np.array([float(r[j]) for r in body]) for j, h in enumerate(header)}


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def write_json(doc, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_jsonable(doc), f, indent=2, sort_keys=True)
        f.write("\n")


def write_outputs(record, out_dir, world: Optional[SimWorld] = None, series: Optional[dict] = None,
                  series_columns=None) -> Path:
    """Persist one run: config, bed state, series, metrics and report."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise PermissionError(f"output directory {out} is not writable")
    except OSError as exc:
        raise OSError(f"cannot write outputs to {out}: {exc}") from exc
    write_json(record.config, out / "config.json")
    if world is not None:
        save_bed(world, out / "bed.json.gz")
    if series is not None:
        write_series_csv(series, out / "series.csv", series_columns)
    write_json(record.metrics, out / "metrics.json")
    write_json(record.to_dict(), out / "report.json")
    return out
