import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from refinedem.analysis import RunRecord
from refinedem.core import SimWorld, SolverConfig
from refinedem.errors import ConfigError
from refinedem.io import (bed_spec_from_config, bed_text, canonical_json, config_hash, load_bed, load_config,
                          read_series_csv, save_bed, validate_config, validate_matrix, write_outputs,
                          write_series_csv)

BASE = {"schema_version": 1, "experiment": "plate", "bed": {"d_min": 0.01}}


def test_defaults_filled():
    cfg = validate_config(BASE)
    assert cfg["preset"] == "desk" and cfg["seed"] == 0
    assert cfg["bed"]["d_max"] == 0.01 and cfg["bed"]["r"] == 1.0 and cfg["bed"]["gamma"] == 0.0
    assert cfg["solver"]["error_tolerance"] == 0.02
    assert validate_config(cfg) == cfg


def test_unknown_key_reports_pointer():
    doc = dict(BASE, bed={"d_min": 0.01, "diameter": 3})
    with pytest.raises(ConfigError) as e:
        validate_config(doc)
    assert e.value.pointer.startswith("/bed")


def test_wrong_type_reports_pointer():
    with pytest.raises(ConfigError) as e:
        validate_config(dict(BASE, bed={"d_min": "small"}))
    assert e.value.pointer == "/bed/d_min"


def test_gamma_resolution_and_conflict():
    cfg = validate_config(dict(BASE, bed={"d_min": 0.0085, "d_max": 0.03, "r": 1.1}))
    assert cfg["bed"]["gamma"] == pytest.approx(0.1 / 1.1)
    cfg = validate_config(dict(BASE, bed={"d_min": 0.0085, "d_max": 0.03, "gamma": 0.5 / 3}))
    assert cfg["bed"]["r"] == pytest.approx(1.2)
    with pytest.raises(ConfigError) as e:
        validate_config(dict(BASE, bed={"d_min": 0.0085, "d_max": 0.03, "r": 1.1, "gamma": 0.3}))
    assert "(r-1)/(r*eta)" in str(e.value) and e.value.pointer == "/bed/gamma"
    with pytest.raises(ConfigError):
        validate_config(dict(BASE, bed={"d_min": 0.0085, "d_max": 0.03}))


def test_matrix_needs_one_reference():
    m = {"schema_version": 1, "base": {"experiment": "plate"},
         "cells": [{"bed": {"d_min": 0.01}}, {"bed": {"d_min": 0.02}}]}
    with pytest.raises(ConfigError):
        validate_matrix(m)
    m["cells"][0]["reference"] = True
    out = validate_matrix(m)
    assert out["cells"][0]["reference"] and out["seeds"] == [0]


def test_load_config_rejects_bad_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text(json.dumps(BASE))
    assert load_config(p)["experiment"] == "plate"


@settings(max_examples=50)
@given(st.dictionaries(st.text(min_size=1, max_size=5), st.integers() | st.floats(allow_nan=False) | st.text(),
                       max_size=8))
def test_hash_ignores_key_order(d):
    rev = dict(reversed(list(d.items())))
    assert config_hash(d) == config_hash(rev)
    assert json.loads(canonical_json(d)) == d


def test_hash_changes_with_content():
    a = validate_config(BASE)
    b = validate_config(dict(BASE, seed=1))
    assert config_hash(a) != config_hash(b)


def test_bed_spec_from_config_uses_preset_container():
    spec = bed_spec_from_config(validate_config(dict(BASE, preset="tiny")))
    assert spec.dims == (0.2, 0.04, 0.08)
    tri = validate_config({"schema_version": 1, "experiment": "triaxial", "bed": {"d_min": 0.015},
                           "triaxial": {"width": 0.2}})
    assert bed_spec_from_config(tri).dims == (0.2, 0.2, 0.2)


def _world():
    rng = np.random.default_rng(0)
    w = SimWorld(SolverConfig(timestep=1e-4, pgs_iterations=30))
    w.set_container([0, 0, 0], [0.1, 0.1, 0.1])
    w.add_particles(rng.uniform(0, 0.1, (20, 3)), rng.uniform(0.009, 0.011, 20), layer_index=1)
    w.vel[:] = rng.normal(size=(20, 3))
    w.time = 0.123
    return w


def test_bed_round_trip_is_exact(tmp_path):
    w = _world()
    save_bed(w, tmp_path / "b.json.gz")
    back = load_bed(tmp_path / "b.json.gz")
    for name in ("pos", "vel", "diam", "quat", "omega", "layer"):
        assert np.array_equal(getattr(w, name), getattr(back, name))
    assert back.time == w.time and back.config == w.config
    assert bed_text(back) == bed_text(w)


def test_saved_bytes_are_reproducible(tmp_path):
    save_bed(_world(), tmp_path / "a.json.gz")
    save_bed(_world(), tmp_path / "b.json.gz")
    assert (tmp_path / "a.json.gz").read_bytes() == (tmp_path / "b.json.gz").read_bytes()


def test_series_csv_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    s = {"t": np.cumsum(rng.uniform(0, 1e-3, 50)), "x": rng.normal(size=50) * 1e-7,
         "n": np.arange(50)}
    write_series_csv(s, tmp_path / "s.csv")
    back = read_series_csv(tmp_path / "s.csv")
    assert list(back) == ["t", "x", "n"]
    for k in s:
        assert np.array_equal(back[k], s[k])


def test_write_outputs(tmp_path):
    cfg = validate_config(BASE)
    rec = RunRecord("a", cfg, config_hash(cfg), 0, metrics={"x": float("inf")})
    out = write_outputs(rec, tmp_path / "run", _world(), {"t": np.arange(3.0)})
    assert {p.name for p in out.iterdir()} == {"config.json", "bed.json.gz", "series.csv", "metrics.json",
                                              "report.json"}
    assert json.loads((out / "metrics.json").read_text()) == {"x": None}
    assert RunRecord.from_dict(json.loads((out / "report.json").read_text())).label == "a"
