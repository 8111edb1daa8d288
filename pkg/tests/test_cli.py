import json

import pytest

from refinedem.cli import EXIT_FAULT, EXIT_INVALID, EXIT_OK, main


def test_plan_prints_estimate(capsys):
    assert main(["plan", "--preset", "desk"]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["expected_particle_count"] > 0 and out["n_iterations"] > 0


def test_bad_config_exits_2(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"schema_version": 1, "experiment": "plate", "bed": {"d_min": -1}}))
    assert main(["plan", "--config", str(p)]) == EXIT_INVALID
    assert "/bed/d_min" in capsys.readouterr().err


def test_batch_requires_matrix(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"schema_version": 1, "experiment": "plate", "bed": {"d_min": 0.01}}))
    assert main(["batch", "--config", str(p)]) == EXIT_INVALID
    assert main(["batch"]) == EXIT_INVALID


def test_analyze_empty_dir_exits_2(tmp_path):
    assert main(["analyze", "--out", str(tmp_path)]) == EXIT_INVALID


def test_unknown_command_is_a_usage_error():
    with pytest.raises(SystemExit):
        main(["nope"])


@pytest.mark.slow
def test_zero_load_plate_exits_3(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"schema_version": 1, "experiment": "plate", "preset": "tiny",
                             "bed": {"d_min": 0.01}, "plate": {"normal_load": 0.0}}))
    assert main(["run-plate", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_FAULT
