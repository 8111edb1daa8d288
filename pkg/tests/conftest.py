import pytest

from refinedem.bed import build_bed
from refinedem.io import bed_spec_from_config, validate_config


def tiny_config(**bed):
    return validate_config({"schema_version": 1, "experiment": "plate", "preset": "tiny",
                            "bed": dict({"d_min": 0.01}, **bed)})


@pytest.fixture(scope="session")
def tiny_bed():
    return build_bed(bed_spec_from_config(tiny_config()))


@pytest.fixture(scope="session")
def tiny_plate(tiny_bed):
    from refinedem.experiments.plate import PlateTestConfig, run_plate_test
    cfg = PlateTestConfig.preset_config("tiny")
    series, metrics, world = run_plate_test(tiny_bed, cfg)
    return cfg, series, metrics, world


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE = {}


def record_criterion(key: str, ok, detail: str) -> None:
    status = {True: "PASS", False: "FAIL"}.get(ok, ok)
    ACCEPTANCE[key] = f"criterion {key}: {status}  {detail}"
    print(ACCEPTANCE[key])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.rstrip("abc")), k)):
        terminalreporter.write_line(ACCEPTANCE[key])
