import numpy as np
import pytest

from refinedem.bed import BedSpec, audit_bed, build_bed, expected_count, layer_bands
from refinedem.io import bed_text
from refinedem.planner import layer_schedule

DIMS = (0.06, 0.06, 0.04)


@pytest.fixture(scope="module")
def small_bed():
    return build_bed(BedSpec.uniform(DIMS, 0.01, rng_seed=3))


def test_small_bed_fills_and_settles(small_bed):
    w = small_bed
    assert w.n_particles == pytest.approx(expected_count(BedSpec.uniform(DIMS, 0.01)), rel=0.35)
    top = (w.pos[:, 2] + 0.5 * w.diam).max()
    assert top <= DIMS[2] + 0.01
    assert np.all(w.pos[:, :2] > 0) and np.all(w.pos[:, :2] < 0.06)
    assert float(np.abs(w.vel).max()) < 0.05


def test_diameters_stay_inside_jitter_band(small_bed):
    d = small_bed.diam
    assert d.min() >= 0.009 - 1e-12 and d.max() <= 0.011 + 1e-12


def test_audit_reports_density(small_bed):
    a = audit_bed(small_bed, 0.02, layer_schedule(0.01, 0.01, 1, 1), DIMS)
    assert 600 < a.mean_density < 1700
    assert a.max_overlap_ratio < 0.05
    assert a.n_particles == small_bed.n_particles
    with pytest.raises(Exception):
        audit_bed(small_bed, 0.001)


def test_build_is_deterministic(small_bed):
    again = build_bed(BedSpec.uniform(DIMS, 0.01, rng_seed=3))
    assert bed_text(again) == bed_text(small_bed)


def test_zero_height_container_is_empty():
    w = build_bed(BedSpec.uniform((0.1, 0.1, 0.0), 0.01))
    assert w.n_particles == 0


def test_layer_bands_stack_bottom_up():
    s = layer_schedule(0.01, 0.02, 1.5, 1.0)
    bands = layer_bands(s, 0.2)
    assert bands[-1][1] == pytest.approx(0.01)       # finest on top
    assert bands[-1][3] == pytest.approx(0.2)
    assert all(b[3] == pytest.approx(a[2]) for a, b in zip(bands[1:], bands[:-1]))
    assert bands[0][2] == pytest.approx(0.0)


def test_bad_spec_rejected():
    with pytest.raises(Exception):
        BedSpec.uniform((0.1, 0.1), 0.01)
    with pytest.raises(Exception):
        BedSpec.uniform((0.1, 0.1, 0.1), 0.01, size_jitter=0.5)
