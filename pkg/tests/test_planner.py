
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from refinedem.errors import InvalidParameter
from refinedem.planner import (HORIZONTAL, RefinementProfile, contact_network_length, expected_particle_count,
                               gamma_from_ratio, layer_schedule, plan, planned_timestep, profile_eval,
                               ratio_from_gamma, schedule_from_profile, solver_iterations)

PAPER_BED = (1.5, 0.17, 0.6)


def test_profile_values():
    p = RefinementProfile(0.0085, 0.030, 0.05)
    assert profile_eval(p, 0.0) == 0.0085
    assert profile_eval(p, 0.1) == pytest.approx(0.0135)
    assert p.z_max == pytest.approx(0.43)
    assert profile_eval(p, 0.5) == 0.030


def test_profile_rejects_negative_depth_and_bad_gamma():
    p = RefinementProfile(0.0085, 0.030, 0.05)
    with pytest.raises(InvalidParameter):
        profile_eval(p, -1e-3)
    with pytest.raises(InvalidParameter):
        RefinementProfile(0.01, 0.02, 0.0)
    with pytest.raises(InvalidParameter):
        RefinementProfile(0.01, 0.01, 0.1)


def test_uniform_profile_is_constant():
    p = RefinementProfile.uniform(0.015)
    assert all(profile_eval(p, z) == 0.015 for z in (0.0, 0.3, 10.0))


def test_layer_schedule_example():
    s = layer_schedule(0.0085, 0.030, 1.2, 1.0)
    expect = [8.5, 10.2, 12.24, 14.688, 17.6256, 21.15072, 25.380864, 30.0]
    assert np.allclose(np.array(s.diameters) * 1e3, expect)
    assert s.layers[-1].clamped and not s.layers[-2].clamped
    assert s.depths[0] == pytest.approx(0.0085)
    assert s.depths[1] == pytest.approx(0.0187)
    assert s.gamma == pytest.approx(1 / 6)


def test_uniform_schedule_has_one_layer():
    s = layer_schedule(0.015, 0.015, 1.0, 1.0)
    assert len(s.layers) == 1 and s.gamma == 0.0 and s.is_uniform


def test_gamma_formula_and_inverse():
    assert gamma_from_ratio(1.5, 2.0) == pytest.approx(0.5 / 3)
    assert ratio_from_gamma(gamma_from_ratio(1.1, 1.3), 1.3) == pytest.approx(1.1)


def test_layer_schedule_errors():
    with pytest.raises(InvalidParameter):
        layer_schedule(0.01, 0.02, 0.9, 1.0)
    with pytest.raises(InvalidParameter):
        layer_schedule(0.02, 0.01, 1.2, 1.0)
    with pytest.raises(InvalidParameter):
        layer_schedule(0.01, 0.02, 1.2, 0.5)


def test_contact_network_length_examples():
    assert contact_network_length(RefinementProfile.uniform(0.0085), 0.6) == pytest.approx(70.588, abs=1e-3)
    p = RefinementProfile(0.0085, 0.030, gamma_from_ratio(1.1, 1.0))
    n_d = contact_network_length(p, 0.6, 1.1, 1.0)
    assert n_d == pytest.approx(25.35, abs=0.05)
    assert p.z_max == pytest.approx(0.2365, abs=1e-4)


def test_contact_network_length_uniform_limit():
    h = 0.6
    for d_max in (0.01501, 0.015001):
        p = RefinementProfile(0.015, d_max, gamma_from_ratio(1.5, 1.0))
        assert contact_network_length(p, h, 1.5, 1.0) == pytest.approx(h / 0.015, rel=2e-3)


def test_contact_network_length_shallow_bed_is_truncated():
    p = RefinementProfile(0.0085, 0.030, gamma_from_ratio(1.1, 1.0))
    full = contact_network_length(p, 0.6, 1.1, 1.0)
    shallow = contact_network_length(p, 0.05, 1.1, 1.0)
    assert 0 < shallow < full


def test_solver_iterations():
    assert solver_iterations(70.588, 0.02) == 353
    assert solver_iterations(20, 0.02) == 100
    assert solver_iterations(1, 10.0) == 1


def test_planned_timestep_values():
    assert planned_timestep(0.0085, 0.02, 2200, 50e3) == pytest.approx(0.103e-3, rel=5e-3)
    assert planned_timestep(0.030, 0.02, 2200, 50e3) == pytest.approx(0.363e-3, rel=5e-3)
    assert planned_timestep(0.01, 0.02, 2200, 4 * 50e3) == pytest.approx(0.5 * planned_timestep(0.01, 0.02, 2200, 50e3))


def test_expected_counts_and_empty_bed():
    s = layer_schedule(0.0085, 0.0085, 1.0, 1.0)
    assert expected_particle_count(PAPER_BED, s).expected_particle_count == pytest.approx(303e3, rel=0.02)
    s30 = layer_schedule(0.030, 0.030, 1.0, 1.0)
    assert expected_particle_count(PAPER_BED, s30).expected_particle_count == pytest.approx(6.9e3, rel=0.02)
    assert expected_particle_count((1.5, 0.0, 0.6), s).expected_particle_count == 0


def test_truncated_schedule_warns():
    s = layer_schedule(0.0085, 0.030, 1.05, 1.0)
    with pytest.warns(UserWarning):
        est = expected_particle_count((0.3, 0.1, 0.1), s)
    assert est.truncated


def test_refined_count_between_uniform_bounds():
    fine = expected_particle_count(PAPER_BED, layer_schedule(0.0085, 0.0085, 1, 1)).expected_particle_count
    coarse = expected_particle_count(PAPER_BED, layer_schedule(0.030, 0.030, 1, 1)).expected_particle_count
    mid = expected_particle_count(PAPER_BED, layer_schedule(0.0085, 0.030, 1.2, 1)).expected_particle_count
    assert coarse < mid < fine


def test_mild_refinement_reduction():
    # gamma = 0.012 with d_max = 15 mm at paper scale
    est = plan(PAPER_BED, RefinementProfile(0.0085, 0.015, 0.012))
    assert est.reduction_factor == pytest.approx(2.3, abs=0.15)


def test_plan_iteration_ratio():
    ref = plan(PAPER_BED, RefinementProfile.uniform(0.0085))
    ref_prof = RefinementProfile(0.0085, 0.030, gamma_from_ratio(1.1, 1.0))
    est = plan(PAPER_BED, ref_prof, eta=1.0)
    assert est.n_d / ref.n_d == pytest.approx(0.36, abs=0.01)


def test_horizontal_gradient_uses_length_as_depth():
    prof = RefinementProfile(0.01, 0.02, gamma_from_ratio(1.2, 1.0), HORIZONTAL)
    sched = schedule_from_profile(prof)
    est = expected_particle_count((0.3, 0.3, 0.3), sched, gradient_axis=HORIZONTAL)
    assert est.expected_particle_count > 0


# ---- properties -------------------------------------------------------------

ratios = st.floats(1.01, 4.0)
etas = st.floats(1.0, 5.0)


@given(ratios, etas)
def test_gamma_round_trip(r, eta):
    assert ratio_from_gamma(gamma_from_ratio(r, eta), eta) == pytest.approx(r, rel=1e-12)


@settings(max_examples=50)
@given(st.floats(0.002, 0.02), st.floats(1.2, 10.0), ratios, etas)
def test_schedule_monotone_and_clamped(d0, span, r, eta):
    s = layer_schedule(d0, d0 * span, r, eta)
    d = np.array(s.diameters)
    assert np.all(np.diff(d) > 0)
    assert d[-1] == pytest.approx(d0 * span)
    assert np.allclose([L.thickness for L in s.layers], eta * d)
    assert np.all(np.diff(s.depths) > 0)


@settings(max_examples=50)
@given(st.floats(0.005, 0.03), st.floats(1e3, 1e6), st.floats(0.001, 0.1))
def test_timestep_scaling(d, sigma, eps):
    h = planned_timestep(d, eps, 2200, sigma)
    assert planned_timestep(2 * d, eps, 2200, sigma) == pytest.approx(2 * h)
    assert planned_timestep(d, 4 * eps, 2200, sigma) == pytest.approx(2 * h)


@settings(max_examples=30)
@given(st.floats(0.005, 0.012), st.floats(1.5, 4.0), st.floats(1.05, 2.0))
def test_refined_bed_needs_fewer_particles_and_iterations(d0, span, r):
    dims = (0.6, 0.2, 0.4)
    uni = plan(dims, RefinementProfile.uniform(d0))
    ref = plan(dims, RefinementProfile(d0, d0 * span, gamma_from_ratio(r, 1.0)), 1.0)
    assert ref.expected_particle_count < uni.expected_particle_count
    assert ref.n_d <= uni.n_d
