import math

import numpy as np
import pytest

from refinedem.core import (FRICTIONLESS_WALL, SAND, Box, Material, Particle, RigidTool, SimWorld, SolverConfig,
                            effective_contact_params, effective_diameter, effective_modulus, force_driven, locked,
                            particle_mass_inertia, velocity_driven)
from refinedem.errors import InvalidParameter


def test_mass_examples():
    assert particle_mass_inertia(0.0085, 2200)[0] == pytest.approx(7.074e-4, rel=1e-3)
    assert particle_mass_inertia(0.030, 2200)[0] == pytest.approx(3.110e-2, rel=1e-3)
    m, inertia = particle_mass_inertia(1.0, 6 / math.pi)
    assert m == pytest.approx(1.0) and inertia == pytest.approx(0.1)


def test_mass_rejects_bad_input():
    with pytest.raises(InvalidParameter):
        particle_mass_inertia(0.0, 2200)
    with pytest.raises(InvalidParameter):
        particle_mass_inertia(0.01, -1.0)


def _p(d, mat=SAND):
    return Particle(0, np.zeros(3), np.zeros(3), np.zeros(3), d, 0, mat)


def test_contact_params_example():
    c = effective_contact_params(_p(0.0085), _p(0.0085))
    assert c.E_star == pytest.approx(5.115e8, rel=1e-3)
    assert c.d_star == pytest.approx(4.25e-3)
    assert c.k_n == pytest.approx(1.112e7, rel=1e-3)
    assert c.eps_n == pytest.approx(1.125e-7, rel=1e-3)


def test_contact_params_against_flat_tool():
    tool = RigidTool(0, np.zeros(3), material=SAND)
    c = effective_contact_params(_p(0.0085), tool)
    assert c.d_star == pytest.approx(0.0085)


def test_identical_materials_modulus():
    assert effective_modulus(1e9, 0.15, 1e9, 0.15) == pytest.approx(1e9 / (2 * (1 - 0.15 ** 2)))
    assert effective_diameter(0.01, math.inf) == 0.01


def test_material_validation():
    with pytest.raises(InvalidParameter):
        Material(poisson_ratio=0.5)
    with pytest.raises(InvalidParameter):
        Material(friction_coeff=-0.1)


def test_solver_config_validation():
    with pytest.raises(InvalidParameter):
        SolverConfig(timestep=0)
    with pytest.raises(InvalidParameter):
        SolverConfig(pgs_iterations=0)
    with pytest.raises(InvalidParameter):
        SolverConfig(hertz_exponent=1.5)
    assert SolverConfig(timestep=1e-3).impact_threshold(9.81) == pytest.approx(2 * 9.81 * 1e-3 * 10)


def test_world_particle_storage():
    w = SimWorld()
    ids = w.add_particles([[0, 0, 0.1], [0, 0, 0.2]], 0.01)
    assert list(ids) == [0, 1] and w.n_particles == 2
    w.remove_particles([True, False])
    assert list(w.ids) == [1]
    assert w.particle(0).diameter == 0.01
    with pytest.raises(InvalidParameter):
        w.add_particles([[0, 0, 0]], -1.0)


def test_container_walls():
    w = SimWorld()
    w.set_container([0, 0, 0], [1, 1, 1])
    assert len(w.walls) == 5
    w.set_container([0, 0, 0], [1, 1, 1], top=True)
    assert len(w.walls) == 6
    assert all(p.material == FRICTIONLESS_WALL for p in w.walls)


def test_tool_dofs_and_bounds():
    t = RigidTool(0, [1.0, 0, 0], boxes=[Box([-0.1, 0, 0], [0.1, 0.2, 0.05])], mass=2.0)
    t.set_dof(0, velocity_driven(0.1))
    t.set_dof(2, force_driven(-5.0))
    assert t.dofs[0].kinematic and t.dofs[1].mode == locked().mode
    lo, hi = t.bounds()
    assert np.allclose(lo, [0.9, 0, 0]) and np.allclose(hi, [1.1, 0.2, 0.05])
    assert velocity_driven(0.1, -10.0, 10.0).motor
    with pytest.raises(InvalidParameter):
        RigidTool(0, np.zeros(3), mass=0.0)
