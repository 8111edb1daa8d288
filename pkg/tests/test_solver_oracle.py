"""PGS against a brute-force MCP enumeration on small random contact sets."""
import numpy as np
import pytest

from mcp_oracle import solve_mcp
from refinedem.contacts import detect
from refinedem.core import FRICTIONLESS_WALL, Material, SimWorld, SolverConfig
from refinedem.solver import assemble, pgs_solve

N_INSTANCES = 200
REL_TOL = 1e-6


def random_cluster(rng, max_contacts=5):
    """1-3 spheres resting on a floor and on each other, with random velocities."""
    while True:
        mat = Material(density=2000.0, friction_coeff=rng.uniform(0.1, 0.8), rolling_coeff=rng.uniform(0.01, 0.2))
        cfg = SolverConfig(timestep=1e-2, pgs_iterations=1, friction_compliance=1e-3, rolling_compliance=0.5,
                           impact_pass=False)
        world = SimWorld(cfg, materials=[mat])
        floor = Material(friction_coeff=rng.uniform(0.1, 0.8), rolling_coeff=rng.uniform(0.0, 0.1))
        world.set_container([-5, -5, 0], [5, 5, 5], floor if rng.random() < 0.7 else FRICTIONLESS_WALL)
        n = int(rng.integers(1, 4))
        d = rng.uniform(0.05, 0.15, n)
        pos = [np.array([0.0, 0.0, 0.5 * d[0] - rng.uniform(1e-5, 1e-3)])]
        for i in range(1, n):
            j = int(rng.integers(0, i))
            u = rng.normal(size=3)
            u[2] = abs(u[2]) + 0.2
            u /= np.linalg.norm(u)
            pos.append(pos[j] + u * (0.5 * (d[i] + d[j]) - rng.uniform(1e-5, 1e-3)))
        world.add_particles(np.array(pos), d, velocities=rng.normal(scale=0.3, size=(n, 3)))
        world.omega[:] = rng.normal(scale=3.0, size=(n, 3))
        c = detect(world)
        if 1 <= len(c) <= max_contacts:
            return world, c


def solved_pair(seed):
    rng = np.random.default_rng(seed)
    world, contacts = random_cluster(rng)
    rows = assemble(world, contacts)
    rows.lam[:] = 0.0
    expect = solve_mcp(rows.copy())
    _, _, lam, _, rep = pgs_solve(rows, 20000, residual_exit=1e-14)
    return rows, lam, expect


@pytest.fixture(scope="module")
def solved():
    return [solved_pair(s) for s in range(N_INSTANCES)]


def test_oracle_finds_every_instance(solved):
    assert all(expect is not None for _, _, expect in solved)


def test_pgs_matches_enumeration(solved):
    worst = 0.0
    for rows, lam, expect in solved:
        scale = max(np.abs(expect).max(), 1e-12)
        worst = max(worst, np.abs(lam - expect).max() / scale)
    assert worst <= REL_TOL


def test_cone_conditions_hold(solved):
    for rows, lam, _ in solved:
        ln = lam[:, 0]
        assert np.all(ln >= 0)
        assert np.all(np.hypot(lam[:, 1], lam[:, 2]) <= rows.mu_t * ln * (1 + 1e-12) + 1e-9)
        assert np.all(np.hypot(lam[:, 3], lam[:, 4]) <= rows.rr * ln * (1 + 1e-12) + 1e-9)


def test_instances_cover_slip_and_separation(solved):
    """The random set exercises sticking, sliding and separating contacts."""
    slip = stick = apart = 0
    for rows, lam, _ in solved:
        ln = lam[:, 0]
        mag = np.hypot(lam[:, 1], lam[:, 2])
        apart += int((ln == 0).sum())
        on = ln > 0
        slip += int((np.isclose(mag[on], rows.mu_t[on] * ln[on], rtol=1e-6)).sum())
        stick += int((mag[on] < 0.99 * rows.mu_t[on] * ln[on]).sum())
    assert slip > 10 and stick > 10 and apart > 10
