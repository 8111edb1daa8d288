"""Consolidated drained box triaxial test and Mohr-Coulomb fitting.

The sample sits between six frictionless plane walls.  The three walls at
the low faces stay fixed; the three high-face walls are servo-driven
tools.  Consolidation drives all three servos to ``sigma3``; shear then
moves the top wall down at a fixed rate while the two side servos keep
``sigma3``.  Gravity is off by default so the confinement is uniform.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..core import FRICTIONLESS_WALL, SimWorld, SolverConfig, Plane, RigidTool, locked, velocity_driven
from ..errors import ExperimentFault, InvalidParameter, SingularFit
from ..planner import planned_timestep, solver_iterations
from ..solver import step


@dataclass
class TriaxialConfig:
    width: float = 0.3
    confining_stresses: tuple = (5e3, 15e3, 25e3)
    axial_rate: float = 5e-3              # m/s
    max_strain: float = 0.15
    repetitions: int = 1
    consolidation_time: float = 1.0       # s, upper bound for reaching sigma3
    hold_time: float = 0.1                # s within 2 % before shearing
    servo_gain: float = 3e-6              # m/(s Pa), proportional
    servo_integral_gain: float = 2e-4     # m/(s^2 Pa); removes the steady lag of a moving wall
    servo_speed_limit: float = 0.05       # m/s
    servo_feedforward: bool = True        # side walls follow an isochoric estimate during shear
    gravity: bool = False
    timestep: Optional[float] = None
    pgs_iterations: Optional[int] = None
    error_tolerance: float = 0.02
    planning_stress: Optional[float] = None
    peak_window: float = 0.05             # s, smoothing before peak detection
    control_window: float = 0.002         # s, smoothing of the servo stress signal
    fault_window: float = 0.5             # s of > 5 % error before giving up
    record_every: int = 1

    def __post_init__(self):
        self.confining_stresses = tuple(float(s) for s in self.confining_stresses)
        if not self.confining_stresses or min(self.confining_stresses) <= 0:
            raise InvalidParameter("confining stresses must be positive")
        if not self.axial_rate > 0:
            raise InvalidParameter("axial rate must be positive")
        if not 0 < self.max_strain < 1:
            raise InvalidParameter("max strain must lie in (0, 1)")


@dataclass
class TriaxialRun:
    sigma3: float
    series: dict                           # column -> np.ndarray
    peak_dev: float
    peak_strain: float
    consolidation_time: float
    max_tracking_error: float              # max |sigma_side - sigma3| / sigma3 during shear, peak-window smoothed


@dataclass
class TriaxialResult:
    runs: list
    peaks: list                            # (sigma3, sigma1_peak) per run
    friction_angle: float                  # degrees
    cohesion: float                        # Pa
    spread: float = 0.0                    # std of per-repetition angles, degrees

    def summary(self) -> dict:
        return {"friction_angle": self.friction_angle, "cohesion": self.cohesion, "spread": self.spread,
                "peaks": [list(p) for p in self.peaks],
                "peak_dev": [r.peak_dev for r in self.runs]}


def mohr_coulomb_fit(peaks: Sequence) -> tuple[float, float]:
    """Least-squares line through ``p = (s1+s3)/2``, ``q = (s1-s3)/2``.

    Returns ``(phi_deg, c)`` with ``sin(phi)`` the slope and ``c`` the
    intercept divided by ``cos(phi)``.
    """
    arr = np.asarray(peaks, dtype=float).reshape(-1, 2)
    s3, s1 = arr[:, 0], arr[:, 1]
    if len(np.unique(s3)) < 2:
        raise SingularFit("need at least two distinct confining stresses")
    p = 0.5 * (s1 + s3)
    q = 0.5 * (s1 - s3)
    slope, intercept = np.polyfit(p, q, 1)
    if not -1 < slope < 1:
        raise SingularFit(f"q-p slope {slope:.3f} is not a valid sin(phi)")
    phi = math.asin(slope)
    return math.degrees(phi), float(intercept / math.cos(phi))


def moving_average(x: np.ndarray, n: int) -> np.ndarray:
    """Trailing mean over ``n`` samples (shorter at the start)."""
    x = np.asarray(x, dtype=float)
    if n <= 1 or len(x) == 0:
        return x.copy()
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - n, 0)
    return (c[idx] - c[lo]) / (idx - lo)


# wall order: x-lo, x-hi, y-lo, y-hi, z-lo, z-hi
def _install_walls(world: SimWorld):
    lo = np.zeros(3)
    top = float((world.pos[:, 2] + 0.5 * world.diam).max())
    hi = np.array([world.bounds_hi[0], world.bounds_hi[1], top])
    world.walls = []
    world.tools = []
    walls = []
    for axis in range(3):
        for side, face in ((0, lo), (1, hi)):
            n = np.zeros(3)
            n[axis] = 1.0 if side == 0 else -1.0
            pos = np.zeros(3)
            pos[axis] = face[axis]
            tool = RigidTool(id=len(walls), position=pos, planes=[Plane(n, np.zeros(3), FRICTIONLESS_WALL)],
                             mass=1.0, dofs=(locked(), locked(), locked()), material=FRICTIONLESS_WALL)
            walls.append(world.add_tool(tool))
    return walls


class WallServo:
    """PI law for the high-face walls; positive output moves a wall outward (+axis)."""

    def __init__(self, kp: float, ki: float, limit: float):
        self.kp, self.ki, self.limit = kp, ki, limit
        self.integral = np.zeros(3)

    def __call__(self, axis: int, error: float, dt: float, feedforward: float = 0.0) -> float:
        # error = target - measured; under-stressed walls move inward
        if self.ki > 0:
            cap = self.limit / self.ki
            self.integral[axis] = float(np.clip(self.integral[axis] + error * dt, -cap, cap))
        u = -(self.kp * error + self.ki * self.integral[axis]) + feedforward
        return float(np.clip(u, -self.limit, self.limit))


def _extent(walls, axis):
    return walls[2 * axis + 1].position[axis] - walls[2 * axis].position[axis]


def _stresses(walls):
    """Compressive stress on the three high-face walls (x, y, z)."""
    lx, ly, lz = (_extent(walls, k) for k in range(3))
    area = (ly * lz, lx * lz, lx * ly)
    return np.array([walls[2 * k + 1].contact_force[k] / area[k] for k in range(3)])


def prepare_world(bed: SimWorld, config: TriaxialConfig, sigma3: float) -> SimWorld:
    world = bed.copy()
    d_min = float(world.diam.min()) if world.n_particles else 0.01
    d_max = float(world.diam.max()) if world.n_particles else 0.01
    rho = world.materials[0].density
    s_plan = config.planning_stress or 4.0 * sigma3
    h = config.timestep or planned_timestep(d_min, config.error_tolerance, rho, s_plan)
    n_it = config.pgs_iterations or solver_iterations(config.width / d_max, config.error_tolerance)
    old = world.config
    world.config = SolverConfig(timestep=h, pgs_iterations=n_it, error_tolerance=config.error_tolerance,
                                damping_factor=old.damping_factor, hertz_exponent=old.hertz_exponent,
                                rolling_diameter=old.rolling_diameter)
    if not config.gravity:
        world.gravity = np.zeros(3)
    world.vel[:] = 0.0
    world.omega[:] = 0.0
    world.contacts = None
    world.time = 0.0
    return world


def run_single(bed: SimWorld, config: TriaxialConfig, sigma3: float, progress=None) -> TriaxialRun:
    world = prepare_world(bed, config, sigma3)
    walls = _install_walls(world)
    h = world.config.timestep
    n_ctrl = max(1, int(round(config.control_window / h)))
    hist = []
    # proportional only while consolidating; the integral would wind up on the initial full-scale error
    law = WallServo(config.servo_gain, 0.0, config.servo_speed_limit)
    ff = np.zeros(3)

    def servo(axes, target):
        s = np.mean(hist[-n_ctrl:], axis=0)
        for k in axes:
            walls[2 * k + 1].set_dof(k, velocity_driven(law(k, target - s[k], h, ff[k])))
        return s

    # consolidation
    hist.append(np.zeros(3))
    held = 0.0
    n_max = int(config.consolidation_time / h)
    t_cons = None
    for i in range(n_max):
        s = servo((0, 1, 2), sigma3)
        step(world)
        hist.append(_stresses(walls))
        if np.all(np.abs(s / sigma3 - 1) <= 0.02):
            held += h
            if held >= config.hold_time:
                t_cons = world.time
                break
        else:
            held = 0.0
    if t_cons is None:
        raise ExperimentFault(f"servo did not reach sigma3 = {sigma3:g} Pa within {config.consolidation_time} s",
                              {"stress": np.mean(hist[-n_ctrl:], axis=0).tolist(), "time": world.time})
    if progress:
        progress(f"sigma3={sigma3:g}: consolidated at t={t_cons:.3f}s, n={world.n_particles}")

    # shear
    H0 = _extent(walls, 2)
    walls[5].set_dof(2, velocity_driven(-config.axial_rate))
    law.ki = config.servo_integral_gain
    if config.servo_feedforward:
        # constant volume: each lateral extent grows at half the axial strain rate
        for k in (0, 1):
            ff[k] = 0.5 * config.axial_rate * _extent(walls, k) / H0
    rec = {k: [] for k in ("t", "strain", "sigma1", "sigma2", "sigma3", "sigma_dev")}
    over = 0.0
    i = 0
    while True:
        s = servo((0, 1), sigma3)
        step(world)
        hist.append(_stresses(walls))
        strain = (H0 - _extent(walls, 2)) / H0
        err = float(np.max(np.abs(s[:2] / sigma3 - 1)))
        over = over + h if err > 0.05 else 0.0
        if over > config.fault_window:
            raise ExperimentFault("sidewall stress error above 5 % for too long",
                                  {"time": world.time, "strain": strain, "stress": s.tolist()})
        if i % config.record_every == 0:
            raw = hist[-1]
            rec["t"].append(world.time)
            rec["strain"].append(strain)
            rec["sigma1"].append(raw[2])
            rec["sigma2"].append(raw[1])
            rec["sigma3"].append(raw[0])
            rec["sigma_dev"].append(raw[2] - 0.5 * (raw[0] + raw[1]))
        i += 1
        if strain >= config.max_strain:
            break
        if progress and i % 2000 == 0:
            progress(f"sigma3={sigma3:g}: strain={strain:.4f} sigma1={np.mean([r for r in rec['sigma1'][-200:]]):.0f}")
    series = {k: np.asarray(v) for k, v in rec.items()}
    n_pk = max(1, int(round(config.peak_window / (h * config.record_every))))
    smooth = moving_average(series["sigma_dev"], n_pk)
    j = int(np.argmax(smooth))
    # tracking error on the same smoothing as the peak, once a full window of shear exists
    side = np.stack([moving_average(series[k], n_pk)[n_pk:] for k in ("sigma2", "sigma3")])
    max_err = float(np.abs(side / sigma3 - 1).max()) if side.size else 0.0
    return TriaxialRun(sigma3, series, float(smooth[j]), float(series["strain"][j]), float(t_cons), max_err)


def run_triaxial(world, config: TriaxialConfig, progress=None) -> TriaxialResult:
    """Run every confinement on a copy of the bed.

    ``world`` may be a list of beds, one per repetition (different seeds);
    the angle spread is then reported across repetitions.
    """
    beds = list(world) if isinstance(world, (list, tuple)) else [world]
    runs = []
    per_rep = []
    for bed in beds:
        rep = []
        for s3 in config.confining_stresses:
            r = run_single(bed, config, s3, progress)
            runs.append(r)
            rep.append((s3, s3 + r.peak_dev))
        per_rep.append(rep)
    peaks = [p for rep in per_rep for p in rep]
    phi, c = mohr_coulomb_fit(peaks)
    spread = 0.0
    if len(per_rep) > 1:
        spread = float(np.std([mohr_coulomb_fit(rep)[0] for rep in per_rep]))
    return TriaxialResult(runs, peaks, phi, c, spread)
