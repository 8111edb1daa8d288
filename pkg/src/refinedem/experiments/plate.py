"""Combined pressure-sinkage / shear-displacement test with a grouser plate.

Phase I loads the plate vertically (force-driven, linear ramp, then hold)
with the horizontal axis locked.  From ``t_I_end`` the horizontal axis is
kinematic: the commanded speed ramps linearly to ``shear_speed`` and holds.
Phase II is the window up to ``t_II_end`` (peak traction), phase III the
rest of the run.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from ..core import Box, SimWorld, SolverConfig, RigidTool, force_driven, locked, velocity_driven
from ..errors import ExperimentFault, InvalidInput, InvalidParameter
from ..planner import planned_timestep
from ..solver import step

SERIES_COLUMNS = ("t", "sinkage_m", "F_N_applied", "F_N_measured", "F_T", "traction", "plate_x",
                  "n_contacts", "pgs_residual", "ke_total")


@dataclass
class PlateTestConfig:
    container: tuple = (1.5, 0.17, 0.6)
    plate_length: float = 0.3
    plate_thickness: float = 0.02
    grouser_depth: float = 0.043
    grouser_length: float = 0.0255
    n_grousers: int = 4
    grouser_pitch: float = 0.075
    normal_load: float = 2550.0            # N
    shear_speed: float = 0.1               # m/s
    shear_ramp: float = 0.1                # s
    load_ramp: float = 0.5                 # s
    t_I_end: float = 2.5
    t_II_end: float = 3.0
    t_end: float = 5.4
    plate_mass: float = 5.0                # kg
    plate_start: float = 0.25              # plate centre at this fraction of the container length
    stress_for_timestep: float = 50e3      # Pa
    error_tolerance: float = 0.02
    timestep: Optional[float] = None
    pgs_iterations: Optional[int] = None
    sinkage_window: float = 0.1            # s, averaging window of both sinkage metrics
    traction_window: float = 0.025         # s, smoothing before peak traction
    contact_loss_window: float = 0.2       # s without normal contact force before giving up
    record_every: int = 1
    preset: str = "custom"

    def __post_init__(self):
        self.container = tuple(float(x) for x in self.container)
        if not (0 < self.t_I_end < self.t_II_end < self.t_end):
            raise InvalidParameter("phase times must increase: 0 < t_I_end < t_II_end < t_end")
        if self.n_grousers < 0 or self.grouser_depth < 0 or self.grouser_length < 0:
            raise InvalidParameter("grouser dimensions must be non-negative")
        if self.n_grousers:
            span = (self.n_grousers - 1) * self.grouser_pitch + self.grouser_length
            if span > self.plate_length + 1e-12:
                raise InvalidParameter("grousers do not fit on the plate")
        if self.normal_load < 0:
            raise InvalidParameter("normal load must be non-negative")

    @classmethod
    def preset_config(cls, name: str, **kw) -> "PlateTestConfig":
        if name not in PRESETS:
            raise InvalidParameter(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return replace(PRESETS[name], **kw)

    def grouser_centres(self) -> np.ndarray:
        if not self.n_grousers:
            return np.zeros(0)
        return (np.arange(self.n_grousers) - 0.5 * (self.n_grousers - 1)) * self.grouser_pitch


PRESETS = {
    "paper": PlateTestConfig(preset="paper"),
    "desk": PlateTestConfig(container=(0.75, 0.12, 0.4), plate_length=0.15, grouser_depth=0.0215,
                            grouser_length=0.01275, n_grousers=2, grouser_pitch=0.075,
                            normal_load=50e3 * 0.15 * 0.12, t_I_end=1.5, t_II_end=2.0, t_end=3.5,
                            preset="desk"),
    "tiny": PlateTestConfig(container=(0.2, 0.04, 0.08), plate_length=0.08, plate_thickness=0.01,
                            grouser_depth=0.01, grouser_length=0.006, n_grousers=2, grouser_pitch=0.04,
                            normal_load=2e3 * 0.08 * 0.04, load_ramp=0.08, shear_ramp=0.03, t_I_end=0.2,
                            t_II_end=0.3, t_end=0.5, plate_mass=0.5, sinkage_window=0.04,
                            traction_window=0.01, preset="tiny"),
}


@dataclass
class PlateMetrics:
    static_sinkage: float
    dynamic_sinkage: float
    peak_traction: float
    avg_traction: float
    dynamic_sinkage_growth: float = 0.0    # dynamic minus static

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def make_plate(config: PlateTestConfig, world: SimWorld) -> RigidTool:
    """Plate tool with grouser tips at the highest particle top under its footprint."""
    L, W, _ = config.container
    margin = 0.05 * W + (float(world.diam.max()) if world.n_particles else 0.01)
    hl = 0.5 * config.plate_length
    hg = config.grouser_depth
    boxes = [Box([-hl, -margin, hg], [hl, W + margin, hg + config.plate_thickness])]
    for xc in config.grouser_centres():
        boxes.append(Box([xc - 0.5 * config.grouser_length, -margin, 0.0],
                         [xc + 0.5 * config.grouser_length, W + margin, hg]))
    x0 = max(config.plate_start * L, hl + 0.01)
    under = np.abs(world.pos[:, 0] - x0) <= hl
    tops = world.pos[under, 2] + 0.5 * world.diam[under]
    z0 = float(tops.max()) if len(tops) else 0.0
    return RigidTool(id=0, position=np.array([x0, 0.0, z0]), boxes=boxes, mass=config.plate_mass,
                     dofs=(locked(), locked(), force_driven(0.0)), material=world.materials[0])


def surface_datum(world: SimWorld, x0: float, half_length: float) -> float:
    """Mean top of the highest particles under the plate footprint (2 cm columns)."""
    under = np.abs(world.pos[:, 0] - x0) <= half_length
    if not under.any():
        return 0.0
    top = world.pos[under, 2] + 0.5 * world.diam[under]
    col = np.floor((world.pos[under, 0] - (x0 - half_length)) / 0.02).astype(int)
    row = np.floor(world.pos[under, 1] / 0.02).astype(int)
    keys = col * 100000 + row
    best = {}
    for k, z in zip(keys.tolist(), top.tolist()):
        if z > best.get(k, -np.inf):
            best[k] = z
    return float(np.mean(list(best.values())))


def commanded_speed(config: PlateTestConfig, t: float) -> float:
    if t < config.t_I_end:
        return 0.0
    return config.shear_speed * min((t - config.t_I_end) / config.shear_ramp, 1.0)


def commanded_displacement(config: PlateTestConfig, t) -> np.ndarray:
    """Integral of :func:`commanded_speed` from ``t_I_end``."""
    s = np.clip(np.asarray(t, float) - config.t_I_end, 0.0, None)
    r = config.shear_ramp
    return config.shear_speed * np.where(s < r, 0.5 * s * s / r, s - 0.5 * r)


def prepare_world(bed: SimWorld, config: PlateTestConfig) -> SimWorld:
    world = bed.copy()
    d_min = float(world.diam.min())
    rho = world.materials[0].density
    h = config.timestep or planned_timestep(d_min, config.error_tolerance, rho, config.stress_for_timestep)
    old = world.config
    n_it = config.pgs_iterations or old.pgs_iterations
    world.config = SolverConfig(timestep=h, pgs_iterations=n_it, error_tolerance=config.error_tolerance,
                                damping_factor=old.damping_factor, hertz_exponent=old.hertz_exponent,
                                rolling_diameter=old.rolling_diameter)
    world.vel[:] = 0.0
    world.omega[:] = 0.0
    world.contacts = None
    world.time = 0.0
    return world


def run_plate_test(bed: SimWorld, config: PlateTestConfig, progress=None):
    """Returns ``(series, metrics, world)``; ``series`` maps column name to array."""
    if config.normal_load <= 0:
        raise ExperimentFault("normal load is zero: traction coefficient is undefined",
                              {"normal_load": config.normal_load})
    world = prepare_world(bed, config)
    plate = world.add_tool(make_plate(config, world))
    datum = surface_datum(world, plate.position[0], 0.5 * config.plate_length)
    h = world.config.timestep
    n_steps = int(math.ceil(config.t_end / h - 1e-9))
    rec = {k: [] for k in SERIES_COLUMNS}
    lost = 0.0
    x_start = plate.position[0]
    for i in range(n_steps):
        t = world.time
        F = config.normal_load * min(t / config.load_ramp, 1.0) if config.load_ramp > 0 else config.normal_load
        plate.set_dof(2, force_driven(-F))
        if t >= config.t_I_end - 0.5 * h:
            # kinematic: the plate follows the commanded profile exactly
            plate.set_dof(0, velocity_driven(
                float((commanded_displacement(config, t + h) - commanded_displacement(config, t)) / h)))
        rep = step(world)
        fz = plate.contact_force[2]
        if world.time > config.t_I_end and fz <= 0.0:
            lost += h
            if lost > config.contact_loss_window:
                raise ExperimentFault("plate lost contact with the bed", {"time": world.time})
        else:
            lost = 0.0
        if i % config.record_every == 0 or i == n_steps - 1:
            ke = float(world.kinetic_energy().sum())
            rec["t"].append(world.time)
            rec["sinkage_m"].append(datum - plate.position[2])
            rec["F_N_applied"].append(F)
            rec["F_N_measured"].append(fz)
            rec["F_T"].append(-plate.contact_force[0])
            rec["traction"].append(-plate.contact_force[0] / config.normal_load)
            rec["plate_x"].append(plate.position[0] - x_start)
            rec["n_contacts"].append(plate.n_contacts)
            rec["pgs_residual"].append(rep.residual_max)
            rec["ke_total"].append(ke)
        if progress and i % 2000 == 0:
            progress(f"t={world.time:.3f}s sinkage={1e3 * (datum - plate.position[2]):.2f}mm "
                     f"F_T={-plate.contact_force[0]:.1f}N")
    series = {k: np.asarray(v, dtype=float) for k, v in rec.items()}
    return series, extract_metrics(series, config), world


_trapezoid = getattr(np, "trapezoid", None) or np.trapz  # numpy < 2 only has trapz


def _window_mean(t, y, t0, t1) -> float:
    """Trapezoidal mean of the piecewise-linear signal over ``[t0, t1]``."""
    inner = (t > t0) & (t < t1)
    tt = np.concatenate([[t0], t[inner], [t1]])
    yy = np.concatenate([[np.interp(t0, t, y)], y[inner], [np.interp(t1, t, y)]])
    return float(_trapezoid(yy, tt) / (t1 - t0)) if t1 > t0 else float(yy[0])


def _trailing_mean(t, y, window):
    """Trailing trapezoidal mean over ``window`` seconds at every sample time."""
    t = np.asarray(t, float)
    y = np.asarray(y, float)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(t))])
    lo = np.maximum(t - window, t[0])

    def integral(x):
        k = np.clip(np.searchsorted(t, x, side="right") - 1, 0, len(t) - 1)
        k2 = np.minimum(k + 1, len(t) - 1)
        dt = np.where(k2 > k, t[k2] - t[k], 1.0)
        yx = y[k] + (y[k2] - y[k]) * np.where(k2 > k, (x - t[k]) / dt, 0.0)
        return cum[k] + 0.5 * (y[k] + yx) * (x - t[k])

    span = t - lo
    out = np.where(span > 0, (integral(t) - integral(lo)) / np.where(span > 0, span, 1.0), y)
    return out


def extract_metrics(series: dict, config: PlateTestConfig) -> PlateMetrics:
    t = np.asarray(series["t"], float)
    if len(t) < 2 or t[0] > config.t_I_end - config.sinkage_window or t[-1] < config.t_end * (1 - 1e-9):
        raise InvalidInput("series does not cover the metric windows")
    z = np.asarray(series["sinkage_m"], float)
    tr = np.asarray(series["traction"], float)
    w = config.sinkage_window
    static = _window_mean(t, z, config.t_I_end - w, config.t_I_end)
    dynamic = _window_mean(t, z, config.t_end - w, config.t_end)
    smooth = _trailing_mean(t, tr, config.traction_window)
    in_II = (t >= config.t_I_end) & (t <= config.t_II_end)
    peak = float(smooth[in_II].max()) if in_II.any() else float(np.interp(config.t_I_end, t, smooth))
    avg = _window_mean(t, tr, config.t_I_end, config.t_end)
    return PlateMetrics(static, dynamic, peak, avg, dynamic - static)
