"""Domain types: materials, particles, rigid tools, static walls and the world.

Particles are stored column-wise inside :class:`SimWorld` (one numpy array per
field) because every hot loop works on whole arrays; :class:`Particle` is a
value snapshot of one row.  Everything is SI.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidParameter

GRAVITY = np.array([0.0, 0.0, -9.81])

LOCKED = "locked"
FORCE = "force"
VELOCITY = "velocity"


@dataclass(frozen=True)
class Material:
    density: float = 2200.0
    youngs_modulus: float = 1.0e9
    poisson_ratio: float = 0.15
    friction_coeff: float = 0.3
    rolling_coeff: float = 0.02
    cohesion: float = 0.0
    restitution: float = 0.0

    def __post_init__(self):
        if not self.density > 0:
            raise InvalidParameter(f"density must be positive, got {self.density}")
        if not self.youngs_modulus > 0:
            raise InvalidParameter(f"youngs_modulus must be positive, got {self.youngs_modulus}")
        if not 0.0 <= self.poisson_ratio < 0.5:
            raise InvalidParameter(f"poisson_ratio must lie in [0, 0.5), got {self.poisson_ratio}")
        if self.friction_coeff < 0 or self.rolling_coeff < 0:
            raise InvalidParameter("friction and rolling coefficients must be non-negative")
        if not 0.0 <= self.restitution <= 1.0:
            raise InvalidParameter(f"restitution must lie in [0, 1], got {self.restitution}")

    def with_friction(self, friction_coeff: float, rolling_coeff: float) -> "Material":
        return replace(self, friction_coeff=friction_coeff, rolling_coeff=rolling_coeff)


SAND = Material()
FRICTIONLESS_WALL = Material(friction_coeff=0.0, rolling_coeff=0.0)


@dataclass(frozen=True)
class Particle:
    id: int
    position: np.ndarray
    velocity: np.ndarray
    angular_velocity: np.ndarray
    diameter: float
    layer_index: int
    material: Material

    @property
    def mass(self) -> float:
        return particle_mass_inertia(self.diameter, self.material)[0]

    @property
    def inertia(self) -> float:
        return particle_mass_inertia(self.diameter, self.material)[1]


def particle_mass_inertia(d: float, material_or_density) -> tuple[float, float]:
    """Solid-sphere mass ``rho*pi*d^3/6`` and moment of inertia ``m*d^2/10``."""
    rho = getattr(material_or_density, "density", material_or_density)
    if not d > 0:
        raise InvalidParameter(f"diameter must be positive, got {d}")
    if not rho > 0:
        raise InvalidParameter(f"density must be positive, got {rho}")
    m = rho * math.pi * d ** 3 / 6.0
    return m, m * d * d / 10.0


def sphere_mass_arrays(d: np.ndarray, rho: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m = rho * np.pi * d ** 3 / 6.0
    return m, m * d * d / 10.0


def effective_modulus(E_a, nu_a, E_b, nu_b):
    return 1.0 / ((1.0 - nu_a ** 2) / E_a + (1.0 - nu_b ** 2) / E_b)


def effective_diameter(d_a, d_b):
    """Harmonic combination; an infinite ``d_b`` (flat tool) returns ``d_a``."""
    return 1.0 / (1.0 / d_a + 1.0 / d_b)


@dataclass(frozen=True)
class ContactParams:
    E_star: float
    d_star: float
    k_n: float
    eps_n: float


def effective_contact_params(a, b, hertz_exponent: float = 1.25) -> ContactParams:
    """Hertz stiffness ``k_n = E* sqrt(d*)/3`` and compliance ``eps_n = e_H/k_n``.

    ``a`` is a :class:`Particle`; ``b`` is a particle or anything exposing a
    ``material`` without a diameter (a tool or wall), which is treated as flat.
    """
    ma, mb = a.material, b.material
    d_b = getattr(b, "diameter", math.inf)
    E = effective_modulus(ma.youngs_modulus, ma.poisson_ratio, mb.youngs_modulus, mb.poisson_ratio)
    d = effective_diameter(a.diameter, d_b)
    k = E * math.sqrt(d) / 3.0
    return ContactParams(E, d, k, hertz_exponent / k)


@dataclass(frozen=True)
class AxisDof:
    """Drive mode for one translational axis of a tool.

    ``force`` is the applied force (N) for force-driven axes; ``target`` the
    commanded speed (m/s) for velocity-driven axes, which are kinematic when
    both force limits are infinite and a bounded motor otherwise.
    """
    mode: str = LOCKED
    force: float = 0.0
    target: float = 0.0
    force_min: float = -math.inf
    force_max: float = math.inf

    def __post_init__(self):
        if self.mode not in (LOCKED, FORCE, VELOCITY):
            raise InvalidParameter(f"unknown dof mode {self.mode!r}")
        if self.force_min > self.force_max:
            raise InvalidParameter("force_min exceeds force_max")

    @property
    def kinematic(self) -> bool:
        return self.mode == VELOCITY and math.isinf(self.force_min) and math.isinf(self.force_max)

    @property
    def motor(self) -> bool:
        return self.mode == VELOCITY and not self.kinematic


def locked() -> AxisDof:
    return AxisDof(LOCKED)


def force_driven(force: float) -> AxisDof:
    return AxisDof(FORCE, force=force)


def velocity_driven(target: float, force_min: float = -math.inf, force_max: float = math.inf) -> AxisDof:
    return AxisDof(VELOCITY, target=target, force_min=force_min, force_max=force_max)


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if np.any(self.hi <= self.lo):
            raise InvalidParameter("box hi must exceed lo on every axis")


@dataclass
class Plane:
    """Half-space boundary; ``normal`` points into the allowed region."""
    normal: np.ndarray
    point: np.ndarray
    material: Material = FRICTIONLESS_WALL

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        norm = np.linalg.norm(n)
        if norm == 0:
            raise InvalidParameter("plane normal must be non-zero")
        self.normal = n / norm
        self.point = np.asarray(self.point, dtype=float)

    def signed_distance(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x) - self.point) @ self.normal


@dataclass
class RigidTool:
    """Translational rigid body built from axis-aligned boxes and planes.

    Shape coordinates are relative to ``position``.  Tools never rotate.
    Gravity is not applied to tools; applied loads go through force-driven axes.
    """
    id: int
    position: np.ndarray
    boxes: list = field(default_factory=list)
    planes: list = field(default_factory=list)
    mass: float = 1.0
    dofs: tuple = (AxisDof(), AxisDof(), AxisDof())
    material: Material = SAND
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    # filled after every step (N): force exerted by particles, motor force
    contact_force: np.ndarray = field(default_factory=lambda: np.zeros(3))
    motor_force: np.ndarray = field(default_factory=lambda: np.zeros(3))
    n_contacts: int = 0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).copy()
        self.velocity = np.asarray(self.velocity, dtype=float).copy()
        if not self.mass > 0:
            raise InvalidParameter("tool mass must be positive")
        if len(self.dofs) != 3:
            raise InvalidParameter("a tool needs exactly three axis dofs")

    def set_dof(self, axis: int, dof: AxisDof) -> None:
        dofs = list(self.dofs)
        dofs[axis] = dof
        self.dofs = tuple(dofs)

    def world_boxes(self):
        return [(b.lo + self.position, b.hi + self.position) for b in self.boxes]

    def world_planes(self):
        return [(p.normal, p.point + self.position) for p in self.planes]

    def bounds(self):
        """World AABB of the box parts (planes are unbounded)."""
        if not self.boxes:
            return None
        lo = np.min([b.lo for b in self.boxes], axis=0) + self.position
        hi = np.max([b.hi for b in self.boxes], axis=0) + self.position
        return lo, hi


@dataclass
class SolverConfig:
    timestep: float = 1.0e-4
    pgs_iterations: int = 100
    error_tolerance: float = 0.02
    damping_factor: float = 4.5
    hertz_exponent: float = 1.25
    impact_velocity_threshold: Optional[float] = None
    residual_exit_tolerance: Optional[float] = None
    rolling_diameter: str = "mean"
    friction_compliance: float = 0.0
    rolling_compliance: float = 0.0
    impact_pass: bool = True
    # add the -Upsilon*G*v term of the full SPOOK normal row (off: bias is position-only)
    velocity_feedback: bool = False

    def __post_init__(self):
        if not self.timestep > 0:
            raise InvalidParameter("timestep must be positive")
        if int(self.pgs_iterations) < 1:
            raise InvalidParameter("pgs_iterations must be >= 1")
        self.pgs_iterations = int(self.pgs_iterations)
        if not self.error_tolerance > 0:
            raise InvalidParameter("error_tolerance must be positive")
        if self.damping_factor < 0:
            raise InvalidParameter("damping_factor must be non-negative")
        if self.hertz_exponent not in (1.0, 1.25):
            raise InvalidParameter("hertz_exponent must be 5/4 or 1")
        if self.rolling_diameter not in ("mean", "effective", "min"):
            raise InvalidParameter(f"unknown rolling_diameter rule {self.rolling_diameter!r}")

    def impact_threshold(self, gravity: float = 9.81) -> float:
        if self.impact_velocity_threshold is not None:
            return self.impact_velocity_threshold
        return 2.0 * gravity * self.timestep * 10.0


class SimWorld:
    """Particles, tools, static walls, gravity, clock and solver settings."""

    def __init__(self, config: Optional[SolverConfig] = None, gravity=GRAVITY,
                 materials: Sequence[Material] = (SAND,), rng_seed: int = 0):
        self.config = config or SolverConfig()
        self.gravity = np.asarray(gravity, dtype=float).copy()
        self.materials = list(materials)
        self.rng_seed = int(rng_seed)
        self.time = 0.0
        self.tools: list[RigidTool] = []
        self.walls: list[Plane] = []
        self.bounds_lo: Optional[np.ndarray] = None
        self.bounds_hi: Optional[np.ndarray] = None
        self.ids = np.zeros(0, dtype=np.int64)
        self.pos = np.zeros((0, 3))
        self.vel = np.zeros((0, 3))
        self.omega = np.zeros((0, 3))
        self.quat = np.zeros((0, 4))
        self.diam = np.zeros(0)
        self.layer = np.zeros(0, dtype=np.int64)
        self.mat = np.zeros(0, dtype=np.int64)
        self.next_id = 0
        self.contacts = None  # previous step's ContactSet, for warm starting
        self.last_report = None

    # ---- particle storage -------------------------------------------------
    @property
    def n_particles(self) -> int:
        return self.pos.shape[0]

    def add_material(self, material: Material) -> int:
        for i, m in enumerate(self.materials):
            if m == material:
                return i
        self.materials.append(material)
        return len(self.materials) - 1

    def add_particles(self, positions, diameters, layer_index=0, material_index=0,
                      velocities=None) -> np.ndarray:
        positions = np.atleast_2d(np.asarray(positions, dtype=float))
        k = positions.shape[0]
        diameters = np.broadcast_to(np.asarray(diameters, dtype=float), (k,)).copy()
        if k and np.any(diameters <= 0):
            raise InvalidParameter("particle diameters must be positive")
        layer = np.broadcast_to(np.asarray(layer_index, dtype=np.int64), (k,)).copy()
        if k and np.any(layer < 0):
            raise InvalidParameter("layer_index must be non-negative")
        vel = np.zeros((k, 3)) if velocities is None else np.atleast_2d(np.asarray(velocities, dtype=float))
        new_ids = np.arange(self.next_id, self.next_id + k, dtype=np.int64)
        self.next_id += k
        quat = np.zeros((k, 4))
        quat[:, 0] = 1.0
        self.ids = np.concatenate([self.ids, new_ids])
        self.pos = np.vstack([self.pos, positions])
        self.vel = np.vstack([self.vel, vel])
        self.omega = np.vstack([self.omega, np.zeros((k, 3))])
        self.quat = np.vstack([self.quat, quat])
        self.diam = np.concatenate([self.diam, diameters])
        self.layer = np.concatenate([self.layer, layer])
        self.mat = np.concatenate([self.mat, np.full(k, material_index, dtype=np.int64)])
        return new_ids

    def remove_particles(self, mask) -> int:
        """Delete particles where ``mask`` is true; ids of survivors are kept."""
        mask = np.asarray(mask, dtype=bool)
        keep = ~mask
        for name in ("ids", "pos", "vel", "omega", "quat", "diam", "layer", "mat"):
            setattr(self, name, getattr(self, name)[keep])
        self.contacts = None
        return int(mask.sum())

    def particle(self, i: int) -> Particle:
        return Particle(int(self.ids[i]), self.pos[i].copy(), self.vel[i].copy(), self.omega[i].copy(),
                        float(self.diam[i]), int(self.layer[i]), self.materials[self.mat[i]])

    @property
    def particles(self) -> list[Particle]:
        return [self.particle(i) for i in range(self.n_particles)]

    def add_tool(self, tool: RigidTool) -> RigidTool:
        self.tools.append(tool)
        self.contacts = None
        return tool

    # ---- derived quantities ---------------------------------------------
    def densities(self) -> np.ndarray:
        rho = np.array([m.density for m in self.materials])
        return rho[self.mat]

    def masses(self) -> tuple[np.ndarray, np.ndarray]:
        return sphere_mass_arrays(self.diam, self.densities())

    def kinetic_energy(self, rotational: bool = True) -> np.ndarray:
        m, inertia = self.masses()
        ke = 0.5 * m * np.einsum("ij,ij->i", self.vel, self.vel)
        if rotational:
            ke = ke + 0.5 * inertia * np.einsum("ij,ij->i", self.omega, self.omega)
        return ke

    def set_particle_material(self, material: Material, mask=None) -> None:
        idx = self.add_material(material)
        if mask is None:
            self.mat[:] = idx
        else:
            self.mat[np.asarray(mask, dtype=bool)] = idx

    def set_container(self, lo, hi, material: Material = FRICTIONLESS_WALL, top: bool = False) -> None:
        """Replace static walls with the faces of an axis-aligned box."""
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        self.bounds_lo, self.bounds_hi = lo.copy(), hi.copy()
        self.walls = []
        for axis in range(3):
            n = np.zeros(3)
            n[axis] = 1.0
            self.walls.append(Plane(n, lo.copy(), material))
            if axis < 2 or top:
                self.walls.append(Plane(-n, hi.copy(), material))
        self.contacts = None

    def copy(self) -> "SimWorld":
        import copy as _copy
        return _copy.deepcopy(self)
