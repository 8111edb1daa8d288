"""Settled particle beds: layered emission, trimming, relaxation and audit.

Heights are measured up from the container floor.  A schedule's finest
layer sits at the top; layers are emitted bottom-up, coarsest first.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .contacts import detect
from .core import FRICTIONLESS_WALL, SAND, Material, SimWorld, SolverConfig
from .errors import BuildTimeout, InvalidParameter
from .planner import (HORIZONTAL, VERTICAL, LayerSchedule, _layer_extents, contact_network_length,
                      jitter_volume_factor, layer_schedule, planned_timestep, solver_iterations,
                      RefinementProfile)
from .solver import step

RELAX_FRICTION = (0.1, 0.01)


@dataclass
class BedSpec:
    dims: tuple                          # (length x, width y, height z) of the bed, m
    schedule: LayerSchedule
    size_jitter: float = 0.10
    relaxation_friction: tuple = RELAX_FRICTION
    wall_friction_during_build: float = 0.0
    material: Material = SAND
    rng_seed: int = 0
    gradient_axis: str = VERTICAL
    packing_fraction: float = 0.636      # only used to size emission batches
    build_stress: float = 10e3           # Pa, load scale for the build timestep
    error_tolerance: float = 0.02
    timestep: Optional[float] = None
    pgs_iterations: Optional[int] = None
    layer_time_budget: float = 5.0       # simulated s per layer
    ke_threshold: float = 1e-8           # J per particle
    speed_threshold: float = 1e-3        # m/s
    emit_chunk_height: float = 0.15      # m of lattice released at once
    overfill: float = 1.12

    def __post_init__(self):
        self.dims = tuple(float(x) for x in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 0:
            raise InvalidParameter("bed dims must be three non-negative lengths")
        if not 0.0 <= self.size_jitter <= 0.2:
            raise InvalidParameter("size_jitter must lie in [0, 0.2]")
        if self.gradient_axis not in (VERTICAL, HORIZONTAL):
            raise InvalidParameter(f"unknown gradient axis {self.gradient_axis!r}")

    @classmethod
    def uniform(cls, dims, d: float, **kw) -> "BedSpec":
        return cls(dims, layer_schedule(d, d, 1.0, 1.0), **kw)

    @classmethod
    def refined(cls, dims, d_min: float, d_max: float, r: float, eta: float = 1.0, **kw) -> "BedSpec":
        return cls(dims, layer_schedule(d_min, d_max, r, eta), **kw)

    @property
    def depth_extent(self) -> float:
        return self.dims[2] if self.gradient_axis == VERTICAL else self.dims[0]

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "schedule": self.schedule.to_dict(), "size_jitter": self.size_jitter,
                "relaxation_friction": list(self.relaxation_friction), "rng_seed": self.rng_seed,
                "gradient_axis": self.gradient_axis, "material": dict(self.material.__dict__)}


@dataclass
class BedAudit:
    cell_size: float
    density_grid: np.ndarray             # kg/m^3 per cell, shape (nx, ny, nz)
    mean_density: float
    max_overlap_ratio: float             # max delta / local d_min
    layer_counts: list
    mixing: float
    n_particles: int
    cell_deviation: float = 0.0          # max |rho_cell/mean - 1| over interior cells
    bulk_density: float = 0.0            # kg/m^3 inside the box inset by d_max from every face

    def summary(self) -> dict:
        return {"cell_size": self.cell_size, "mean_density": self.mean_density,
                "max_overlap_ratio": self.max_overlap_ratio, "layer_counts": list(self.layer_counts),
                "mixing": self.mixing, "n_particles": self.n_particles, "cell_deviation": self.cell_deviation,
                "bulk_density": self.bulk_density}


def layer_bands(schedule: LayerSchedule, height: float):
    """``[(layer_index, diameter, z_bottom, z_top)]`` bottom-up, clipped to ``height``."""
    extents, truncated = _layer_extents(schedule, height)
    if truncated:
        warnings.warn("layer schedule is deeper than the container; bottom layers are dropped")
    bands = []
    top = height
    for idx, (d, t) in enumerate(extents):
        if t <= 0:
            continue
        bands.append((idx, d, max(top - t, 0.0), top))
        top -= t
    return bands[::-1]


def build_timestep(spec: BedSpec) -> tuple[float, int]:
    d_min = spec.schedule.d_min
    h = spec.timestep or planned_timestep(d_min * (1 - spec.size_jitter), spec.error_tolerance,
                                          spec.material.density, spec.build_stress)
    if spec.pgs_iterations:
        return h, int(spec.pgs_iterations)
    height = max(spec.dims[2], d_min)
    prof = (RefinementProfile.uniform(d_min) if spec.schedule.is_uniform
            else RefinementProfile(spec.schedule.d_min, spec.schedule.d_max, spec.schedule.gamma))
    if spec.schedule.is_uniform:
        n_d = contact_network_length(prof, height)
    else:
        n_d = contact_network_length(prof, height, spec.schedule.ratio, spec.schedule.thickness_factor)
    return h, solver_iterations(n_d, spec.error_tolerance)


def _surface_level(world: SimWorld, mask, L, W, cell) -> float:
    """Mean over floor columns of the highest particle top (0 for empty columns)."""
    nx = max(1, int(L / cell))
    ny = max(1, int(W / cell))
    tops = np.zeros((nx, ny))
    if mask.any():
        p = world.pos[mask]
        top = p[:, 2] + 0.5 * world.diam[mask]
        ix = np.clip((p[:, 0] / L * nx).astype(int), 0, nx - 1)
        iy = np.clip((p[:, 1] / W * ny).astype(int), 0, ny - 1)
        np.maximum.at(tops, (ix, iy), top)
    return float(tops.mean())


def _spawn_lattice(rng, L, W, z0, d, jitter, count):
    s = 1.2 * d * (1 + jitter)
    margin = 0.5 * d * (1 + jitter) + 0.05 * d
    nx = max(1, int((L - 2 * margin) / s) + 1)
    ny = max(1, int((W - 2 * margin) / s) + 1)
    per_plane = nx * ny
    planes = int(math.ceil(count / per_plane))
    gx = margin + s * np.arange(nx) + 0.5 * (L - 2 * margin - s * (nx - 1))
    gy = margin + s * np.arange(ny) + 0.5 * (W - 2 * margin - s * (ny - 1))
    pos = []
    for k in range(planes):
        X, Y = np.meshgrid(gx, gy, indexing="ij")
        P = np.stack([X.ravel(), Y.ravel(), np.full(per_plane, z0 + k * s)], axis=1)
        # alternate half-offsets between planes so particles do not stack in columns
        if k % 2:
            P[:, 0] += 0.25 * s if nx > 1 else 0.0
            P[:, 1] += 0.25 * s if ny > 1 else 0.0
        pos.append(P)
    pos = np.concatenate(pos)[:max(count, 0)] if count > 0 else np.zeros((0, 3))
    pos[:, :2] += rng.uniform(-0.05 * d, 0.05 * d, size=(len(pos), 2))
    pos[:, 0] = np.clip(pos[:, 0], margin, L - margin)
    pos[:, 1] = np.clip(pos[:, 1], margin, W - margin)
    diam = d * rng.uniform(1 - jitter, 1 + jitter, size=len(pos))
    return pos, diam, s


def settle(world: SimWorld, max_steps: int, ke_threshold: float = 1e-8, speed_threshold: float = 1e-3,
           check_every: int = 10, min_steps: int = 0) -> int:
    """Step until mean translational KE per particle and max speed drop below thresholds.

    Spin is ignored: a grain turning about its contact normal meets no
    resistance and never stops, but it does not change the packing.

    Returns the number of steps taken; raises :class:`BuildTimeout` when the
    budget runs out.
    """
    if math.isinf(ke_threshold) or world.n_particles == 0:
        return 0
    steps = 0
    while True:
        if steps >= min_steps and (steps % check_every == 0):
            ke = world.kinetic_energy(rotational=False)
            vmax = float(np.sqrt(np.einsum("ij,ij->i", world.vel, world.vel).max()))
            if ke.mean() < ke_threshold and vmax < speed_threshold:
                return steps
        if steps >= max_steps:
            raise BuildTimeout(f"not settled after {steps} steps",
                               residual_ke=float(world.kinetic_energy(rotational=False).mean()))
        step(world)
        steps += 1


def _release(world, mask_new, spec, h):
    """Let freshly spawned particles fall until the cloud is nearly at rest."""
    budget = int(spec.layer_time_budget / h)
    n = 0
    while n < budget:
        for _ in range(20):
            step(world)
        n += 20
        v = world.vel
        if np.sqrt(np.einsum("ij,ij->i", v, v)).mean() < 0.02:
            return n
    raise BuildTimeout("emitted particles did not come to rest", residual_ke=float(world.kinetic_energy().mean()))


def build_bed(spec: BedSpec, progress=None) -> SimWorld:
    """Emit, settle and trim every layer, then restore full friction."""
    if spec.gradient_axis == HORIZONTAL:
        return _build_horizontal(spec, progress)
    L, W, H = spec.dims
    h, n_it = build_timestep(spec)
    mu_t, mu_r = spec.relaxation_friction
    relax = spec.material.with_friction(mu_t, mu_r)
    wall = Material(density=spec.material.density, youngs_modulus=spec.material.youngs_modulus,
                    poisson_ratio=spec.material.poisson_ratio, friction_coeff=spec.wall_friction_during_build,
                    rolling_coeff=0.0)
    cfg = SolverConfig(timestep=h, pgs_iterations=n_it, error_tolerance=spec.error_tolerance)
    world = SimWorld(cfg, materials=[relax], rng_seed=spec.rng_seed)
    world.set_container([0, 0, 0], [L, W, H], wall)
    if min(L, W, H) == 0:
        world.set_particle_material(spec.material)
        return world
    rng = np.random.default_rng(spec.rng_seed)
    vf = jitter_volume_factor(spec.size_jitter)
    budget = int(spec.layer_time_budget / h)

    for idx, d, z_bot, z_top in layer_bands(spec.schedule, H):
        v_mean = math.pi / 6 * d ** 3 * vf
        for attempt in range(6):
            level = _surface_level(world, np.ones(world.n_particles, bool), L, W, 2 * d)
            gap = z_top - level
            if gap <= 0.25 * d:
                break
            count = int(math.ceil(spec.overfill * spec.packing_fraction * L * W * gap / v_mean))
            remaining = count
            while remaining > 0:
                top_now = float((world.pos[:, 2] + 0.5 * world.diam).max()) if world.n_particles else 0.0
                z0 = top_now + 0.6 * d * (1 + spec.size_jitter)
                s = 1.2 * d * (1 + spec.size_jitter)
                per_plane = max(1, int((L - d) / s) + 1) * max(1, int((W - d) / s) + 1)
                chunk = min(remaining, per_plane * max(1, int(spec.emit_chunk_height / s)))
                pos, diam, _ = _spawn_lattice(rng, L, W, z0, d, spec.size_jitter, chunk)
                vel = np.zeros_like(pos)
                vel[:, 2] = -0.1
                world.add_particles(pos, diam, layer_index=idx, material_index=0, velocities=vel)
                remaining -= chunk
                _release(world, None, spec, h)
                if progress:
                    progress(f"layer {idx}: {world.n_particles} particles, t={world.time:.3f}s")
            settle(world, budget, spec.ke_threshold * 100, spec.speed_threshold * 20)
        # trim the excess above the layer top, then relax
        over = world.pos[:, 2] > z_top
        if over.any():
            world.remove_particles(over)
        settle(world, budget, spec.ke_threshold, spec.speed_threshold)
        if progress:
            progress(f"layer {idx} settled: {world.n_particles} particles, t={world.time:.3f}s")

    world.set_particle_material(spec.material)
    world.materials = [spec.material]
    world.mat[:] = 0
    world.contacts = None
    world.time = 0.0
    return world


def _build_horizontal(spec: BedSpec, progress=None) -> SimWorld:
    """Build vertically in a container with x and z swapped, then rotate into place.

    The finest layer ends up against the ``x = 0`` face.
    """
    L, W, H = spec.dims
    from dataclasses import replace
    vspec = replace(spec, dims=(H, W, L), gradient_axis=VERTICAL)
    world = build_bed(vspec, progress)
    # drop particles poking above the old surface so nothing overlaps the new x=0 wall
    world.remove_particles(world.pos[:, 2] + 0.5 * world.diam > L)
    x, y, z = world.pos[:, 0].copy(), world.pos[:, 1].copy(), world.pos[:, 2].copy()
    world.pos = np.stack([L - z, y, x], axis=1)
    vx, vy, vz = world.vel[:, 0].copy(), world.vel[:, 1].copy(), world.vel[:, 2].copy()
    world.vel = np.stack([-vz, vy, vx], axis=1)
    world.omega[:] = 0.0
    world.set_container([0, 0, 0], [L, W, H], FRICTIONLESS_WALL)
    mu_t, mu_r = spec.relaxation_friction
    world.set_particle_material(spec.material.with_friction(mu_t, mu_r))
    h = world.config.timestep
    settle(world, int(spec.layer_time_budget / h), spec.ke_threshold, spec.speed_threshold)
    world.materials = [spec.material]
    world.mat[:] = 0
    world.contacts = None
    world.time = 0.0
    return world


# ---------------------------------------------------------------------------
# audit

def _unit_ball_points(n_side: int = 9) -> np.ndarray:
    g = (np.arange(n_side) + 0.5) / n_side * 2 - 1
    X, Y, Z = np.meshgrid(g, g, g, indexing="ij")
    P = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    return P[(P ** 2).sum(1) <= 1.0]


_BALL = _unit_ball_points()


def density_grid(world: SimWorld, lo, hi, cell_size: float) -> np.ndarray:
    """Bulk density per cell with each sphere's mass spread over the cells it intersects.

    Sphere volumes are split with a fixed quadrature of points inside the
    unit ball, so the result is deterministic; mass outside ``[lo, hi]`` is
    dropped.  Cells are stretched slightly so they tile the box exactly.
    """
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    ext = hi - lo
    n = np.maximum(1, np.round(ext / cell_size).astype(int))
    size = ext / n
    grid = np.zeros(tuple(n))
    if world.n_particles == 0:
        return grid
    m, _ = world.masses()
    w = m / len(_BALL)
    for start in range(0, world.n_particles, 2048):
        sl = slice(start, start + 2048)
        pts = world.pos[sl, None, :] + 0.5 * world.diam[sl, None, None] * _BALL[None, :, :]
        idx = np.floor((pts - lo) / size).astype(int)
        inside = np.all((idx >= 0) & (idx < n), axis=2)
        ww = np.broadcast_to(w[sl, None], inside.shape)[inside]
        ii = idx[inside]
        np.add.at(grid, (ii[:, 0], ii[:, 1], ii[:, 2]), ww)
    return grid / np.prod(size)


def mixing_metric(world: SimWorld, bands) -> float:
    """Fraction of particles more than one own diameter outside their layer band."""
    if world.n_particles == 0:
        return 0.0
    z_lo = {i: b for i, _, b, _ in bands}
    z_hi = {i: t for i, _, _, t in bands}
    lo = np.array([z_lo.get(int(k), -np.inf) for k in world.layer])
    hi = np.array([z_hi.get(int(k), np.inf) for k in world.layer])
    z = world.pos[:, 2]
    out = (z < lo - world.diam) | (z > hi + world.diam)
    return float(out.mean())


def audit_bed(world: SimWorld, cell_size: float, schedule: Optional[LayerSchedule] = None,
              dims=None) -> BedAudit:
    """Density grid, overlap and layer statistics of a settled vertical bed."""
    if world.n_particles and cell_size < world.diam.max():
        raise InvalidParameter("audit cells must be at least as large as the largest particle")
    if dims is None:
        lo = world.bounds_lo if world.bounds_lo is not None else np.zeros(3)
        hi = world.bounds_hi if world.bounds_hi is not None else world.pos.max(axis=0)
    else:
        lo, hi = np.zeros(3), np.asarray(dims, float)
    grid = density_grid(world, lo, hi, cell_size)
    mean = float(grid.mean()) if grid.size else 0.0
    interior = grid[1:-1, 1:-1, 1:-1] if min(grid.shape) > 2 else grid
    dev = float(np.abs(interior / mean - 1).max()) if mean > 0 and interior.size else 0.0
    c = detect(world)
    ratio = 0.0
    if len(c):
        d_loc = world.diam[c.ia]
        pp = c.ib >= 0
        pp &= c.ib < world.n_particles
        d_loc = np.where(pp, np.minimum(d_loc, world.diam[np.where(pp, c.ib, 0)]), d_loc)
        ratio = float((c.delta / d_loc).max())
    counts = np.bincount(world.layer, minlength=1).tolist() if world.n_particles else []
    mixing = 0.0
    if schedule is not None:
        mixing = mixing_metric(world, layer_bands(schedule, float(hi[2] - lo[2])))
    bulk = 0.0
    if world.n_particles:
        m = float(world.diam.max())
        ilo, ihi = np.asarray(lo, float) + m, np.asarray(hi, float) - m
        if np.all(ihi > ilo):
            bulk = float(density_grid(world, ilo, ihi, float((ihi - ilo).max()) * 2).mean())
    return BedAudit(cell_size, grid, mean, ratio, counts, mixing, world.n_particles, dev, bulk)


def expected_count(spec: BedSpec, packing_fraction: float = 0.636) -> int:
    """Mass-balance particle count ``phi*V/V_mean`` for the bed's size bands."""
    L, W, H = spec.dims
    vf = jitter_volume_factor(spec.size_jitter)
    total = 0.0
    for _, d, zb, zt in layer_bands(spec.schedule, spec.depth_extent):
        area = L * W * H / spec.depth_extent
        total += packing_fraction * area * (zt - zb) / (math.pi / 6 * d ** 3 * vf)
    return int(round(total))
