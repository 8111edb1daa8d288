"""Refinement profiles, discrete layer schedules and the solver cost model.

Depth ``z`` is measured downward from the bed surface.  A profile grows the
particle diameter linearly with depth, ``d(z) = d_min + gamma*z``, until it
saturates at ``d_max`` at ``z_max = (d_max - d_min)/gamma``.  A schedule
realizes the profile as layers with ``d_n = r*d_{n-1}`` and thickness
``eta*d_n``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .errors import InvalidParameter

VERTICAL = "vertical-z"
HORIZONTAL = "horizontal-x"

# E[u^3] for u ~ U(1 - j, 1 + j): mean particle volume over the nominal one
def jitter_volume_factor(jitter: float) -> float:
    if jitter == 0:
        return 1.0
    return ((1 + jitter) ** 4 - (1 - jitter) ** 4) / (8.0 * jitter)


@dataclass(frozen=True)
class RefinementProfile:
    d_min: float
    d_max: float
    gamma: float
    gradient_axis: str = VERTICAL

    def __post_init__(self):
        if not 0 < self.d_min <= self.d_max:
            raise InvalidParameter(f"need 0 < d_min <= d_max, got {self.d_min}, {self.d_max}")
        if self.gamma < 0:
            raise InvalidParameter("gamma must be non-negative")
        uniform = self.d_min == self.d_max
        if (self.gamma == 0) != uniform:
            raise InvalidParameter("gamma == 0 exactly when d_min == d_max (uniform bed)")
        if self.gradient_axis not in (VERTICAL, HORIZONTAL):
            raise InvalidParameter(f"unknown gradient axis {self.gradient_axis!r}")

    @classmethod
    def uniform(cls, d: float, gradient_axis: str = VERTICAL) -> "RefinementProfile":
        return cls(d, d, 0.0, gradient_axis)

    @property
    def is_uniform(self) -> bool:
        return self.gamma == 0

    @property
    def z_max(self) -> float:
        if self.is_uniform:
            return 0.0
        return (self.d_max - self.d_min) / self.gamma


def profile_eval(profile: RefinementProfile, z: float) -> float:
    if z < 0:
        raise InvalidParameter(f"depth must be non-negative, got {z}")
    if profile.is_uniform:
        return profile.d_min
    return min(profile.d_min + profile.gamma * z, profile.d_max)


def gamma_from_ratio(r: float, eta: float) -> float:
    return (r - 1.0) / (r * eta)


def ratio_from_gamma(gamma: float, eta: float) -> float:
    """Layer ratio ``r`` realizing ``gamma`` at fixed thickness factor ``eta``."""
    if gamma < 0 or eta < 1:
        raise InvalidParameter("need gamma >= 0 and eta >= 1")
    if gamma * eta >= 1:
        raise InvalidParameter(f"gamma*eta must be < 1, got {gamma * eta}")
    return 1.0 / (1.0 - gamma * eta)


@dataclass(frozen=True)
class Layer:
    index: int
    diameter: float
    z: float            # depth of the layer's lower boundary
    thickness: float
    clamped: bool = False


@dataclass(frozen=True)
class LayerSchedule:
    layers: tuple
    ratio: float
    thickness_factor: float

    @property
    def gamma(self) -> float:
        return gamma_from_ratio(self.ratio, self.thickness_factor)

    @property
    def d_min(self) -> float:
        return self.layers[0].diameter

    @property
    def d_max(self) -> float:
        return self.layers[-1].diameter

    @property
    def diameters(self) -> list[float]:
        return [L.diameter for L in self.layers]

    @property
    def depths(self) -> list[float]:
        return [L.z for L in self.layers]

    @property
    def is_uniform(self) -> bool:
        return len(self.layers) == 1

    @property
    def refined_depth(self) -> float:
        """Depth where the uniform ``d_max`` region starts."""
        if self.is_uniform:
            return 0.0
        return self.layers[-2].z

    def to_dict(self) -> dict:
        return {"ratio": self.ratio, "thickness_factor": self.thickness_factor, "gamma": self.gamma,
                "layers": [L.__dict__ for L in self.layers]}


def layer_schedule(d_min: float, d_max: float, r: float, eta: float) -> LayerSchedule:
    if d_max < d_min or d_min <= 0:
        raise InvalidParameter(f"need 0 < d_min <= d_max, got {d_min}, {d_max}")
    if r < 1:
        raise InvalidParameter(f"layer ratio must be >= 1, got {r}")
    if eta < 1:
        raise InvalidParameter(f"thickness factor must be >= 1, got {eta}")
    if r == 1 and d_min != d_max:
        raise InvalidParameter("r == 1 requires d_min == d_max")
    if d_min == d_max:
        return LayerSchedule((Layer(0, d_min, eta * d_min, eta * d_min),), 1.0 if r == 1 else r, eta)

    layers = []
    z = 0.0
    n = 0
    tol = 1e-12 * d_max
    while True:
        d = d_min * r ** n
        if d > d_max + tol:
            break
        z += eta * d
        layers.append(Layer(n, d, z, eta * d))
        n += 1
        if abs(d - d_max) <= tol:
            break
    if abs(layers[-1].diameter - d_max) > tol:
        z += eta * d_max
        layers.append(Layer(n, d_max, z, eta * d_max, clamped=True))
    return LayerSchedule(tuple(layers), r, eta)


def schedule_from_profile(profile: RefinementProfile, eta: float = 1.0) -> LayerSchedule:
    if profile.is_uniform:
        return layer_schedule(profile.d_min, profile.d_max, 1.0, eta)
    return layer_schedule(profile.d_min, profile.d_max, ratio_from_gamma(profile.gamma, eta), eta)


def contact_network_length(profile: RefinementProfile, bed_height: float,
                           r: Optional[float] = None, eta: float = 1.0) -> float:
    """Number of particles spanned vertically by the bed.

    Uniform beds give ``h/d``.  Refined beds add the layered part
    ``eta*ln(d_max/d_min)/ln(r)`` to the uniform bottom region below ``z_max``;
    when the bed is shallower than ``z_max`` only the layers reaching ``h``
    are counted.
    """
    if bed_height <= 0:
        raise InvalidParameter("bed height must be positive")
    d_min, d_max = profile.d_min, profile.d_max
    if d_max == d_min:
        return bed_height / d_max
    if r is None:
        r = ratio_from_gamma(profile.gamma, eta)
    if r <= 1:
        raise InvalidParameter("refined profile needs r > 1")
    gamma = gamma_from_ratio(r, eta)
    z_max = (d_max - d_min) / gamma
    layered = eta * math.log(d_max / d_min) / math.log(r)
    if bed_height >= z_max:
        return layered + (bed_height - z_max) / d_max
    n = 0
    while eta * d_min * (r ** (n + 1) - 1) / (r - 1) < bed_height:
        n += 1
    return min(eta * (n + 1), layered)


def solver_iterations(n_d: float, eps: float) -> int:
    """PGS iteration guideline ``ceil(0.1*n_d/eps)``, at least one."""
    if n_d <= 0 or eps <= 0:
        raise InvalidParameter("n_d and eps must be positive")
    x = 0.1 * n_d / eps
    return max(1, math.ceil(x - 1e-9 * max(1.0, x)))


def planned_timestep(d: float, eps: float, rho: float, sigma: float) -> float:
    """``0.5*sqrt(eps*d/a)`` with ``a = 3*sigma/(2*rho*d)``, i.e. ``d*sqrt(eps*rho/(6*sigma))``."""
    if min(d, eps, rho, sigma) <= 0:
        raise InvalidParameter("timestep inputs must be positive")
    a = 3.0 * sigma / (2.0 * rho * d)
    return 0.5 * math.sqrt(eps * d / a)


@dataclass
class CostEstimate:
    n_d: float
    n_iterations: int
    timestep: float
    expected_particle_count: int
    per_layer_counts: list = field(default_factory=list)
    reduction_factor: float = 1.0
    reference: str = ""
    truncated: bool = False

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _layer_extents(schedule: LayerSchedule, height: float):
    """(diameter, thickness) pairs from the surface down, clipped to ``height``.

    The last layer extends to the bottom of the bed.  Returns the list and a
    flag telling whether the schedule had to be cut.
    """
    out = []
    top = 0.0
    layers = schedule.layers
    for i, L in enumerate(layers):
        last = i == len(layers) - 1
        bottom = height if last else L.z
        if bottom > height:
            out.append((L.diameter, max(height - top, 0.0)))
            return out, True
        out.append((L.diameter, max(bottom - top, 0.0)))
        top = bottom
    return out, False


def expected_particle_count(bed_dims: Sequence[float], schedule: LayerSchedule,
                            packing_fraction: float = 0.636, jitter: float = 0.10,
                            gradient_axis: str = VERTICAL,
                            reference_diameter: Optional[float] = None) -> CostEstimate:
    """Mass-balance count ``phi*V_layer/V_mean`` per layer.

    ``reference_diameter`` defaults to the schedule's finest diameter, so the
    reduction factor is measured against the fine uniform bed.
    """
    if not 0 < packing_fraction <= 0.74:
        raise InvalidParameter("packing fraction must lie in (0, 0.74]")
    L, W, H = (float(x) for x in bed_dims)
    if min(L, W, H) < 0:
        raise InvalidParameter("bed dimensions must be non-negative")
    depth_extent = H if gradient_axis == VERTICAL else L
    area = L * W * H / depth_extent if depth_extent > 0 else 0.0
    vf = jitter_volume_factor(jitter)

    def count(d, thickness):
        return packing_fraction * area * thickness / (math.pi / 6.0 * d ** 3 * vf)

    if min(L, W, H) == 0:
        return CostEstimate(0.0, 1, 0.0, 0, [0] * len(schedule.layers), 1.0, "", False)
    extents, truncated = _layer_extents(schedule, depth_extent)
    if truncated:
        warnings.warn("layer schedule is deeper than the bed; counts are for the truncated schedule")
    per_layer = [count(d, t) for d, t in extents]
    total = sum(per_layer)
    d_ref = schedule.d_min if reference_diameter is None else reference_diameter
    ref_total = count(d_ref, depth_extent)
    return CostEstimate(
        n_d=0.0, n_iterations=1, timestep=0.0,
        expected_particle_count=int(round(total)),
        per_layer_counts=[int(round(c)) for c in per_layer],
        reduction_factor=ref_total / total if total > 0 else math.inf,
        reference=f"uniform d={d_ref:g} m", truncated=truncated)


def plan(bed_dims: Sequence[float], profile: RefinementProfile, eta: float = 1.0,
         eps: float = 0.02, rho: float = 2200.0, sigma: float = 50e3,
         packing_fraction: float = 0.636, jitter: float = 0.10,
         reference_diameter: Optional[float] = None) -> CostEstimate:
    """Full cost estimate: contact-network length, iterations, timestep, counts."""
    schedule = schedule_from_profile(profile, eta)
    depth_extent = bed_dims[2] if profile.gradient_axis == VERTICAL else bed_dims[0]
    if profile.is_uniform:
        n_d = contact_network_length(profile, depth_extent)
    else:
        n_d = contact_network_length(profile, depth_extent, schedule.ratio, eta)
    est = expected_particle_count(bed_dims, schedule, packing_fraction, jitter,
                                  profile.gradient_axis, reference_diameter)
    est.n_d = n_d
    est.n_iterations = solver_iterations(n_d, eps)
    est.timestep = planned_timestep(profile.d_min, eps, rho, sigma)
    return est
