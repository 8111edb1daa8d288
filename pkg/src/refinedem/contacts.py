"""Broadphase (uniform grid) and narrowphase (sphere/sphere, sphere/plane,
sphere/box) collision detection with persistent, warm-startable contacts.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .core import SimWorld, effective_modulus

KIND_PP = 0
KIND_PT = 1   # particle-tool
KIND_PW = 2   # particle-static wall

SHAPE_PLANE = 0
SHAPE_BOX = 1

_SHAPE_KEY_BASE = np.int64(0x7FFFFFFF)


@njit(cache=True)
def _grid_candidates(pos, rad, cell):
    n = pos.shape[0]
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64)
    lo = np.empty(3)
    hi = np.empty(3)
    for k in range(3):
        lo[k] = pos[0, k]
        hi[k] = pos[0, k]
    for i in range(n):
        for k in range(3):
            if pos[i, k] < lo[k]:
                lo[k] = pos[i, k]
            if pos[i, k] > hi[k]:
                hi[k] = pos[i, k]
    # coarsen the grid if stray particles would blow up the cell count
    while True:
        nx = int((hi[0] - lo[0]) / cell) + 1
        ny = int((hi[1] - lo[1]) / cell) + 1
        nz = int((hi[2] - lo[2]) / cell) + 1
        if nx * ny * nz <= 8 * n + 64:
            break
        cell *= 1.5
    ncell = nx * ny * nz
    cx = np.empty(n, dtype=np.int64)
    cy = np.empty(n, dtype=np.int64)
    cz = np.empty(n, dtype=np.int64)
    cid = np.empty(n, dtype=np.int64)
    for i in range(n):
        cx[i] = min(int((pos[i, 0] - lo[0]) / cell), nx - 1)
        cy[i] = min(int((pos[i, 1] - lo[1]) / cell), ny - 1)
        cz[i] = min(int((pos[i, 2] - lo[2]) / cell), nz - 1)
        cid[i] = cx[i] + nx * (cy[i] + ny * cz[i])
    order = np.argsort(cid, kind="mergesort")
    start = np.zeros(ncell + 1, dtype=np.int64)
    for i in range(n):
        start[cid[i] + 1] += 1
    for c in range(ncell):
        start[c + 1] += start[c]

    cap = 8 * n + 16
    out = np.empty((cap, 2), dtype=np.int64)
    m = 0
    for i in range(n):
        for dz in range(-1, 2):
            z = cz[i] + dz
            if z < 0 or z >= nz:
                continue
            for dy in range(-1, 2):
                y = cy[i] + dy
                if y < 0 or y >= ny:
                    continue
                for dx in range(-1, 2):
                    x = cx[i] + dx
                    if x < 0 or x >= nx:
                        continue
                    c = x + nx * (y + ny * z)
                    for s in range(start[c], start[c + 1]):
                        j = order[s]
                        if j <= i:
                            continue
                        reach = rad[i] + rad[j]
                        if abs(pos[j, 0] - pos[i, 0]) >= reach:
                            continue
                        if abs(pos[j, 1] - pos[i, 1]) >= reach:
                            continue
                        if abs(pos[j, 2] - pos[i, 2]) >= reach:
                            continue
                        if m == cap:
                            grown = np.empty((2 * cap, 2), dtype=np.int64)
                            grown[:m] = out[:m]
                            out = grown
                            cap *= 2
                        out[m, 0] = i
                        out[m, 1] = j
                        m += 1
    out = out[:m]
    key = out[:, 0] * n + out[:, 1]
    return out[np.argsort(key, kind="mergesort")]


@njit(cache=True)
def _sphere_pairs(pos, rad, pairs):
    m = pairs.shape[0]
    keep = np.zeros(m, dtype=np.bool_)
    normal = np.zeros((m, 3))
    delta = np.zeros(m)
    point = np.zeros((m, 3))
    degen = np.zeros(m, dtype=np.bool_)
    for k in range(m):
        i = pairs[k, 0]
        j = pairs[k, 1]
        d0 = pos[j, 0] - pos[i, 0]
        d1 = pos[j, 1] - pos[i, 1]
        d2 = pos[j, 2] - pos[i, 2]
        dist = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
        ov = rad[i] + rad[j] - dist
        if ov <= 0.0:
            continue
        keep[k] = True
        delta[k] = ov
        if dist < 1e-12 * (rad[i] + rad[j]):
            degen[k] = True
            normal[k, 2] = 1.0
        else:
            normal[k, 0] = d0 / dist
            normal[k, 1] = d1 / dist
            normal[k, 2] = d2 / dist
        s = rad[i] - 0.5 * ov
        for a in range(3):
            point[k, a] = pos[i, a] + s * normal[k, a]
    return keep, normal, delta, point, degen


@njit(cache=True)
def _sphere_shapes(pos, rad, stype, snormal, spoint, slo, shi):
    """All sphere/shape overlaps.  Normals point from the particle to the shape."""
    n = pos.shape[0]
    ns = stype.shape[0]
    cap = n + 16
    pidx = np.empty(cap, dtype=np.int64)
    sidx = np.empty(cap, dtype=np.int64)
    nrm = np.empty((cap, 3))
    dl = np.empty(cap)
    pt = np.empty((cap, 3))
    m = 0
    for i in range(n):
        r = rad[i]
        for s in range(ns):
            nx = 0.0
            ny = 0.0
            nz = 0.0
            ov = 0.0
            px = 0.0
            py = 0.0
            pz = 0.0
            if stype[s] == 0:
                dist = ((pos[i, 0] - spoint[s, 0]) * snormal[s, 0] + (pos[i, 1] - spoint[s, 1]) * snormal[s, 1]
                        + (pos[i, 2] - spoint[s, 2]) * snormal[s, 2])
                ov = r - dist
                if ov <= 0.0:
                    continue
                nx = -snormal[s, 0]
                ny = -snormal[s, 1]
                nz = -snormal[s, 2]
                px = pos[i, 0] - dist * snormal[s, 0]
                py = pos[i, 1] - dist * snormal[s, 1]
                pz = pos[i, 2] - dist * snormal[s, 2]
            else:
                if (pos[i, 0] < slo[s, 0] - r or pos[i, 0] > shi[s, 0] + r or pos[i, 1] < slo[s, 1] - r
                        or pos[i, 1] > shi[s, 1] + r or pos[i, 2] < slo[s, 2] - r or pos[i, 2] > shi[s, 2] + r):
                    continue
                q0 = min(max(pos[i, 0], slo[s, 0]), shi[s, 0])
                q1 = min(max(pos[i, 1], slo[s, 1]), shi[s, 1])
                q2 = min(max(pos[i, 2], slo[s, 2]), shi[s, 2])
                d0 = q0 - pos[i, 0]
                d1 = q1 - pos[i, 1]
                d2 = q2 - pos[i, 2]
                dist = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
                if dist > 1e-12 * r:
                    ov = r - dist
                    if ov <= 0.0:
                        continue
                    nx = d0 / dist
                    ny = d1 / dist
                    nz = d2 / dist
                    px = q0
                    py = q1
                    pz = q2
                else:
                    # centre inside the box: leave through the nearest face
                    best = np.inf
                    axis = 0
                    sign = 1.0
                    for a in range(3):
                        dlo = pos[i, a] - slo[s, a]
                        dhi = shi[s, a] - pos[i, a]
                        if dlo < best:
                            best = dlo
                            axis = a
                            sign = -1.0
                        if dhi < best:
                            best = dhi
                            axis = a
                            sign = 1.0
                    ov = r + best
                    o = np.zeros(3)
                    o[axis] = sign
                    nx = -o[0]
                    ny = -o[1]
                    nz = -o[2]
                    px = pos[i, 0] + best * o[0]
                    py = pos[i, 1] + best * o[1]
                    pz = pos[i, 2] + best * o[2]
            if m == cap:
                cap *= 2
                pidx = _grow_i(pidx, cap)
                sidx = _grow_i(sidx, cap)
                nrm = _grow_v(nrm, cap)
                dl = _grow_f(dl, cap)
                pt = _grow_v(pt, cap)
            pidx[m] = i
            sidx[m] = s
            nrm[m, 0] = nx
            nrm[m, 1] = ny
            nrm[m, 2] = nz
            dl[m] = ov
            pt[m, 0] = px
            pt[m, 1] = py
            pt[m, 2] = pz
            m += 1
    return pidx[:m], sidx[:m], nrm[:m], dl[:m], pt[:m]


@njit(cache=True)
def _grow_i(a, cap):
    b = np.empty(cap, dtype=a.dtype)
    b[:a.shape[0]] = a
    return b


@njit(cache=True)
def _grow_f(a, cap):
    b = np.empty(cap)
    b[:a.shape[0]] = a
    return b


@njit(cache=True)
def _grow_v(a, cap):
    b = np.empty((cap, 3))
    b[:a.shape[0]] = a
    return b


@dataclass
class ShapeTable:
    """Flattened static walls followed by tool shapes, in world coordinates."""
    stype: np.ndarray
    body: np.ndarray       # tool index, -1 for static walls
    normal: np.ndarray
    point: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    E: np.ndarray
    nu: np.ndarray
    mu_t: np.ndarray
    mu_r: np.ndarray

    @classmethod
    def from_world(cls, world: SimWorld) -> "ShapeTable":
        rows = []
        for w in world.walls:
            rows.append((SHAPE_PLANE, -1, w.normal, w.point, np.zeros(3), np.zeros(3), w.material))
        for t, tool in enumerate(world.tools):
            for nrm, pnt in tool.world_planes():
                rows.append((SHAPE_PLANE, t, nrm, pnt, np.zeros(3), np.zeros(3), tool.material))
            for lo, hi in tool.world_boxes():
                rows.append((SHAPE_BOX, t, np.zeros(3), np.zeros(3), lo, hi, tool.material))
        k = len(rows)
        arr3 = lambda j: np.array([r[j] for r in rows], dtype=float).reshape(k, 3)
        return cls(
            stype=np.array([r[0] for r in rows], dtype=np.int64),
            body=np.array([r[1] for r in rows], dtype=np.int64),
            normal=arr3(2), point=arr3(3), lo=arr3(4), hi=arr3(5),
            E=np.array([r[6].youngs_modulus for r in rows], dtype=float),
            nu=np.array([r[6].poisson_ratio for r in rows], dtype=float),
            mu_t=np.array([r[6].friction_coeff for r in rows], dtype=float),
            mu_r=np.array([r[6].rolling_coeff for r in rows], dtype=float),
        )


@dataclass
class ContactSet:
    """Column-wise contact list sorted by ``key``.

    Body indices: particles ``0..N-1``, tools ``N + tool_index``, static
    walls ``-1``.  ``normal`` points from body ``a`` to body ``b``; ``ra`` and
    ``rb`` are contact-point arms.  ``lam`` holds the impulses
    ``[normal, t1, t2, roll_t1, roll_t2]``: normal and friction in N s, rolling
    in N m s.
    """
    key: np.ndarray
    kind: np.ndarray
    ia: np.ndarray
    ib: np.ndarray
    shape: np.ndarray
    normal: np.ndarray
    t1: np.ndarray
    t2: np.ndarray
    point: np.ndarray
    ra: np.ndarray
    rb: np.ndarray
    delta: np.ndarray
    degenerate: np.ndarray
    k_n: np.ndarray
    eps_n: np.ndarray
    d_star: np.ndarray
    d_roll: np.ndarray
    mu_t: np.ndarray
    mu_r: np.ndarray
    lam: np.ndarray
    warm: np.ndarray = field(default=None)

    def __len__(self):
        return self.key.shape[0]

    @classmethod
    def empty(cls) -> "ContactSet":
        z = np.zeros(0)
        z3 = np.zeros((0, 3))
        zi = np.zeros(0, dtype=np.int64)
        return cls(zi, zi.copy(), zi.copy(), zi.copy(), zi.copy(), z3, z3.copy(), z3.copy(), z3.copy(),
                   z3.copy(), z3.copy(), z, np.zeros(0, dtype=bool), z.copy(), z.copy(), z.copy(), z.copy(),
                   z.copy(), z.copy(), np.zeros((0, 5)), np.zeros(0, dtype=bool))

    def subset(self, mask) -> "ContactSet":
        out = {}
        for name in self.__dataclass_fields__:
            v = getattr(self, name)
            out[name] = None if v is None else v[mask]
        return ContactSet(**out)

    def pairs(self) -> set:
        return set(zip(self.ia.tolist(), self.ib.tolist(), self.shape.tolist()))


def broadphase(world: SimWorld) -> np.ndarray:
    """Candidate particle pairs ``(i, j)``, ``i < j``, sorted; overlapping AABBs only.

    The grid cell edge tracks the largest particle diameter.  Particle/shape
    candidates are not listed; narrowphase tests every shape directly.
    """
    if world.n_particles < 2:
        return np.zeros((0, 2), dtype=np.int64)
    rad = 0.5 * world.diam
    return _grid_candidates(world.pos, rad, float(world.diam.max()))


def _perpendicular(n: np.ndarray) -> np.ndarray:
    e = np.zeros_like(n)
    use_x = np.abs(n[:, 0]) < 0.9
    e[use_x, 0] = 1.0
    e[~use_x, 1] = 1.0
    t = np.cross(n, e)
    return t / np.linalg.norm(t, axis=1)[:, None]


def _rolling_diameter(rule: str, d_a, d_b):
    """Rolling-resistance lever diameter; ``d_b`` is ``inf`` for tools/walls."""
    flat = np.isinf(d_b)
    if rule == "effective":
        return 1.0 / (1.0 / d_a + 1.0 / d_b)
    if rule == "min":
        return np.where(flat, d_a, np.minimum(d_a, d_b))
    return np.where(flat, d_a, 0.5 * (d_a + np.where(flat, 0.0, d_b)))


def narrowphase(world: SimWorld, candidates: np.ndarray, previous: ContactSet | None = None) -> ContactSet:
    """Exact overlap tests producing one contact per overlapping pair.

    Cached impulses and tangent directions are carried over from ``previous``
    (default: the world's last contact set) for pairs with the same key.
    """
    if previous is None:
        previous = world.contacts
    N = world.n_particles
    pos = world.pos
    rad = 0.5 * world.diam
    ids = world.ids
    E_p = np.array([m.youngs_modulus for m in world.materials])[world.mat]
    nu_p = np.array([m.poisson_ratio for m in world.materials])[world.mat]
    mu_p = np.array([m.friction_coeff for m in world.materials])[world.mat]
    mur_p = np.array([m.rolling_coeff for m in world.materials])[world.mat]

    cand = np.asarray(candidates, dtype=np.int64).reshape(-1, 2)
    keep, n_pp, d_pp, pt_pp, dg_pp = _sphere_pairs(pos, rad, cand)
    i_pp = cand[keep, 0]
    j_pp = cand[keep, 1]
    n_pp, d_pp, pt_pp, dg_pp = n_pp[keep], d_pp[keep], pt_pp[keep], dg_pp[keep]

    shapes = ShapeTable.from_world(world)
    if len(shapes.stype) and N:
        i_ps, s_ps, n_ps, d_ps, pt_ps = _sphere_shapes(pos, rad, shapes.stype, shapes.normal,
                                                       shapes.point, shapes.lo, shapes.hi)
    else:
        i_ps = s_ps = np.zeros(0, dtype=np.int64)
        n_ps = pt_ps = np.zeros((0, 3))
        d_ps = np.zeros(0)

    sbody = shapes.body[s_ps] if len(s_ps) else np.zeros(0, dtype=np.int64)
    ia = np.concatenate([i_pp, i_ps])
    ib = np.concatenate([j_pp, np.where(sbody >= 0, N + sbody, -1)])
    shape = np.concatenate([np.full(len(i_pp), -1, dtype=np.int64), s_ps])
    kind = np.concatenate([np.full(len(i_pp), KIND_PP), np.where(sbody >= 0, KIND_PT, KIND_PW)]).astype(np.int64)
    normal = np.vstack([n_pp, n_ps])
    point = np.vstack([pt_pp, pt_ps])
    delta = np.concatenate([d_pp, d_ps])
    degen = np.concatenate([dg_pp, np.zeros(len(i_ps), dtype=bool)])
    key = np.concatenate([(ids[i_pp] << 32) | ids[j_pp], (ids[i_ps] << 32) | (_SHAPE_KEY_BASE - s_ps)])

    order = np.argsort(key, kind="mergesort")
    ia, ib, shape, kind, normal, point, delta, degen, key = (
        a[order] for a in (ia, ib, shape, kind, normal, point, delta, degen, key))
    nc = len(key)
    pp = kind == KIND_PP

    ra = point - pos[ia] if nc else np.zeros((0, 3))
    rb = np.zeros((nc, 3))
    if nc:
        jb = ib[pp]
        rb[pp] = point[pp] - pos[jb]
        tool_rows = kind == KIND_PT
        if tool_rows.any():
            tpos = np.array([t.position for t in world.tools])
            rb[tool_rows] = point[tool_rows] - tpos[ib[tool_rows] - N]

    # material pairing: particle/particle uses both particles, otherwise the shape material
    E_b = np.empty(nc)
    nu_b = np.empty(nc)
    mu_b = np.empty(nc)
    mur_b = np.empty(nc)
    d_b = np.full(nc, np.inf)
    if nc:
        jb = ib[pp]
        E_b[pp], nu_b[pp], mu_b[pp], mur_b[pp], d_b[pp] = E_p[jb], nu_p[jb], mu_p[jb], mur_p[jb], 2 * rad[jb]
        sh = shape[~pp]
        E_b[~pp], nu_b[~pp], mu_b[~pp], mur_b[~pp] = shapes.E[sh], shapes.nu[sh], shapes.mu_t[sh], shapes.mu_r[sh]
    d_a = 2 * rad[ia]
    E_star = effective_modulus(E_p[ia], nu_p[ia], E_b, nu_b)
    d_star = 1.0 / (1.0 / d_a + 1.0 / d_b)
    k_n = E_star * np.sqrt(d_star) / 3.0
    eps_n = world.config.hertz_exponent / k_n
    d_roll = _rolling_diameter(world.config.rolling_diameter, d_a, d_b)
    mu_t = np.minimum(mu_p[ia], mu_b)
    mu_r = np.minimum(mur_p[ia], mur_b)

    t1 = _perpendicular(normal) if nc else np.zeros((0, 3))
    lam = np.zeros((nc, 5))
    warm = np.zeros(nc, dtype=bool)
    if nc and previous is not None and len(previous):
        idx = np.searchsorted(previous.key, key)
        idx_c = np.minimum(idx, len(previous.key) - 1)
        hit = previous.key[idx_c] == key
        if hit.any():
            src = idx_c[hit]
            n_new = normal[hit]
            t_old = previous.t1[src]
            t_proj = t_old - np.einsum("ij,ij->i", t_old, n_new)[:, None] * n_new
            norm = np.linalg.norm(t_proj, axis=1)
            ok = norm > 1e-6
            t_proj[ok] /= norm[ok][:, None]
            t_proj[~ok] = _perpendicular(n_new[~ok]) if (~ok).any() else t_proj[~ok]
            t1[hit] = t_proj
            t2_new = np.cross(n_new, t_proj)
            old = previous.lam[src]
            fric = old[:, 1:2] * previous.t1[src] + old[:, 2:3] * previous.t2[src]
            roll = old[:, 3:4] * previous.t1[src] + old[:, 4:5] * previous.t2[src]
            new = np.empty_like(old)
            new[:, 0] = np.maximum(old[:, 0], 0.0)
            new[:, 1] = np.einsum("ij,ij->i", fric, t_proj)
            new[:, 2] = np.einsum("ij,ij->i", fric, t2_new)
            new[:, 3] = np.einsum("ij,ij->i", roll, t_proj)
            new[:, 4] = np.einsum("ij,ij->i", roll, t2_new)
            lam[hit] = new
            warm[hit] = True
    t2 = np.cross(normal, t1) if nc else np.zeros((0, 3))
    lam[degen] = 0.0

    return ContactSet(key=key, kind=kind, ia=ia, ib=ib, shape=shape, normal=normal, t1=t1, t2=t2,
                      point=point, ra=ra, rb=rb, delta=delta, degenerate=degen, k_n=k_n, eps_n=eps_n,
                      d_star=d_star, d_roll=d_roll, mu_t=mu_t, mu_r=mu_r, lam=lam, warm=warm)


def detect(world: SimWorld) -> ContactSet:
    return narrowphase(world, broadphase(world))


def all_pairs_overlaps(pos: np.ndarray, diam: np.ndarray) -> set:
    """O(n^2) reference list of overlapping particle index pairs."""
    d = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt((d ** 2).sum(-1))
    reach = 0.5 * (diam[:, None] + diam[None, :])
    i, j = np.nonzero(np.triu(dist < reach, k=1))
    return set(zip(i.tolist(), j.tolist()))
