"""Time-implicit contact dynamics: row assembly, projected Gauss-Seidel,
Newton impact pass and the SPOOK time step.

Every contact contributes five rows: one normal row, a friction pair in the
tangent plane and a rolling pair acting on the relative angular velocity
orthogonal to the normal.  Multipliers are impulses (N s for the normal and
friction rows, N m s for rolling).  The normal row uses a unit-normal
Jacobian; the Hertz gap ``delta**e_H`` and compliance ``e_H/k_n`` are
rescaled onto it, which leaves the static force at ``k_n*delta**(2*e_H - 1)``.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .contacts import ContactSet, KIND_PT, detect
from .core import FORCE, LOCKED, SimWorld
from .errors import SolverDiverged

ROW_NORMAL = "contact-normal"
ROW_FRICTION = "contact-friction"
ROW_ROLLING = "contact-rolling"
ROW_MOTOR = "tool-motor"
ROW_HOLONOMIC = "tool-holonomic"


@dataclass
class ConstraintRow:
    """One scalar row, for inspection; the solver itself works on :class:`RowSet`."""
    kind: str
    body_a: int
    body_b: int
    lin_a: np.ndarray
    ang_a: np.ndarray
    lin_b: np.ndarray
    ang_b: np.ndarray
    bias: float
    sigma: float
    lower: float
    upper: float
    lam: float
    parent: int = -1   # index of the normal row for cone rows


@dataclass
class StepReport:
    iterations: int = 0
    residual_max: float = 0.0
    residual_norm: float = 0.0
    n_contacts: int = 0
    n_degenerate: int = 0
    impact_passes: int = 0
    n_impacts: int = 0
    wall_time: float = 0.0
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["warnings"] = list(self.warnings)
        return d


@dataclass
class RowSet:
    """Struct-of-arrays form of the step's constraint rows.

    Bodies are particles ``0..N-1`` followed by tools; ``-1`` is the static
    world.  ``v``/``w`` are the velocities the rows are solved for (already
    including the external impulse), ``v0`` the velocities at step start.
    """
    h: float
    v: np.ndarray
    w: np.ndarray
    v0: np.ndarray
    w0: np.ndarray
    invm: np.ndarray
    invI: np.ndarray
    ia: np.ndarray
    ib: np.ndarray
    n: np.ndarray
    t1: np.ndarray
    t2: np.ndarray
    ra: np.ndarray
    rb: np.ndarray
    active: np.ndarray
    bias_n: np.ndarray
    sig_n: np.ndarray
    sig_t: np.ndarray
    sig_r: np.ndarray
    mu_t: np.ndarray
    rr: np.ndarray         # rolling bound per unit normal impulse, mu_r*d/2
    lam: np.ndarray
    m_body: np.ndarray
    m_axis: np.ndarray
    m_target: np.ndarray
    m_lo: np.ndarray
    m_hi: np.ndarray
    m_lam: np.ndarray

    @property
    def n_contacts(self) -> int:
        return self.ia.shape[0]

    @property
    def n_bodies(self) -> int:
        return self.v.shape[0]

    def copy(self) -> "RowSet":
        return RowSet(**{k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()})

    def jacobian(self) -> np.ndarray:
        """Dense Jacobian, rows ordered ``[n, t1, t2, r1, r2]`` per contact then motors."""
        nb = self.n_bodies
        nc = self.n_contacts
        J = np.zeros((5 * nc + len(self.m_body), 6 * nb))
        for c in range(nc):
            a, b = self.ia[c], self.ib[c]
            for k, d in enumerate((self.n[c], self.t1[c], self.t2[c])):
                r = 5 * c + k
                if a >= 0:
                    J[r, 6 * a:6 * a + 3] = -d
                    J[r, 6 * a + 3:6 * a + 6] = -np.cross(self.ra[c], d)
                if b >= 0:
                    J[r, 6 * b:6 * b + 3] = d
                    J[r, 6 * b + 3:6 * b + 6] = np.cross(self.rb[c], d)
            for k, d in enumerate((self.t1[c], self.t2[c])):
                r = 5 * c + 3 + k
                if a >= 0:
                    J[r, 6 * a + 3:6 * a + 6] = -d
                if b >= 0:
                    J[r, 6 * b + 3:6 * b + 6] = d
        for m in range(len(self.m_body)):
            J[5 * nc + m, 6 * self.m_body[m] + self.m_axis[m]] = 1.0
        return J

    def inverse_mass(self) -> np.ndarray:
        """Diagonal of ``M^-1`` in the ``6*nb`` layout of :meth:`jacobian`."""
        out = np.empty((self.n_bodies, 6))
        out[:, :3] = self.invm
        out[:, 3:] = self.invI[:, None]
        return out.ravel()

    def sigma(self) -> np.ndarray:
        s = np.stack([self.sig_n, self.sig_t, self.sig_t, self.sig_r, self.sig_r], axis=1).ravel()
        return np.concatenate([s, np.zeros(len(self.m_body))])

    def bias(self) -> np.ndarray:
        """Constant part of each row's residual (velocity units)."""
        b = np.zeros((self.n_contacts, 5))
        b[:, 0] = self.bias_n
        return np.concatenate([b.ravel(), -self.m_target])

    def multipliers(self) -> np.ndarray:
        return np.concatenate([self.lam.ravel(), self.m_lam])

    def to_rows(self) -> list[ConstraintRow]:
        J = self.jacobian()
        sig = self.sigma()
        bias = self.bias()
        lam = self.multipliers()
        rows = []
        kinds = (ROW_NORMAL, ROW_FRICTION, ROW_FRICTION, ROW_ROLLING, ROW_ROLLING)
        for r in range(J.shape[0]):
            if r < 5 * self.n_contacts:
                c, k = divmod(r, 5)
                a, b = int(self.ia[c]), int(self.ib[c])
                kind = kinds[k]
                lo, hi = (0.0, np.inf) if k == 0 else (-np.inf, np.inf)
                parent = -1 if k == 0 else 5 * c
            else:
                m = r - 5 * self.n_contacts
                a, b = -1, int(self.m_body[m])
                kind = ROW_MOTOR
                lo, hi = float(self.m_lo[m]), float(self.m_hi[m])
                parent = -1
            blk = lambda i: J[r, 6 * i:6 * i + 6] if i >= 0 else np.zeros(6)
            ja, jb = blk(a), blk(b)
            rows.append(ConstraintRow(kind, a, b, ja[:3], ja[3:], jb[:3], jb[3:], float(bias[r]),
                                      float(sig[r]), lo, hi, float(lam[r]), parent))
        return rows


# ---------------------------------------------------------------------------
# numba kernels
#
# Per contact the five rows [n, t1, t2, r1, r2] share one Jacobian layout:
# body a gets (-d_k, -(ra x d_k)) for the three linear rows and (0, -t_k) for
# the rolling rows, body b the same with +/rb.  ``ca``/``cb`` hold the arm
# cross products of the three linear rows.

@njit(cache=True)
def _arms(ra, rb, n, t1, t2):
    nc = ra.shape[0]
    ca = np.zeros((nc, 3, 3))
    cb = np.zeros((nc, 3, 3))
    for c in range(nc):
        for k in range(3):
            if k == 0:
                d = n[c]
            elif k == 1:
                d = t1[c]
            else:
                d = t2[c]
            ca[c, k, 0] = ra[c, 1] * d[2] - ra[c, 2] * d[1]
            ca[c, k, 1] = ra[c, 2] * d[0] - ra[c, 0] * d[2]
            ca[c, k, 2] = ra[c, 0] * d[1] - ra[c, 1] * d[0]
            cb[c, k, 0] = rb[c, 1] * d[2] - rb[c, 2] * d[1]
            cb[c, k, 1] = rb[c, 2] * d[0] - rb[c, 0] * d[2]
            cb[c, k, 2] = rb[c, 0] * d[1] - rb[c, 1] * d[0]
    return ca, cb


@njit(cache=True)
def _dirs(n, t1, t2):
    nc = n.shape[0]
    D = np.empty((nc, 5, 3))
    for c in range(nc):
        for j in range(3):
            D[c, 0, j] = n[c, j]
            D[c, 1, j] = t1[c, j]
            D[c, 2, j] = t2[c, j]
            D[c, 3, j] = t1[c, j]
            D[c, 4, j] = t2[c, j]
    return D


@njit(cache=True)
def _prepare(invm, invI, ia, ib, DD, ca, cb, sig_n, sig_t, sig_r):
    """Local 5x5 Delassus blocks ``G M^-1 G^T + Sigma`` per contact."""
    nc = ia.shape[0]
    W = np.zeros((nc, 5, 5))
    for c in range(nc):
        D = DD[c]
        for side in range(2):
            body = ia[c] if side == 0 else ib[c]
            if body < 0:
                continue
            C = ca[c] if side == 0 else cb[c]
            for k in range(5):
                for l in range(5):
                    s = 0.0
                    if k < 3 and l < 3:
                        for j in range(3):
                            s += invm[body, j] * D[k, j] * D[l, j]
                    # angular parts: linear rows use C[k], rolling rows use D[k]
                    if invI[body] != 0.0:
                        acc = 0.0
                        for j in range(3):
                            gk = C[k, j] if k < 3 else D[k, j]
                            gl = C[l, j] if l < 3 else D[l, j]
                            acc += gk * gl
                        s += invI[body] * acc
                    W[c, k, l] += s
        W[c, 0, 0] += sig_n[c]
        W[c, 1, 1] += sig_t[c]
        W[c, 2, 2] += sig_t[c]
        W[c, 3, 3] += sig_r[c]
        W[c, 4, 4] += sig_r[c]
    return W


@njit(cache=True, inline="always")
def _push(v, w, invm, invI, a, b, c, D, ca, cb, dl):
    """Velocity change from multiplier increments ``dl`` (M^-1 G^T dl)."""
    px = D[c, 0, 0] * dl[0] + D[c, 1, 0] * dl[1] + D[c, 2, 0] * dl[2]
    py = D[c, 0, 1] * dl[0] + D[c, 1, 1] * dl[1] + D[c, 2, 1] * dl[2]
    pz = D[c, 0, 2] * dl[0] + D[c, 1, 2] * dl[1] + D[c, 2, 2] * dl[2]
    tr0 = D[c, 3, 0] * dl[3] + D[c, 4, 0] * dl[4]
    tr1 = D[c, 3, 1] * dl[3] + D[c, 4, 1] * dl[4]
    tr2 = D[c, 3, 2] * dl[3] + D[c, 4, 2] * dl[4]
    if b >= 0:
        v[b, 0] += invm[b, 0] * px
        v[b, 1] += invm[b, 1] * py
        v[b, 2] += invm[b, 2] * pz
        s = invI[b]
        if s != 0.0:
            for j in range(3):
                w[b, j] += s * (cb[c, 0, j] * dl[0] + cb[c, 1, j] * dl[1] + cb[c, 2, j] * dl[2]
                                + (tr0 if j == 0 else (tr1 if j == 1 else tr2)))
    if a >= 0:
        v[a, 0] -= invm[a, 0] * px
        v[a, 1] -= invm[a, 1] * py
        v[a, 2] -= invm[a, 2] * pz
        s = invI[a]
        if s != 0.0:
            for j in range(3):
                w[a, j] -= s * (ca[c, 0, j] * dl[0] + ca[c, 1, j] * dl[1] + ca[c, 2, j] * dl[2]
                                + (tr0 if j == 0 else (tr1 if j == 1 else tr2)))


@njit(cache=True)
def _warm_apply(v, w, invm, invI, ia, ib, D, ca, cb, active, lam, m_body, m_axis, m_lam):
    dl = np.zeros(5)
    for c in range(ia.shape[0]):
        if not active[c]:
            continue
        for k in range(5):
            dl[k] = lam[c, k]
        _push(v, w, invm, invI, ia[c], ib[c], c, D, ca, cb, dl)
    for m in range(m_body.shape[0]):
        b = m_body[m]
        v[b, m_axis[m]] += invm[b, m_axis[m]] * m_lam[m]


@njit(cache=True)
def _sweeps(v, w, invm, invI, ia, ib, D, ca, cb, active, bias_n, sig_n, sig_t, sig_r, W, mu_t, rr,
            lam, m_body, m_axis, m_target, m_lo, m_hi, m_lam, n_it, exit_tol, h):
    """Projected block Gauss-Seidel, one 5-row block per contact.

    Returns (sweeps done, max |dlam|/h, rms |dlam|/h of the last sweep, bad row).
    """
    nc = ia.shape[0]
    nm = m_body.shape[0]
    res_max = 0.0
    res_norm = 0.0
    it = 0
    for it in range(1, n_it + 1):
        res_max = 0.0
        acc = 0.0
        for c in range(nc):
            if not active[c]:
                continue
            a = ia[c]
            b = ib[c]
            nx, ny, nz = D[c, 0, 0], D[c, 0, 1], D[c, 0, 2]
            ax, ay, az = D[c, 1, 0], D[c, 1, 1], D[c, 1, 2]
            bx, by, bz = D[c, 2, 0], D[c, 2, 1], D[c, 2, 2]
            # relative velocity terms G v for the five rows
            u0 = 0.0
            u1 = 0.0
            u2 = 0.0
            dwx = 0.0
            dwy = 0.0
            dwz = 0.0
            if b >= 0:
                vx, vy, vz = v[b, 0], v[b, 1], v[b, 2]
                wx, wy, wz = w[b, 0], w[b, 1], w[b, 2]
                u0 += nx * vx + ny * vy + nz * vz
                u1 += ax * vx + ay * vy + az * vz
                u2 += bx * vx + by * vy + bz * vz
                if invI[b] != 0.0:
                    u0 += cb[c, 0, 0] * wx + cb[c, 0, 1] * wy + cb[c, 0, 2] * wz
                    u1 += cb[c, 1, 0] * wx + cb[c, 1, 1] * wy + cb[c, 1, 2] * wz
                    u2 += cb[c, 2, 0] * wx + cb[c, 2, 1] * wy + cb[c, 2, 2] * wz
                    dwx += wx
                    dwy += wy
                    dwz += wz
            if a >= 0:
                vx, vy, vz = v[a, 0], v[a, 1], v[a, 2]
                wx, wy, wz = w[a, 0], w[a, 1], w[a, 2]
                u0 -= nx * vx + ny * vy + nz * vz
                u1 -= ax * vx + ay * vy + az * vz
                u2 -= bx * vx + by * vy + bz * vz
                if invI[a] != 0.0:
                    u0 -= ca[c, 0, 0] * wx + ca[c, 0, 1] * wy + ca[c, 0, 2] * wz
                    u1 -= ca[c, 1, 0] * wx + ca[c, 1, 1] * wy + ca[c, 1, 2] * wz
                    u2 -= ca[c, 2, 0] * wx + ca[c, 2, 1] * wy + ca[c, 2, 2] * wz
                    dwx -= wx
                    dwy -= wy
                    dwz -= wz
            l0, l1, l2, l3, l4 = lam[c, 0], lam[c, 1], lam[c, 2], lam[c, 3], lam[c, 4]
            u0 += sig_n[c] * l0 + bias_n[c]
            u1 += sig_t[c] * l1
            u2 += sig_t[c] * l2
            u3 = ax * dwx + ay * dwy + az * dwz + sig_r[c] * l3
            u4 = bx * dwx + by * dwy + bz * dwz + sig_r[c] * l4

            # normal row
            n0 = l0 - u0 / W[c, 0, 0]
            if n0 < 0.0:
                n0 = 0.0
            d0 = n0 - l0
            u1 += W[c, 1, 0] * d0
            u2 += W[c, 2, 0] * d0
            u3 += W[c, 3, 0] * d0
            u4 += W[c, 4, 0] * d0

            # friction pair: joint 2x2 solve, then disc projection
            bound = mu_t[c] * n0
            if bound <= 0.0:
                n1 = 0.0
                n2 = 0.0
            else:
                a00 = W[c, 1, 1]
                a01 = W[c, 1, 2]
                a11 = W[c, 2, 2]
                det = a00 * a11 - a01 * a01
                n1 = l1 - (a11 * u1 - a01 * u2) / det
                n2 = l2 - (a00 * u2 - a01 * u1) / det
                mag = np.sqrt(n1 * n1 + n2 * n2)
                if mag > bound:
                    # the fixed point of this projection is maximum dissipation
                    ts = 0.5 * (a00 + a11)
                    s1 = l1 - u1 / ts
                    s2 = l2 - u2 / ts
                    sm = np.sqrt(s1 * s1 + s2 * s2)
                    if sm > 0.0:
                        n1 = bound * s1 / sm
                        n2 = bound * s2 / sm
                    else:
                        n1 *= bound / mag
                        n2 *= bound / mag
            d1 = n1 - l1
            d2 = n2 - l2
            u3 += W[c, 3, 1] * d1 + W[c, 3, 2] * d2
            u4 += W[c, 4, 1] * d1 + W[c, 4, 2] * d2

            # rolling pair
            bound = rr[c] * n0
            if bound <= 0.0 or W[c, 3, 3] <= 0.0:
                n3 = 0.0
                n4 = 0.0
            else:
                a00 = W[c, 3, 3]
                a01 = W[c, 3, 4]
                a11 = W[c, 4, 4]
                det = a00 * a11 - a01 * a01
                n3 = l3 - (a11 * u3 - a01 * u4) / det
                n4 = l4 - (a00 * u4 - a01 * u3) / det
                mag = np.sqrt(n3 * n3 + n4 * n4)
                if mag > bound:
                    ts = 0.5 * (a00 + a11)
                    s1 = l3 - u3 / ts
                    s2 = l4 - u4 / ts
                    sm = np.sqrt(s1 * s1 + s2 * s2)
                    if sm > 0.0:
                        n3 = bound * s1 / sm
                        n4 = bound * s2 / sm
                    else:
                        n3 *= bound / mag
                        n4 *= bound / mag
            d3 = n3 - l3
            d4 = n4 - l4
            lam[c, 0] = n0
            lam[c, 1] = n1
            lam[c, 2] = n2
            lam[c, 3] = n3
            lam[c, 4] = n4
            if not (n0 == n0 and n1 == n1 and n2 == n2 and n3 == n3 and n4 == n4):
                bad = 5 * c
                if n0 == n0:
                    bad += 1 if not (n1 == n1 and n2 == n2) else 3
                return it, res_max / h, 0.0, bad

            # apply M^-1 G^T dlam
            px = nx * d0 + ax * d1 + bx * d2
            py = ny * d0 + ay * d1 + by * d2
            pz = nz * d0 + az * d1 + bz * d2
            tx = ax * d3 + bx * d4
            ty = ay * d3 + by * d4
            tz = az * d3 + bz * d4
            if b >= 0:
                v[b, 0] += invm[b, 0] * px
                v[b, 1] += invm[b, 1] * py
                v[b, 2] += invm[b, 2] * pz
                s = invI[b]
                if s != 0.0:
                    w[b, 0] += s * (cb[c, 0, 0] * d0 + cb[c, 1, 0] * d1 + cb[c, 2, 0] * d2 + tx)
                    w[b, 1] += s * (cb[c, 0, 1] * d0 + cb[c, 1, 1] * d1 + cb[c, 2, 1] * d2 + ty)
                    w[b, 2] += s * (cb[c, 0, 2] * d0 + cb[c, 1, 2] * d1 + cb[c, 2, 2] * d2 + tz)
            if a >= 0:
                v[a, 0] -= invm[a, 0] * px
                v[a, 1] -= invm[a, 1] * py
                v[a, 2] -= invm[a, 2] * pz
                s = invI[a]
                if s != 0.0:
                    w[a, 0] -= s * (ca[c, 0, 0] * d0 + ca[c, 1, 0] * d1 + ca[c, 2, 0] * d2 + tx)
                    w[a, 1] -= s * (ca[c, 0, 1] * d0 + ca[c, 1, 1] * d1 + ca[c, 2, 1] * d2 + ty)
                    w[a, 2] -= s * (ca[c, 0, 2] * d0 + ca[c, 1, 2] * d1 + ca[c, 2, 2] * d2 + tz)
            dd = d0 * d0 + d1 * d1 + d2 * d2 + d3 * d3 + d4 * d4
            acc += dd
            m = max(abs(d0), abs(d1), abs(d2), abs(d3), abs(d4))
            if m > res_max:
                res_max = m
        for m in range(nm):
            b = m_body[m]
            k = m_axis[m]
            im = invm[b, k]
            old = m_lam[m]
            new = old - (v[b, k] - m_target[m]) / im
            new = min(max(new, m_lo[m]), m_hi[m])
            d0 = new - old
            m_lam[m] = new
            v[b, k] += im * d0
            acc += d0 * d0
            if abs(d0) > res_max:
                res_max = abs(d0)
            if not (new == new):
                return it, res_max / h, 0.0, 5 * nc + m
        res_norm = np.sqrt(acc)
        if res_max / h < exit_tol:
            break
    return it, res_max / h, res_norm / h, -1


# ---------------------------------------------------------------------------

def spook_constants(h: float, tau: float) -> tuple[float, float]:
    """``(Upsilon, a)``: velocity feedback weight ``1/(1 + 4 tau/h)`` and bias gain ``4 Upsilon/h``."""
    ups = 1.0 / (1.0 + 4.0 * tau / h)
    return ups, 4.0 * ups / h


def hertz_row(delta, k_n, e_H: float, h: float, tau: float, d_scale=None):
    """Bias gap and regularization of a Hertz normal row with unit Jacobian.

    Returns ``(phi_eff, sigma)`` where ``phi_eff = -delta/e_H`` and
    ``sigma = 4*eps_eff*Upsilon/h**2`` with ``eps_eff = 1/(k_n e_H delta**(2 e_H - 2))``.
    """
    delta = np.asarray(delta, dtype=float)
    if d_scale is not None:
        delta = np.maximum(delta, 1e-9 * np.asarray(d_scale))
    ups, _ = spook_constants(h, tau)
    eps_eff = 1.0 / (k_n * e_H * delta ** (2.0 * e_H - 2.0))
    return -delta / e_H, 4.0 * eps_eff * ups / (h * h)


def _body_state(world: SimWorld):
    """Velocities, inverse masses and free-motion impulses for particles and tools."""
    N = world.n_particles
    T = len(world.tools)
    h = world.config.timestep
    m, inertia = world.masses()
    v = np.zeros((N + T, 3))
    w = np.zeros((N + T, 3))
    invm = np.zeros((N + T, 3))
    invI = np.zeros(N + T)
    v[:N] = world.vel
    w[:N] = world.omega
    if N:
        invm[:N] = (1.0 / m)[:, None]
        invI[:N] = 1.0 / inertia
    dv = np.zeros((N + T, 3))
    dv[:N] = h * world.gravity
    m_body, m_axis, m_target, m_lo, m_hi = [], [], [], [], []
    for t, tool in enumerate(world.tools):
        j = N + t
        for k, dof in enumerate(tool.dofs):
            if dof.mode == LOCKED:
                v[j, k] = 0.0
            elif dof.mode == FORCE:
                v[j, k] = tool.velocity[k]
                invm[j, k] = 1.0 / tool.mass
                dv[j, k] = h * dof.force / tool.mass
            elif dof.kinematic:
                v[j, k] = dof.target
            else:
                v[j, k] = tool.velocity[k]
                invm[j, k] = 1.0 / tool.mass
                m_body.append(j)
                m_axis.append(k)
                m_target.append(dof.target)
                m_lo.append(dof.force_min * h)
                m_hi.append(dof.force_max * h)
    motors = (np.array(m_body, dtype=np.int64), np.array(m_axis, dtype=np.int64), np.array(m_target, dtype=float),
              np.array(m_lo, dtype=float), np.array(m_hi, dtype=float))
    return v, w, invm, invI, dv, motors


def assemble(world: SimWorld, contacts: ContactSet, velocities=None) -> RowSet:
    """Build the SPOOK rows for this step.

    ``velocities`` optionally overrides the step-start ``(v, w)`` of all
    bodies (used after an impact pass).
    """
    cfg = world.config
    h = cfg.timestep
    tau = cfg.damping_factor * h
    ups, a_gain = spook_constants(h, tau)
    v, w, invm, invI, dv, motors = _body_state(world)
    if velocities is not None:
        v, w = velocities[0].copy(), velocities[1].copy()
    nc = len(contacts)
    active = ~contacts.degenerate
    phi, sig_n = hertz_row(contacts.delta, contacts.k_n, cfg.hertz_exponent, h, tau, contacts.d_star)
    gv = np.zeros(nc)
    if nc:
        rel = _rel_vel_many(v, w, contacts)
        gv = np.einsum("ij,ij->i", rel, contacts.normal)
    bias_n = a_gain * phi
    if cfg.velocity_feedback:
        bias_n = bias_n - ups * gv
    lam = contacts.lam.copy()
    lam[:, 0] = np.maximum(lam[:, 0], 0.0)
    lam[~active] = 0.0
    rr = contacts.mu_r * 0.5 * contacts.d_roll
    m_lam = np.zeros(len(motors[0]))
    return RowSet(h=h, v=v + dv, w=w, v0=v, w0=w, invm=invm, invI=invI, ia=contacts.ia, ib=contacts.ib,
                  n=contacts.normal, t1=contacts.t1, t2=contacts.t2, ra=contacts.ra, rb=contacts.rb,
                  active=active, bias_n=bias_n, sig_n=sig_n, sig_t=np.full(nc, cfg.friction_compliance / h),
                  sig_r=np.full(nc, cfg.rolling_compliance / h), mu_t=contacts.mu_t, rr=rr, lam=lam,
                  m_body=motors[0], m_axis=motors[1], m_target=motors[2], m_lo=motors[3], m_hi=motors[4],
                  m_lam=m_lam)


def _rel_vel_many(v, w, c: ContactSet) -> np.ndarray:
    def point(idx, r):
        out = np.zeros((len(idx), 3))
        ok = idx >= 0
        j = idx[ok]
        out[ok] = v[j] + np.cross(w[j], r[ok])
        return out
    return point(c.ib, c.rb) - point(c.ia, c.ra)


def pgs_solve(rows: RowSet, n_iterations: int, residual_exit=None, warm_start: bool = True):
    """Solve ``rows`` in place.  Returns ``(v, w, lam, m_lam, StepReport)``.

    Sweeps are in row order; each contact updates normal, friction pair and
    rolling pair in turn, then motor rows follow.  ``residual_exit`` is a
    force (N): sweeps stop once the largest multiplier change per sweep,
    divided by the timestep, drops below it.
    """
    t0 = time.perf_counter()
    if n_iterations < 1:
        raise ValueError("n_iterations must be >= 1")
    if not warm_start:
        rows.lam[:] = 0.0
        rows.m_lam[:] = 0.0
    rows.m_lam[:] = np.clip(rows.m_lam, rows.m_lo, rows.m_hi)
    ca, cb = _arms(rows.ra, rows.rb, rows.n, rows.t1, rows.t2)
    D = _dirs(rows.n, rows.t1, rows.t2)
    W = _prepare(rows.invm, rows.invI, rows.ia, rows.ib, D, ca, cb,
                 rows.sig_n, rows.sig_t, rows.sig_r)
    _project_cached(rows)
    _warm_apply(rows.v, rows.w, rows.invm, rows.invI, rows.ia, rows.ib, D, ca, cb,
                rows.active, rows.lam, rows.m_body, rows.m_axis, rows.m_lam)
    exit_tol = -1.0 if residual_exit is None else float(residual_exit)
    it, rmax, rnorm, bad = _sweeps(rows.v, rows.w, rows.invm, rows.invI, rows.ia, rows.ib, D, ca, cb, rows.active, rows.bias_n, rows.sig_n, rows.sig_t,
                                   rows.sig_r, W, rows.mu_t, rows.rr, rows.lam, rows.m_body,
                                   rows.m_axis, rows.m_target, rows.m_lo, rows.m_hi, rows.m_lam,
                                   int(n_iterations), exit_tol, rows.h)
    if bad >= 0:
        raise SolverDiverged(f"non-finite multiplier in row {bad}", row_index=int(bad))
    if not (np.isfinite(rows.v).all() and np.isfinite(rows.w).all()):
        raise SolverDiverged("non-finite velocity after solve", row_index=-1)
    report = StepReport(iterations=int(it), residual_max=float(rmax), residual_norm=float(rnorm),
                        n_contacts=int(rows.n_contacts), n_degenerate=int((~rows.active).sum()),
                        wall_time=time.perf_counter() - t0)
    return rows.v, rows.w, rows.lam, rows.m_lam, report


def _project_cached(rows: RowSet) -> None:
    """Pull warm-start multipliers back into their feasible sets."""
    lam = rows.lam
    if not len(lam):
        return
    lam[:, 0] = np.maximum(lam[:, 0], 0.0)
    for cols, bound in (((1, 2), rows.mu_t * lam[:, 0]), ((3, 4), rows.rr * lam[:, 0])):
        mag = np.hypot(lam[:, cols[0]], lam[:, cols[1]])
        over = mag > bound
        scale = np.where(over, bound / np.where(mag > 0, mag, 1.0), 1.0)
        lam[:, cols[0]] *= scale
        lam[:, cols[1]] *= scale


def impact_resolve(world: SimWorld, contacts: ContactSet, threshold=None, n_iterations=None):
    """Newton impact pass on step-start velocities.

    Contacts approaching faster than ``threshold`` get ``G v+ >= -e G v-``;
    every other normal row gets ``G v+ >= 0``; friction and rolling rows stay
    in place without regularization.  Returns ``(v, w, n_impacting)`` for all
    bodies (particles then tools), or ``None`` when nothing impacts.
    """
    cfg = world.config
    if threshold is None:
        threshold = cfg.impact_threshold(float(np.linalg.norm(world.gravity)) or 9.81)
    if not len(contacts):
        return None
    v, w, invm, invI, _, motors = _body_state(world)
    gv = np.einsum("ij,ij->i", _rel_vel_many(v, w, contacts), contacts.normal)
    impacting = (-gv > threshold) & ~contacts.degenerate
    if not impacting.any():
        return None
    e_a = np.array([m.restitution for m in world.materials])[world.mat][contacts.ia]
    e = np.where(impacting, e_a, 0.0)
    nc = len(contacts)
    bias = np.where(impacting, e * gv, 0.0)
    rows = RowSet(h=cfg.timestep, v=v.copy(), w=w.copy(), v0=v, w0=w, invm=invm, invI=invI, ia=contacts.ia,
                  ib=contacts.ib, n=contacts.normal, t1=contacts.t1, t2=contacts.t2, ra=contacts.ra,
                  rb=contacts.rb, active=~contacts.degenerate, bias_n=bias, sig_n=np.zeros(nc),
                  sig_t=np.zeros(nc), sig_r=np.zeros(nc), mu_t=contacts.mu_t,
                  rr=contacts.mu_r * 0.5 * contacts.d_roll, lam=np.zeros((nc, 5)),
                  m_body=motors[0], m_axis=motors[1], m_target=motors[2], m_lo=motors[3] * 0,
                  m_hi=motors[4] * 0, m_lam=np.zeros(len(motors[0])))
    # motors are velocity rows; during an instantaneous impulse they hold no force
    it = n_iterations or cfg.pgs_iterations
    v2, w2, _, _, _ = pgs_solve(rows, it, warm_start=False)
    return v2, w2, int(impacting.sum())


def step(world: SimWorld, contacts: ContactSet | None = None):
    """Advance ``world`` by one timestep in place; returns the StepReport.

    The step is atomic: on :class:`SolverDiverged` the world is untouched.
    """
    t0 = time.perf_counter()
    cfg = world.config
    h = cfg.timestep
    if contacts is None:
        contacts = detect(world)
    n_imp = 0
    velocities = None
    if cfg.impact_pass and len(contacts):
        res = impact_resolve(world, contacts)
        if res is not None:
            velocities = (res[0], res[1])
            n_imp = res[2]
    rows = assemble(world, contacts, velocities)
    exit_tol = cfg.residual_exit_tolerance
    v, w, lam, m_lam, report = pgs_solve(rows, cfg.pgs_iterations, exit_tol)

    # commit
    N = world.n_particles
    world.vel = v[:N].copy()
    world.omega = w[:N].copy()
    world.pos = world.pos + h * world.vel
    world.quat = integrate_quaternions(world.quat, world.omega, h)
    _update_tools(world, contacts, v, lam, rows)
    contacts.lam = lam.copy()
    world.contacts = contacts
    world.time += h
    report.impact_passes = 1 if n_imp else 0
    report.n_impacts = n_imp
    report.n_contacts = len(contacts)
    if report.n_degenerate:
        msg = f"{report.n_degenerate} degenerate contact(s) skipped"
        report.warnings.append(msg)
        warnings.warn(msg, RuntimeWarning)
    report.wall_time = time.perf_counter() - t0
    world.last_report = report
    return report


def _update_tools(world: SimWorld, contacts: ContactSet, v, lam, rows: RowSet) -> None:
    N = world.n_particles
    h = world.config.timestep
    if not world.tools:
        return
    on_tool = contacts.kind == KIND_PT
    imp = (contacts.normal * lam[:, 0:1] + contacts.t1 * lam[:, 1:2] + contacts.t2 * lam[:, 2:3])
    for t, tool in enumerate(world.tools):
        sel = on_tool & (contacts.ib == N + t)
        tool.contact_force = imp[sel].sum(axis=0) / h if sel.any() else np.zeros(3)
        tool.n_contacts = int(sel.sum())
        tool.motor_force = np.zeros(3)
        for m in np.nonzero(rows.m_body == N + t)[0]:
            tool.motor_force[rows.m_axis[m]] = rows.m_lam[m] / h
        tool.velocity = v[N + t].copy()
        tool.position = tool.position + h * tool.velocity


def integrate_quaternions(q: np.ndarray, omega: np.ndarray, h: float) -> np.ndarray:
    """``q += h/2 (0, omega) * q``, renormalized.  Quaternions are ``(w, x, y, z)``."""
    if not len(q):
        return q.copy()
    w0, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    ox, oy, oz = omega[:, 0], omega[:, 1], omega[:, 2]
    dq = 0.5 * h * np.stack([-ox * x - oy * y - oz * z,
                             ox * w0 + oy * z - oz * y,
                             oy * w0 + oz * x - ox * z,
                             oz * w0 + ox * y - oy * x], axis=1)
    out = q + dq
    return out / np.linalg.norm(out, axis=1)[:, None]


def run(world: SimWorld, n_steps: int, callback=None):
    """Step ``n_steps`` times; ``callback(world, report)`` after each step."""
    report = None
    for _ in range(int(n_steps)):
        report = step(world)
        if callback is not None:
            callback(world, report)
    return report
