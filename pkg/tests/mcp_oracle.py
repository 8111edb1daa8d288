"""Brute-force active-set solver for small contact MCPs (test oracle).

Every contact is either separated, or touching with its friction pair and
rolling pair each sticking or slipping.  Each combination is an equation
system: linear when nothing slips, solved with ``scipy.optimize.root``
otherwise.  The first combination whose solution satisfies every sign and
cone condition is returned; with positive compliance on all rows the
solution is unique, so enumeration order does not matter.
"""
import itertools

import numpy as np
from scipy.optimize import root

from refinedem.solver import RowSet


def dense_problem(rows: RowSet):
    """``(A, u0)`` with row residual ``u(lam) = u0 + A lam`` over the 5 rows per contact."""
    J = rows.jacobian()
    Minv = rows.inverse_mass()
    vf = np.hstack([rows.v, rows.w]).ravel()
    A = (J * Minv) @ J.T + np.diag(rows.sigma())
    u0 = J @ vf + rows.bias()
    return A, u0


def _equations(states, A, u0, mu, rr):
    def F(lam):
        u = u0 + A @ lam
        out = np.empty_like(lam)
        for c, (touch, fslip, rslip) in enumerate(states):
            k = 5 * c
            if not touch:
                out[k:k + 5] = lam[k:k + 5]
                continue
            out[k] = u[k]
            for cols, bound, slip in (((1, 2), mu[c], fslip), ((3, 4), rr[c], rslip)):
                i, j = k + cols[0], k + cols[1]
                if not slip:
                    out[i], out[j] = u[i], u[j]
                else:
                    s = np.hypot(u[i], u[j])
                    s = s if s > 1e-300 else 1e-300
                    out[i] = lam[i] + bound * lam[k] * u[i] / s
                    out[j] = lam[j] + bound * lam[k] * u[j] / s
        return out
    return F


def _linear_solution(states, A, u0):
    n = A.shape[0]
    M = np.zeros((n, n))
    rhs = np.zeros(n)
    for c, (touch, _, _) in enumerate(states):
        for r in range(5 * c, 5 * c + 5):
            if touch:
                M[r] = A[r]
                rhs[r] = -u0[r]
            else:
                M[r, r] = 1.0
    return np.linalg.solve(M, rhs)


def _valid(states, lam, A, u0, mu, rr, tol):
    u = u0 + A @ lam
    scale = max(1.0, np.abs(lam).max())
    for c, (touch, fslip, rslip) in enumerate(states):
        k = 5 * c
        if not touch:
            if u[k] < -tol * max(1.0, np.abs(u0).max()):
                return False
            continue
        if lam[k] < -tol * scale:
            return False
        for cols, bound, slip in (((1, 2), mu[c], fslip), ((3, 4), rr[c], rslip)):
            i, j = k + cols[0], k + cols[1]
            mag = np.hypot(lam[i], lam[j])
            if not slip:
                if mag > bound * lam[k] + tol * scale:
                    return False
            else:
                s = np.hypot(u[i], u[j])
                if bound * lam[k] <= 0:
                    if mag > tol * scale:
                        return False
                    continue
                if s <= tol * 1e-3:
                    return False
                if abs(mag - bound * lam[k]) > tol * scale:
                    return False
                if lam[i] * u[i] + lam[j] * u[j] > 0:
                    return False
    return True


def _starts(states, A, u0, mu, rr, lam_stick):
    """Initial guesses: slip rows opposite the slip velocity of the frictionless solution."""
    nc = len(states)
    # normals only: solve the touching normal rows with every tangential multiplier at zero
    idx = [5 * c for c, (t, _, _) in enumerate(states) if t]
    base = np.zeros(5 * nc)
    if idx:
        base[idx] = np.linalg.solve(A[np.ix_(idx, idx)], -u0[idx])
    out = []
    for seed_lam in (base, lam_stick):
        lam = seed_lam.copy()
        u = u0 + A @ lam
        for c, (touch, fs, rs) in enumerate(states):
            k = 5 * c
            for cols, bound, slip in (((1, 2), mu[c], fs), ((3, 4), rr[c], rs)):
                if touch and slip:
                    i, j = k + cols[0], k + cols[1]
                    sv = np.hypot(u[i], u[j])
                    if sv > 0:
                        lam[i] = -bound * abs(lam[k]) * u[i] / sv
                        lam[j] = -bound * abs(lam[k]) * u[j] / sv
        out.append(lam)
    return out


def solve_mcp(rows: RowSet, tol: float = 1e-9):
    """Multipliers ``(nc, 5)`` of the unique MCP solution, or ``None``."""
    A, u0 = dense_problem(rows)
    nc = rows.n_contacts
    mu, rr = rows.mu_t, rows.rr
    options = []
    for c in range(nc):
        fs = (True,) if mu[c] == 0 else (False, True)
        rs = (True,) if rr[c] == 0 else (False, True)
        options.append([(False, False, False)] + [(True, f, r) for f in fs for r in rs])
    combos = sorted(itertools.product(*options), key=lambda s: sum(t[1] + t[2] for t in s))
    for states in combos:
        try:
            lam0 = _linear_solution(states, A, u0)
        except np.linalg.LinAlgError:
            continue
        if any(t[1] or t[2] for t in states):
            F = _equations(states, A, u0, mu, rr)
            lam = None
            for start in _starts(states, A, u0, mu, rr, lam0):
                x = root(F, start, method="hybr", tol=1e-15).x
                if np.abs(F(x)).max() <= 1e-11 * max(1.0, np.abs(x).max()):
                    lam = x
                    break
            if lam is None:
                continue
        else:
            lam = lam0
        if _valid(states, lam, A, u0, mu, rr, tol):
            return lam.reshape(nc, 5)
    return None
