import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from refinedem.contacts import KIND_PT, all_pairs_overlaps, broadphase, detect, narrowphase
from refinedem.core import SAND, Box, RigidTool, SimWorld


def _world(pos, d):
    w = SimWorld(gravity=np.zeros(3))
    w.add_particles(pos, d)
    return w


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_broadphase_matches_all_pairs(seed):
    rng = np.random.default_rng(seed)
    n = 60
    pos = rng.uniform(0, 0.1, (n, 3))
    d = rng.uniform(0.005, 0.03, n)
    w = _world(pos, d)
    c = detect(w)
    got = {(a, b) for a, b in zip(c.ia.tolist(), c.ib.tolist())}
    assert got == all_pairs_overlaps(pos, d)
    cand = broadphase(w)
    assert np.all(cand[:, 0] < cand[:, 1])


def test_overlap_depth_examples():
    w = _world([[0, 0, 0], [0.0095, 0, 0]], 0.01)
    c = detect(w)
    assert len(c) == 1
    assert c.delta[0] == pytest.approx(0.0005)
    assert np.allclose(c.normal[0], [1, 0, 0])
    w = _world([[0, 0, 0], [0.0101, 0, 0]], 0.01)
    assert len(detect(w)) == 0


def test_frame_is_orthonormal():
    rng = np.random.default_rng(3)
    w = _world(rng.uniform(0, 0.05, (80, 3)), 0.012)
    c = detect(w)
    for a, b in ((c.normal, c.t1), (c.normal, c.t2), (c.t1, c.t2)):
        assert np.allclose(np.einsum("ij,ij->i", a, b), 0, atol=1e-12)
    for v in (c.normal, c.t1, c.t2):
        assert np.allclose(np.linalg.norm(v, axis=1), 1)


def test_floor_contact():
    w = _world([[0.05, 0.05, 0.004]], 0.01)
    w.set_container([0, 0, 0], [0.1, 0.1, 0.1])
    c = detect(w)
    assert len(c) == 1 and c.ib[0] == -1
    assert c.delta[0] == pytest.approx(0.001)


def _box_distance_oracle(center, lo, hi, n=61):
    # dense surface sampling of the box
    g = [np.linspace(lo[k], hi[k], n) for k in range(3)]
    pts = []
    for k in range(3):
        a, b = [j for j in range(3) if j != k]
        A, B = np.meshgrid(g[a], g[b], indexing="ij")
        for face in (lo[k], hi[k]):
            p = np.empty((A.size, 3))
            p[:, k] = face
            p[:, a] = A.ravel()
            p[:, b] = B.ravel()
            pts.append(p)
    pts = np.concatenate(pts)
    return np.linalg.norm(pts - center, axis=1).min()


@settings(max_examples=25, deadline=None)
@given(st.floats(-0.03, 0.03), st.floats(-0.03, 0.03), st.floats(-0.03, 0.03))
def test_box_contact_matches_sampled_surface(x, y, z):
    lo, hi = np.array([-0.02, -0.015, -0.01]), np.array([0.02, 0.015, 0.01])
    centre = np.array([x, y, z])
    inside = np.all(centre > lo) and np.all(centre < hi)
    d = 0.012
    w = _world([centre], d)
    w.add_tool(RigidTool(0, np.zeros(3), boxes=[Box(lo, hi)], material=SAND))
    c = detect(w)
    dist = _box_distance_oracle(centre, lo, hi)
    step = (hi - lo).max() / 60
    if inside:
        assert len(c) == 1
        return
    if dist < 0.5 * d - step:
        assert len(c) == 1 and c.kind[0] == KIND_PT
        assert c.delta[0] == pytest.approx(0.5 * d - dist, abs=step)
    elif dist > 0.5 * d + step:
        assert len(c) == 0


def test_warm_start_cache_persists():
    w = _world([[0, 0, 0], [0.009, 0, 0]], 0.01)
    c = detect(w)
    c.lam[:] = [1e-3, 2e-4, 0, 0, 0]
    w.contacts = c
    c2 = narrowphase(w, broadphase(w))
    assert c2.warm[0] and c2.lam[0, 0] == pytest.approx(1e-3)
    # separated and re-touching pairs start cold
    w.pos[1, 0] = 0.02
    w.contacts = narrowphase(w, broadphase(w))
    w.pos[1, 0] = 0.009
    c3 = narrowphase(w, broadphase(w))
    assert not c3.warm[0] and c3.lam[0, 0] == 0


def test_coincident_centres_are_degenerate():
    w = _world([[0, 0, 0], [0, 0, 0]], 0.01)
    c = detect(w)
    assert len(c) == 1 and c.degenerate[0]
    assert np.all(c.lam[0] == 0)
