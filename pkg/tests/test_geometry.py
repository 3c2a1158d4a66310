import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surfkin.geometry import (
    RigidTransform,
    SampledSurface,
    TriangleMesh,
    apply_transform,
    closest_point,
    closest_points,
    icp_register,
    laplacian_smoothness,
    load_obj,
    mesh_from_grid,
    save_obj,
)


# --- independent oracle: candidate enumeration instead of region tests ------


def oracle_closest_on_triangle(tri, p):
    """Closest point by enumerating face / edge / vertex candidates."""
    a, b, c = tri
    candidates = [a, b, c]
    for p0, p1 in ((a, b), (b, c), (c, a)):
        d = p1 - p0
        t = np.clip(np.dot(p - p0, d) / np.dot(d, d), 0.0, 1.0)
        candidates.append(p0 + t * d)
    n = np.cross(b - a, c - a)
    n = n / np.linalg.norm(n)
    foot = p - np.dot(p - a, n) * n
    # barycentric test for the face projection
    m = np.column_stack([b - a, c - a])
    uv, *_ = np.linalg.lstsq(m, foot - a, rcond=None)
    if uv[0] >= 0 and uv[1] >= 0 and uv.sum() <= 1:
        candidates.append(foot)
    dists = [np.linalg.norm(p - q) for q in candidates]
    return candidates[int(np.argmin(dists))]


def oracle_closest_on_mesh(mesh, p):
    best, best_d = None, np.inf
    for tri in mesh.corners:
        q = oracle_closest_on_triangle(tri, p)
        d = np.linalg.norm(p - q)
        if d < best_d:
            best, best_d = q, d
    return best, best_d


def random_mesh(rng, n_tris=200):
    """Bumpy grid patch with roughly the requested triangle count."""
    side = int(np.ceil(np.sqrt(n_tris / 2))) + 1
    u = np.linspace(0, 1, side)
    uu, vv = np.meshgrid(u, u, indexing="ij")
    z = 8 * np.sin(3 * uu) * np.cos(2.4 * vv) + rng.normal(0, 0.5, uu.shape)
    pts = np.stack([40 * uu.ravel(), 40 * vv.ravel(), z.ravel()], axis=1)
    return mesh_from_grid(pts, side, side)


def random_rotation(rng, max_angle=np.pi):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-max_angle, max_angle)
    k = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


# --- TriangleMesh invariants -------------------------------------------------


def test_mesh_rejects_bad_indices():
    with pytest.raises(ValueError):
        TriangleMesh(np.zeros((2, 3)), np.array([[0, 1, 2]]))


def test_mesh_rejects_repeated_vertex():
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
    with pytest.raises(ValueError):
        TriangleMesh(v, np.array([[0, 0, 1]]))


def test_mesh_rejects_zero_area():
    v = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    with pytest.raises(ValueError):
        TriangleMesh(v, np.array([[0, 1, 2]]))


# --- closest_point -----------------------------------------------------------


def test_closest_point_at_vertex():
    rng = np.random.default_rng(0)
    mesh = random_mesh(rng, 50)
    q = mesh.vertices[17]
    pt, d, _ = closest_point(q, mesh)
    assert d == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(pt, q, atol=1e-12)


def test_closest_point_orthogonal_projection():
    v = np.array([[0.0, 0, 0], [4, 0, 0], [0, 4, 0]])
    mesh = TriangleMesh(v, np.array([[0, 1, 2]]))
    centroid = v.mean(axis=0)
    h = 2.5
    pt, d, tri = closest_point(centroid + [0, 0, h], mesh)
    assert d == pytest.approx(h, abs=1e-12)
    np.testing.assert_allclose(pt, centroid, atol=1e-12)
    assert tri == 0


def test_closest_point_matches_bruteforce():
    rng = np.random.default_rng(1)
    mesh = random_mesh(rng, 200)
    lo, hi = mesh.bounding_box()
    queries = rng.uniform(lo - 10, hi + 10, size=(60, 3))
    pts, dists, tris = closest_points(queries, mesh)
    for q, pt, d in zip(queries, pts, dists):
        _, d_ref = oracle_closest_on_mesh(mesh, q)
        assert d == pytest.approx(d_ref, abs=1e-9)
        assert np.linalg.norm(q - pt) == pytest.approx(d, abs=1e-9)


def test_closest_point_lies_on_triangle():
    rng = np.random.default_rng(2)
    mesh = random_mesh(rng, 120)
    lo, hi = mesh.bounding_box()
    queries = rng.uniform(lo - 5, hi + 5, size=(30, 3))
    pts, _, tris = closest_points(queries, mesh)
    for pt, t in zip(pts, tris):
        ref = oracle_closest_on_triangle(mesh.corners[t], pt)
        assert np.linalg.norm(ref - pt) < 1e-9


def test_closest_point_empty_mesh():
    mesh = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int))
    with pytest.raises(ValueError, match="empty mesh"):
        closest_point(np.zeros(3), mesh)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_closest_distance_is_lipschitz(seed):
    rng = np.random.default_rng(seed)
    mesh = random_mesh(np.random.default_rng(3), 60)
    lo, hi = mesh.bounding_box()
    p = rng.uniform(lo - 20, hi + 20)
    q = rng.uniform(lo - 20, hi + 20)
    _, dp, _ = closest_point(p, mesh)
    _, dq, _ = closest_point(q, mesh)
    assert abs(dp - dq) <= np.linalg.norm(p - q) + 1e-9


# --- icp_register ------------------------------------------------------------


def test_icp_identity_on_matching_source():
    rng = np.random.default_rng(4)
    mesh = random_mesh(rng, 150)
    source = mesh.vertices[:: 3]
    t = icp_register(source, mesh, RigidTransform.identity())
    np.testing.assert_allclose(t.rotation, np.eye(3), atol=1e-6)
    np.testing.assert_allclose(t.translation, 0, atol=1e-6)


def test_icp_recovers_synthetic_transform():
    rng = np.random.default_rng(5)
    mesh = random_mesh(rng, 200)
    rot = random_rotation(rng, max_angle=np.deg2rad(20))
    trans = np.array([4.0, -7.0, 3.0])
    source = mesh.vertices[::2] @ rot.T + trans
    t = icp_register(source, mesh, RigidTransform.identity(), max_iters=200, tol=1e-12)
    angle_err = np.arccos(np.clip((np.trace(t.rotation.T @ rot) - 1) / 2, -1, 1))
    assert angle_err < 1e-3
    assert np.linalg.norm(t.translation - trans) < 1e-2


def test_icp_degenerate_source():
    mesh = random_mesh(np.random.default_rng(6), 50)
    with pytest.raises(ValueError, match="rank-deficient"):
        icp_register(mesh.vertices[:2], mesh)
    collinear = np.outer(np.linspace(0, 1, 10), [1.0, 2.0, 3.0])
    with pytest.raises(ValueError, match="rank-deficient"):
        icp_register(collinear, mesh)


def test_icp_rms_never_increases():
    rng = np.random.default_rng(7)
    mesh = random_mesh(rng, 150)
    rot = random_rotation(rng, max_angle=np.deg2rad(15))
    source = mesh.vertices[::2] @ rot.T + [3.0, 1.0, -2.0]

    # Re-run ICP manually, tracking the RMS after each pose update.
    pose = RigidTransform.identity()
    rms_trace = []
    bvh = mesh.bvh()
    from surfkin.geometry import _best_fit_transform

    for _ in range(25):
        back = pose.inverse().apply(source)
        corr, _, _ = bvh.query(back)
        pose = _best_fit_transform(corr, source)
        resid = pose.apply(corr) - source
        rms_trace.append(float(np.sqrt(np.mean(np.sum(resid**2, axis=1)))))
    diffs = np.diff(rms_trace)
    assert np.all(diffs <= 1e-9)


# --- laplacian_smoothness ------------------------------------------------------


def test_smoothness_flat_grid_interior_zero():
    n = 9
    u = np.linspace(0, 8, n)
    uu, vv = np.meshgrid(u, u, indexing="ij")
    pts = np.stack([uu.ravel(), vv.ravel(), np.zeros(n * n)], axis=1)
    mesh = mesh_from_grid(pts, n, n)
    s = laplacian_smoothness(mesh)
    interior = [i * n + j for i in range(2, n - 2) for j in range(2, n - 2)]
    assert np.max(s[interior]) < 1e-12


def icosahedron(radius=10.0):
    phi = (1 + np.sqrt(5)) / 2
    verts = []
    for a in (-1, 1):
        for b in (-phi, phi):
            verts += [[0, a, b], [a, b, 0], [b, 0, a]]
    verts = radius * np.asarray(verts, dtype=float) / np.linalg.norm([1, phi])
    # Faces are the 3-cliques of the shortest-edge graph.
    d = np.linalg.norm(verts[:, None] - verts[None], axis=-1)
    edge_len = np.min(d[d > 1e-9])
    adj = np.abs(d - edge_len) < 1e-9
    faces = [
        [i, j, k]
        for i in range(12)
        for j in range(i + 1, 12)
        for k in range(j + 1, 12)
        if adj[i, j] and adj[j, k] and adj[i, k]
    ]
    assert len(faces) == 20
    return TriangleMesh(verts, np.asarray(faces))


def test_smoothness_sphere_uniform():
    # Vertex-transitive tessellation: every vertex sees the same one-ring, so
    # the smoothness values must agree by symmetry.
    mesh = icosahedron()
    s = laplacian_smoothness(mesh)
    assert np.max(s) - np.min(s) <= 0.1 * max(np.max(s), 1e-12)


def test_smoothness_spike_localized():
    n = 11
    u = np.linspace(0, 10, n)
    uu, vv = np.meshgrid(u, u, indexing="ij")
    z = np.zeros(n * n)
    spike = (n // 2) * n + n // 2
    z[spike] = 4.0
    mesh = mesh_from_grid(np.stack([uu.ravel(), vv.ravel(), z], axis=1), n, n)
    s = laplacian_smoothness(mesh)
    nbrs = {spike, spike - 1, spike + 1, spike - n, spike + n,
            spike - n - 1, spike - n + 1, spike + n - 1, spike + n + 1}
    assert int(np.argmax(s)) in nbrs


def test_smoothness_isolated_vertex():
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]])
    mesh = TriangleMesh(v, np.array([[0, 1, 2]]))
    with pytest.raises(ValueError, match="isolated vertex"):
        laplacian_smoothness(mesh)


def test_smoothness_rigid_invariance():
    rng = np.random.default_rng(8)
    mesh = random_mesh(rng, 100)
    s0 = laplacian_smoothness(mesh)
    t = RigidTransform(random_rotation(rng), np.array([10.0, -4.0, 2.0]))
    moved = TriangleMesh(t.apply(mesh.vertices), mesh.triangles)
    s1 = laplacian_smoothness(moved)
    np.testing.assert_allclose(s1, s0, rtol=1e-9, atol=1e-12)


# --- apply_transform -----------------------------------------------------------


def test_apply_identity_and_translation():
    pts = np.array([[0.0, 0, 0], [1, 2, 3]])
    ident = RigidTransform.identity()
    np.testing.assert_array_equal(apply_transform(ident, pts), pts)
    shift = RigidTransform(np.eye(3), np.array([0.0, 0, 10]))
    np.testing.assert_allclose(apply_transform(shift, [[0, 0, 0]]), [[0, 0, 10]])


def test_compose_matches_sequential():
    rng = np.random.default_rng(9)
    t1 = RigidTransform(random_rotation(rng), rng.normal(size=3))
    t2 = RigidTransform(random_rotation(rng), rng.normal(size=3))
    pts = rng.normal(size=(20, 3))
    seq = apply_transform(t2, apply_transform(t1, pts))
    combined = apply_transform(t2.compose(t1), pts)
    np.testing.assert_allclose(combined, seq, rtol=1e-12, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_transform_preserves_distances(seed):
    rng = np.random.default_rng(seed)
    t = RigidTransform(random_rotation(rng), rng.normal(size=3) * 100)
    pts = rng.normal(size=(8, 3)) * 50
    moved = apply_transform(t, pts)
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    d1 = np.linalg.norm(moved[:, None] - moved[None], axis=-1)
    np.testing.assert_allclose(d1, d0, rtol=1e-12, atol=1e-9)


def test_rigid_transform_validation():
    with pytest.raises(ValueError):
        RigidTransform(np.eye(3) * 2, np.zeros(3))
    reflect = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(ValueError):
        RigidTransform(reflect, np.zeros(3))


# --- I/O ------------------------------------------------------------------------


def test_obj_roundtrip(tmp_path):
    rng = np.random.default_rng(10)
    mesh = random_mesh(rng, 40)
    path = tmp_path / "mesh.obj"
    save_obj(mesh, path)
    back = load_obj(path)
    np.testing.assert_array_equal(back.vertices, mesh.vertices)
    np.testing.assert_array_equal(back.triangles, mesh.triangles)


def test_sampled_surface_json_roundtrip():
    rng = np.random.default_rng(11)
    params = rng.uniform(0, 1, size=(15, 2))
    points = rng.normal(size=(15, 3)) * 100
    surf = SampledSurface(params, points)
    back = SampledSurface.from_json(surf.to_json())
    np.testing.assert_array_equal(back.params, surf.params)
    np.testing.assert_array_equal(back.points, surf.points)


def test_sampled_surface_validation():
    with pytest.raises(ValueError):
        SampledSurface(np.array([[0.5, 1.5]]), np.zeros((1, 3)))
    with pytest.raises(ValueError):
        SampledSurface(np.zeros((2, 2)), np.zeros((3, 3)))
