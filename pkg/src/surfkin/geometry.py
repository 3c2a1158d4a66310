"""Triangle meshes, closest-point queries, rigid registration and smoothness.

All coordinates are millimeters. Types are treated as immutable after
construction and every operation here is pure, so concurrent read-only use
is safe.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "TriangleMesh",
    "RigidTransform",
    "SampledSurface",
    "closest_point",
    "icp_register",
    "laplacian_smoothness",
    "apply_transform",
    "mesh_from_grid",
    "load_obj",
    "save_obj",
]


# ---------------------------------------------------------------------------
# domain types


@dataclass
class TriangleMesh:
    """Indexed triangle mesh: vertices (n,3) float64, triangles (m,3) int."""

    vertices: np.ndarray
    triangles: np.ndarray
    _bvh: "_Bvh | None" = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError("vertices must be (n, 3)")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ValueError("triangles must be (m, 3)")
        if self.triangles.size:
            if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
                raise ValueError("triangle index out of range")
            t = self.triangles
            if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
                raise ValueError("triangle with repeated vertex")
            corners = self.vertices[self.triangles]
            n = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
            if np.any(np.linalg.norm(n, axis=1) <= 0.0):
                raise ValueError("degenerate zero-area triangle")

    @property
    def corners(self) -> np.ndarray:
        """Triangle corner positions, shape (m, 3, 3)."""
        return self.vertices[self.triangles]

    def bvh(self) -> "_Bvh":
        # Lazily built; construction is idempotent so a rebuild race is harmless.
        if self._bvh is None:
            self._bvh = _Bvh(self)
        return self._bvh

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


@dataclass
class RigidTransform:
    """Rotation (3,3) with det +1 plus translation (3,)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ValueError("rotation must be (3,3) and translation (3,)")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-9:
            raise ValueError(f"rotation is not orthonormal (deviation {err:.2e})")
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-9:
            raise ValueError("rotation determinant is not +1")

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform equal to applying ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)


@dataclass
class SampledSurface:
    """Surface point samples tagged with their (u, v) parameters."""

    params: np.ndarray  # (k, 2) in [0,1]^2
    points: np.ndarray  # (k, 3)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.params.ndim != 2 or self.params.shape[1] != 2:
            raise ValueError("params must be (k, 2)")
        if self.points.shape != (len(self.params), 3):
            raise ValueError("points must be (k, 3) matching params")
        if self.params.size and (self.params.min() < -1e-12 or self.params.max() > 1 + 1e-12):
            raise ValueError("params outside [0,1]^2")

    def to_json(self) -> str:
        return json.dumps({"params": self.params.tolist(), "points": self.points.tolist()})

    @staticmethod
    def from_json(text: str) -> "SampledSurface":
        data = json.loads(text)
        return SampledSurface(np.asarray(data["params"]), np.asarray(data["points"]))


# ---------------------------------------------------------------------------
# closest point on triangle, vectorized over pairs


def _closest_on_triangles(tri: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Closest point on each triangle ``tri[k]`` to the paired ``pts[k]``.

    Vectorized form of the classic Voronoi-region walk (vertex, edge and face
    regions tested in order). ``tri`` is (k,3,3), ``pts`` is (k,3).
    """
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab = b - a
    ac = c - a
    ap = pts - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = pts - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = pts - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    def safe_div(num, den):
        return num / np.where(den == 0.0, 1.0, den)

    # Face region result as default, then overwrite in reverse priority so the
    # earliest matching region wins.
    denom = safe_div(np.ones_like(va), va + vb + vc)
    v_face = vb * denom
    w_face = vc * denom
    out = a + ab * v_face[:, None] + ac * w_face[:, None]

    r6 = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    w6 = safe_div(d4 - d3, (d4 - d3) + (d5 - d6))
    out = np.where(r6[:, None], b + w6[:, None] * (c - b), out)

    r5 = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    w5 = safe_div(d2, d2 - d6)
    out = np.where(r5[:, None], a + w5[:, None] * ac, out)

    r4 = (d6 >= 0) & (d5 <= d6)
    out = np.where(r4[:, None], c, out)

    r3 = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    v3 = safe_div(d1, d1 - d3)
    out = np.where(r3[:, None], a + v3[:, None] * ab, out)

    r2 = (d3 >= 0) & (d4 <= d3)
    out = np.where(r2[:, None], b, out)

    r1 = (d1 <= 0) & (d2 <= 0)
    out = np.where(r1[:, None], a, out)
    return out


class _Bvh:
    """Axis-aligned bounding-volume hierarchy over mesh triangles.

    Median split along the widest centroid axis, leaf size 8. Queries are
    batched: the traversal front carries the subset of queries that can still
    improve, with initial upper bounds taken from a vertex k-d tree.
    """

    LEAF_SIZE = 8

    def __init__(self, mesh: TriangleMesh):
        if len(mesh.triangles) == 0:
            raise ValueError("empty mesh")
        self.mesh = mesh
        corners = mesh.corners
        self._tri_corners = corners
        centroids = corners.mean(axis=1)
        lo = corners.min(axis=1)
        hi = corners.max(axis=1)

        order = np.arange(len(corners))
        node_min, node_max = [], []
        node_left, node_right = [], []
        node_start, node_count = [], []

        # (lo_index, hi_index, slot) ranges over `order`; explicit stack build.
        stack = [(0, len(order), 0)]
        node_min.append(None)
        node_max.append(None)
        node_left.append(-1)
        node_right.append(-1)
        node_start.append(0)
        node_count.append(0)
        while stack:
            i0, i1, slot = stack.pop()
            idx = order[i0:i1]
            node_min[slot] = lo[idx].min(axis=0)
            node_max[slot] = hi[idx].max(axis=0)
            if i1 - i0 <= self.LEAF_SIZE:
                node_start[slot] = i0
                node_count[slot] = i1 - i0
                continue
            cen = centroids[idx]
            axis = int(np.argmax(cen.max(axis=0) - cen.min(axis=0)))
            mid = (i1 - i0) // 2
            part = np.argpartition(cen[:, axis], mid)
            order[i0:i1] = idx[part]
            for child_range in ((i0, i0 + mid), (i0 + mid, i1)):
                child_slot = len(node_min)
                node_min.append(None)
                node_max.append(None)
                node_left.append(-1)
                node_right.append(-1)
                node_start.append(0)
                node_count.append(0)
                if child_range == (i0, i0 + mid):
                    node_left[slot] = child_slot
                else:
                    node_right[slot] = child_slot
                stack.append((child_range[0], child_range[1], child_slot))

        self.order = order
        self.node_min = np.asarray(node_min)
        self.node_max = np.asarray(node_max)
        self.node_left = np.asarray(node_left)
        self.node_right = np.asarray(node_right)
        self.node_start = np.asarray(node_start)
        self.node_count = np.asarray(node_count)

        self._vertex_tree = cKDTree(mesh.vertices)
        # Any incident triangle per vertex, to seed the best-so-far answer.
        incident = np.full(len(mesh.vertices), -1, dtype=np.int64)
        tris = mesh.triangles
        for col in range(3):
            incident[tris[::-1, col]] = np.arange(len(tris))[::-1]
        self._vertex_tri = incident

    def query(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Closest surface points for a batch: returns (points, distances, tri indices)."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        nq = len(points)
        vd, vi = self._vertex_tree.query(points)
        best_d2 = np.asarray(vd, dtype=np.float64) ** 2
        best_pt = self.mesh.vertices[vi].copy()
        best_tri = self._vertex_tri[vi].copy()

        stack = [(0, np.arange(nq))]
        while stack:
            node, active = stack.pop()
            dlo = np.maximum(self.node_min[node] - points[active], 0.0)
            dhi = np.maximum(points[active] - self.node_max[node], 0.0)
            lb2 = np.einsum("ij,ij->i", dlo, dlo) + np.einsum("ij,ij->i", dhi, dhi)
            keep = lb2 < best_d2[active]
            if not keep.any():
                continue
            active = active[keep]
            if self.node_left[node] < 0:
                s, n = self.node_start[node], self.node_count[node]
                tri_ids = self.order[s : s + n]
                for t in tri_ids:
                    tri = np.broadcast_to(self._tri_corners[t], (len(active), 3, 3))
                    cand = _closest_on_triangles(tri, points[active])
                    diff = points[active] - cand
                    d2 = np.einsum("ij,ij->i", diff, diff)
                    better = d2 < best_d2[active]
                    upd = active[better]
                    best_d2[upd] = d2[better]
                    best_pt[upd] = cand[better]
                    best_tri[upd] = t
            else:
                stack.append((self.node_left[node], active))
                stack.append((self.node_right[node], active))

        return best_pt, np.sqrt(best_d2), best_tri


def closest_point(query: np.ndarray, mesh: TriangleMesh) -> tuple[np.ndarray, float, int]:
    """Closest point on ``mesh`` to ``query``: (point, distance, triangle index)."""
    if len(mesh.triangles) == 0:
        raise ValueError("empty mesh")
    pts, dists, tris = mesh.bvh().query(np.asarray(query, dtype=np.float64)[None, :])
    return pts[0], float(dists[0]), int(tris[0])


def closest_points(queries: np.ndarray, mesh: TriangleMesh):
    """Batch variant of :func:`closest_point`."""
    if len(mesh.triangles) == 0:
        raise ValueError("empty mesh")
    return mesh.bvh().query(queries)


# ---------------------------------------------------------------------------
# rigid registration


def _best_fit_transform(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform T with T(src) ~= dst (Kabsch)."""
    src_c = src.mean(axis=0)
    dst_c = dst.mean(axis=0)
    h = (src - src_c).T @ (dst - dst_c)
    u, s, vt = np.linalg.svd(h)
    # Second singular value ~ 0 means the points do not span a plane.
    if s[1] <= 1e-9 * max(s[0], 1.0):
        raise ValueError("rank-deficient correspondence")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rot, dst_c - rot @ src_c)


def icp_register(
    source: np.ndarray,
    target: TriangleMesh,
    init: RigidTransform | None = None,
    max_iters: int = 50,
    tol: float = 1e-6,
) -> RigidTransform:
    """Rigidly register ``target`` onto the ``source`` points.

    The returned transform is applied to the target model to align it with the
    source point set. Correspondences are point-to-point: each source point is
    matched to its closest point on the currently posed target, then the pose
    is re-fit in closed form. Stops when the RMS residual changes by less than
    ``tol`` between iterations.
    """
    source = np.asarray(source, dtype=np.float64)
    if source.ndim != 2 or source.shape[1] != 3 or len(source) < 3:
        raise ValueError("rank-deficient correspondence")
    pose = RigidTransform.identity() if init is None else init
    bvh = target.bvh()
    prev_rms = None
    for _ in range(max_iters):
        back = pose.inverse().apply(source)
        corr, _, _ = bvh.query(back)
        pose = _best_fit_transform(corr, source)
        resid = pose.apply(corr) - source
        rms = float(np.sqrt(np.mean(np.einsum("ij,ij->i", resid, resid))))
        if prev_rms is not None and abs(prev_rms - rms) < tol:
            break
        prev_rms = rms
    return pose


# ---------------------------------------------------------------------------
# smoothness


def _vertex_neighbors(mesh: TriangleMesh) -> list[np.ndarray]:
    nbr: list[set[int]] = [set() for _ in range(len(mesh.vertices))]
    for i, j, k in mesh.triangles:
        nbr[i].update((j, k))
        nbr[j].update((i, k))
        nbr[k].update((i, j))
    return [np.fromiter(sorted(s), dtype=np.int64) for s in nbr]


def laplacian_smoothness(mesh: TriangleMesh) -> np.ndarray:
    """Per-vertex roughness: norm of the estimated gradient of the umbrella
    Laplacian norm.

    The umbrella Laplacian uses uniform weights, delta_i = (1/d_i) sum(V_i - V_j)
    over the one-ring. The gradient of the scalar field ``|delta|`` at each
    vertex is estimated by a least-squares linear fit over its one-ring.
    """
    neighbors = _vertex_neighbors(mesh)
    v = mesh.vertices
    lap_norm = np.empty(len(v))
    for i, nb in enumerate(neighbors):
        if len(nb) == 0:
            raise ValueError("isolated vertex")
        delta = v[i] - v[nb].mean(axis=0)
        lap_norm[i] = np.linalg.norm(delta)
    out = np.empty(len(v))
    for i, nb in enumerate(neighbors):
        rows = v[nb] - v[i]
        rhs = lap_norm[nb] - lap_norm[i]
        grad, *_ = np.linalg.lstsq(rows, rhs, rcond=None)
        out[i] = np.linalg.norm(grad)
    return out


def apply_transform(t: RigidTransform, pts: np.ndarray) -> np.ndarray:
    """Apply R.p + t to each point."""
    return t.apply(pts)


# ---------------------------------------------------------------------------
# construction helpers and I/O


def mesh_from_grid(points: np.ndarray, nu: int, nv: int) -> TriangleMesh:
    """Triangulate an (nu*nv, 3) point array laid out as a regular grid.

    Row-major layout: index = iu * nv + iv. Each grid cell becomes two
    triangles with consistent orientation.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.shape != (nu * nv, 3):
        raise ValueError("points must be (nu*nv, 3)")
    iu, iv = np.meshgrid(np.arange(nu - 1), np.arange(nv - 1), indexing="ij")
    p00 = (iu * nv + iv).ravel()
    p01 = p00 + 1
    p10 = p00 + nv
    p11 = p10 + 1
    tris = np.concatenate(
        [np.stack([p00, p10, p11], axis=1), np.stack([p00, p11, p01], axis=1)]
    )
    return TriangleMesh(points, tris)


def save_obj(mesh: TriangleMesh, path) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {i + 1} {j + 1} {k + 1}" for i, j, k in mesh.triangles.tolist()]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_obj(path) -> TriangleMesh:
    """Read an ASCII OBJ containing vertices and triangular faces only."""
    vertices, triangles = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise ValueError("only triangular faces are supported")
                triangles.append([int(tok.split("/")[0]) - 1 for tok in parts[1:4]])
    return TriangleMesh(np.asarray(vertices), np.asarray(triangles, dtype=np.int64))
