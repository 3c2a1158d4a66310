"""Gaussian RBF space warping with a direct coefficient solve and analytic
gradients.

The warp maps a point p to ``offset + linear @ p + sum_i w_i * exp(-c |p-q_i|^2)``
where the kernel centers q_i sit on the source surface. Coefficients flatten
to one vector of length 3(N+4) in the fixed order (offset, linear column x,
linear column y, linear column z, kernel weights 1..N); that order is the wire
format shared with the coefficient-prediction network and the gradient blocks
below.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.linalg

__all__ = [
    "KernelSet",
    "WarpCoefficients",
    "warp",
    "warp_many",
    "solve",
    "grad_query",
    "grad_centers",
    "grad_coeffs",
    "DEFAULT_WIDTH",
]

# Kernel width coefficient (1/mm^2) tuned for millimeter scenes at half scale.
DEFAULT_WIDTH = 3.0e-5

_CONDITION_LIMIT = 1e12


@dataclass
class KernelSet:
    """RBF kernel centers (N,3) plus the shared width coefficient."""

    centers: np.ndarray
    width: float = DEFAULT_WIDTH

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if self.centers.ndim != 2 or self.centers.shape[1] != 3:
            raise ValueError("centers must be (N, 3)")
        if len(self.centers) < 4:
            raise ValueError("need at least 4 kernel centers")
        if self.width <= 0:
            raise ValueError("kernel width must be positive")
        # Coplanar centers make the affine block unsolvable.
        centered = self.centers - self.centers.mean(axis=0)
        if np.linalg.matrix_rank(centered, tol=1e-9 * max(1.0, np.abs(centered).max())) < 3:
            raise ValueError("degenerate kernel configuration")

    @property
    def count(self) -> int:
        return len(self.centers)

    def values_at(self, points: np.ndarray) -> np.ndarray:
        """Kernel values g_i(p) = exp(-c |p - q_i|^2) for (k,3) points -> (k,N)."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        diff = points[:, None, :] - self.centers[None, :, :]
        return np.exp(-self.width * np.einsum("kij,kij->ki", diff, diff))


@dataclass
class WarpCoefficients:
    """Affine part (offset, 3x3 linear map) plus per-kernel weight vectors."""

    offset: np.ndarray  # (3,)
    linear: np.ndarray  # (3, 3), columns act on x, y, z
    weights: np.ndarray  # (N, 3)

    def __post_init__(self):
        self.offset = np.asarray(self.offset, dtype=np.float64).reshape(3)
        self.linear = np.asarray(self.linear, dtype=np.float64).reshape(3, 3)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[1] != 3:
            raise ValueError("weights must be (N, 3)")
        for arr in (self.offset, self.linear, self.weights):
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite warp coefficients")

    @staticmethod
    def identity(n_kernels: int) -> "WarpCoefficients":
        return WarpCoefficients(np.zeros(3), np.eye(3), np.zeros((n_kernels, 3)))

    def flatten(self) -> np.ndarray:
        """Fixed flattening order: offset, linear columns, kernel weights."""
        return np.concatenate([self.offset, self.linear.T.ravel(), self.weights.ravel()])

    @staticmethod
    def from_flat(flat: np.ndarray) -> "WarpCoefficients":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.ndim != 1 or len(flat) < 12 or len(flat) % 3 != 0:
            raise ValueError("flat coefficient vector must have length 3(N+4)")
        offset = flat[0:3]
        linear = flat[3:12].reshape(3, 3).T
        weights = flat[12:].reshape(-1, 3)
        return WarpCoefficients(offset, linear, weights)

    def to_json(self) -> str:
        return json.dumps(self.flatten().tolist())

    @staticmethod
    def from_json(text: str) -> "WarpCoefficients":
        return WarpCoefficients.from_flat(np.asarray(json.loads(text)))


def warp_many(points: np.ndarray, k: KernelSet, g: WarpCoefficients) -> np.ndarray:
    """Apply the warp to a (k,3) batch of points."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if len(g.weights) != k.count:
        raise ValueError("coefficient count does not match kernel count")
    vals = k.values_at(points)
    return g.offset + points @ g.linear.T + vals @ g.weights


def warp(p: np.ndarray, k: KernelSet, g: WarpCoefficients) -> np.ndarray:
    """Warp a single 3-vector."""
    return warp_many(np.asarray(p)[None, :], k, g)[0]


def solve(k: KernelSet, targets: np.ndarray) -> WarpCoefficients:
    """Coefficients interpolating ``targets`` at the kernel centers.

    Dense LU solve of the (N+4) x (N+4) system; the four extra rows are the
    polynomial side conditions (weights sum to zero and are first-moment
    free), which pin down the affine part.
    """
    targets = np.asarray(targets, dtype=np.float64)
    n = k.count
    if targets.shape != (n, 3):
        raise ValueError("targets must match kernel count")
    gram = k.values_at(k.centers)  # (N, N)
    poly = np.concatenate([np.ones((n, 1)), k.centers], axis=1)  # (N, 4)
    mat = np.zeros((n + 4, n + 4))
    mat[:n, :n] = gram
    mat[:n, n:] = poly
    mat[n:, :n] = poly.T
    if np.linalg.cond(mat) > _CONDITION_LIMIT:
        raise ValueError("degenerate kernel configuration")
    rhs = np.concatenate([targets, np.zeros((4, 3))], axis=0)
    lu, piv = scipy.linalg.lu_factor(mat)
    sol = scipy.linalg.lu_solve((lu, piv), rhs)
    weights = sol[:n]
    offset = sol[n]
    linear = sol[n + 1 :].T  # rows of the solve are the columns of the map
    return WarpCoefficients(offset, linear, weights)


def grad_query(p: np.ndarray, k: KernelSet, g: WarpCoefficients) -> np.ndarray:
    """Jacobian of the warp with respect to the query point, shape (3,3)."""
    p = np.asarray(p, dtype=np.float64)
    diff = p[None, :] - k.centers  # (N, 3)
    vals = np.exp(-k.width * np.einsum("ij,ij->i", diff, diff))
    dg = -2.0 * k.width * vals[:, None] * diff  # d g_i / d p, (N, 3)
    return g.linear + np.einsum("ia,ib->ab", g.weights, dg)


def grad_centers(p: np.ndarray, k: KernelSet, g: WarpCoefficients) -> np.ndarray:
    """Jacobian with respect to the stacked kernel centers, shape (3, 3N).

    Block i equals weights_i times the kernel's center gradient; it is the
    sign flip of the radial part of :func:`grad_query` restricted to kernel i.
    """
    p = np.asarray(p, dtype=np.float64)
    diff = p[None, :] - k.centers
    vals = np.exp(-k.width * np.einsum("ij,ij->i", diff, diff))
    dg = 2.0 * k.width * vals[:, None] * diff  # d g_i / d q_i, (N, 3)
    blocks = np.einsum("ia,ib->iab", g.weights, dg)  # (N, 3, 3)
    return blocks.transpose(1, 0, 2).reshape(3, 3 * k.count)


def grad_coeffs(p: np.ndarray, k: KernelSet) -> np.ndarray:
    """Jacobian with respect to the flattened coefficients, shape (3, 3(N+4)).

    Blocks follow the flattening order: [I | p_x I | p_y I | p_z I | g_1 I | ...].
    The warp is linear in the coefficients, so this matrix times a flattened
    coefficient vector reproduces the warp exactly.
    """
    p = np.asarray(p, dtype=np.float64)
    vals = k.values_at(p[None, :])[0]
    eye = np.eye(3)
    blocks = [eye, p[0] * eye, p[1] * eye, p[2] * eye]
    blocks += [v * eye for v in vals]
    return np.concatenate(blocks, axis=1)


def grad_coeffs_many(points: np.ndarray, k: KernelSet) -> np.ndarray:
    """Batched :func:`grad_coeffs`: (k,3) points -> (k, 3, 3(N+4))."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    vals = k.values_at(points)  # (k, N)
    scalars = np.concatenate(
        [np.ones((len(points), 1)), points, vals], axis=1
    )  # (k, N+4)
    eye = np.eye(3)
    return np.einsum("ks,ab->kasb", scalars, eye).reshape(
        len(points), 3, 3 * (k.count + 4)
    )
