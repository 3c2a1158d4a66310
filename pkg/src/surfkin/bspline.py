"""B-spline surfaces: basis evaluation, fitting, and control-point gradients.

Surfaces are tensor-product B-splines over [0,1]^2 with clamped knot vectors.
The control grid acts as the compact shape descriptor everywhere else in the
pipeline; ``basis_weight`` supplies the exact Jacobian of a surface point with
respect to the control grid, which the IK chain rule consumes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .geometry import SampledSurface

__all__ = [
    "KnotVector",
    "BSplineSurface",
    "basis",
    "basis_matrix",
    "evaluate",
    "evaluate_many",
    "basis_weight",
    "fit",
    "SurfaceFitter",
    "uniform_clamped_knots",
]

DEFAULT_DEGREE = 3


@dataclass
class KnotVector:
    degree: int
    knots: np.ndarray

    def __post_init__(self):
        self.knots = np.asarray(self.knots, dtype=np.float64)
        if self.degree < 1:
            raise ValueError("degree must be >= 1")
        if np.any(np.diff(self.knots) < 0):
            raise ValueError("knots must be nondecreasing")
        p = self.degree
        if len(self.knots) < 2 * (p + 1):
            raise ValueError("too few knots")
        if not (np.all(self.knots[: p + 1] == self.knots[0])
                and np.all(self.knots[-(p + 1):] == self.knots[-1])):
            raise ValueError("knot vector must be clamped")

    @property
    def count(self) -> int:
        """Number of basis functions / control points along this direction."""
        return len(self.knots) - self.degree - 1

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.knots[0]), float(self.knots[-1])


def uniform_clamped_knots(count: int, degree: int = DEFAULT_DEGREE) -> KnotVector:
    """Clamped knot vector on [0,1] with uniformly spaced interior knots."""
    if count < degree + 1:
        raise ValueError("need at least degree+1 control points")
    interior = np.linspace(0.0, 1.0, count - degree + 1)[1:-1]
    knots = np.concatenate([np.zeros(degree + 1), interior, np.ones(degree + 1)])
    return KnotVector(degree, knots)


def basis_matrix(us: np.ndarray, kv: KnotVector) -> np.ndarray:
    """Stacked basis rows for many parameters: shape (len(us), count).

    Cox-de Boor triangular scheme vectorized over the parameter array; each
    row sums to one and has at most degree+1 nonzero entries.
    """
    us = np.asarray(us, dtype=np.float64)
    lo, hi = kv.domain
    if us.size and (us.min() < lo or us.max() > hi):
        raise ValueError("parameter out of range")
    p, knots = kv.degree, kv.knots
    nq = len(us)
    spans = np.searchsorted(knots, us, side="right") - 1
    spans = np.clip(spans, p, kv.count - 1)
    vals = np.zeros((nq, p + 1))
    vals[:, 0] = 1.0
    left = np.zeros((nq, p + 1))
    right = np.zeros((nq, p + 1))
    for j in range(1, p + 1):
        left[:, j] = us - knots[spans + 1 - j]
        right[:, j] = knots[spans + j] - us
        saved = np.zeros(nq)
        for r in range(j):
            tmp = vals[:, r] / (right[:, r + 1] + left[:, j - r])
            vals[:, r] = saved + right[:, r + 1] * tmp
            saved = left[:, j - r] * tmp
        vals[:, j] = saved
    out = np.zeros((nq, kv.count))
    cols = spans[:, None] - p + np.arange(p + 1)[None, :]
    np.put_along_axis(out, cols, vals, axis=1)
    return out


def basis(u: float, kv: KnotVector) -> np.ndarray:
    """All basis function values at ``u``; length equals the control count."""
    return basis_matrix(np.array([float(u)]), kv)[0]


@dataclass
class BSplineSurface:
    knots_u: KnotVector
    knots_v: KnotVector
    control: np.ndarray  # (m, n, 3)

    def __post_init__(self):
        self.control = np.asarray(self.control, dtype=np.float64)
        m, n = self.knots_u.count, self.knots_v.count
        if self.control.shape != (m, n, 3):
            raise ValueError(
                f"control grid must be ({m}, {n}, 3), got {self.control.shape}"
            )
        if not np.all(np.isfinite(self.control)):
            raise ValueError("control grid has non-finite entries")

    @property
    def shape(self) -> tuple[int, int]:
        return self.control.shape[:2]

    def with_control(self, control: np.ndarray) -> "BSplineSurface":
        return BSplineSurface(self.knots_u, self.knots_v, control)

    def to_json(self) -> str:
        return json.dumps(
            {
                "degree": self.knots_u.degree,
                "knots_u": self.knots_u.knots.tolist(),
                "knots_v": self.knots_v.knots.tolist(),
                "control": self.control.reshape(-1, 3).tolist(),
            }
        )

    @staticmethod
    def from_json(text: str) -> "BSplineSurface":
        data = json.loads(text)
        ku = KnotVector(data["degree"], np.asarray(data["knots_u"]))
        kvv = KnotVector(data["degree"], np.asarray(data["knots_v"]))
        control = np.asarray(data["control"]).reshape(ku.count, kvv.count, 3)
        return BSplineSurface(ku, kvv, control)


def evaluate(s: BSplineSurface, u: float, v: float) -> np.ndarray:
    """Surface point at (u, v): tensor-product combination of the controls."""
    bu = basis(u, s.knots_u)
    bv = basis(v, s.knots_v)
    return np.einsum("i,j,ijk->k", bu, bv, s.control)


def evaluate_many(s: BSplineSurface, params: np.ndarray) -> np.ndarray:
    """Evaluate at a (k, 2) array of (u, v) parameters; returns (k, 3)."""
    params = np.asarray(params, dtype=np.float64)
    bu = basis_matrix(params[:, 0], s.knots_u)
    bv = basis_matrix(params[:, 1], s.knots_v)
    return np.einsum("ki,kj,ijd->kd", bu, bv, s.control)


def basis_weight(s: BSplineSurface, u: float, v: float) -> np.ndarray:
    """Weight grid w[i,j] with d evaluate / d control[i,j] = w[i,j] * I3."""
    bu = basis(u, s.knots_u)
    bv = basis(v, s.knots_v)
    return np.outer(bu, bv)


def weight_rows(s: BSplineSurface, params: np.ndarray) -> np.ndarray:
    """Flattened basis-weight rows for many (u, v): shape (k, m*n)."""
    params = np.asarray(params, dtype=np.float64)
    bu = basis_matrix(params[:, 0], s.knots_u)
    bv = basis_matrix(params[:, 1], s.knots_v)
    return np.einsum("ki,kj->kij", bu, bv).reshape(len(params), -1)


class SurfaceFitter:
    """Least-squares fitting with a reusable factorization.

    Fitting many surfaces sampled at the same (u, v) parameters shares one
    design matrix and one Cholesky factorization; ``fit`` below wraps this for
    the single-surface case.
    """

    def __init__(self, params: np.ndarray, m: int, n: int,
                 degree: int = DEFAULT_DEGREE, ridge: float = 1e-8):
        params = np.asarray(params, dtype=np.float64)
        if len(params) < m * n:
            raise ValueError("underdetermined fit")
        self.knots_u = uniform_clamped_knots(m, degree)
        self.knots_v = uniform_clamped_knots(n, degree)
        for kv, axis in ((self.knots_u, 0), (self.knots_v, 1)):
            spans = np.unique(kv.knots)
            counts = np.histogram(params[:, axis], bins=spans)[0]
            if np.any(counts == 0):
                raise ValueError("underdetermined fit")
        bu = basis_matrix(params[:, 0], self.knots_u)
        bv = basis_matrix(params[:, 1], self.knots_v)
        design = np.einsum("ki,kj->kij", bu, bv).reshape(len(params), m * n)
        self.design = design
        self.ridge = ridge
        gram = design.T @ design + ridge * np.eye(m * n)
        self._chol = np.linalg.cholesky(gram)
        self.m, self.n = m, n

    def fit(self, points: np.ndarray) -> tuple[BSplineSurface, float]:
        """Fit one surface; returns (surface, RMS residual).

        The ridge term penalizes control deviation from the mean sample
        position rather than from the origin, so constant point clouds fit
        exactly.
        """
        points = np.asarray(points, dtype=np.float64)
        anchor = points.mean(axis=0)
        rhs = self.design.T @ points + self.ridge * anchor[None, :]
        sol = np.linalg.solve(
            self._chol.T, np.linalg.solve(self._chol, rhs)
        )
        control = sol.reshape(self.m, self.n, 3)
        surf = BSplineSurface(self.knots_u, self.knots_v, control)
        resid = self.design @ sol - points
        rms = float(np.sqrt(np.mean(np.einsum("ij,ij->i", resid, resid))))
        return surf, rms


def fit(samples: SampledSurface, m: int, n: int,
        degree: int = DEFAULT_DEGREE, ridge: float = 1e-8) -> tuple[BSplineSurface, float]:
    """Least-squares control grid for a sampled surface: (surface, RMS residual)."""
    fitter = SurfaceFitter(samples.params, m, n, degree, ridge)
    return fitter.fit(samples.points)
