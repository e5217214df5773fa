"""Tensor-product NURBS geometry: the map from [0,1]^2 to the physical domain.

The geometry map F sends the parametric square to the physical domain; its
Jacobian feeds every physical-space derivative in the package. Mesh nodes are
the images of Greville parameter pairs, which makes re-fitting the control
net after node movement a square collocation problem (two banded 1D sweeps
thanks to the tensor structure).
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

from .linalg import banded_solve
from .splines import (
    KnotVector,
    TensorWeights,
    basis_matrix,
    eval_nurbs_2d,
    greville_abscissae,
)

__all__ = [
    "Rectangle",
    "NurbsGeometry",
    "Element",
    "PhysicalMesh",
    "GeometryGrid",
    "MapPointEval",
    "build_identity_geometry",
    "map_point",
    "eval_geometry_grid",
    "mesh_nodes",
    "refit_from_node_targets",
    "min_jacobian",
]


@dataclass(frozen=True)
class Rectangle:
    """Axis-aligned rectangle [x0, x1] x [y0, y1]."""

    x0: float
    x1: float
    y0: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError("rectangle must have positive width and height")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def diameter(self) -> float:
        return float(np.hypot(self.width, self.height))

    def contains(self, x, y, tol=1e-12) -> bool:
        return bool(
            np.all(x >= self.x0 - tol) and np.all(x <= self.x1 + tol)
            and np.all(y >= self.y0 - tol) and np.all(y <= self.y1 + tol)
        )


@dataclass(frozen=True)
class NurbsGeometry:
    """Rational tensor-product surface: knot vectors, weights, control net.

    ``control_points`` has shape (n1, n2, 2) in physical coordinates. The
    geometry is immutable; mesh updates build a new instance.
    """

    kv_u: KnotVector
    kv_v: KnotVector
    weights: TensorWeights
    control_points: np.ndarray

    def __post_init__(self):
        cp = np.ascontiguousarray(self.control_points, dtype=float)
        n1, n2 = self.kv_u.n, self.kv_v.n
        if self.weights.shape != (n1, n2):
            raise ValueError(
                f"weight grid {self.weights.shape} does not match basis ({n1}, {n2})"
            )
        if cp.shape != (n1, n2, 2):
            raise ValueError(
                f"control net {cp.shape} does not match basis ({n1}, {n2}, 2)"
            )
        cp.flags.writeable = False
        object.__setattr__(self, "control_points", cp)

    @property
    def shape(self) -> tuple[int, int]:
        return self.kv_u.n, self.kv_v.n

    @property
    def ndof(self) -> int:
        return self.kv_u.n * self.kv_v.n


@dataclass(frozen=True)
class Element:
    """Nonzero-measure knot-span rectangle in the parametric domain."""

    iu: int  # element counter along u
    iv: int
    span_u: int  # knot span index
    span_v: int
    u0: float
    u1: float
    v0: float
    v1: float


@dataclass(frozen=True)
class PhysicalMesh:
    """Greville-image node grid plus the element list."""

    nodes: np.ndarray  # (n1, n2, 2)
    elements: tuple[Element, ...]


@dataclass(frozen=True)
class MapPointEval:
    point: np.ndarray  # (2,)
    jac: np.ndarray  # (2, 2), jac[a, b] = d x_a / d s_b
    second: np.ndarray | None  # (3, 2): rows d2F/duu, d2F/duv, d2F/dvv


@dataclass(frozen=True)
class GeometryGrid:
    """Geometry map evaluated on a tensor grid of parametric points."""

    pts_u: np.ndarray
    pts_v: np.ndarray
    points: np.ndarray  # (Nu, Nv, 2)
    jac: np.ndarray  # (Nu, Nv, 2, 2)
    det: np.ndarray  # (Nu, Nv)
    second: np.ndarray | None  # (Nu, Nv, 3, 2)


def parametric_elements(kv_u: KnotVector, kv_v: KnotVector) -> tuple[Element, ...]:
    """All nonzero-measure elements of the tensor-product partition."""
    out = []
    for iu, su in enumerate(kv_u.nonzero_spans):
        for iv, sv in enumerate(kv_v.nonzero_spans):
            out.append(
                Element(
                    iu, iv, su, sv,
                    kv_u.knots[su], kv_u.knots[su + 1],
                    kv_v.knots[sv], kv_v.knots[sv + 1],
                )
            )
    return tuple(out)


def rational_grid_sums(kv_u, kv_v, weights, coeffs, pts_u, pts_v, nders):
    """Mixed parametric derivatives of S(u, v) = sum_ij R_ij(u, v) c_ij.

    ``coeffs`` has shape (n1, n2, m); the result maps (a, b) with
    a + b <= nders to arrays of shape (Nu, Nv, m). Everything reduces to
    dense matrix products with the directional derivative collocation
    matrices, then the generalized quotient rule divides out the weight sum.
    """
    w = weights.w if isinstance(weights, TensorWeights) else np.asarray(weights, float)
    coeffs = np.asarray(coeffs, dtype=float)
    Du = [basis_matrix(kv_u, pts_u, a) for a in range(nders + 1)]
    Dv = [basis_matrix(kv_v, pts_v, a) for a in range(nders + 1)]
    wc = w[:, :, None] * coeffs

    wsum = {}
    num = {}
    for a in range(nders + 1):
        for b in range(nders + 1 - a):
            wsum[a, b] = Du[a] @ w @ Dv[b].T
            num[a, b] = np.einsum("ki,ijm,lj->klm", Du[a], wc, Dv[b])

    sums = {}
    for total in range(nders + 1):
        for a in range(total + 1):
            b = total - a
            acc = num[a, b].copy()
            for c in range(a + 1):
                for d in range(b + 1):
                    if c == 0 and d == 0:
                        continue
                    acc -= (comb(a, c) * comb(b, d)) * wsum[c, d][:, :, None] * sums[a - c, b - d]
            sums[a, b] = acc / wsum[0, 0][:, :, None]
    return sums


def eval_geometry_grid(g: NurbsGeometry, pts_u, pts_v, nders: int = 1) -> GeometryGrid:
    """Evaluate F (and derivatives) on the tensor grid pts_u x pts_v."""
    pts_u = np.atleast_1d(np.asarray(pts_u, float))
    pts_v = np.atleast_1d(np.asarray(pts_v, float))
    sums = rational_grid_sums(g.kv_u, g.kv_v, g.weights, g.control_points, pts_u, pts_v, nders)
    points = sums[0, 0]
    if nders >= 1:
        jac = np.stack([sums[1, 0], sums[0, 1]], axis=-1)  # (Nu, Nv, 2, 2)
        det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
    else:
        jac = det = None
    second = None
    if nders >= 2:
        second = np.stack([sums[2, 0], sums[1, 1], sums[0, 2]], axis=-2)  # (Nu, Nv, 3, 2)
    return GeometryGrid(pts_u, pts_v, points, jac, det, second)


def map_point(g: NurbsGeometry, s, nders: int = 1) -> MapPointEval:
    """Geometry map at a single parametric point with Jacobian (and, for
    nders=2, second parametric derivatives)."""
    ev = eval_nurbs_2d(g.kv_u, g.kv_v, g.weights, s, nders=nders)
    p, q = g.kv_u.degree, g.kv_v.degree
    cp = g.control_points[ev.i0: ev.i0 + p + 1, ev.j0: ev.j0 + q + 1]
    point = np.einsum("ij,ijm->m", ev.ders[0, 0], cp)
    jac = None
    if nders >= 1:
        du = np.einsum("ij,ijm->m", ev.ders[1, 0], cp)
        dv = np.einsum("ij,ijm->m", ev.ders[0, 1], cp)
        jac = np.stack([du, dv], axis=-1)
    second = None
    if nders >= 2:
        second = np.stack(
            [
                np.einsum("ij,ijm->m", ev.ders[2, 0], cp),
                np.einsum("ij,ijm->m", ev.ders[1, 1], cp),
                np.einsum("ij,ijm->m", ev.ders[0, 2], cp),
            ]
        )
    return MapPointEval(point, jac, second)


def build_identity_geometry(rect: Rectangle, kv_u: KnotVector, kv_v: KnotVector) -> NurbsGeometry:
    """Unit-weight geometry whose map is exactly the affine [0,1]^2 -> rect.

    Control points sit at affinely scaled Greville pairs; linear reproduction
    of B-splines (Marsden's identity) makes the map affine, so the initial
    physical mesh is uniform whenever the knot spans are.
    """
    gu = greville_abscissae(kv_u)
    gv = greville_abscissae(kv_v)
    X = rect.x0 + rect.width * gu
    Y = rect.y0 + rect.height * gv
    cp = np.stack(np.meshgrid(X, Y, indexing="ij"), axis=-1)
    return NurbsGeometry(kv_u, kv_v, TensorWeights(np.ones((kv_u.n, kv_v.n))), cp)


def mesh_nodes(g: NurbsGeometry) -> PhysicalMesh:
    """Physical mesh: node grid at Greville parameter pairs + element list."""
    gu = greville_abscissae(g.kv_u)
    gv = greville_abscissae(g.kv_v)
    grid = eval_geometry_grid(g, gu, gv, nders=0)
    return PhysicalMesh(grid.points, parametric_elements(g.kv_u, g.kv_v))


def refit_from_node_targets(g: NurbsGeometry, targets: np.ndarray) -> NurbsGeometry:
    """New geometry (same knots/weights) whose Greville-pair images hit targets.

    Solved in homogeneous form: with Q_ij = w_ij P_ij the interpolation
    conditions are linear with plain B-spline collocation matrices, so two
    sweeps of banded 1D solves suffice for any weight grid. When the boundary
    rows of ``targets`` coincide bitwise with the current boundary nodes, the
    boundary control points are carried over unchanged so repeated refits
    keep the boundary curve bit-identical.
    """
    targets = np.asarray(targets, dtype=float)
    n1, n2 = g.shape
    if targets.shape != (n1, n2, 2):
        raise ValueError(f"targets shape {targets.shape} does not match ({n1}, {n2}, 2)")
    gu = greville_abscissae(g.kv_u)
    gv = greville_abscissae(g.kv_v)
    Bu = basis_matrix(g.kv_u, gu)
    Bv = basis_matrix(g.kv_v, gv)
    w = g.weights.w
    wgrid = Bu @ w @ Bv.T  # weight sum at the collocation grid

    cp = np.empty_like(targets)
    for m in range(2):
        rhs = wgrid * targets[:, :, m]
        tmp = banded_solve(Bu, rhs)  # sweep along u for every column
        q = banded_solve(Bv, tmp.T).T  # sweep along v
        cp[:, :, m] = q / w

    current = mesh_nodes(g).nodes
    boundary_fixed = (
        np.array_equal(targets[0, :], current[0, :])
        and np.array_equal(targets[-1, :], current[-1, :])
        and np.array_equal(targets[:, 0], current[:, 0])
        and np.array_equal(targets[:, -1], current[:, -1])
    )
    if boundary_fixed:
        cp[0, :] = g.control_points[0, :]
        cp[-1, :] = g.control_points[-1, :]
        cp[:, 0] = g.control_points[:, 0]
        cp[:, -1] = g.control_points[:, -1]
    return NurbsGeometry(g.kv_u, g.kv_v, g.weights, cp)


def _gauss01(q):
    x, w = np.polynomial.legendre.leggauss(q)
    return (x + 1.0) / 2.0, w / 2.0


def element_quadrature_1d(kv: KnotVector, q: int):
    """Per-span Gauss points/weights along one direction, concatenated.

    Returns (pts, wts) of length len(nonzero_spans) * q, ordered span by span.
    """
    xg, wg = _gauss01(q)
    pts, wts = [], []
    for span in kv.nonzero_spans:
        a, b = kv.knots[span], kv.knots[span + 1]
        pts.append(a + (b - a) * xg)
        wts.append((b - a) * wg)
    return np.concatenate(pts), np.concatenate(wts)


def min_jacobian(g: NurbsGeometry) -> float:
    """Smallest Jacobian determinant over all element Gauss points.

    A positive value certifies mesh validity at the sampled resolution;
    folding between quadrature points is not detected.
    """
    pu, _ = element_quadrature_1d(g.kv_u, g.kv_u.degree + 1)
    pv, _ = element_quadrature_1d(g.kv_v, g.kv_v.degree + 1)
    grid = eval_geometry_grid(g, pu, pv, nders=1)
    return float(grid.det.min())
