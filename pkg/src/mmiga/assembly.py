"""Galerkin assembly over the rational tensor-product space.

Stiffness matrices are the weighted diffusion forms  A_kl = int w grad(phi_k)
. grad(phi_l) dx ; with w = 1 this is the Poisson bilinear form. Assembly
loops over nonzero knot spans with per-direction Gauss rules of degree + 1
points; the element loop order is fixed and local blocks are mirrored from
their upper triangle, so matrices come out bit-symmetric and runs are
reproducible.

Dirichlet data is imposed by eliminating boundary coefficients: the trace of
the solution space on each edge is a univariate rational curve, so boundary
coefficients follow from 1D Greville collocation of the boundary data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import AssemblyError
from .geometry import (
    GeometryGrid,
    NurbsGeometry,
    element_quadrature_1d,
    eval_geometry_grid,
    rational_grid_sums,
)
from .linalg import LinearSolverSettings, banded_solve, cg_solve
from .splines import basis_matrix, greville_abscissae

__all__ = [
    "QuadratureRule",
    "DofMap",
    "FieldCoefficients",
    "FieldEval",
    "FieldGrid",
    "ReducedSystem",
    "gauss_rule",
    "dof_map",
    "quadrature_grid",
    "assemble_weighted_stiffness",
    "assemble_load",
    "apply_dirichlet",
    "solve_poisson",
    "eval_field",
    "eval_field_grid",
]


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Legendre rule mapped to [0, 1]; exact on degree 2q-1."""

    points: np.ndarray
    weights: np.ndarray


def gauss_rule(q: int) -> QuadratureRule:
    if not 1 <= q <= 16:
        raise ValueError(f"point count must lie in [1, 16], got {q}")
    x, w = np.polynomial.legendre.leggauss(q)
    return QuadratureRule((x + 1.0) / 2.0, w / 2.0)


@dataclass(frozen=True)
class DofMap:
    """Split of the coefficient grid into boundary ring and interior."""

    n1: int
    n2: int
    boundary: np.ndarray  # flat indices, sorted
    interior: np.ndarray

    @property
    def total(self) -> int:
        return self.n1 * self.n2


def dof_map(n1: int, n2: int) -> DofMap:
    idx = np.arange(n1 * n2).reshape(n1, n2)
    mask = np.zeros((n1, n2), dtype=bool)
    mask[0, :] = mask[-1, :] = mask[:, 0] = mask[:, -1] = True
    return DofMap(n1, n2, idx[mask], idx[~mask])


@dataclass(frozen=True)
class FieldCoefficients:
    """Coefficients of a scalar field in the rational basis (flat, row-major
    over the (n1, n2) index grid)."""

    values: np.ndarray
    shape: tuple[int, int]

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=float)
        if values.ndim != 1 or len(values) != self.shape[0] * self.shape[1]:
            raise ValueError(
                f"coefficient vector of length {values.size} does not match grid {self.shape}"
            )
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @classmethod
    def from_grid(cls, grid: np.ndarray) -> "FieldCoefficients":
        grid = np.asarray(grid, dtype=float)
        return cls(grid.ravel(), grid.shape)

    @property
    def grid(self) -> np.ndarray:
        return self.values.reshape(self.shape)


@dataclass(frozen=True)
class TensorQuadrature:
    """Per-direction element Gauss grids for one geometry."""

    pts_u: np.ndarray
    wts_u: np.ndarray
    pts_v: np.ndarray
    wts_v: np.ndarray
    q_u: int
    q_v: int


def quadrature_grid(g: NurbsGeometry, extra: int = 0) -> TensorQuadrature:
    """The assembly quadrature grid: degree + 1 (+extra) points per direction
    per element. Exposed so coefficient fields (e.g. mesh-density weights)
    can be tabulated on exactly the points assembly will use."""
    q_u = g.kv_u.degree + 1 + extra
    q_v = g.kv_v.degree + 1 + extra
    pu, wu = element_quadrature_1d(g.kv_u, q_u)
    pv, wv = element_quadrature_1d(g.kv_v, q_v)
    return TensorQuadrature(pu, wu, pv, wv, q_u, q_v)


def _resolve_weight(weight, geo: GeometryGrid, shape):
    if weight is None:
        return np.ones(shape)
    if callable(weight):
        vals = np.asarray(weight(geo.points[..., 0], geo.points[..., 1]), dtype=float)
    else:
        vals = np.asarray(weight, dtype=float)
    if vals.shape != shape:
        raise ValueError(f"weight grid {vals.shape} does not match quadrature grid {shape}")
    return vals


def _element_tables(g: NurbsGeometry, quad: TensorQuadrature):
    """Dense directional derivative tables and weight-sum grids for assembly."""
    w = g.weights.w
    Du = [basis_matrix(g.kv_u, quad.pts_u, a) for a in range(2)]
    Dv = [basis_matrix(g.kv_v, quad.pts_v, a) for a in range(2)]
    W = {
        (0, 0): Du[0] @ w @ Dv[0].T,
        (1, 0): Du[1] @ w @ Dv[0].T,
        (0, 1): Du[0] @ w @ Dv[1].T,
    }
    return Du, Dv, W


def _local_rational(g, quad, Du, Dv, W, eu, ev, span_u, span_v):
    """Values and parametric gradients of the local rational basis on one
    element's quadrature block, flattened to (nloc, nq)."""
    p, q = g.kv_u.degree, g.kv_v.degree
    ru = slice(eu * quad.q_u, (eu + 1) * quad.q_u)
    rv = slice(ev * quad.q_v, (ev + 1) * quad.q_v)
    cu = slice(span_u - p, span_u + 1)
    cv = slice(span_v - q, span_v + 1)

    Nu0, Nu1 = Du[0][ru, cu], Du[1][ru, cu]
    Nv0, Nv1 = Dv[0][rv, cv], Dv[1][rv, cv]
    wloc = g.weights.w[cu, cv]
    Wb, Wu, Wv = W[0, 0][ru, rv], W[1, 0][ru, rv], W[0, 1][ru, rv]

    A0 = np.einsum("ai,bj,ij->ijab", Nu0, Nv0, wloc)
    Au = np.einsum("ai,bj,ij->ijab", Nu1, Nv0, wloc)
    Av = np.einsum("ai,bj,ij->ijab", Nu0, Nv1, wloc)
    R = A0 / Wb
    Ru = (Au - R * Wu) / Wb
    Rv = (Av - R * Wv) / Wb

    nloc = (p + 1) * (q + 1)
    nq = quad.q_u * quad.q_v
    i0, j0 = span_u - p, span_v - q
    gidx = ((i0 + np.arange(p + 1))[:, None] * g.kv_v.n + (j0 + np.arange(q + 1))).ravel()
    return (
        R.reshape(nloc, nq),
        Ru.reshape(nloc, nq),
        Rv.reshape(nloc, nq),
        gidx,
        ru,
        rv,
    )


def _merge_coo(rows, cols, vals, n):
    """Deterministic duplicate merge: stable sort by (row, col), then one
    sequential reduction per entry. Visit order of the element loop therefore
    fixes every accumulation order, making assembly bit-reproducible and the
    result exactly symmetric when the per-element blocks are."""
    order = np.lexsort((cols, rows))
    r, c, v = rows[order], cols[order], vals[order]
    first = np.empty(len(r), dtype=bool)
    first[0] = True
    first[1:] = (r[1:] != r[:-1]) | (c[1:] != c[:-1])
    starts = np.flatnonzero(first)
    merged = np.add.reduceat(v, starts)
    return sp.csr_matrix((merged, (r[starts], c[starts])), shape=(n, n))


def assemble_weighted_stiffness(g: NurbsGeometry, weight=None, extra_quad: int = 0):
    """Sparse symmetric matrix of the weighted diffusion form.

    ``weight`` is the scalar coefficient at the quadrature points: None for 1,
    a callable w(x, y) of physical coordinates (vectorized), or an array over
    the grid returned by :func:`quadrature_grid`. It must be strictly
    positive; a nonpositive value aborts assembly naming the element.
    """
    quad = quadrature_grid(g, extra_quad)
    geo = eval_geometry_grid(g, quad.pts_u, quad.pts_v, nders=1)
    shape = (len(quad.pts_u), len(quad.pts_v))
    wvals = _resolve_weight(weight, geo, shape)
    Du, Dv, W = _element_tables(g, quad)

    det = geo.det
    jac = geo.jac
    xi_x = jac[..., 1, 1] / det
    xi_y = -jac[..., 0, 1] / det
    eta_x = -jac[..., 1, 0] / det
    eta_y = jac[..., 0, 0] / det
    wq2d = np.multiply.outer(quad.wts_u, quad.wts_v)

    n = g.ndof
    rows, cols, vals = [], [], []
    for eu, span_u in enumerate(g.kv_u.nonzero_spans):
        for ev, span_v in enumerate(g.kv_v.nonzero_spans):
            R, Ru, Rv, gidx, ru, rv = _local_rational(g, quad, Du, Dv, W, eu, ev, span_u, span_v)
            wblk = wvals[ru, rv]
            if np.any(wblk <= 0.0):
                raise AssemblyError(
                    f"nonpositive diffusion weight in element ({eu}, {ev})"
                )
            dblk = det[ru, rv]
            if np.any(dblk <= 0.0):
                raise AssemblyError(
                    f"nonpositive Jacobian determinant in element ({eu}, {ev})"
                )
            gx = Ru * xi_x[ru, rv].ravel() + Rv * eta_x[ru, rv].ravel()
            gy = Ru * xi_y[ru, rv].ravel() + Rv * eta_y[ru, rv].ravel()
            c = (wq2d[ru, rv] * dblk * wblk).ravel()
            K = (gx * c) @ gx.T + (gy * c) @ gy.T
            upper = np.triu(K)
            K = upper + upper.T - np.diag(np.diag(K))
            rows.append(np.repeat(gidx, len(gidx)))
            cols.append(np.tile(gidx, len(gidx)))
            vals.append(K.ravel())

    return _merge_coo(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), n)


def assemble_load(g: NurbsGeometry, f, extra_quad: int = 0) -> np.ndarray:
    """Load vector b_k = int f phi_k dx with the assembly quadrature.

    ``f(x, y)`` must be vectorized over arrays; non-finite values abort
    naming the element.
    """
    quad = quadrature_grid(g, extra_quad)
    geo = eval_geometry_grid(g, quad.pts_u, quad.pts_v, nders=1)
    fvals = np.asarray(f(geo.points[..., 0], geo.points[..., 1]), dtype=float)
    Du, Dv, W = _element_tables(g, quad)
    wq2d = np.multiply.outer(quad.wts_u, quad.wts_v)

    b = np.zeros(g.ndof)
    for eu, span_u in enumerate(g.kv_u.nonzero_spans):
        for ev, span_v in enumerate(g.kv_v.nonzero_spans):
            R, _, _, gidx, ru, rv = _local_rational(g, quad, Du, Dv, W, eu, ev, span_u, span_v)
            fblk = fvals[ru, rv]
            if not np.all(np.isfinite(fblk)):
                raise AssemblyError(f"non-finite source value in element ({eu}, {ev})")
            c = (wq2d[ru, rv] * geo.det[ru, rv] * fblk).ravel()
            np.add.at(b, gidx, R @ c)
    return b


@dataclass(frozen=True)
class ReducedSystem:
    """Interior system after boundary-coefficient elimination."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    boundary_values: np.ndarray  # full-length vector, zero on interior
    dofs: DofMap


def _edge_coefficients(kv, w_edge, edge_points, bc):
    """1D Greville collocation of the boundary data along one edge curve."""
    gpts = greville_abscissae(kv)
    bvals = np.asarray(bc(edge_points[:, 0], edge_points[:, 1]), dtype=float)
    if not np.all(np.isfinite(bvals)):
        raise AssemblyError("non-finite boundary value on edge sample")
    B = basis_matrix(kv, gpts)
    wtrace = B @ w_edge
    qcoef = banded_solve(B, wtrace * bvals)
    return qcoef / w_edge


def apply_dirichlet(A, b, g: NurbsGeometry, bc) -> ReducedSystem:
    """Eliminate boundary coefficients interpolating ``bc`` on the four edges.

    Boundary coefficients are set by collocating the edge traces at Greville
    abscissae (the trace on each edge is a univariate rational curve that
    depends only on the boundary ring of coefficients); the reduced interior
    system is A_II x_I = b_I - A_IB x_B.
    """
    n1, n2 = g.shape
    dm = dof_map(n1, n2)
    gu = greville_abscissae(g.kv_u)
    gv = greville_abscissae(g.kv_v)
    w = g.weights.w

    xb = np.zeros((n1, n2))
    edges = (
        (g.kv_u, w[:, 0], eval_geometry_grid(g, gu, [0.0], 0).points[:, 0, :], (slice(None), 0)),
        (g.kv_u, w[:, -1], eval_geometry_grid(g, gu, [1.0], 0).points[:, 0, :], (slice(None), n2 - 1)),
        (g.kv_v, w[0, :], eval_geometry_grid(g, [0.0], gv, 0).points[0, :, :], (0, slice(None))),
        (g.kv_v, w[-1, :], eval_geometry_grid(g, [1.0], gv, 0).points[0, :, :], (n1 - 1, slice(None))),
    )
    for kv, w_edge, pts, sl in edges:
        xb[sl] = _edge_coefficients(kv, w_edge, pts, bc)

    xb_flat = np.zeros(n1 * n2)
    xb_flat[dm.boundary] = xb.ravel()[dm.boundary]
    A = A.tocsr()
    A_ii = A[dm.interior][:, dm.interior]
    rhs = b[dm.interior] - A[dm.interior][:, dm.boundary] @ xb_flat[dm.boundary]
    return ReducedSystem(A_ii.tocsr(), rhs, xb_flat, dm)


def solve_poisson(
    g: NurbsGeometry,
    f,
    bc,
    lin: LinearSolverSettings | None = None,
) -> FieldCoefficients:
    """Galerkin solve of  -div(grad u) = f,  u = bc on the boundary."""
    lin = lin or LinearSolverSettings()
    A = assemble_weighted_stiffness(g)
    b = assemble_load(g, f)
    red = apply_dirichlet(A, b, g, bc)
    x_int, _ = cg_solve(red.matrix, red.rhs, tol=lin.tol, maxit=lin.maxit, precond=lin.precond)
    full = red.boundary_values.copy()
    full[red.dofs.interior] = x_int
    return FieldCoefficients(full, g.shape)


@dataclass(frozen=True)
class FieldGrid:
    """A scalar field sampled on a tensor grid: value, physical gradient and
    (optionally) physical Hessian."""

    values: np.ndarray  # (Nu, Nv)
    grad: np.ndarray | None  # (Nu, Nv, 2)
    hess: np.ndarray | None  # (Nu, Nv, 2, 2)


@dataclass(frozen=True)
class FieldEval:
    value: float
    grad: np.ndarray | None
    hess: np.ndarray | None


def eval_field_grid(
    g: NurbsGeometry,
    u: FieldCoefficients,
    pts_u,
    pts_v,
    nders: int = 0,
    geo: GeometryGrid | None = None,
) -> FieldGrid:
    """Evaluate a coefficient field on a tensor grid with physical derivatives.

    The gradient comes from the Jacobian-inverse chain rule; the Hessian uses
    the full second-order transformation including the second parametric
    derivatives of the geometry map.
    """
    pts_u = np.atleast_1d(np.asarray(pts_u, float))
    pts_v = np.atleast_1d(np.asarray(pts_v, float))
    if nders >= 1 and (geo is None or (nders >= 2 and geo.second is None)):
        geo = eval_geometry_grid(g, pts_u, pts_v, nders=nders)
    sums = rational_grid_sums(
        g.kv_u, g.kv_v, g.weights, u.grid[:, :, None], pts_u, pts_v, nders
    )
    values = sums[0, 0][..., 0]
    if nders == 0:
        return FieldGrid(values, None, None)

    det = geo.det
    if np.any(np.abs(det) < 1e-300):
        raise ZeroDivisionError("singular geometry Jacobian on evaluation grid")
    jac = geo.jac
    xi_x = jac[..., 1, 1] / det
    xi_y = -jac[..., 0, 1] / det
    eta_x = -jac[..., 1, 0] / det
    eta_y = jac[..., 0, 0] / det

    du, dv = sums[1, 0][..., 0], sums[0, 1][..., 0]
    gx = du * xi_x + dv * eta_x
    gy = du * xi_y + dv * eta_y
    grad = np.stack([gx, gy], axis=-1)
    if nders == 1:
        return FieldGrid(values, grad, None)

    # parametric Hessian minus the geometry-curvature term, then push both
    # indices through the inverse Jacobian
    duu, duv, dvv = sums[2, 0][..., 0], sums[1, 1][..., 0], sums[0, 2][..., 0]
    Fuu, Fuv, Fvv = geo.second[..., 0, :], geo.second[..., 1, :], geo.second[..., 2, :]
    b00 = duu - (gx * Fuu[..., 0] + gy * Fuu[..., 1])
    b01 = duv - (gx * Fuv[..., 0] + gy * Fuv[..., 1])
    b11 = dvv - (gx * Fvv[..., 0] + gy * Fvv[..., 1])

    m00 = xi_x * b00 + eta_x * b01
    m01 = xi_x * b01 + eta_x * b11
    m10 = xi_y * b00 + eta_y * b01
    m11 = xi_y * b01 + eta_y * b11
    h00 = m00 * xi_x + m01 * eta_x
    h01 = m00 * xi_y + m01 * eta_y
    h10 = m10 * xi_x + m11 * eta_x
    h11 = m10 * xi_y + m11 * eta_y
    off = 0.5 * (h01 + h10)
    hess = np.stack(
        [np.stack([h00, off], axis=-1), np.stack([off, h11], axis=-1)], axis=-2
    )
    return FieldGrid(values, grad, hess)


def eval_field(g: NurbsGeometry, u: FieldCoefficients, s, nders: int = 0) -> FieldEval:
    """Point evaluation of a coefficient field; see :func:`eval_field_grid`."""
    fg = eval_field_grid(g, u, [float(s[0])], [float(s[1])], nders=nders)
    return FieldEval(
        float(fg.values[0, 0]),
        None if fg.grad is None else fg.grad[0, 0],
        None if fg.hess is None else fg.hess[0, 0],
    )
