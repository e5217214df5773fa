"""Open knot vectors and B-spline / NURBS basis evaluation.

All knot vectors live on the parametric interval [0, 1] and are open
(clamped): the first and last ``degree + 1`` knots sit on the interval ends,
so the basis is interpolatory there. Evaluation follows the banded triangular
schemes of Piegl & Tiller (The NURBS Book, algorithms A2.1-A2.3): only the
``degree + 1`` basis functions that can be nonzero on the span containing the
query point are computed and returned.

The closed-interval convention is used at the right end: ``t = 1`` evaluates
on the last span of nonzero length, so bases are defined on all of [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np

__all__ = [
    "KnotVector",
    "BasisEval",
    "TensorWeights",
    "Nurbs2DEval",
    "make_open_knot_vector",
    "find_span",
    "eval_basis",
    "greville_abscissae",
    "basis_matrix",
    "eval_nurbs_2d",
]


@dataclass(frozen=True)
class KnotVector:
    """Open knot vector with its polynomial degree.

    Parameters
    ----------
    degree : int
        Polynomial degree p >= 1.
    knots : array_like
        Nondecreasing sequence of n + p + 1 knots in [0, 1]. The first and
        last p + 1 entries must be 0 and 1 respectively, and no interior
        knot may appear more than p times.
    """

    degree: int
    knots: np.ndarray

    def __post_init__(self):
        knots = np.ascontiguousarray(self.knots, dtype=float)
        knots.flags.writeable = False
        object.__setattr__(self, "knots", knots)
        p = self.degree
        if p < 1:
            raise ValueError(f"degree must be >= 1, got {p}")
        if knots.ndim != 1 or len(knots) < 2 * (p + 1):
            raise ValueError("knot vector too short for the given degree")
        if np.any(np.diff(knots) < 0):
            raise ValueError("knots must be nondecreasing")
        if np.any(knots[: p + 1] != 0.0) or np.any(knots[-(p + 1):] != 1.0):
            raise ValueError("knot vector must be open: first/last p+1 knots at 0/1")
        interior = knots[(p + 1):-(p + 1)]
        if interior.size:
            _, counts = np.unique(interior, return_counts=True)
            if np.any(counts > p):
                raise ValueError("interior knot multiplicity exceeds the degree")

    @property
    def n(self) -> int:
        """Number of basis functions."""
        return len(self.knots) - self.degree - 1

    @property
    def nonzero_spans(self) -> tuple[int, ...]:
        """Indices i of the knot spans [knots[i], knots[i+1]) with nonzero length."""
        p, n = self.degree, self.n
        return tuple(i for i in range(p, n) if self.knots[i] < self.knots[i + 1])

    @property
    def breakpoints(self) -> np.ndarray:
        """Distinct knot values."""
        return np.unique(self.knots)


@dataclass(frozen=True)
class BasisEval:
    """Nonzero B-spline basis values (and derivatives) at one point.

    ``ders[k, a]`` is the k-th derivative of basis function ``span - p + a``;
    row 0 holds the values themselves.
    """

    span: int
    ders: np.ndarray

    @property
    def values(self) -> np.ndarray:
        return self.ders[0]

    @property
    def first_index(self) -> int:
        """Global index of the first (possibly) nonzero basis function."""
        return self.span - (self.ders.shape[1] - 1)


@dataclass(frozen=True)
class TensorWeights:
    """Positive weight grid of a tensor-product rational basis."""

    w: np.ndarray

    def __post_init__(self):
        w = np.ascontiguousarray(self.w, dtype=float)
        if w.ndim != 2:
            raise ValueError("weights must form a 2D grid")
        if np.any(w <= 0.0):
            raise ValueError("all weights must be strictly positive")
        w.flags.writeable = False
        object.__setattr__(self, "w", w)

    @property
    def shape(self) -> tuple[int, int]:
        return self.w.shape


def make_open_knot_vector(degree: int, spans: int, multiplicity: int = 1) -> KnotVector:
    """Build an open knot vector with uniform interior breakpoints.

    The interior breakpoints are k/spans for k = 1 .. spans-1, each repeated
    ``multiplicity`` times, giving ``degree + 1 + (spans-1)*multiplicity``
    basis functions. ``multiplicity=1`` yields the maximally smooth
    C^{p-1} family, ``multiplicity=degree`` the C^0 family of classical
    high-order elements.

    Parameters
    ----------
    degree : int
        Polynomial degree p >= 1.
    spans : int
        Number of nonzero knot spans (elements per direction), >= 1.
    multiplicity : int
        Interior knot multiplicity r with 1 <= r <= p.
    """
    if degree < 1:
        raise ValueError(f"degree must be >= 1, got {degree}")
    if spans < 1:
        raise ValueError(f"spans must be >= 1, got {spans}")
    if not 1 <= multiplicity <= degree:
        raise ValueError(
            f"multiplicity must satisfy 1 <= r <= degree, got r={multiplicity}"
        )
    knots = [0.0] * (degree + 1)
    for k in range(1, spans):
        knots.extend([k / spans] * multiplicity)
    knots.extend([1.0] * (degree + 1))
    return KnotVector(degree, np.array(knots))


def find_span(kv: KnotVector, t: float) -> int:
    """Locate the knot span index containing t (algorithm A2.1).

    Returns i with knots[i] <= t < knots[i+1] and knots[i] < knots[i+1];
    t = 1 returns the last span of nonzero length.
    """
    knots, p = kv.knots, kv.degree
    low = p
    high = len(knots) - 1 - p
    if t >= knots[high]:
        return high - 1
    if t <= knots[low]:
        return low
    span = (low + high) // 2
    while t < knots[span] or t >= knots[span + 1]:
        if t < knots[span]:
            high = span
        else:
            low = span
        span = (low + high) // 2
    return span


def _basis_all_ders(knots: np.ndarray, p: int, t: float, span: int, nders: int) -> np.ndarray:
    """Values and derivatives of the p+1 nonzero basis functions (A2.3).

    Returns an array of shape (nders+1, p+1); row k holds the k-th
    derivatives, row 0 the values. The 0/0 convention of the recursion never
    arises here because the span has nonzero length.
    """
    ndu = np.empty((p + 1, p + 1))
    left = np.empty(p + 1)
    right = np.empty(p + 1)
    ndu[0, 0] = 1.0
    for j in range(1, p + 1):
        left[j] = t - knots[span + 1 - j]
        right[j] = knots[span + j] - t
        saved = 0.0
        for r in range(j):
            ndu[j, r] = right[r + 1] + left[j - r]
            temp = ndu[r, j - 1] / ndu[j, r]
            ndu[r, j] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        ndu[j, j] = saved

    ders = np.zeros((nders + 1, p + 1))
    ders[0, :] = ndu[:, p]
    if nders == 0:
        return ders

    a = np.empty((2, p + 1))
    for r in range(p + 1):
        s1, s2 = 0, 1
        a[0, 0] = 1.0
        for k in range(1, nders + 1):
            d = 0.0
            rk = r - k
            pk = p - k
            if r >= k:
                a[s2, 0] = a[s1, 0] / ndu[pk + 1, rk]
                d = a[s2, 0] * ndu[rk, pk]
            j1 = 1 if rk >= -1 else -rk
            j2 = k - 1 if r - 1 <= pk else p - r
            for j in range(j1, j2 + 1):
                a[s2, j] = (a[s1, j] - a[s1, j - 1]) / ndu[pk + 1, rk + j]
                d += a[s2, j] * ndu[rk + j, pk]
            if r <= pk:
                a[s2, k] = -a[s1, k - 1] / ndu[pk + 1, r]
                d += a[s2, k] * ndu[r, pk]
            ders[k, r] = d
            s1, s2 = s2, s1

    fac = float(p)
    for k in range(1, nders + 1):
        ders[k, :] *= fac
        fac *= p - k
    return ders


def eval_basis(kv: KnotVector, t: float, nders: int = 0, span: int | None = None) -> BasisEval:
    """Evaluate the nonzero B-spline basis functions and derivatives at t.

    Parameters
    ----------
    kv : KnotVector
    t : float
        Query point in [0, 1].
    nders : int
        Highest derivative order, 0 <= nders <= degree.
    span : int, optional
        Span override. Defaults to ``find_span(kv, t)``; passing the span
        explicitly allows one-sided limits at interior knots.
    """
    p = kv.degree
    if not 0 <= nders <= p:
        raise ValueError(f"derivative order must lie in [0, {p}], got {nders}")
    if span is None:
        span = find_span(kv, t)
    return BasisEval(span, _basis_all_ders(kv.knots, p, t, span, nders))


def greville_abscissae(kv: KnotVector) -> np.ndarray:
    """Knot averages g_i = (knots[i+1] + ... + knots[i+p]) / p, i = 0..n-1."""
    p, n = kv.degree, kv.n
    g = np.array([kv.knots[i + 1: i + p + 1].mean() for i in range(n)])
    g[0], g[-1] = 0.0, 1.0
    return g


def basis_matrix(kv: KnotVector, pts: np.ndarray, der: int = 0) -> np.ndarray:
    """Dense matrix B with B[k, i] = (d/dt)^der N_i at pts[k].

    Rows are banded: at most degree+1 consecutive nonzero columns. Used for
    Greville collocation and grid evaluation.
    """
    pts = np.atleast_1d(np.asarray(pts, dtype=float))
    out = np.zeros((len(pts), kv.n))
    p = kv.degree
    for k, t in enumerate(pts):
        ev = eval_basis(kv, t, nders=der)
        out[k, ev.span - p: ev.span + 1] = ev.ders[der]
    return out


@dataclass(frozen=True)
class Nurbs2DEval:
    """Local values/derivatives of the nonzero bivariate rational basis.

    ``ders[a, b]`` is the (p+1, q+1) block of mixed parametric derivatives
    d^{a+b} R / du^a dv^b; local entry (alpha, beta) belongs to the global
    basis function (i0 + alpha, j0 + beta).
    """

    i0: int
    j0: int
    ders: np.ndarray

    @property
    def values(self) -> np.ndarray:
        return self.ders[0, 0]


def eval_nurbs_2d(
    kv_u: KnotVector,
    kv_v: KnotVector,
    weights: TensorWeights | np.ndarray,
    s,
    nders: int = 0,
) -> Nurbs2DEval:
    """Evaluate the nonzero bivariate NURBS basis functions at s = (u, v).

    The rational derivatives are obtained from the product-rule expansion of
    numerator and weight sums; with unit weights they reduce to plain tensor
    products of B-spline values.

    Parameters
    ----------
    kv_u, kv_v : KnotVector
        Directional knot vectors (degrees p, q).
    weights : TensorWeights or (n1, n2) array
        Positive weight grid.
    s : pair of floats
        Parametric point in [0, 1]^2.
    nders : int
        Highest derivative order per direction, nders <= min(p, q).
    """
    w = weights.w if isinstance(weights, TensorWeights) else np.asarray(weights, float)
    p, q = kv_u.degree, kv_v.degree
    if not 0 <= nders <= min(p, q):
        raise ValueError(f"derivative order must lie in [0, {min(p, q)}], got {nders}")
    u, v = float(s[0]), float(s[1])
    eu = eval_basis(kv_u, u, nders)
    ev = eval_basis(kv_v, v, nders)
    i0, j0 = eu.first_index, ev.first_index
    wloc = w[i0: i0 + p + 1, j0: j0 + q + 1]

    # Mixed derivatives of the numerators A_ij = w_ij N_i N_j and of their
    # sum W; then recover R = A / W by the generalized quotient rule.
    num = np.einsum("ai,bj,ij->abij", eu.ders, ev.ders, wloc)
    wsum = num.sum(axis=(2, 3))
    ders = np.empty_like(num)
    for a in range(nders + 1):
        for b in range(nders + 1):
            acc = num[a, b].copy()
            for c in range(a + 1):
                for d in range(b + 1):
                    if c == 0 and d == 0:
                        continue
                    acc -= comb(a, c) * comb(b, d) * wsum[c, d] * ders[a - c, b - d]
            ders[a, b] = acc / wsum[0, 0]
    return Nurbs2DEval(i0, j0, ders)
