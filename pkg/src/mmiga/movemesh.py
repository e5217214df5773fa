"""Harmonic-map mesh redistribution for the rational Galerkin solver.

The physical mesh nodes (Greville images of the geometry map) are pulled
toward regions where a monitor function built from the numerical solution is
large. One outer iteration: solve the variable-diffusion problem
-div(grad(xi)/M) = 0 for the logical map, compare it with the fixed reference
map from the initialization solve, convert the logical defect into physical
node movement through the inverse Jacobian of the map, damp, re-fit the
geometry, and re-solve the PDE on the moved mesh.

Because the solution space is globally C^1 (degree >= 2), the Jacobian of the
logical map is evaluated exactly at every node instead of being recovered by
element averaging, and second derivatives of the solution are available for
curvature-based monitors.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .assembly import (
    FieldCoefficients,
    apply_dirichlet,
    assemble_weighted_stiffness,
    eval_field_grid,
    quadrature_grid,
    solve_poisson,
)
from .errors import DegenerateMapError, MeshWrapError
from .geometry import (
    NurbsGeometry,
    Rectangle,
    eval_geometry_grid,
    mesh_nodes,
    min_jacobian,
    refit_from_node_targets,
)
from .linalg import LinearSolverSettings, cg_solve
from .postproc import ExactSolution, error_norms
from .splines import greville_abscissae

__all__ = [
    "MonitorSpec",
    "BoundaryMap",
    "LogicalMesh",
    "TraceEntry",
    "MoveMeshConfig",
    "MoveMeshState",
    "PoissonProblem",
    "make_boundary_map",
    "init_logical_mesh",
    "eval_monitor",
    "monitor_grid",
    "solve_harmonic_map",
    "compute_movement",
    "update_mesh",
    "move_mesh_solve",
]

logger = logging.getLogger(__name__)

MAX_TAU_HALVINGS = 6
DEGENERATE_JAC_TOL = 1e-12
DEGENERATE_NODE_FRACTION = 0.01


@dataclass(frozen=True)
class MonitorSpec:
    """Mesh-density monitor  M = sqrt(eps + alpha |grad u|^2 + beta |hess u|^2).

    ``kind`` picks the family: "gradient" pins eps = 1, beta = 0; "hessian"
    pins eps = 1, alpha = 0; "combined" uses all three parameters. The Hessian
    enters through its Frobenius norm. ``smoothing`` counts optional nodal
    averaging passes (off by default).
    """

    kind: str = "gradient"
    eps: float = 1.0
    alpha: float = 0.0
    beta: float = 0.0
    smoothing: int = 0

    def __post_init__(self):
        if self.kind not in ("gradient", "hessian", "combined"):
            raise ValueError(f"unknown monitor kind {self.kind!r}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("monitor weights must be nonnegative")
        if self.kind == "gradient":
            object.__setattr__(self, "eps", 1.0)
            object.__setattr__(self, "beta", 0.0)
        elif self.kind == "hessian":
            object.__setattr__(self, "eps", 1.0)
            object.__setattr__(self, "alpha", 0.0)
        if self.eps <= 0.0:
            raise ValueError("eps must be strictly positive so the monitor stays positive")
        if self.smoothing < 0:
            raise ValueError("smoothing count must be nonnegative")

    @property
    def needs_hessian(self) -> bool:
        return self.beta > 0.0


@dataclass(frozen=True)
class BoundaryMap:
    """Edge-to-edge map from the physical boundary onto the logical boundary.

    Both domains are axis-aligned rectangles, so each edge maps affinely
    (arc-length proportionally) onto its counterpart and corners go to
    corners; the same affine formula extends to the interior, which is what
    the Dirichlet data evaluation uses.
    """

    physical: Rectangle
    logical: Rectangle

    def __call__(self, x, y):
        xi = self.logical.x0 + (np.asarray(x) - self.physical.x0) * (
            self.logical.width / self.physical.width
        )
        eta = self.logical.y0 + (np.asarray(y) - self.physical.y0) * (
            self.logical.height / self.physical.height
        )
        return xi, eta

    def component(self, k: int):
        def bc(x, y):
            return self(x, y)[k]

        return bc


def make_boundary_map(physical: Rectangle, logical: Rectangle) -> BoundaryMap:
    return BoundaryMap(physical, logical)


@dataclass(frozen=True)
class LogicalMesh:
    """Reference logical mesh: the initialization solve and its nodal values.

    ``nodes[i, j]`` stores the logical position of physical node (i, j) from
    the initialization solve; it stays fixed for the whole run.
    """

    logical: Rectangle
    fields: tuple[FieldCoefficients, FieldCoefficients]
    nodes: np.ndarray  # (n1, n2, 2)
    params_u: np.ndarray
    params_v: np.ndarray


@dataclass
class TraceEntry:
    iteration: int
    xi_inf_err: float
    tau_used: float
    min_jacobian: float
    L2: float
    H1: float
    Linf: float
    cpu_seconds: float


@dataclass(frozen=True)
class MoveMeshConfig:
    """Outer-iteration knobs.

    ``tolerance`` is the stop threshold for the max-norm of the map defect at
    the nodes; None picks 1e-4 times the logical-domain diameter. ``tau`` is
    the movement damping (halved on wrap, at most six times).
    ``movement_cap`` limits each node's movement to that fraction of its
    local node spacing before damping (None disables); without it, nodes
    sitting near a small map Jacobian get arbitrarily large steps that wreck
    the mesh long before the damped update can help.
    """

    logical: Rectangle = Rectangle(0.0, 1.0, 0.0, 1.0)
    tau: float = 0.5
    tolerance: float | None = None
    max_outer: int = 50
    lin: LinearSolverSettings = LinearSolverSettings()
    movement_cap: float | None = 0.5

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.tolerance is not None and self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_outer < 1:
            raise ValueError("max_outer must be >= 1")
        if self.movement_cap is not None and self.movement_cap <= 0:
            raise ValueError("movement_cap must be positive or None")

    def stop_tolerance(self) -> float:
        if self.tolerance is not None:
            return self.tolerance
        return 1e-4 * self.logical.diameter


@dataclass(frozen=True)
class PoissonProblem:
    """Source, Dirichlet data, and (optionally) the exact solution."""

    f: callable
    bc: callable
    exact: ExactSolution | None = None


@dataclass
class MoveMeshState:
    """Everything the outer iteration produced."""

    geometry: NurbsGeometry
    solution: FieldCoefficients
    xi: tuple[FieldCoefficients, FieldCoefficients]
    logical_mesh: LogicalMesh
    trace: list[TraceEntry] = field(default_factory=list)
    snapshots: list = field(default_factory=list)  # (iteration, geometry, solution)
    converged: bool = False
    wrap_failure: str | None = None  # diagnostics when the loop ended on a wrap

    @property
    def initial_geometry(self) -> NurbsGeometry:
        return self.snapshots[0][1]

    @property
    def initial_solution(self) -> FieldCoefficients:
        return self.snapshots[0][2]


def _physical_rect(g: NurbsGeometry) -> Rectangle:
    corners = eval_geometry_grid(g, [0.0, 1.0], [0.0, 1.0], nders=0).points
    xs = corners[..., 0]
    ys = corners[..., 1]
    return Rectangle(float(xs.min()), float(xs.max()), float(ys.min()), float(ys.max()))


def init_logical_mesh(
    g0: NurbsGeometry, bmap: BoundaryMap, lin: LinearSolverSettings | None = None
) -> LogicalMesh:
    """Reference logical mesh from the Laplace solve -lap(xi) = 0, xi = bmap
    on the boundary; the nodal values are frozen for the whole run."""
    lin = lin or LinearSolverSettings()
    zero = lambda x, y: np.zeros_like(np.asarray(x, dtype=float))
    fields = tuple(solve_poisson(g0, zero, bmap.component(k), lin) for k in range(2))
    gu = greville_abscissae(g0.kv_u)
    gv = greville_abscissae(g0.kv_v)
    vals = [eval_field_grid(g0, f, gu, gv, nders=0).values for f in fields]
    return LogicalMesh(bmap.logical, fields, np.stack(vals, axis=-1), gu, gv)


def monitor_grid(spec: MonitorSpec, g: NurbsGeometry, u: FieldCoefficients, pts_u, pts_v):
    """Monitor values on a tensor grid of parametric points."""
    nders = 2 if spec.needs_hessian else 1
    fg = eval_field_grid(g, u, pts_u, pts_v, nders=nders)
    m2 = spec.eps * np.ones_like(fg.values)
    if spec.alpha > 0.0:
        m2 = m2 + spec.alpha * (fg.grad**2).sum(axis=-1)
    if spec.beta > 0.0:
        m2 = m2 + spec.beta * (fg.hess**2).sum(axis=(-2, -1))
    m = np.sqrt(m2)
    if spec.smoothing > 0:
        m = _smooth_monitor(spec, g, u, m, pts_u, pts_v)
    return m


def _smooth_monitor(spec, g, u, m, pts_u, pts_v):
    """Nodal-averaging smoothing: evaluate on the Greville grid, average
    neighbors ``smoothing`` times, interpolate back bilinearly."""
    from scipy.interpolate import RegularGridInterpolator

    gu = greville_abscissae(g.kv_u)
    gv = greville_abscissae(g.kv_v)
    sub = MonitorSpec(spec.kind, spec.eps, spec.alpha, spec.beta, smoothing=0)
    nodal = monitor_grid(sub, g, u, gu, gv)
    for _ in range(spec.smoothing):
        padded = np.pad(nodal, 1, mode="edge")
        nodal = 0.5 * nodal + 0.125 * (
            padded[:-2, 1:-1] + padded[2:, 1:-1] + padded[1:-1, :-2] + padded[1:-1, 2:]
        )
    interp = RegularGridInterpolator((gu, gv), nodal, method="linear")
    U, V = np.meshgrid(pts_u, pts_v, indexing="ij")
    return interp(np.stack([U.ravel(), V.ravel()], axis=-1)).reshape(U.shape)


def eval_monitor(spec: MonitorSpec, g: NurbsGeometry, u: FieldCoefficients, s) -> float:
    """Monitor value at a single parametric point."""
    return float(monitor_grid(spec, g, u, [float(s[0])], [float(s[1])])[0, 0])


def solve_harmonic_map(
    g: NurbsGeometry,
    spec: MonitorSpec,
    u: FieldCoefficients,
    bmap: BoundaryMap,
    lin: LinearSolverSettings | None = None,
) -> tuple[FieldCoefficients, FieldCoefficients]:
    """Logical map from the variable-diffusion solve -div(grad(xi)/M) = 0.

    One weighted stiffness matrix (weight 1/M) is shared by both components;
    each component gets its own Dirichlet data from the boundary map.
    """
    lin = lin or LinearSolverSettings()
    quad = quadrature_grid(g)
    m = monitor_grid(spec, g, u, quad.pts_u, quad.pts_v)
    A = assemble_weighted_stiffness(g, 1.0 / m)
    out = []
    zero = np.zeros(g.ndof)
    for k in range(2):
        red = apply_dirichlet(A, zero, g, bmap.component(k))
        x_int, _ = cg_solve(red.matrix, red.rhs, tol=lin.tol, maxit=lin.maxit, precond=lin.precond)
        full = red.boundary_values.copy()
        full[red.dofs.interior] = x_int
        out.append(FieldCoefficients(full, g.shape))
    return tuple(out)


def _xi_at_nodes(g, xi, lm, nders=0):
    """Evaluate both map components on the fixed Greville parameter grid."""
    grids = [eval_field_grid(g, f, lm.params_u, lm.params_v, nders=nders) for f in xi]
    return grids


def compute_movement(
    g: NurbsGeometry,
    xi: tuple[FieldCoefficients, FieldCoefficients],
    lm: LogicalMesh,
    prev_movement: np.ndarray | None = None,
) -> np.ndarray:
    """Physical node movement from the logical defect.

    At each interior node the logical defect (reference logical position
    minus current map value) is pushed through the inverse Jacobian of the
    map, d(x,y)/d(xi,eta) = (1/J) [[eta_y, -xi_y], [-eta_x, xi_x]] with
    J = xi_x eta_y - xi_y eta_x. Boundary rows stay zero.

    A node where |J| falls below 1e-12 is a degenerate-map failure; when
    ``prev_movement`` is supplied and fewer than 1% of interior nodes are
    affected, those nodes reuse their previous movement instead (logged).
    """
    xg, yg = _xi_at_nodes(g, xi, lm, nders=1)
    xi_x, xi_y = xg.grad[..., 0], xg.grad[..., 1]
    eta_x, eta_y = yg.grad[..., 0], yg.grad[..., 1]
    jac = xi_x * eta_y - xi_y * eta_x

    d_a = lm.nodes - np.stack([xg.values, yg.values], axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        dx = (eta_y * d_a[..., 0] - xi_y * d_a[..., 1]) / jac
        dy = (-eta_x * d_a[..., 0] + xi_x * d_a[..., 1]) / jac
    movement = np.stack([dx, dy], axis=-1)
    movement[0, :] = movement[-1, :] = 0.0
    movement[:, 0] = movement[:, -1] = 0.0

    degenerate = np.abs(jac) < DEGENERATE_JAC_TOL
    degenerate[0, :] = degenerate[-1, :] = False
    degenerate[:, 0] = degenerate[:, -1] = False
    if degenerate.any():
        n_bad = int(degenerate.sum())
        n_int = (lm.nodes.shape[0] - 2) * (lm.nodes.shape[1] - 2)
        first = tuple(int(v) for v in np.argwhere(degenerate)[0])
        if prev_movement is None or n_bad >= DEGENERATE_NODE_FRACTION * n_int:
            raise DegenerateMapError(
                f"logical-map Jacobian below {DEGENERATE_JAC_TOL:g} at node {first}"
                f" ({n_bad} of {n_int} interior nodes)"
            )
        logger.warning(
            "degenerate map Jacobian at %d node(s), e.g. %s; reusing previous movement",
            n_bad,
            first,
        )
        movement[degenerate] = prev_movement[degenerate]
    return movement


def limit_movement(movement: np.ndarray, nodes: np.ndarray, frac: float = 0.5) -> np.ndarray:
    """Trust region on the movement field: rescale each node's step so its
    length stays below ``frac`` times the distance to its nearest grid
    neighbor. Clips the runaway steps produced near small map Jacobians while
    leaving the smooth component (and any converged state) untouched."""
    d_u = np.linalg.norm(np.diff(nodes, axis=0), axis=-1)
    d_v = np.linalg.norm(np.diff(nodes, axis=1), axis=-1)
    spacing = np.full(nodes.shape[:2], np.inf)
    spacing[:-1, :] = np.minimum(spacing[:-1, :], d_u)
    spacing[1:, :] = np.minimum(spacing[1:, :], d_u)
    spacing[:, :-1] = np.minimum(spacing[:, :-1], d_v)
    spacing[:, 1:] = np.minimum(spacing[:, 1:], d_v)
    mag = np.linalg.norm(movement, axis=-1)
    scale = np.minimum(1.0, frac * spacing / np.maximum(mag, 1e-300))
    return movement * scale[..., None]


def update_mesh(g: NurbsGeometry, movement: np.ndarray, tau: float):
    """Damped node update with wrap prevention.

    Targets are nodes + tau * movement; the geometry is re-fitted and its
    minimum Jacobian checked. A nonpositive Jacobian halves tau (at most six
    times) before giving up with diagnostics.
    """
    movement = np.asarray(movement, dtype=float)
    if np.max(np.abs(movement[0, :])) != 0.0 or np.max(np.abs(movement[-1, :])) != 0.0 \
            or np.max(np.abs(movement[:, 0])) != 0.0 or np.max(np.abs(movement[:, -1])) != 0.0:
        raise ValueError("boundary rows of the movement grid must be zero")
    nodes = mesh_nodes(g).nodes
    tau_k = float(tau)
    worst = None
    for _ in range(MAX_TAU_HALVINGS + 1):
        targets = nodes + tau_k * movement
        candidate = refit_from_node_targets(g, targets)
        mj = min_jacobian(candidate)
        if mj > 0.0:
            return candidate, tau_k
        worst = mj
        tau_k *= 0.5
    raise MeshWrapError(
        f"mesh update still folds after {MAX_TAU_HALVINGS} halvings of tau "
        f"(last tau {tau_k * 2:g}, min Jacobian {worst:.3e}, "
        f"max movement {np.abs(movement).max():.3e})"
    )


def move_mesh_solve(
    problem: PoissonProblem,
    g0: NurbsGeometry,
    spec: MonitorSpec,
    cfg: MoveMeshConfig | None = None,
) -> MoveMeshState:
    """Outer redistribution loop.

    The reference logical mesh is built once; then each iteration solves the
    map equation, tests the nodal map defect against the stop tolerance,
    moves the mesh through the damped update, and re-solves the PDE on the
    moved mesh to refresh the monitor. The trace records one entry per outer
    iteration; error norms are filled in when the problem carries an exact
    solution. Wall time covers assembly, solves and movement, not I/O.

    The loop terminates on convergence, on the iteration cap, or on a mesh
    wrap the damped update could not prevent; in the wrap case the last valid
    state is returned with ``wrap_failure`` holding the diagnostics.
    """
    cfg = cfg or MoveMeshConfig()
    tol = cfg.stop_tolerance()
    t_start = time.perf_counter()

    bmap = make_boundary_map(_physical_rect(g0), cfg.logical)
    lm = init_logical_mesh(g0, bmap, cfg.lin)
    g = g0
    u = solve_poisson(g, problem.f, problem.bc, cfg.lin)

    state = MoveMeshState(g, u, lm.fields, lm)
    state.snapshots.append((0, g, u))
    prev_movement = None
    xi = lm.fields

    def norms(geom, field):
        if problem.exact is None:
            return (float("nan"),) * 3
        rep = error_norms(geom, field, problem.exact)
        return rep.L2, rep.H1_semi, rep.L_inf

    for it in range(1, cfg.max_outer + 1):
        xi = solve_harmonic_map(g, spec, u, bmap, cfg.lin)
        vals = _xi_at_nodes(g, xi, lm, nders=0)
        defect = lm.nodes - np.stack([vals[0].values, vals[1].values], axis=-1)
        xi_err = float(np.max(np.abs(defect)))

        if xi_err < tol:
            l2, h1, linf = norms(g, u)
            state.trace.append(
                TraceEntry(it, xi_err, 0.0, min_jacobian(g), l2, h1, linf,
                           time.perf_counter() - t_start)
            )
            state.converged = True
            break

        movement = compute_movement(g, xi, lm, prev_movement)
        if cfg.movement_cap is not None:
            movement = limit_movement(movement, mesh_nodes(g).nodes, cfg.movement_cap)
        try:
            g, tau_used = update_mesh(g, movement, cfg.tau)
        except MeshWrapError as exc:
            logger.warning("outer iteration %d ended on mesh wrap: %s", it, exc)
            l2, h1, linf = norms(g, u)
            state.trace.append(
                TraceEntry(it, xi_err, 0.0, min_jacobian(g), l2, h1, linf,
                           time.perf_counter() - t_start)
            )
            state.wrap_failure = str(exc)
            break
        prev_movement = movement
        u = solve_poisson(g, problem.f, problem.bc, cfg.lin)

        l2, h1, linf = norms(g, u)
        state.trace.append(
            TraceEntry(it, xi_err, tau_used, min_jacobian(g), l2, h1, linf,
                       time.perf_counter() - t_start)
        )
        state.snapshots.append((it, g, u))

    state.geometry = g
    state.solution = u
    state.xi = xi
    return state
