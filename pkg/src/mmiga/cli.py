"""Configuration-driven experiment runner.

A run is described by one strict-schema JSON document (unknown keys are
rejected with the offending path). Two modes: ``convergence`` sweeps a
refinement sequence and writes the error table, ``movemesh`` runs the mesh
redistribution loop and writes the trace, mesh snapshots and a summary.

Exit codes: 0 success, 2 configuration error, 3 solver failure, 4 mesh-wrap
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assembly import solve_poisson
from .errors import (
    AssemblyError,
    ConfigError,
    DegenerateMapError,
    MeshWrapError,
    MmigaError,
    SolverError,
)
from .geometry import Rectangle, build_identity_geometry
from .linalg import LinearSolverSettings
from .movemesh import MonitorSpec, MoveMeshConfig, PoissonProblem, move_mesh_solve
from .postproc import (
    ExactSolution,
    convergence_orders,
    error_norms,
    export_trace,
    export_vtk,
)
from .splines import make_open_knot_vector

__all__ = ["RunConfig", "ProblemSetup", "manufacture_rhs", "run", "main"]

EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_WRAP = 4

TANH_CENTER = (0.5, 0.5)
TANH_RADIUS = 0.25
TANH_WIDTH = 0.01


@dataclass(frozen=True)
class ProblemSetup:
    """Source term, Dirichlet data, exact solution and domain for one case."""

    name: str
    domain: Rectangle
    f: callable
    bc: callable
    exact: ExactSolution | None


def _sech2(s):
    return np.cosh(np.clip(s, -300.0, 300.0)) ** -2.0


def _tanh_radius(x, y):
    return np.maximum(np.hypot(x - TANH_CENTER[0], y - TANH_CENTER[1]), 1e-12)


def _case2_fields():
    d = TANH_WIDTH

    def u(x, y):
        return np.tanh((TANH_RADIUS - _tanh_radius(x, y)) / d)

    def f(x, y):
        # radial form: -(u'' + u'/r) with r guarded away from zero; the
        # guard is numerically inert because sech^2 underflows there
        r = _tanh_radius(x, y)
        s = (TANH_RADIUS - r) / d
        return (2.0 / d**2) * _sech2(s) * np.tanh(s) + _sech2(s) / (d * r)

    def du_dx(x, y):
        r = _tanh_radius(x, y)
        return -_sech2((TANH_RADIUS - r) / d) / d * (x - TANH_CENTER[0]) / r

    def du_dy(x, y):
        r = _tanh_radius(x, y)
        return -_sech2((TANH_RADIUS - r) / d) / d * (y - TANH_CENTER[1]) / r

    return u, f, du_dx, du_dy


def _manufactured_fields(expr: str, domain: Rectangle):
    import sympy

    x, y = sympy.symbols("x y")
    try:
        u_sym = sympy.sympify(expr, locals={"x": x, "y": y})
    except (sympy.SympifyError, SyntaxError) as exc:
        raise ConfigError(f"problem.u: cannot parse expression {expr!r}: {exc}") from exc
    f_sym = -(sympy.diff(u_sym, x, 2) + sympy.diff(u_sym, y, 2))
    mods = ["numpy"]
    u = sympy.lambdify((x, y), u_sym, mods)
    f = sympy.lambdify((x, y), f_sym, mods)
    ux = sympy.lambdify((x, y), sympy.diff(u_sym, x), mods)
    uy = sympy.lambdify((x, y), sympy.diff(u_sym, y), mods)

    def vec(fn):
        def wrapped(px, py):
            return np.broadcast_to(np.asarray(fn(px, py), dtype=float), np.broadcast(px, py).shape).copy()

        return wrapped

    return ProblemSetup("manufactured", domain, vec(f), vec(u), ExactSolution(vec(u), vec(ux), vec(uy)))


def manufacture_rhs(problem) -> ProblemSetup:
    """Source / boundary data / exact solution for a named or custom problem.

    ``problem`` is either the string "case1_sine" (u = sin x sin y on
    [-1,1]^2), "case2_tanh" (circular internal layer on the unit square), or
    a dict {"name": "manufactured", "u": "<expression>", "domain": [[..],[..]]}
    whose source term is derived symbolically.
    """
    if problem == "case1_sine":
        u = lambda x, y: np.sin(x) * np.sin(y)
        return ProblemSetup(
            "case1_sine",
            Rectangle(-1.0, 1.0, -1.0, 1.0),
            lambda x, y: 2.0 * np.sin(x) * np.sin(y),
            u,
            ExactSolution(
                u,
                lambda x, y: np.cos(x) * np.sin(y),
                lambda x, y: np.sin(x) * np.cos(y),
            ),
        )
    if problem == "case2_tanh":
        u, f, ux, uy = _case2_fields()
        return ProblemSetup(
            "case2_tanh", Rectangle(0.0, 1.0, 0.0, 1.0), f, u, ExactSolution(u, ux, uy)
        )
    if isinstance(problem, dict):
        name = problem.get("name")
        if name != "manufactured":
            raise ConfigError(f"problem.name: expected 'manufactured', got {name!r}")
        allowed = {"name", "u", "domain"}
        unknown = set(problem) - allowed
        if unknown:
            raise ConfigError(f"problem.{sorted(unknown)[0]}: unknown key")
        if "u" not in problem:
            raise ConfigError("problem.u: missing expression")
        dom = problem.get("domain", [[0.0, 1.0], [0.0, 1.0]])
        try:
            rect = Rectangle(dom[0][0], dom[0][1], dom[1][0], dom[1][1])
        except (TypeError, IndexError, ValueError) as exc:
            raise ConfigError(f"problem.domain: {exc}") from exc
        return _manufactured_fields(problem["u"], rect)
    raise ConfigError(f"problem: unknown problem {problem!r}")


@dataclass(frozen=True)
class RunConfig:
    """Validated run description."""

    mode: str
    problem: object
    degree: int
    refinement: str = "k"
    levels: int = 4
    elements: int = 32
    elements_list: tuple[int, ...] | None = None
    monitor: MonitorSpec = MonitorSpec("gradient", alpha=0.1)
    movemesh: MoveMeshConfig = field(default_factory=MoveMeshConfig)
    solver: LinearSolverSettings = LinearSolverSettings()
    output_dir: str = "out"
    deterministic: bool = True
    vtk_samples: int = 4


_TOP_KEYS = {
    "mode", "problem", "degree", "refinement", "levels", "elements",
    "elements_list", "monitor", "movemesh", "solver", "output_dir",
    "deterministic", "vtk_samples",
}
_MONITOR_KEYS = {"kind", "eps", "alpha", "beta", "smoothing"}
_MOVEMESH_KEYS = {"tau", "tolerance", "max_outer", "movement_cap", "logical"}
_SOLVER_KEYS = {"tol", "maxit", "precond"}


def _require(cond, msg):
    if not cond:
        raise ConfigError(msg)


def parse_config(doc: dict) -> RunConfig:
    """Validate a JSON document against the strict schema."""
    _require(isinstance(doc, dict), "top level: expected an object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown key")
    for key in ("mode", "problem", "degree"):
        _require(key in doc, f"{key}: required key missing")

    mode = doc["mode"]
    _require(mode in ("convergence", "movemesh"), f"mode: expected convergence|movemesh, got {mode!r}")
    degree = doc["degree"]
    _require(isinstance(degree, int) and 1 <= degree <= 4, f"degree: expected integer in [1, 4], got {degree!r}")
    refinement = doc.get("refinement", "k")
    _require(refinement in ("k", "hp"), f"refinement: expected k|hp, got {refinement!r}")

    problem = doc["problem"]
    if isinstance(problem, str):
        _require(problem in ("case1_sine", "case2_tanh"), f"problem: unknown case {problem!r}")
        if mode == "convergence":
            _require(problem == "case1_sine", "problem: movemesh cases require mode=movemesh")
        else:
            _require(problem == "case2_tanh", "problem: convergence cases require mode=convergence")

    levels = doc.get("levels", 4)
    _require(isinstance(levels, int) and 1 <= levels <= 8, f"levels: expected integer in [1, 8], got {levels!r}")
    elements = doc.get("elements", 32)
    _require(isinstance(elements, int) and elements >= 2, f"elements: expected integer >= 2, got {elements!r}")

    elements_list = doc.get("elements_list")
    if elements_list is not None:
        _require(mode == "convergence", "elements_list: only valid in convergence mode")
        _require(
            isinstance(elements_list, list) and len(elements_list) >= 2
            and all(isinstance(m, int) and m >= 1 for m in elements_list),
            "elements_list: expected a list of >= 2 positive integers",
        )
        elements_list = tuple(elements_list)

    mon = doc.get("monitor", {"kind": "gradient", "alpha": 0.1})
    _require(isinstance(mon, dict), "monitor: expected an object")
    unknown = set(mon) - _MONITOR_KEYS
    if unknown:
        raise ConfigError(f"monitor.{sorted(unknown)[0]}: unknown key")
    try:
        monitor = MonitorSpec(
            mon.get("kind", "gradient"),
            eps=mon.get("eps", 1.0),
            alpha=mon.get("alpha", 0.0),
            beta=mon.get("beta", 0.0),
            smoothing=mon.get("smoothing", 0),
        )
    except ValueError as exc:
        raise ConfigError(f"monitor: {exc}") from exc

    mm = doc.get("movemesh", {})
    _require(isinstance(mm, dict), "movemesh: expected an object")
    unknown = set(mm) - _MOVEMESH_KEYS
    if unknown:
        raise ConfigError(f"movemesh.{sorted(unknown)[0]}: unknown key")
    logical = mm.get("logical", [[0.0, 1.0], [0.0, 1.0]])
    try:
        logical_rect = Rectangle(logical[0][0], logical[0][1], logical[1][0], logical[1][1])
    except (TypeError, IndexError, ValueError) as exc:
        raise ConfigError(f"movemesh.logical: {exc}") from exc

    sol = doc.get("solver", {})
    _require(isinstance(sol, dict), "solver: expected an object")
    unknown = set(sol) - _SOLVER_KEYS
    if unknown:
        raise ConfigError(f"solver.{sorted(unknown)[0]}: unknown key")
    try:
        solver = LinearSolverSettings(
            tol=sol.get("tol", 1e-10),
            maxit=sol.get("maxit"),
            precond=sol.get("precond", "diagonal"),
        )
    except ValueError as exc:
        raise ConfigError(f"solver: {exc}") from exc

    try:
        movecfg = MoveMeshConfig(
            logical=logical_rect,
            tau=mm.get("tau", 0.5),
            tolerance=mm.get("tolerance"),
            max_outer=mm.get("max_outer", 50),
            movement_cap=mm.get("movement_cap", 0.5),
            lin=solver,
        )
    except ValueError as exc:
        raise ConfigError(f"movemesh: {exc}") from exc

    vtk_samples = doc.get("vtk_samples", 4)
    _require(
        isinstance(vtk_samples, int) and vtk_samples >= 2,
        f"vtk_samples: expected integer >= 2, got {vtk_samples!r}",
    )

    deterministic = doc.get("deterministic", True)
    _require(isinstance(deterministic, bool), "deterministic: expected true/false")

    return RunConfig(
        mode=mode,
        problem=problem,
        degree=degree,
        refinement=refinement,
        levels=levels,
        elements=elements,
        elements_list=elements_list,
        monitor=monitor,
        movemesh=movecfg,
        solver=solver,
        output_dir=doc.get("output_dir", "out"),
        deterministic=deterministic,
        vtk_samples=vtk_samples,
    )


def _geometry_for(setup: ProblemSetup, degree: int, m: int, refinement: str):
    mult = 1 if refinement == "k" else degree
    kv = make_open_knot_vector(degree, m, mult)
    return build_identity_geometry(setup.domain, kv, kv)


def _fmt(x) -> str:
    return f"{x:.17g}"


def run_convergence(cfg: RunConfig, outdir: Path, quiet: bool) -> None:
    setup = manufacture_rhs(cfg.problem)
    if setup.exact is None:
        raise ConfigError("problem: convergence mode needs an exact solution")
    ms = cfg.elements_list or tuple(2 * 2**k for k in range(cfg.levels))
    reports = []
    for m in ms:
        g = _geometry_for(setup, cfg.degree, m, cfg.refinement)
        t0 = time.perf_counter()
        u = solve_poisson(g, setup.f, setup.bc, cfg.solver)
        rep = error_norms(g, u, setup.exact, cpu_seconds=time.perf_counter() - t0)
        reports.append(rep)
        export_vtk(g, {"u": u}, cfg.vtk_samples, outdir / f"solution_m{m}.vtk")
        if not quiet:
            print(f"m={m} dofs={rep.dofs} L2={rep.L2:.4e} H1={rep.H1_semi:.4e}")
    orders = convergence_orders(reports)
    with open(outdir / "table.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("dofs,L2,L2_order,H1,H1_order\n")
        for rep, order in zip(reports, orders):
            l2o = "" if order.L2 is None else _fmt(order.L2)
            h1o = "" if order.H1 is None else _fmt(order.H1)
            fh.write(f"{rep.dofs},{_fmt(rep.L2)},{l2o},{_fmt(rep.H1_semi)},{h1o}\n")


def run_movemesh(cfg: RunConfig, outdir: Path, quiet: bool) -> int:
    setup = manufacture_rhs(cfg.problem)
    g0 = _geometry_for(setup, cfg.degree, cfg.elements, cfg.refinement)
    problem = PoissonProblem(setup.f, setup.bc, setup.exact)
    t0 = time.perf_counter()
    state = move_mesh_solve(problem, g0, cfg.monitor, cfg.movemesh)
    wall = time.perf_counter() - t0

    export_trace(state, outdir / "trace.csv")
    snaps = {0: "initial", len(state.snapshots) - 1: "final"}
    if len(state.snapshots) >= 3:
        snaps[len(state.snapshots) // 2] = "intermediate"
    for idx, label in snaps.items():
        it, g, u = state.snapshots[idx]
        export_vtk(g, {"u": u}, cfg.vtk_samples, outdir / f"mesh_{label}.vtk")

    def norms(idx):
        if setup.exact is None:
            return None
        _, g, u = state.snapshots[idx]
        rep = error_norms(g, u, setup.exact)
        return {"L2": rep.L2, "H1": rep.H1_semi, "Linf": rep.L_inf}

    summary = {
        "dofs": state.geometry.ndof,
        "initial": norms(0),
        "final": norms(len(state.snapshots) - 1),
        "iterations": len(state.trace),
        "converged": state.converged,
        "wrap_failure": state.wrap_failure,
        "wall_seconds": wall,
    }
    with open(outdir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    if not quiet:
        print(json.dumps(summary, indent=2))
    return EXIT_WRAP if state.wrap_failure else 0


def run(config_path, out_dir=None, quiet=False) -> int:
    """Execute one experiment; returns the process exit code."""
    try:
        with open(config_path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except json.JSONDecodeError as exc:
        print(f"config error: invalid JSON: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        cfg = parse_config(doc)
        outdir = Path(out_dir) if out_dir is not None else Path(cfg.output_dir)
        outdir.mkdir(parents=True, exist_ok=True)
        if cfg.mode == "convergence":
            run_convergence(cfg, outdir, quiet)
            return 0
        return run_movemesh(cfg, outdir, quiet)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MeshWrapError as exc:
        print(f"mesh-wrap failure: {exc}", file=sys.stderr)
        return EXIT_WRAP
    except (SolverError, AssemblyError, DegenerateMapError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except MmigaError as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


def compare_linf(path_a, path_b) -> int:
    """Print the lattice max-norm errors of two run summaries and their ratio."""
    out = {}
    for key, path in (("a", path_a), ("b", path_b)):
        try:
            with open(path, encoding="utf-8") as fh:
                summary = json.load(fh)
            out[key] = {
                "path": str(path),
                "final_linf": summary["final"]["Linf"],
                "dofs": summary.get("dofs"),
            }
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
            print(f"config error: cannot read summary {path}: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    out["ratio"] = out["a"]["final_linf"] / out["b"]["final_linf"]
    print(json.dumps(out, indent=2))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="mmiga", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one experiment from a JSON config")
    p_run.add_argument("config", help="path to the run configuration")
    p_run.add_argument("--out", default=None, help="output directory (overrides the config)")
    p_run.add_argument("--quiet", action="store_true", help="suppress progress output")

    p_cmp = sub.add_parser("compare-linf", help="compare the final max-norm errors of two runs")
    p_cmp.add_argument("summary_a")
    p_cmp.add_argument("summary_b")

    args = parser.parse_args(argv)
    if args.command == "run":
        return run(args.config, args.out, args.quiet)
    return compare_linf(args.summary_a, args.summary_b)


if __name__ == "__main__":
    sys.exit(main())
