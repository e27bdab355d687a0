"""Command line front end.

    stsparse run CONFIG [--mu X] [--rho X] [--levels N] [--adaptive [STEPS]] [--out DIR]
    stsparse mesh-info CONFIG [--write PATH]
    stsparse verify [--n0 N] [--levels N] [--d D]

Exit codes: 0 success, 2 configuration error, 3 solver failure, 1 anything
else.  ``STSPARSE_NUM_THREADS`` caps the threads of numba and of the BLAS
libraries (the latter only if set before the interpreter imports numpy).
"""

import os

_threads = os.environ.get("STSPARSE_NUM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from dataclasses import dataclass, field, replace  # noqa: E402

import numpy as np  # noqa: E402

from . import control as ctl  # noqa: E402
from .config import ConfigError, check_output_dir, parse_config, validate  # noqa: E402
from .fem import Space  # noqa: E402
from .linalg import SolverError  # noqa: E402
from .mesh import BoundaryPart, MeshError, build_unit_cylinder, refine_uniform, write_mesh_text  # noqa: E402
from .optimize import OptimizationError, adaptive_solve, convergence_study, solve  # noqa: E402
from .output import (  # noqa: E402
    CONVERGENCE_HEADER,
    PointOutsideMesh,
    convergence_rows,
    export_vtk,
    sample_fields,
    solution_fields,
    write_csv,
)
from .problems import get_problem, manufactured_problem  # noqa: E402

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3

log = logging.getLogger("stsparse")


def set_threads():
    if not _threads:
        return
    try:
        n = int(_threads)
    except ValueError:
        raise ConfigError(f"STSPARSE_NUM_THREADS must be an integer, got {_threads!r}") from None
    import numba
    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


# -- orchestration ---------------------------------------------------------------------

@dataclass
class RunResult:
    label: str
    problem: object
    steps: list  # AdaptiveStep-like records (mesh, system, state, report, eta, marked)
    objective: object = None
    files: list = field(default_factory=list)

    @property
    def final(self):
        return self.steps[-1]


@dataclass
class _Step:
    mesh: object
    system: object
    state: object
    report: object
    eta: object = None
    marked: object = None


def build_problem(cfg):
    if cfg.problem == "manufactured":
        prob = manufactured_problem(d=cfg.d)
        return prob.with_params(**cfg.overrides()) if cfg.overrides() else prob
    return get_problem(cfg.problem, **cfg.overrides())


def build_mesh(cfg, T=1.0):
    mesh = build_unit_cylinder(cfg.d, cfg.n0, T)
    for _ in range(cfg.levels):
        mesh = refine_uniform(mesh)
    return mesh


def run_labels(cfg, problem):
    primary = "sparse" if problem.params.mu > 0 else "nonsparse"
    if cfg.paired and problem.params.mu > 0:
        return [primary, "nonsparse"]
    return [primary]


def expected_outputs(cfg):
    """Names of the files :func:`execute` writes for ``cfg``."""
    problem = build_problem(cfg)
    names = []
    for label in run_labels(cfg, problem):
        if cfg.adaptive:
            names += [f"{label}_step{k}.vtk" for k in range(cfg.adaptive_steps + 1)]
            names.append(f"{label}_adaptive.csv")
        else:
            names.append(f"{label}_solution.vtk")
        names += [f"{label}_convergence.csv", f"{label}_objective.csv"]
        names += [f"{label}_line{i}.csv" for i in range(len(cfg.lines))]
    if len(run_labels(cfg, problem)) == 2:
        names.append("comparison.csv")
    names.append("summary.txt")
    return sorted(names)


def _solve_one(cfg, problem, mesh):
    if cfg.adaptive:
        hist = adaptive_solve(problem, mesh, cfg.adaptive_steps, cfg.theta,
                              config=cfg.newton(), solver=cfg.solver())
        return [_Step(h.mesh, h.system, h.state, h.report, h.eta, h.marked) for h in hist]
    system, state, report = solve(problem, mesh, cfg.newton(), cfg.solver())
    return [_Step(mesh, system, state, report)]


def _write_run(cfg, res):
    out = cfg.out
    files = []
    label = res.label
    conv = []
    for k, st in enumerate(res.steps):
        conv += convergence_rows(st.report, step=k)
        name = f"{label}_step{k}.vtk" if cfg.adaptive else f"{label}_solution.vtk"
        title = f"{res.problem.name} {label} step {k}"
        files.append(export_vtk(st.mesh, solution_fields(st.state), os.path.join(out, name), title))
    files.append(write_csv(os.path.join(out, f"{label}_convergence.csv"), CONVERGENCE_HEADER, conv))
    if cfg.adaptive:
        rows = []
        for k, st in enumerate(res.steps):
            rows.append([k, st.mesh.num_vertices, st.mesh.num_elements, st.system.num_unknowns,
                         st.report.iterations,
                         ctl.sparsity_fraction(st.mesh, st.state.labels),
                         "" if st.marked is None else len(st.marked),
                         "" if st.eta is None else float(np.sqrt(np.sum(st.eta ** 2))),
                         "" if st.marked is None else float(st.mesh.element_volumes[st.marked].sum())])
        files.append(write_csv(os.path.join(out, f"{label}_adaptive.csv"),
                               ["step", "vertices", "elements", "unknowns", "newton_iterations",
                                "sparsity_fraction", "marked", "eta", "marked_volume"], rows))
    fin = res.final
    files.append(write_csv(os.path.join(out, f"{label}_objective.csv"), ["quantity", "value"],
                           _summary_rows(res)))
    for i, ls in enumerate(cfg.lines):
        st = fin.state
        header, rows = sample_fields(
            fin.mesh, [("u", st.u), ("p", st.p), ("z", st.z), ("active_set", st.labels)],
            ls.p0, ls.p1, ls.n)
        files.append(write_csv(os.path.join(out, f"{label}_line{i}.csv"), header, rows))
    res.files = files
    return files


def _summary_rows(res):
    fin = res.final
    obj = res.objective
    counts = ctl.active_set_counts(fin.state.labels)
    return [
        ["J", obj.total], ["tracking", obj.tracking], ["tikhonov", obj.tikhonov],
        ["l1_term", obj.l1],
        ["control_l1_norm", ctl.control_l1_norm(fin.mesh, fin.state.z)],
        ["sparsity_fraction", ctl.sparsity_fraction(fin.mesh, fin.state.labels)],
        ["newton_iterations", fin.report.iterations],
        ["newton_iterations_total", fin.report.total_iterations],
        ["start", fin.report.start],
        ["vertices", fin.mesh.num_vertices], ["elements", fin.mesh.num_elements],
        ["unknowns", fin.system.num_unknowns],
        *[[f"count_{s.name}", counts[s]] for s in ctl.ActiveSet],
        ["rho", res.problem.params.rho], ["mu", res.problem.params.mu],
        ["a", res.problem.params.a], ["b", res.problem.params.b],
    ]


def execute(cfg):
    """Run the configured solves and write every output file.  Returns the
    list of :class:`RunResult`; errors propagate."""
    check_output_dir(cfg.out)
    problem = build_problem(cfg)
    mesh = build_mesh(cfg, problem.T)
    results, times = [], []
    for label in run_labels(cfg, problem):
        prob = problem if label == run_labels(cfg, problem)[0] else problem.with_params(mu=0.0)
        t0 = time.perf_counter()
        log.info("solving %s (%s) on %d elements", prob.name, label, mesh.num_elements)
        steps = _solve_one(cfg, prob, mesh)
        fin = steps[-1]
        res = RunResult(label, prob, steps)
        res.objective = ctl.evaluate_objective(fin.system.fe, fin.state.u, fin.state.z,
                                               prob.target, prob.params)
        _write_run(cfg, res)
        times.append(time.perf_counter() - t0)
        results.append(res)
    if len(results) == 2:
        a, b = results
        rows = [[q, _value(a, q), _value(b, q)] for q in
                ("J", "tracking", "tikhonov", "l1_term", "control_l1_norm",
                 "sparsity_fraction", "newton_iterations")]
        write_csv(os.path.join(cfg.out, "comparison.csv"), ["quantity", a.label, b.label], rows)
    with open(os.path.join(cfg.out, "summary.txt"), "w", encoding="ascii") as fh:
        for res, dt in zip(results, times):
            fin = res.final
            fh.write(f"[{res.label}] problem={res.problem.name} mu={res.problem.params.mu:g} "
                     f"elements={fin.mesh.num_elements} newton={fin.report.iterations} "
                     f"(total {fin.report.total_iterations}, start {fin.report.start}) "
                     f"time={dt:.2f}s\n")
            o = res.objective
            fh.write(f"  J={o.total:.10g} tracking={o.tracking:.10g} tikhonov={o.tikhonov:.10g} "
                     f"l1={o.l1:.10g} sparsity={ctl.sparsity_fraction(fin.mesh, fin.state.labels):.6f}\n")
        if len(results) == 2:
            la = ctl.control_l1_norm(results[0].final.mesh, results[0].final.state.z)
            lb = ctl.control_l1_norm(results[1].final.mesh, results[1].final.state.z)
            rel = "<" if la < lb else ">="
            fh.write(f"control L1 norm: {results[0].label} {la:.10g} {rel} "
                     f"{results[1].label} {lb:.10g}\n")
    return results


def _value(res, q):
    return dict((k, v) for k, v in _summary_rows(res))[q]


def run(cfg):
    """:func:`execute` with errors mapped to exit codes."""
    try:
        set_threads()
        execute(cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OptimizationError, SolverError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (MeshError, PointOutsideMesh, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


# -- subcommands ------------------------------------------------------------------------------

def _load(args):
    with open(args.config, encoding="utf-8") as fh:
        cfg = parse_config(fh.read())
    upd = {}
    for key in ("mu", "rho", "levels", "out"):
        v = getattr(args, key, None)
        if v is not None:
            upd[key] = v
    if getattr(args, "adaptive", None) is not None:
        upd["adaptive"] = True
        if args.adaptive >= 0:
            upd["adaptive_steps"] = args.adaptive
    cfg = replace(cfg, **upd)
    return validate(cfg)


def cmd_run(args):
    try:
        cfg = _load(args)
    except (ConfigError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run(cfg)


def cmd_mesh_info(args):
    try:
        cfg = _load(args)
        problem = build_problem(cfg)
    except (ConfigError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    mesh = build_mesh(cfg, problem.T)
    from .fem import FESpace
    fe = FESpace(mesh, problem.bc)
    parts = np.bincount(mesh.boundary_parts, minlength=3)
    print(f"problem        {problem.name} (d={mesh.d}, bc={problem.bc.value})")
    print(f"vertices       {mesh.num_vertices}")
    print(f"elements       {mesh.num_elements}")
    print(f"h              {mesh.h:.6g}")
    print(f"boundary       lateral={parts[BoundaryPart.LATERAL]} "
          f"initial={parts[BoundaryPart.INITIAL]} terminal={parts[BoundaryPart.TERMINAL]}")
    ns, na = len(fe.dofs(Space.STATE)), len(fe.dofs(Space.ADJOINT))
    print(f"unknowns       state={ns} adjoint={na} total={ns + na}")
    if args.write:
        write_mesh_text(mesh, args.write)
        print(f"mesh written to {args.write}")
    return EXIT_OK


def cmd_verify(args):
    problem = manufactured_problem(d=args.d)
    print(f"manufactured solution u = {problem.options['u_exact']}")
    hs, errs, orders = convergence_study(problem, n0=args.n0, levels=args.levels)
    print(f"{'h':>12} {'L2 error':>14} {'order':>7}")
    for k, (h, e) in enumerate(zip(hs, errs)):
        order = f"{orders[k - 1]:7.3f}" if k else " " * 7
        print(f"{h:12.6g} {e:14.6e} {order}")
    ok = bool(np.all(orders[-1:] >= args.min_order))
    print("PASS" if ok else "FAIL", f"(required order >= {args.min_order})")
    return EXIT_OK if ok else EXIT_SOLVER


def make_parser():
    ap = argparse.ArgumentParser(prog="stsparse", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log Newton iterations")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="solve the configured problem and write outputs")
    p.add_argument("config")
    p.add_argument("--mu", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--levels", type=int, help="uniform refinement levels")
    p.add_argument("--adaptive", type=int, nargs="?", const=-1, metavar="STEPS",
                   help="adaptive refinement (optionally with STEPS steps)")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("mesh-info", help="describe the configured mesh")
    p.add_argument("config")
    p.add_argument("--levels", type=int)
    p.add_argument("--write", metavar="PATH", help="also export the mesh as text")
    p.set_defaults(func=cmd_mesh_info)

    p = sub.add_parser("verify", help="manufactured-solution convergence check")
    p.add_argument("--d", type=int, default=1, choices=(1, 2))
    p.add_argument("--n0", type=int, default=4)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--min-order", type=float, default=1.7)
    p.set_defaults(func=cmd_verify)
    return ap


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
