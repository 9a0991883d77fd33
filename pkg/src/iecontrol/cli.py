"""Command-line front end.

    iecontrol solve          --problem p.json [--n N] [--rule R] [--out json|csv|both] ...
    iecontrol check-pd       --problem p.json
    iecontrol oracle-compare --problem p.json
    iecontrol convergence    --problem p.json [--ladder 17,33,65,129,257]

Exit codes: 0 success, 2 bad input or usage, 3 solver failure,
4 non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import lq_fredholm, lq_volterra, nl_fredholm, oracle, quadform
from .discretize import Grid, Rule, make_grid
from .errors import (DomainError, IEControlError, NonConvergenceError, ProblemError,
                     SolverError)
from .kernelspec import ProblemKind, ProblemSpec, Settings, load_problem

SCHEMA_VERSION = 1
DEFAULT_LADDER = (17, 33, 65, 129, 257)

EXIT_OK, EXIT_INPUT, EXIT_SOLVER, EXIT_NONCONVERGENCE = 0, 2, 3, 4


class UsageError(Exception):
    pass


class _Timer:
    def __init__(self):
        self.stages = {}

    def __call__(self, name):
        timer = self

        class _Stage:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.stages[name] = timer.stages.get(name, 0.0) + time.perf_counter() - self.t0
                return False
        return _Stage()


# ---------------------------------------------------------------------------
# solving


def _settings(spec: ProblemSpec, args) -> Settings:
    return spec.settings.replace(grid_n=args.n, rule=Rule.parse(args.rule) if args.rule else None,
                                 tol=args.tol, max_iter=args.max_iter, damping=args.damping)


def _grid(spec: ProblemSpec, settings: Settings, n: int | None = None) -> Grid:
    return make_grid(spec.domain[0], spec.domain[1], n or settings.grid_n, settings.rule)


def _grid_dict(grid: Grid) -> dict:
    return {"a": grid.a, "b": grid.b, "n": grid.n, "rule": grid.rule.value}


def _solve(spec: ProblemSpec, grid: Grid, settings: Settings, compare_paths=True,
           printed_k1=False) -> dict:
    """Run the module solver for ``spec.kind``.

    Returns a dict with arrays under control/state/costate (None when not
    applicable), the cost and a summary of residuals and certificates.
    """
    kind = spec.kind
    if kind is ProblemKind.QUADFORM:
        p = quadform.QuadFormProblem.from_spec(spec, grid)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            s = quadform.minimize(p)
        return {"control": s.w_star.values, "state": None, "costate": None, "cost": s.E_min,
                "summary": {"certificate": s.certificate.to_dict(),
                            "stationary_only": s.stationary_only,
                            "identity_gap": s.identity_gap,
                            "equation_residual": s.equation_residual}}
    if kind is ProblemKind.FREDHOLM_LQ:
        p = lq_fredholm.FredholmLQProblem.from_spec(spec, grid)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            s = lq_fredholm.solve(p)
        return {"control": s.u_star.values, "state": s.state.values, "costate": None,
                "cost": s.cost,
                "summary": {"certificate": s.certificate.to_dict(),
                            "stationary_only": s.stationary_only,
                            "stationarity_residual": s.stationarity_residual,
                            "state_residual": s.state_residual}}
    if kind is ProblemKind.VOLTERRA_LQ:
        p = lq_volterra.VolterraLQProblem.from_spec(spec, grid)
        s = lq_volterra.solve(p, compare_paths=compare_paths, printed_k1=printed_k1)
        return {"control": s.u_star.values, "state": s.y_star.values,
                "costate": s.psi_star.values, "cost": s.cost,
                "summary": {"path_agreement": s.path_agreement,
                            "k1_variant": "printed" if printed_k1 else "derived",
                            "stationarity_residual": s.stationarity_residual,
                            "costate_residual": s.costate_residual,
                            "state_residual": s.state_residual}}
    p = nl_fredholm.NonlinearFredholmProblem.from_spec(spec, grid)
    s = nl_fredholm.solve(p, tol=settings.tol, max_iter=settings.max_iter,
                          damping=settings.damping)
    return {"control": s.u_star.values, "state": s.iterate.phi.values,
            "costate": s.iterate.psi.values, "cost": s.cost,
            "summary": {"iterations": s.iterate.iteration,
                        "residual_phi": s.iterate.residual_phi,
                        "residual_psi": s.iterate.residual_psi,
                        "state_residual": s.state_residual,
                        "costate_residual": s.costate_residual,
                        "stationarity_residual": s.stationarity_residual,
                        "gradient_check": s.gradient_errors}}


def _oracle_gaps(spec: ProblemSpec, grid: Grid, result: dict) -> dict:
    """Control gap, cost gap and weighted FD-gradient norm against the oracle."""
    u = result["control"]
    fd = oracle.fd_gradient(spec, grid, u).values / grid.weights[:, None]
    out = {"fd_gradient_norm": float(np.max(np.abs(fd)))}
    if spec.kind is ProblemKind.NONLINEAR_FREDHOLM:
        out["probe_min_increase"] = oracle.probe_local_minimum(spec, grid, u)
        out["descent_decrease"] = oracle.descent_check(spec, grid, u, iters=2)
        out["cost_gap"] = abs(oracle.direct_cost(spec, grid, u) - result["cost"])
        return out
    qp = oracle.assemble_qp(spec, grid)
    uo, val, pd = oracle.qp_minimize(qp)
    out["control_gap"] = float(np.max(np.abs(uo.reshape(u.shape) - u)))
    out["cost_gap"] = abs(val - result["cost"])
    out["oracle_hessian_pd"] = pd
    return out


def _solution_doc(spec, grid, result) -> dict:
    def arr(a):
        return None if a is None else np.asarray(a).tolist()
    return {"schema_version": SCHEMA_VERSION, "problem_kind": spec.kind.value,
            "grid": _grid_dict(grid), "nodes": grid.nodes.tolist(),
            "control": arr(result["control"]), "state": arr(result["state"]),
            "costate": arr(result["costate"]), "cost": result["cost"],
            "summary": result["summary"]}


def _dump(path: Path, doc: dict):
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n",
                    encoding="utf-8")


def _write_csv(path: Path, spec, grid, result):
    var = spec.variables[0]
    cols = [("u", result["control"]), ("state", result["state"]), ("costate", result["costate"])]
    if spec.kind is ProblemKind.QUADFORM:
        cols = [("w", result["control"])]
    header = ["node", var]
    data = []
    for name, a in cols:
        if a is None:
            continue
        header += [f"{name}{k + 1}" for k in range(a.shape[1])]
        data.append(a)
    with path.open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for i, x in enumerate(grid.nodes):
            row = [i, repr(float(x))]
            for a in data:
                row += [repr(float(v)) for v in a[i]]
            wr.writerow(row)


def _report(spec, grid, summary, timer, args, notes=None) -> dict:
    doc = {"schema_version": SCHEMA_VERSION, "problem_kind": spec.kind.value,
           "grid": None if grid is None else _grid_dict(grid), "summary": summary,
           "discrepancy_notes": notes or []}
    if not args.no_timings:
        doc["timings"] = timer.stages
    return doc


# ---------------------------------------------------------------------------
# commands


def cmd_solve(args) -> int:
    timer = _Timer()
    with timer("load"):
        spec = load_problem(args.problem)
        settings = _settings(spec, args)
        grid = _grid(spec, settings)
    if args.use_printed_k1 and spec.kind is not ProblemKind.VOLTERRA_LQ:
        raise UsageError("--use-printed-k1 applies to VolterraLQ problems only")
    with timer("solve"):
        result = _solve(spec, grid, settings, compare_paths=args.compare_paths,
                        printed_k1=args.use_printed_k1)
    notes = []
    if args.use_printed_k1:
        with timer("discrepancy"):
            derived = _solve(spec, grid, settings, compare_paths=False)
            gap_d = _oracle_gaps(spec, grid, derived)
            gap_p = _oracle_gaps(spec, grid, result)
        notes.append({"formula": "K1 kernel of the eliminated Volterra state equation",
                      "derived_oracle_control_gap": gap_d["control_gap"],
                      "printed_oracle_control_gap": gap_p["control_gap"],
                      "derived_oracle_cost_gap": gap_d["cost_gap"],
                      "printed_oracle_cost_gap": gap_p["cost_gap"],
                      "printed_state_residual": result["summary"]["state_residual"]})
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with timer("write"):
        if args.out in ("json", "both"):
            _dump(out_dir / "solution.json", _solution_doc(spec, grid, result))
        if args.out in ("csv", "both"):
            _write_csv(out_dir / "solution.csv", spec, grid, result)
    summary = dict(result["summary"], cost=result["cost"])
    _dump(out_dir / "report.json", _report(spec, grid, summary, timer, args, notes))
    print(f"{spec.kind.value}: N={grid.n} {grid.rule.value} cost={result['cost']:.12g}")
    for note in notes:
        print(f"  printed K1 oracle gap {note['printed_oracle_control_gap']:.3e}, "
              f"derived {note['derived_oracle_control_gap']:.3e}")
    return EXIT_OK


def cmd_check_pd(args) -> int:
    timer = _Timer()
    spec = load_problem(args.problem)
    settings = _settings(spec, args)
    if spec.kind not in (ProblemKind.QUADFORM, ProblemKind.FREDHOLM_LQ):
        raise UsageError("check-pd needs a QuadForm or FredholmLQ problem")
    levels = []
    for n in (settings.grid_n, 2 * settings.grid_n - 1):
        grid = _grid(spec, settings, n)
        with timer(f"certify_{n}"):
            if spec.kind is ProblemKind.QUADFORM:
                form = quadform.QuadFormProblem.from_spec(spec, grid)
            else:
                p = lq_fredholm.FredholmLQProblem.from_spec(spec, grid)
                form, _ = lq_fredholm.assemble_reduced_form(p, *lq_fredholm.reduce_state(p))
            levels.append(quadform.certify_pd(quadform.symmetrized(form)).to_dict())
    verdicts = {lv["verdict"] for lv in levels}
    summary = {"levels": levels, "verdict": levels[-1]["verdict"],
               "k1_spd": all(lv["k1_spd"] for lv in levels),
               "verdict_stable": len(verdicts) == 1}
    _dump(Path(args.out_dir) / "report.json", _report(spec, None, summary, timer, args))
    for lv in levels:
        lam = "n/a" if lv["min_eigenvalue"] is None else f"{lv['min_eigenvalue']:.12g}"
        print(f"N={lv['grid_n']}: lambda_min={lam} verdict={lv['verdict']} K1 SPD={lv['k1_spd']}")
    return EXIT_OK


def cmd_oracle_compare(args) -> int:
    timer = _Timer()
    spec = load_problem(args.problem)
    settings = _settings(spec, args)
    grid = _grid(spec, settings)
    with timer("solve"):
        result = _solve(spec, grid, settings)
    with timer("oracle"):
        gaps = _oracle_gaps(spec, grid, result)
    _dump(Path(args.out_dir) / "report.json", _report(spec, grid, gaps, timer, args))
    for k in sorted(gaps):
        print(f"{k}: {gaps[k]}")
    return EXIT_OK


def _on_grid(values: np.ndarray, fine: Grid, coarse: Grid) -> np.ndarray:
    """Fine-grid nodal values at the coarse nodes (subsampling or Legendre interpolation)."""
    if coarse.rule is Rule.TRAPEZOID and (fine.n - 1) % (coarse.n - 1) == 0:
        return values[::(fine.n - 1) // (coarse.n - 1)]
    t = (2.0 * fine.nodes - fine.a - fine.b) / (fine.b - fine.a)
    s = (2.0 * coarse.nodes - coarse.a - coarse.b) / (coarse.b - coarse.a)
    out = np.empty((coarse.n, values.shape[1]))
    for c in range(values.shape[1]):
        coef = np.polynomial.legendre.legfit(t, values[:, c], fine.n - 1)
        out[:, c] = np.polynomial.legendre.legval(s, coef)
    return out


def _orders(ns, errors) -> list:
    out = []
    for k in range(len(errors) - 1):
        e0, e1 = errors[k], errors[k + 1]
        if e0 > 0 and e1 > 0:
            out.append(math.log(e0 / e1) / math.log((ns[k + 1] - 1) / (ns[k] - 1)))
        else:
            out.append(None)
    return out


def _fitted_order(ns, errors):
    """Least-squares slope of log(error) against log(h) over the ladder."""
    pts = [(math.log(1.0 / (n - 1)), math.log(e)) for n, e in zip(ns, errors) if e > 0]
    if len(pts) < 2:
        return None
    h, e = np.array(pts).T
    return float(np.polyfit(h, e, 1)[0])


def convergence_study(spec: ProblemSpec, settings: Settings, ladder=DEFAULT_LADDER) -> dict:
    """Errors of cost, control and state on each ladder grid against the finest grid."""
    ladder = sorted(int(n) for n in ladder)
    if len(ladder) < 2:
        raise UsageError("a convergence ladder needs at least two grid sizes")
    runs = []
    for n in ladder:
        grid = _grid(spec, settings, n)
        runs.append((grid, _solve(spec, grid, settings, compare_paths=False)))
    fine_grid, fine = runs[-1]
    errs = {"cost": [], "control": [], "control_l1": [], "state": []}
    for grid, res in runs[:-1]:
        errs["cost"].append(abs(res["cost"] - fine["cost"]))
        du = res["control"] - _on_grid(fine["control"], fine_grid, grid)
        errs["control"].append(float(np.max(np.abs(du))))
        errs["control_l1"].append(float(grid.weights @ np.max(np.abs(du), axis=1)))
        if res["state"] is not None:
            dy = res["state"] - _on_grid(fine["state"], fine_grid, grid)
            errs["state"].append(float(np.max(np.abs(dy))))
    if not errs["state"]:
        del errs["state"]
    ns = ladder[:-1]
    return {"ladder": ladder, "rule": settings.rule.value, "errors": errs,
            "orders": {k: _orders(ns, v) for k, v in errs.items()},
            "observed_order": {k: _fitted_order(ns, v) for k, v in errs.items()},
            "costs": [res["cost"] for _, res in runs]}


def cmd_convergence(args) -> int:
    timer = _Timer()
    try:
        ladder = [int(v) for v in args.ladder.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad --ladder {args.ladder!r}") from None
    spec = load_problem(args.problem)
    settings = _settings(spec, args)
    with timer("ladder"):
        summary = convergence_study(spec, settings, ladder)
    _dump(Path(args.out_dir) / "report.json", _report(spec, None, summary, timer, args))
    for key, orders in summary["orders"].items():
        shown = ", ".join("n/a" if o is None else f"{o:.3f}" for o in orders)
        fit = summary["observed_order"][key]
        print(f"{key}: observed order {'n/a' if fit is None else f'{fit:.3f}'} "
              f"(pairwise [{shown}])")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iecontrol",
                                     description="Optimal control of integral equations")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--problem", required=True, help="JSON problem file")
    common.add_argument("--n", type=int, help="number of grid nodes")
    common.add_argument("--rule", choices=["trapezoid", "gauss"])
    common.add_argument("--tol", type=float)
    common.add_argument("--max-iter", type=int)
    common.add_argument("--damping", type=float)
    common.add_argument("--out-dir", default=".", help="directory for output files")
    common.add_argument("--no-timings", action="store_true",
                        help="omit wall-clock timings from report.json")

    p = sub.add_parser("solve", parents=[common], help="solve a problem")
    p.add_argument("--out", choices=["json", "csv", "both"], default="json")
    p.add_argument("--compare-paths", action="store_true",
                   help="VolterraLQ: also run the resolvent path and report the state gap")
    p.add_argument("--use-printed-k1", action="store_true",
                   help="VolterraLQ: use the printed K1 integrand and report its oracle gap")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("check-pd", parents=[common], help="positive-definiteness certificate")
    p.set_defaults(func=cmd_check_pd)

    p = sub.add_parser("oracle-compare", parents=[common], help="compare with the dense oracle")
    p.set_defaults(func=cmd_oracle_compare)

    p = sub.add_parser("convergence", parents=[common], help="grid refinement study")
    p.add_argument("--ladder", default=",".join(map(str, DEFAULT_LADDER)))
    p.set_defaults(func=cmd_convergence)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ProblemError, DomainError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NonConvergenceError as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except SolverError as exc:
        print(f"solver failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except IEControlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
