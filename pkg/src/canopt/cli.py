"""Command line front end.

Four subcommands cover the working cycle:

  canopt inspect FILE             print the canonical form and the Lagrange split
  canopt solve FILE [options]     solve, verify, and write a candidate bundle
  canopt verify FILE --candidate DIR    re-check a saved candidate
  canopt chatter FILE --candidate DIR   switching-realization convergence study

Exit codes: 0 on success with a passing verification, 1 when verification
fails, 2 for bad input (parse error, missing file, incompatible candidate),
3 when the solver diverges.  Runs are deterministic: the same inputs and
seed produce byte-identical outputs, and every float is printed with 12
significant digits.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from . import expr as ex
from . import lagrange as lg
from .candidate import SolutionCandidate
from .chatter import convergence_study
from .problem import (CanonicalProblem, ProblemError, eval_functionals, g12,
                      load_problem, residuals_to_csv, to_canonical)
from .relax import relaxed_functionals
from .solve import (SolveError, SolverConfig, solve_collocation,
                    solve_indirect)
from .verify import VerifyConfig, report


# --- problem echo ---------------------------------------------------------

def describe_problem(problem: CanonicalProblem) -> str:
    """Plain-text echo of the declarations plus each constraint's canonical
    integrand pair."""
    lines = [f"horizon {g12(problem.horizon)}"]
    for s in problem.states:
        init = "free" if s.init is None else g12(s.init)
        lines.append(f"state {s.name} init {init}")
    for c in problem.controls:
        if c.finite:
            vals = " ".join(g12(v) for v in c.choices)
            lines.append(f"control {c.name} set {{{vals}}}")
        elif c.box is not None:
            lines.append(f"control {c.name} box [{g12(c.box[0])}, {g12(c.box[1])}]")
        else:
            lines.append(f"control {c.name} free")
    for p in problem.params:
        if p.bounds is not None:
            lines.append(f"param {p.name} box [{g12(p.bounds[0])}, {g12(p.bounds[1])}]")
        else:
            lines.append(f"param {p.name} free")
    for part in problem.criteria:
        at = f" at {g12(part.at)}" if part.at is not None else ""
        lines.append(f"criterion {part.kind}{at}: {ex.to_text(part.expr)}")
    for j, c in enumerate(problem.constraints, start=1):
        head = f"constraint {j} {c.kind}"
        if c.state is not None:
            head += f" {c.state}"
        if c.control is not None:
            head += f" {c.control}"
        if c.at is not None:
            head += f" at {g12(c.at)}"
        if c.expr is not None:
            head += f": {ex.to_text(c.expr)}"
        elif c.kernel is not None:
            head += f": kernel {ex.to_text(c.kernel)}"
        lines.append(head)
        form = to_canonical(c, problem)
        lines.append(f"  {form.note}")
        if form.f1 is not None:
            lines.append(f"  f_{j}1 = {ex.to_text(form.f1)}")
        if form.f2 is not None:
            where = "tau" if form.event_at is None else g12(form.event_at)
            lines.append(f"  f_{j}2 = {ex.to_text(form.f2)}  at t = {where}")
    return "\n".join(lines) + "\n"


# --- solver routing -------------------------------------------------------

_SWEEP_KINDS = {"ode", "volterra", "terminal"}


def _indirect_applicable(problem: CanonicalProblem) -> bool:
    # the sweep handles classical controls driving states with at most an
    # end condition; anything else goes to the penalty solver
    if problem.params:
        return False
    if any(c.finite for c in problem.controls):
        return False
    if any(part.kind != "integral" and part.kind != "terminal"
           for part in problem.criteria):
        return False
    return all(c.kind in _SWEEP_KINDS for c in problem.constraints)


def _solve_auto(problem: CanonicalProblem, config: SolverConfig,
                relax: bool) -> tuple[SolutionCandidate, str]:
    if relax:
        return solve_collocation(problem, config=config, relaxed=True), "collocation"
    if _indirect_applicable(problem):
        try:
            return solve_indirect(problem, config=config), "indirect"
        except ProblemError:
            pass
    return solve_collocation(problem, config=config), "collocation"


def _solver_config(args: argparse.Namespace) -> SolverConfig:
    cfg = SolverConfig(seed=args.seed)
    if args.mesh is not None:
        cfg = dataclasses.replace(cfg, mesh_n=args.mesh)
    if args.ugrid is not None:
        cfg = dataclasses.replace(cfg, ugrid=args.ugrid)
    if args.tol is not None:
        cfg = dataclasses.replace(cfg, sweep_tol=args.tol)
    return cfg


# --- subcommands ----------------------------------------------------------

def cmd_inspect(args: argparse.Namespace) -> int:
    problem = load_problem(args.file)
    system = lg.assemble(problem)
    sys.stdout.write(describe_problem(problem))
    sys.stdout.write("\n")
    sys.stdout.write(lg.report_text(system))
    return 0


def cmd_solve(args: argparse.Namespace) -> int:
    problem = load_problem(args.file)
    config = _solver_config(args)
    try:
        cand, method = _solve_auto(problem, config, args.relax)
    except SolveError as err:
        print(f"solver diverged: {err}", file=sys.stderr)
        return 3

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cand.save(out)
    if cand.relaxed is not None:
        residuals = relaxed_functionals(problem, cand.mesh, cand)
    else:
        residuals = eval_functionals(problem, cand.mesh, cand.x, cand.u,
                                     cand.params, cand.slacks)
    residuals_to_csv(out / "residuals.csv", cand.mesh, residuals)

    rep = report(lg.assemble(problem), cand, VerifyConfig())
    (out / "report.txt").write_text(rep.text(), encoding="utf-8")
    (out / "report.json").write_text(rep.to_json(), encoding="utf-8")

    print(f"method: {method}")
    print(f"objective: {g12(cand.objective)}")
    if args.oracle:
        check = solve_collocation(
            problem, config=dataclasses.replace(config, seed=config.seed + 1),
            relaxed=True if cand.relaxed is not None else None)
        print(f"oracle objective: {g12(check.objective)}")
        print(f"oracle |dI|: {g12(abs(check.objective - cand.objective))}")
    sys.stdout.write(rep.text())
    return 0 if rep.verdict else 1


def _load_candidate(problem: CanonicalProblem,
                    args: argparse.Namespace) -> SolutionCandidate:
    cdir = Path(args.candidate)
    if not (cdir / "candidate.json").exists():
        raise ProblemError(f"no candidate bundle in '{cdir}'")
    cand = SolutionCandidate.load(cdir)
    cand.check_shapes(problem)
    return cand


def cmd_verify(args: argparse.Namespace) -> int:
    problem = load_problem(args.file)
    cand = _load_candidate(problem, args)
    rep = report(lg.assemble(problem), cand, VerifyConfig())
    sys.stdout.write(rep.text())
    return 0 if rep.verdict else 1


def cmd_chatter(args: argparse.Namespace) -> int:
    problem = load_problem(args.file)
    cand = _load_candidate(problem, args)
    i_list = tuple(int(s) for s in args.levels.split(","))
    study = convergence_study(problem, cand, i_list=i_list)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "study.csv").write_text(study.to_csv(), encoding="utf-8")
    print(f"reference criterion: {g12(study.reference)}")
    for row in study.rows:
        note = f"  ({row.note})" if row.note else ""
        print(f"i = {row.i}: gap {g12(row.gap)}, "
              f"residual {g12(row.max_residual)}{note}")
    print(f"gap slope: {g12(study.gap_slope())}")
    print(f"residual slope: {g12(study.residual_slope())}")
    return 0


# --- argument parsing -----------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="canopt",
        description="canonical variational problems: inspect, solve, verify")
    sub = parser.add_subparsers(dest="command", required=True)

    p_inspect = sub.add_parser(
        "inspect", help="print the canonical form and the Lagrange split")
    p_inspect.add_argument("file", help="problem file")
    p_inspect.set_defaults(fn=cmd_inspect)

    p_solve = sub.add_parser(
        "solve", help="solve a problem and verify the result")
    p_solve.add_argument("file", help="problem file")
    p_solve.add_argument("--mesh", type=int, default=None,
                         help="number of mesh intervals")
    p_solve.add_argument("--ugrid", type=int, default=None,
                         help="control grid points per axis")
    p_solve.add_argument("--tol", type=float, default=None,
                         help="solver convergence tolerance")
    p_solve.add_argument("--relax", action="store_true",
                         help="solve for a measure-valued control")
    p_solve.add_argument("--oracle", action="store_true",
                         help="cross-check the objective with an independent run")
    p_solve.add_argument("--out", default="out", help="output directory")
    p_solve.add_argument("--seed", type=int, default=0,
                         help="seed for solver start jitter")
    p_solve.set_defaults(fn=cmd_solve)

    p_verify = sub.add_parser(
        "verify", help="re-check a saved candidate against its problem")
    p_verify.add_argument("file", help="problem file")
    p_verify.add_argument("--candidate", required=True,
                          help="directory holding a saved candidate")
    p_verify.set_defaults(fn=cmd_verify)

    p_chatter = sub.add_parser(
        "chatter", help="piecewise-constant realization convergence study")
    p_chatter.add_argument("file", help="problem file")
    p_chatter.add_argument("--candidate", required=True,
                           help="directory holding a saved relaxed candidate")
    p_chatter.add_argument("--levels", default="4,8,16,32,64",
                           help="comma-separated partition counts")
    p_chatter.add_argument("--out", default="out", help="output directory")
    p_chatter.set_defaults(fn=cmd_chatter)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (ProblemError, ex.ExprError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except SolveError as err:
        print(f"solver diverged: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
