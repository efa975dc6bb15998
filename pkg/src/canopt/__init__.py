"""Canonical treatment of variational problems with mixed constraints.

Problems are stated as a criterion plus equality functionals over one time
interval, every constraint rewritten as a tau-indexed integral family.  The
package assembles the Lagrange expression for that form, splits off the part
relevant for pointwise maximization, solves by an adjoint sweep or penalty
collocation with measure-valued controls, realizes relaxed controls by fast
switching, and verifies candidates against the stationarity, maximum, and
slackness conditions.
"""

from .candidate import RelaxedControl, SolutionCandidate
from .chatter import ChatterStudy, build_plan, convergence_study, simulate_chatter
from .expr import EvalError, ExprError, NonsmoothError, ParseError
from .lagrange import LagrangeSystem, assemble, report_json, report_text
from .problem import (CanonicalProblem, Mesh, ProblemError, bundled_path,
                      bundled_problems, eval_functionals, load_bundled,
                      load_problem, parse_problem_text, to_canonical)
from .relax import caratheodory_reduce, relaxed_criterion, relaxed_functionals
from .solve import (SolveError, SolverConfig, solve_collocation, solve_indirect)
from .verify import VerificationReport, VerifyConfig, report

__version__ = "0.1.0"

__all__ = [
    "CanonicalProblem", "ChatterStudy", "EvalError", "ExprError",
    "LagrangeSystem", "Mesh", "NonsmoothError", "ParseError", "ProblemError",
    "RelaxedControl", "SolutionCandidate", "SolveError", "SolverConfig",
    "VerificationReport", "VerifyConfig", "assemble", "build_plan",
    "bundled_path", "bundled_problems", "caratheodory_reduce",
    "convergence_study",
    "eval_functionals", "load_bundled", "load_problem", "parse_problem_text",
    "relaxed_criterion", "relaxed_functionals", "report", "report_json",
    "report_text", "simulate_chatter", "solve_collocation", "solve_indirect",
    "to_canonical", "__version__",
]
