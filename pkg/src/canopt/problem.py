"""Problem declarations, canonical integral form, and residual evaluation.

Every supported constraint kind is reducible to one scalar family

    J_j(tau) = integral over [0, T] of
               f_j1(t, x(t), u(t), a, tau) + f_j2(t, x(t), a, tau) * delta(t - tau)

that must vanish for all tau in [0, T] (point and scalar constraints are the
degenerate members of the family).  :func:`to_canonical` performs that rewrite
symbolically and :func:`eval_functionals` evaluates the residuals on a mesh,
with the quadrature conventions shared by every solver in the package:
trapezoid in t, states piecewise linear on nodes, controls piecewise constant
on intervals, point masses snapped to the nearest node, unit step closed on
the left.  Unit-step factors inside running integrands are sampled at the
midpoint of each quadrature interval, so a jump that falls on a node bounds
the cell exactly instead of being smeared half a cell by the trapezoid ends;
smooth factors keep their nodal values.

A problem file is line oriented with ``#`` comments::

    horizon 1
    state x init 1
    control u box -10 10      # or: control u set -1 1
    param c box 0 1
    criterion integral "-(x^2 + u^2)"
    criterion terminal "x" at 1
    criterion maximin "x - c"
    constraint ode x "u"
    constraint integral "u - 0.5"
    constraint pointwise "u - x"
    constraint terminal "x - 0.5" at 1
    constraint volterra x "u"
    constraint fredholm x "u*exp(-(tau - t))*h(tau - t)"
    constraint convolution x u kernel "exp(-s)*h(s)"
    constraint ineq "x"

Inside constraint expressions ``t`` is the running time; ``tau`` is the
family index of fredholm kernels; ``s`` is the lag of a convolution kernel.
A maximin criterion introduces the internal level parameter ``a_crit`` (its
value is the criterion) together with the pointwise inequality
``f0 - a_crit >= 0``.  Inequality constraints get an automatic nonnegative
slack ``z<j>``; point events may repeat, so a problem may carry several
terminal criterion parts at distinct times.
"""

from __future__ import annotations

import shlex
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import expr as ex
from ._codegen import compile_expr

__all__ = [
    "ProblemError", "ControlDecl", "StateDecl", "ParamDecl",
    "CriterionPart", "ConstraintSpec", "CanonicalProblem", "Mesh",
    "CanonicalForm", "parse_problem_text", "build_problem", "load_problem",
    "bundled_problems", "load_bundled",
    "to_canonical", "eval_functionals", "running_contribs", "assemble_residual",
    "criterion_contribs", "criterion_part_value", "criterion_value",
    "residuals_to_csv",
    "MAXIMIN_PARAM", "g12",
]

MAXIMIN_PARAM = "a_crit"

RESERVED = frozenset({"t", "tau", "s", "lam0", "_tmid", MAXIMIN_PARAM}) | frozenset(ex.FUNCTIONS)

CONSTRAINT_KINDS = (
    "ode", "volterra", "integral", "pointwise", "terminal",
    "fredholm", "convolution", "ineq",
)


class ProblemError(Exception):
    """Invalid declarations or an ill-posed problem file."""


def g12(v: float) -> str:
    """Render a float with 12 significant digits (the package-wide format)."""
    return format(float(v), ".12g")


@dataclass(frozen=True)
class ControlDecl:
    name: str
    box: tuple[float, float] | None = None
    choices: tuple[float, ...] | None = None

    @property
    def finite(self) -> bool:
        return self.choices is not None

    def clip(self, v: float) -> float:
        if self.box is not None:
            return min(max(v, self.box[0]), self.box[1])
        return v


@dataclass(frozen=True)
class StateDecl:
    name: str
    init: float | None = None


@dataclass(frozen=True)
class ParamDecl:
    name: str
    bounds: tuple[float, float] | None = None


@dataclass(frozen=True)
class CriterionPart:
    kind: str                  # integral | terminal | maximin
    expr: ex.Expr
    at: float | None = None    # event time for terminal parts


@dataclass(frozen=True)
class ConstraintSpec:
    kind: str
    expr: ex.Expr | None = None       # integrand / algebraic function / rhs
    state: str | None = None          # bound state for ode/volterra/fredholm/convolution
    control: str | None = None        # bound control for convolution
    kernel: ex.Expr | None = None     # convolution kernel in s
    at: float | None = None           # event time for terminal constraints
    slack: str | None = None          # auto slack name for ineq


@dataclass(frozen=True)
class CanonicalProblem:
    horizon: float
    states: tuple[StateDecl, ...]
    controls: tuple[ControlDecl, ...]
    params: tuple[ParamDecl, ...]
    criteria: tuple[CriterionPart, ...]
    constraints: tuple[ConstraintSpec, ...]

    # -- name lookups ------------------------------------------------------

    @property
    def state_names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.states)

    @property
    def control_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.controls)

    @property
    def param_names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.params)

    @property
    def slack_names(self) -> tuple[str, ...]:
        return tuple(c.slack for c in self.constraints if c.slack is not None)

    @property
    def unknown_names(self) -> tuple[str, ...]:
        return self.state_names + self.control_names + self.param_names + self.slack_names

    def state_init(self, name: str) -> float | None:
        for s in self.states:
            if s.name == name:
                return s.init
        raise ProblemError(f"unknown state '{name}'")

    def control(self, name: str) -> ControlDecl:
        for c in self.controls:
            if c.name == name:
                return c
        raise ProblemError(f"unknown control '{name}'")

    def param(self, name: str) -> ParamDecl:
        for p in self.params:
            if p.name == name:
                return p
        raise ProblemError(f"unknown parameter '{name}'")

    @property
    def has_maximin(self) -> bool:
        return any(c.kind == "maximin" for c in self.criteria)

    @property
    def maximin_part(self) -> CriterionPart | None:
        for c in self.criteria:
            if c.kind == "maximin":
                return c
        return None


@dataclass(frozen=True)
class Mesh:
    """Uniform node mesh on [0, T]; intervals carry the piecewise-constant controls."""

    n: int
    horizon: float

    def __post_init__(self):
        if self.n < 2:
            raise ProblemError("mesh needs at least 2 intervals")
        if not (self.horizon > 0):
            raise ProblemError("horizon must be positive")

    @property
    def dt(self) -> float:
        return self.horizon / self.n

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n + 1)

    def snap(self, t: float, what: str = "event") -> int:
        """Nearest node index for a point time; warns when it has to move it."""
        if not (-1e-9 <= t <= self.horizon + 1e-9):
            raise ProblemError(f"{what} time {g12(t)} outside [0, {g12(self.horizon)}]")
        k = int(round(t / self.dt))
        k = min(max(k, 0), self.n)
        if abs(k * self.dt - t) > 1e-9 * max(1.0, self.horizon):
            warnings.warn(
                f"{what} time {g12(t)} snapped to mesh node {g12(k * self.dt)}",
                stacklevel=2)
        return k


# --- problem file parsing -------------------------------------------------

def _parse_float(text: str, lineno: int, what: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ProblemError(f"line {lineno}: {what} must be a number, got {text!r}") from None


def _parse_expr(text: str, lineno: int) -> ex.Expr:
    try:
        return ex.parse(text)
    except ex.ParseError as exc:
        raise ProblemError(f"line {lineno}: bad expression: {exc}") from None


def _check_name(name: str, lineno: int) -> str:
    if not name.isidentifier():
        raise ProblemError(f"line {lineno}: '{name}' is not a valid name")
    if name in RESERVED:
        raise ProblemError(f"line {lineno}: '{name}' is reserved")
    if name.startswith(("psi_", "dpsi_", "lam_", "lamt_")):
        raise ProblemError(f"line {lineno}: prefix of '{name}' is reserved for multipliers")
    return name


def parse_problem_text(text: str) -> CanonicalProblem:
    """Parse and validate a problem file; see the module docstring for the grammar."""
    horizon: float | None = None
    states: list[StateDecl] = []
    controls: list[ControlDecl] = []
    params: list[ParamDecl] = []
    criteria: list[CriterionPart] = []
    constraints: list[ConstraintSpec] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        try:
            words = shlex.split(raw, comments=True)
        except ValueError as exc:
            raise ProblemError(f"line {lineno}: {exc}") from None
        if not words:
            continue
        head, rest = words[0], words[1:]

        if head == "horizon":
            if len(rest) != 1:
                raise ProblemError(f"line {lineno}: usage: horizon <T>")
            horizon = _parse_float(rest[0], lineno, "horizon")
            if horizon <= 0:
                raise ProblemError(f"line {lineno}: horizon must be positive")

        elif head == "state":
            if len(rest) == 1:
                states.append(StateDecl(_check_name(rest[0], lineno)))
            elif len(rest) == 3 and rest[1] == "init":
                states.append(StateDecl(_check_name(rest[0], lineno),
                                        _parse_float(rest[2], lineno, "initial value")))
            else:
                raise ProblemError(f"line {lineno}: usage: state <name> [init <v>]")

        elif head == "control":
            if len(rest) >= 2 and rest[1] == "box":
                if len(rest) != 4:
                    raise ProblemError(f"line {lineno}: usage: control <name> box <lo> <hi>")
                lo = _parse_float(rest[2], lineno, "bound")
                hi = _parse_float(rest[3], lineno, "bound")
                if not lo < hi:
                    raise ProblemError(f"line {lineno}: empty control box [{rest[2]}, {rest[3]}]")
                controls.append(ControlDecl(_check_name(rest[0], lineno), box=(lo, hi)))
            elif len(rest) >= 3 and rest[1] == "set":
                vals = tuple(sorted(_parse_float(w, lineno, "set value") for w in rest[2:]))
                if len(set(vals)) != len(vals):
                    raise ProblemError(f"line {lineno}: duplicate values in control set")
                controls.append(ControlDecl(_check_name(rest[0], lineno), choices=vals))
            else:
                raise ProblemError(
                    f"line {lineno}: usage: control <name> box <lo> <hi> | set <v>...")

        elif head == "param":
            if len(rest) == 1:
                params.append(ParamDecl(_check_name(rest[0], lineno)))
            elif len(rest) == 4 and rest[1] == "box":
                lo = _parse_float(rest[2], lineno, "bound")
                hi = _parse_float(rest[3], lineno, "bound")
                if not lo < hi:
                    raise ProblemError(f"line {lineno}: empty parameter box")
                params.append(ParamDecl(_check_name(rest[0], lineno), bounds=(lo, hi)))
            else:
                raise ProblemError(f"line {lineno}: usage: param <name> [box <lo> <hi>]")

        elif head == "criterion":
            if len(rest) == 2 and rest[0] in ("integral", "maximin"):
                criteria.append(CriterionPart(rest[0], _parse_expr(rest[1], lineno)))
            elif len(rest) == 4 and rest[0] == "terminal" and rest[2] == "at":
                criteria.append(CriterionPart(
                    "terminal", _parse_expr(rest[1], lineno),
                    at=_parse_float(rest[3], lineno, "event time")))
            else:
                raise ProblemError(
                    f"line {lineno}: usage: criterion integral <expr> | "
                    f"terminal <expr> at <t0> | maximin <expr>")

        elif head == "constraint":
            if not rest or rest[0] not in CONSTRAINT_KINDS:
                raise ProblemError(
                    f"line {lineno}: constraint kind must be one of {', '.join(CONSTRAINT_KINDS)}")
            kind = rest[0]
            body = rest[1:]
            if kind in ("ode", "volterra", "fredholm"):
                if len(body) != 2:
                    raise ProblemError(f"line {lineno}: usage: constraint {kind} <state> <expr>")
                constraints.append(ConstraintSpec(
                    kind, expr=_parse_expr(body[1], lineno), state=body[0]))
            elif kind in ("integral", "pointwise", "ineq"):
                if len(body) != 1:
                    raise ProblemError(f"line {lineno}: usage: constraint {kind} <expr>")
                constraints.append(ConstraintSpec(kind, expr=_parse_expr(body[0], lineno)))
            elif kind == "terminal":
                if len(body) != 3 or body[1] != "at":
                    raise ProblemError(
                        f"line {lineno}: usage: constraint terminal <expr> at <t0>")
                constraints.append(ConstraintSpec(
                    kind, expr=_parse_expr(body[0], lineno),
                    at=_parse_float(body[2], lineno, "event time")))
            else:  # convolution
                if len(body) != 4 or body[2] != "kernel":
                    raise ProblemError(
                        f"line {lineno}: usage: constraint convolution <state> <control> "
                        f"kernel <expr>")
                constraints.append(ConstraintSpec(
                    kind, state=body[0], control=body[1],
                    kernel=_parse_expr(body[3], lineno)))

        else:
            raise ProblemError(f"line {lineno}: unknown directive '{head}'")

    if horizon is None:
        raise ProblemError("missing 'horizon' directive")
    return build_problem(horizon, states, controls, params, criteria, constraints)


def load_problem(path) -> CanonicalProblem:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_problem_text(fh.read())


def bundled_problems() -> tuple[str, ...]:
    """Names of the problem files shipped with the package."""
    from importlib import resources
    root = resources.files(__package__) / "problems"
    return tuple(sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".prob")))


def bundled_path(name: str):
    from importlib import resources
    path = resources.files(__package__) / "problems" / f"{name}.prob"
    if not path.is_file():
        raise ProblemError(
            f"no bundled problem '{name}'; available: {', '.join(bundled_problems())}")
    return path


def load_bundled(name: str) -> CanonicalProblem:
    return parse_problem_text(bundled_path(name).read_text(encoding="utf-8"))


def build_problem(
    horizon: float,
    states: Sequence[StateDecl],
    controls: Sequence[ControlDecl],
    params: Sequence[ParamDecl],
    criteria: Sequence[CriterionPart],
    constraints: Sequence[ConstraintSpec],
) -> CanonicalProblem:
    """Validate declarations and attach generated slack/level variables."""
    names: list[str] = []
    for decl in list(states) + list(controls) + list(params):
        if decl.name in names:
            raise ProblemError(f"duplicate declaration of '{decl.name}'")
        names.append(decl.name)

    criteria = list(criteria)
    n_maximin = sum(1 for c in criteria if c.kind == "maximin")
    if n_maximin > 1:
        raise ProblemError("at most one maximin criterion is allowed")
    if n_maximin and any(c.kind != "maximin" for c in criteria):
        raise ProblemError("a maximin criterion cannot be combined with other criteria")
    if sum(1 for c in criteria if c.kind == "integral") > 1:
        raise ProblemError("at most one integral criterion part is allowed")
    if not criteria:
        raise ProblemError("a criterion is required")
    seen_at = set()
    for c in criteria:
        if c.kind == "terminal":
            if c.at in seen_at:
                raise ProblemError(f"duplicate terminal criterion at t = {g12(c.at)}")
            seen_at.add(c.at)
    params = list(params)
    if n_maximin:
        params.append(ParamDecl(MAXIMIN_PARAM))

    # Attach slack names and validate per-kind structure.
    bound_states: set[str] = set()
    final_constraints: list[ConstraintSpec] = []
    state_names = {s.name for s in states}
    control_names = {c.name for c in controls}
    for j, c in enumerate(constraints, start=1):
        if c.kind in ("ode", "volterra", "fredholm", "convolution"):
            if c.state not in state_names:
                raise ProblemError(
                    f"constraint {j} ({c.kind}) binds undeclared state '{c.state}'")
            if c.state in bound_states:
                raise ProblemError(f"state '{c.state}' is bound by two constraints")
            bound_states.add(c.state)
        if c.kind in ("ode", "volterra"):
            init = next(s.init for s in states if s.name == c.state)
            if init is None:
                raise ProblemError(
                    f"state '{c.state}' needs an initial value for a {c.kind} constraint")
        if c.kind == "convolution":
            if c.control not in control_names:
                raise ProblemError(
                    f"constraint {j} (convolution) binds undeclared control '{c.control}'")
            ex.check_bound(c.kernel, {"s"})
        if c.kind == "ineq":
            c = ConstraintSpec(c.kind, expr=c.expr, slack=f"z{j}")
        final_constraints.append(c)

    prob = CanonicalProblem(
        horizon=float(horizon),
        states=tuple(states),
        controls=tuple(controls),
        params=tuple(params),
        criteria=tuple(criteria),
        constraints=tuple(final_constraints),
    )

    # Every expression may reference declared unknowns plus the time symbols.
    allowed = set(prob.unknown_names) | {"t"}
    for c in prob.criteria:
        ex.check_bound(c.expr, allowed)
    for j, c in enumerate(prob.constraints, start=1):
        if c.kind == "fredholm":
            ex.check_bound(c.expr, allowed | {"tau"})
        elif c.kind == "convolution":
            pass  # kernel checked above; no free expression
        elif c.kind == "ineq":
            ex.check_bound(c.expr, allowed - set(prob.slack_names))
        else:
            ex.check_bound(c.expr, allowed - set(prob.slack_names))
    return prob


# --- canonical form -------------------------------------------------------

@dataclass(frozen=True)
class CanonicalForm:
    """One constraint as the pair (f_j1, f_j2) of the canonical family."""

    f1: ex.Expr | None          # running integrand, may mention controls and tau
    f2: ex.Expr | None          # coefficient of delta(t - event)
    tau_dependent: bool         # True when the family genuinely varies with tau
    event_at: float | None      # fixed event time when f2 fires at one point only
    note: str


_T = ex.Var("t")
_TAU = ex.Var("tau")


def to_canonical(c: ConstraintSpec, problem: CanonicalProblem) -> CanonicalForm:
    """Rewrite one constraint into canonical (f_j1, f_j2) form.

    Pure function of its arguments: identical inputs give identical trees.
    """
    T = problem.horizon
    if c.kind in ("ode", "volterra"):
        x0 = problem.state_init(c.state)
        step = ex.call("h", ex.sub(_TAU, _T))
        f1 = ex.sub(ex.neg(ex.mul(c.expr, step)), ex.Const(x0 / T))
        return CanonicalForm(
            f1=f1, f2=ex.Var(c.state), tau_dependent=True, event_at=None,
            note=f"{c.kind} {c.state}: J(tau) = x(tau) - x0 - cumulative rhs integral")
    if c.kind == "integral":
        return CanonicalForm(c.expr, None, False, None,
                             "integral equality: J constant in tau")
    if c.kind == "pointwise":
        return CanonicalForm(None, c.expr, True, None,
                             "pointwise equality: J(tau) = f at tau")
    if c.kind == "terminal":
        return CanonicalForm(None, c.expr, False, c.at,
                             f"terminal equality at t = {g12(c.at)}")
    if c.kind == "fredholm":
        return CanonicalForm(c.expr, ex.neg(ex.Var(c.state)), True, None,
                             f"fredholm {c.state}: J(tau) = kernel integral - x(tau)")
    if c.kind == "convolution":
        k_shift = ex.substitute(c.kernel, "s", ex.sub(_TAU, _T))
        f1 = ex.mul(ex.Var(c.control), k_shift)
        return CanonicalForm(f1, ex.neg(ex.Var(c.state)), True, None,
                             f"convolution {c.state}: J(tau) = (k * {c.control})(tau) - {c.state}(tau)")
    if c.kind == "ineq":
        return CanonicalForm(None, ex.sub(c.expr, ex.Var(c.slack)), True, None,
                             f"inequality with slack {c.slack}: J(tau) = f - {c.slack} at tau")
    raise ProblemError(f"unknown constraint kind '{c.kind}'")


# --- numeric evaluation ---------------------------------------------------

class _NodeData:
    """Node/interval arrays for one candidate on one mesh."""

    def __init__(self, problem: CanonicalProblem, mesh: Mesh,
                 x: Mapping[str, np.ndarray], u: Mapping[str, np.ndarray],
                 params: Mapping[str, float], slacks: Mapping[str, np.ndarray]):
        self.mesh = mesh
        n = mesh.n
        self.t = mesh.nodes
        self.x = {k: np.asarray(v, dtype=float) for k, v in x.items()}
        self.u_int = {k: np.asarray(v, dtype=float) for k, v in u.items()}
        self.params = {k: float(v) for k, v in params.items()}
        self.slacks = {k: np.asarray(v, dtype=float) for k, v in slacks.items()}
        for name, arr in self.x.items():
            if arr.shape != (n + 1,):
                raise ProblemError(f"state '{name}' must have {n + 1} nodal values")
        for name, arr in self.u_int.items():
            if arr.shape != (n,):
                raise ProblemError(f"control '{name}' must have {n} interval values")
        for name, arr in self.slacks.items():
            if arr.shape != (n + 1,):
                raise ProblemError(f"slack '{name}' must have {n + 1} nodal values")

    def env_args(self) -> tuple[tuple[str, ...], dict[str, np.ndarray | float]]:
        names = ("t",) + tuple(self.x) + tuple(self.u_int) + tuple(self.params) \
            + tuple(self.slacks)
        values: dict[str, np.ndarray | float] = {"t": self.t}
        values.update(self.x)
        # Controls at nodes: left-continuous, node k takes interval min(k, n-1).
        for name, arr in self.u_int.items():
            values[name] = np.append(arr, arr[-1])
        values.update(self.params)
        values.update(self.slacks)
        return names, values

    def interval_quad(self, fn) -> np.ndarray:
        """Per-interval trapezoid of fn(t, x, u, ..., tmid) with u frozen per interval.

        Returns the n interval contributions; exact for integrands linear in t
        between nodes when the controls are interval-constant.  ``tmid`` is the
        midpoint of the interval each endpoint belongs to; step factors are
        evaluated there (see module docstring).
        """
        half = 0.5 * self.mesh.dt
        tl, tr = self.t[:-1], self.t[1:]
        xl = {k: v[:-1] for k, v in self.x.items()}
        xr = {k: v[1:] for k, v in self.x.items()}
        zl = {k: v[:-1] for k, v in self.slacks.items()}
        zr = {k: v[1:] for k, v in self.slacks.items()}
        left = fn(tl, xl, self.u_int, zl, tl + half)
        right = fn(tr, xr, self.u_int, zr, tr - half)
        return half * (np.asarray(left) + np.asarray(right))


def _compiled(e: ex.Expr, names: tuple[str, ...]):
    return compile_expr(e, names)


def steps_at_midpoint(e: ex.Expr) -> ex.Expr:
    """Move the time argument of every unit step onto the symbol ``_tmid``.

    Running quadrature binds ``_tmid`` to the midpoint of the current
    interval; other factors keep their endpoint values.
    """
    if isinstance(e, (ex.Const, ex.Var)):
        return e
    if isinstance(e, ex.Neg):
        return ex.Neg(steps_at_midpoint(e.arg))
    if isinstance(e, ex.BinOp):
        return ex.BinOp(e.op, steps_at_midpoint(e.left), steps_at_midpoint(e.right))
    assert isinstance(e, ex.Call)
    args = tuple(steps_at_midpoint(a) for a in e.args)
    if e.fn == "h":
        args = (ex.substitute(args[0], "t", ex.Var("_tmid")),)
    return ex.Call(e.fn, args)


def eval_functionals(
    problem: CanonicalProblem,
    mesh: Mesh,
    x: Mapping[str, np.ndarray],
    u: Mapping[str, np.ndarray],
    params: Mapping[str, float] | None = None,
    slacks: Mapping[str, np.ndarray] | None = None,
) -> dict[int, np.ndarray]:
    """Residual arrays J_j(tau_k) for every constraint, keyed by 1-based index.

    Scalar constraints (integral, terminal) return a length-1 array.  The
    trapezoid rule is applied per interval with the interval's control value
    at both ends, which keeps linear-state problems exact.
    """
    params = dict(params or {})
    slacks = dict(slacks or {})
    data = _NodeData(problem, mesh, x, u, params, slacks)
    out: dict[int, np.ndarray] = {}
    for j, c in enumerate(problem.constraints, start=1):
        out[j] = _eval_one(c, problem, data)
        if not np.all(np.isfinite(out[j])):
            raise ex.EvalError(f"constraint {j} ({c.kind}) produced non-finite residuals")
    return out


def running_contribs(c: ConstraintSpec, problem: CanonicalProblem,
                     data: _NodeData) -> np.ndarray | None:
    """Per-interval quadrature contributions of a running constraint integrand.

    Shapes: (n,) for ode/volterra/integral, (n+1, n) for the tau family of
    fredholm/convolution (rows index tau).  Kinds without a running integrand
    return None.  Residuals are linear in these arrays, which is what lets a
    measure-valued control enter as a per-interval convex combination.
    """

    def quad_fn(e: ex.Expr):
        names, _ = data.env_args()
        qnames = names + ("_tmid",)
        fn = _compiled(steps_at_midpoint(e), qnames)

        def at_endpoint(t, xs, us, zs, tmid):
            env = {"t": t, "_tmid": tmid}
            env.update(xs)
            env.update(us)
            env.update(data.params)
            env.update(zs)
            return fn(*[env[n] for n in qnames])
        return at_endpoint

    if c.kind in ("ode", "volterra", "integral"):
        return data.interval_quad(quad_fn(c.expr))

    if c.kind in ("fredholm", "convolution"):
        if c.kind == "fredholm":
            f1 = c.expr
        else:
            f1 = ex.mul(ex.Var(c.control), ex.substitute(c.kernel, "s", ex.sub(_TAU, _T)))
        names, _ = data.env_args()
        fnames = names + ("tau", "_tmid")
        fn = _compiled(steps_at_midpoint(f1), fnames)
        tau = data.t[:, None]

        def kernel_fn(t, xs, us, zs, tmid):
            env = {"t": t[None, :], "_tmid": tmid[None, :]}
            env.update({k: v[None, :] for k, v in xs.items()})
            env.update({k: v[None, :] for k, v in us.items()})
            env.update(data.params)
            env.update({k: v[None, :] for k, v in zs.items()})
            env["tau"] = tau
            return fn(*[env[n] for n in fnames])

        return data.interval_quad(kernel_fn)

    return None


def assemble_residual(c: ConstraintSpec, problem: CanonicalProblem,
                      data: _NodeData, contrib: np.ndarray | None) -> np.ndarray:
    """Combine running contributions and point values into the residual J_j."""
    mesh = data.mesh
    names, values = data.env_args()
    nodes_env = [values[n] for n in names]

    def node_eval(e: ex.Expr) -> np.ndarray:
        return np.broadcast_to(_compiled(e, names)(*nodes_env), data.t.shape).astype(float)

    if c.kind in ("ode", "volterra"):
        x0 = problem.state_init(c.state)
        cum = np.concatenate(([0.0], np.cumsum(contrib)))
        return data.x[c.state] - x0 - cum

    if c.kind == "integral":
        return np.array([float(np.sum(contrib))])

    if c.kind == "pointwise":
        return node_eval(c.expr)

    if c.kind == "terminal":
        k = mesh.snap(c.at, "terminal constraint")
        env = {n: (values[n][k] if isinstance(values[n], np.ndarray) else values[n])
               for n in names}
        return np.array([ex.evaluate(c.expr, env)])

    if c.kind in ("fredholm", "convolution"):
        integral = np.sum(contrib, axis=1)
        return integral - data.x[c.state]

    if c.kind == "ineq":
        if c.slack not in data.slacks:
            raise ProblemError(f"candidate lacks slack values for '{c.slack}'")
        return node_eval(c.expr) - data.slacks[c.slack]

    raise ProblemError(f"unknown constraint kind '{c.kind}'")


def _eval_one(c: ConstraintSpec, problem: CanonicalProblem, data: _NodeData) -> np.ndarray:
    return assemble_residual(c, problem, data, running_contribs(c, problem, data))


def criterion_contribs(part: CriterionPart, problem: CanonicalProblem,
                       data: _NodeData) -> np.ndarray | None:
    """Per-interval quadrature contributions of an integral criterion part.

    Point and maximin parts have no running integrand and return None.  The
    criterion is linear in these contributions, same as the residuals.
    """
    if part.kind != "integral":
        return None
    names, _ = data.env_args()
    qnames = names + ("_tmid",)
    fn = _compiled(steps_at_midpoint(part.expr), qnames)

    def at_endpoint(t, xs, us, zs, tmid):
        env = {"t": t, "_tmid": tmid}
        env.update(xs)
        env.update(us)
        env.update(data.params)
        return fn(*[env[n] for n in qnames])
    return data.interval_quad(at_endpoint)


def criterion_part_value(part: CriterionPart, problem: CanonicalProblem,
                         data: _NodeData) -> float:
    """Value of one criterion part under the shared conventions."""
    names, values = data.env_args()
    if part.kind == "integral":
        return float(np.sum(criterion_contribs(part, problem, data)))
    if part.kind == "terminal":
        k = data.mesh.snap(part.at, "terminal criterion")
        env = {n: (values[n][k] if isinstance(values[n], np.ndarray) else values[n])
               for n in names}
        return float(ex.evaluate(part.expr, env))
    arr = np.broadcast_to(
        _compiled(part.expr, names)(*[values[n] for n in names]), data.t.shape)
    return float(np.min(arr))


def criterion_value(
    problem: CanonicalProblem,
    mesh: Mesh,
    x: Mapping[str, np.ndarray],
    u: Mapping[str, np.ndarray],
    params: Mapping[str, float] | None = None,
) -> float:
    """Criterion value with the shared quadrature conventions.

    For a maximin criterion this is min over nodes of f0, independent of the
    stored level parameter.
    """
    data = _NodeData(problem, mesh, x, u, dict(params or {}), {})
    return sum(criterion_part_value(part, problem, data) for part in problem.criteria)


def residuals_to_csv(path, mesh: Mesh, residuals: Mapping[int, np.ndarray]) -> None:
    """Write tau, J_1.. columns; scalar constraints repeat their value."""
    cols = []
    for j in sorted(residuals):
        arr = np.asarray(residuals[j], dtype=float)
        if arr.shape == (1,):
            arr = np.full(mesh.n + 1, arr[0])
        cols.append((j, arr))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("tau," + ",".join(f"J_{j}" for j, _ in cols) + "\n")
        for k, tau in enumerate(mesh.nodes):
            row = [g12(tau)] + [g12(arr[k]) for _, arr in cols]
            fh.write(",".join(row) + "\n")
