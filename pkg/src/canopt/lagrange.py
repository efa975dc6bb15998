"""Multiplier function assembly, variable grouping, and adjoint equations.

Every criterion part and every constraint contributes a small set of additive
terms to one combined integrand R; the necessary conditions fall out of R
mechanically.  Terms come in two classes.  Class I terms are ordinary running
integrands and may carry controls; class II terms are pointwise couplings or
delta-weighted event terms and never carry a first-group control.  The
catalog:

    criterion  integral f0          lam0*f0                          (I)
    criterion  terminal F0 at t0    lam0*F0*delta(t - t0)            (II)
    criterion  maximin f0           lam0*a_crit/T + lam_0(t)*f0
                                    - lam_0(t)*a_crit                (II x3)
    constraint integral f = 0       lam_j*f, scalar lam_j            (I)
    constraint pointwise f = 0      lam_j(t)*f                       (II)
    constraint terminal F at t0     lamt_j*F*delta(t - t0)           (II)
    constraint ode/volterra x'=f    psi_x*f                          (I)
                                    dpsi_x*x [+ psi_x(0)*x0/T]       (II)
    constraint fredholm/convolution int_0^T lam_j(tau)*f dtau        (I)
                                    - lam_j(t)*x                     (II)
    constraint ineq f >= 0          lam_j(t)*f - lam_j(t)*zj         (II x2)
                                    with lam_j(t) >= 0

The adjoint bookkeeping offset psi_x(0)*x0/T keeps S = int R dt exact on
feasible trajectories; it carries no stationarity information when x0 and T
are fixed, so it is excluded from displays and from adjoint right-hand
sides.  A variable is first-group when every term mentioning it is class I;
appearing in a running class II term demotes it everywhere, appearing in a
delta event term demotes it at that time only.  States, slacks, and
parameters are never first-group.  H is the sum of terms containing at least
one first-group control, N is the remainder, and R = N + H identically.

Multiplier symbols inside term expressions are plain variables named lam0,
lam_j, lamt_j, psi_<state>, dpsi_<state>, psi0_<state>, and (for the maximin
part) lam_0.  Function multipliers display with an argument, lam_1(t) or
lam_1(tau); numeric layers bind them to nodal arrays.  All multipliers
vanish identically outside [0, T].
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import expr as ex
from .expr import Expr, Var, Const, Neg, BinOp, Call
from .problem import (CanonicalProblem, ConstraintSpec, CriterionPart,
                      MAXIMIN_PARAM, ProblemError, g12)

__all__ = [
    "Multiplier", "RTerm", "SlacknessPair", "Classification", "AdjointDef",
    "LagrangeSystem", "contribution_for_criterion", "contribution_for_constraint",
    "assemble", "classify_variables", "split_NH", "adjoint_system",
    "print_term", "print_sum", "print_R", "print_contribution",
    "report_text", "report_json",
]

FIRST, SECOND, PARAMETER = "first", "second", "parameter"


@dataclass(frozen=True)
class Multiplier:
    """One dual object: a scalar, a function of t, or an adjoint psi."""

    name: str
    kind: str          # flag | scalar | function | adjoint | terminal
    j: int | None      # owning constraint index; None for criterion multipliers
    state: str | None = None   # bound state for adjoints
    nonneg: bool = False


@dataclass(frozen=True)
class RTerm:
    """One additive term of R.

    ``expr`` is the complete product with the multiplier symbol inlined.  A
    kernel-form term stands for int_0^T lam_j(tau) * body dtau and keeps the
    bare integrand in ``expr`` (tau free); everything else is pointwise in t.
    """

    source: str                 # "criterion" or "c<j>"
    j: int | None
    klass: str                  # "I" | "II"
    mult: Multiplier
    expr: Expr
    delta_at: float | None = None
    form: str = "plain"         # plain | dpsi | offset | kernel
    kernel_body: Expr | None = None

    def is_running(self) -> bool:
        return self.delta_at is None and self.form != "offset"


@dataclass(frozen=True)
class SlacknessPair:
    """Sign condition lam >= 0 together with lam(t)*expr(t) = 0."""

    mult: str
    expr: Expr
    source: str


@dataclass(frozen=True)
class Classification:
    groups: dict[str, str]                      # name -> first|second|parameter
    demoted_at: dict[str, tuple[float, ...]]    # first-group control -> event times

    @property
    def first(self) -> tuple[str, ...]:
        return tuple(n for n, g in self.groups.items() if g == FIRST)

    @property
    def second(self) -> tuple[str, ...]:
        return tuple(n for n, g in self.groups.items() if g == SECOND)


@dataclass(frozen=True)
class AdjointDef:
    state: str
    j: int
    rate: Expr           # dpsi_<state> = rate
    terminal: Expr       # psi_<state>(T) = terminal
    terminal_time: float


@dataclass
class LagrangeSystem:
    problem: CanonicalProblem
    lambda0: int
    terms: tuple[RTerm, ...]
    multipliers: dict[str, Multiplier]
    slackness: tuple[SlacknessPair, ...]
    maximin_closure: bool
    classification: Classification = field(init=False)
    N_terms: tuple[RTerm, ...] = field(init=False)
    H_terms: tuple[RTerm, ...] = field(init=False)

    def __post_init__(self):
        self.classification = classify_variables(self.problem, self.terms)
        self.N_terms, self.H_terms = split_NH(self)

    def terms_for(self, source: str) -> tuple[RTerm, ...]:
        return tuple(t for t in self.terms if t.source == source)


# --- contributions --------------------------------------------------------


def _lam(name: str) -> Expr:
    return Var(name)


def contribution_for_criterion(problem: CanonicalProblem, part: CriterionPart,
                               ) -> tuple[list[RTerm], list[Multiplier], list[SlacknessPair]]:
    lam0 = Multiplier("lam0", "flag", None)
    if part.kind == "integral":
        term = RTerm("criterion", None, "I", lam0, ex.mul(_lam("lam0"), part.expr))
        return [term], [lam0], []
    if part.kind == "terminal":
        term = RTerm("criterion", None, "II", lam0,
                     ex.mul(_lam("lam0"), part.expr), delta_at=part.at)
        return [term], [lam0], []
    if part.kind == "maximin":
        lam_fn = Multiplier("lam_0", "function", None, nonneg=True)
        a = Var(MAXIMIN_PARAM)
        terms = [
            RTerm("criterion", None, "II", lam0,
                  ex.mul(_lam("lam0"), ex.div(a, Const(problem.horizon)))),
            RTerm("criterion", None, "II", lam_fn, ex.mul(_lam("lam_0"), part.expr)),
            RTerm("criterion", None, "II", lam_fn, ex.neg(ex.mul(_lam("lam_0"), a))),
        ]
        pair = SlacknessPair("lam_0", ex.sub(part.expr, a), "criterion")
        return terms, [lam0, lam_fn], [pair]
    raise ProblemError(f"unknown criterion kind '{part.kind}'")


def contribution_for_constraint(problem: CanonicalProblem, c: ConstraintSpec, j: int,
                                ) -> tuple[list[RTerm], list[Multiplier], list[SlacknessPair]]:
    src = f"c{j}"
    if c.kind == "integral":
        m = Multiplier(f"lam_{j}", "scalar", j)
        return [RTerm(src, j, "I", m, ex.mul(_lam(m.name), c.expr))], [m], []
    if c.kind == "pointwise":
        m = Multiplier(f"lam_{j}", "function", j)
        return [RTerm(src, j, "II", m, ex.mul(_lam(m.name), c.expr))], [m], []
    if c.kind == "terminal":
        m = Multiplier(f"lamt_{j}", "terminal", j)
        term = RTerm(src, j, "II", m, ex.mul(_lam(m.name), c.expr), delta_at=c.at)
        return [term], [m], []
    if c.kind in ("ode", "volterra"):
        m = Multiplier(f"psi_{c.state}", "adjoint", j, state=c.state)
        x0 = problem.state_init(c.state)
        terms = [
            RTerm(src, j, "I", m, ex.mul(_lam(m.name), c.expr)),
            RTerm(src, j, "II", m, ex.mul(_lam(f"dpsi_{c.state}"), Var(c.state)),
                  form="dpsi"),
        ]
        offset = ex.mul(_lam(f"psi0_{c.state}"), ex._const(x0 / problem.horizon))
        if offset != ex.ZERO:
            terms.append(RTerm(src, j, "II", m, offset, form="offset"))
        return terms, [m], []
    if c.kind in ("fredholm", "convolution"):
        m = Multiplier(f"lam_{j}", "function", j)
        if c.kind == "fredholm":
            body = c.expr
        else:
            shifted = ex.substitute(c.kernel, "s", ex.sub(Var("tau"), Var("t")))
            body = ex.mul(Var(c.control), shifted)
        terms = [
            RTerm(src, j, "I", m, ex.mul(_lam(m.name), body),
                  form="kernel", kernel_body=body),
            RTerm(src, j, "II", m, ex.neg(ex.mul(_lam(m.name), Var(c.state)))),
        ]
        return terms, [m], []
    if c.kind == "ineq":
        m = Multiplier(f"lam_{j}", "function", j, nonneg=True)
        terms = [
            RTerm(src, j, "II", m, ex.mul(_lam(m.name), c.expr)),
            RTerm(src, j, "II", m, ex.neg(ex.mul(_lam(m.name), Var(c.slack)))),
        ]
        return terms, [m], [SlacknessPair(m.name, c.expr, src)]
    raise ProblemError(f"unknown constraint kind '{c.kind}'")


def assemble(problem: CanonicalProblem, lambda0: int = 1) -> LagrangeSystem:
    """Concatenate all contributions into one immutable system."""
    if lambda0 not in (0, 1):
        raise ProblemError("lambda0 is a degeneracy flag and must be 0 or 1")
    terms: list[RTerm] = []
    mults: dict[str, Multiplier] = {}
    pairs: list[SlacknessPair] = []
    closure = False
    for part in problem.criteria:
        ts, ms, ps = contribution_for_criterion(problem, part)
        terms += ts
        pairs += ps
        for m in ms:
            mults.setdefault(m.name, m)
        if part.kind == "maximin":
            closure = True
    mults.setdefault("lam0", Multiplier("lam0", "flag", None))
    for j, c in enumerate(problem.constraints, start=1):
        ts, ms, ps = contribution_for_constraint(problem, c, j)
        terms += ts
        pairs += ps
        for m in ms:
            if m.name in mults:
                raise ProblemError(f"duplicate multiplier name '{m.name}'")
            mults[m.name] = m
    taken = set(problem.unknown_names)
    for m in mults.values():
        aliases = {m.name}
        if m.kind == "adjoint":
            aliases |= {f"dpsi_{m.state}", f"psi0_{m.state}"}
        clash = aliases & taken
        if clash:
            raise ProblemError(
                f"declared name(s) {sorted(clash)} collide with multiplier symbols")
    return LagrangeSystem(problem, lambda0, tuple(terms), mults,
                          tuple(pairs), closure)


# --- grouping and the N/H split -------------------------------------------


def classify_variables(problem: CanonicalProblem,
                       terms: tuple[RTerm, ...]) -> Classification:
    groups: dict[str, str] = {}
    demoted_at: dict[str, tuple[float, ...]] = {}
    for name in problem.control_names:
        events: set[float] = set()
        group = FIRST
        for t in terms:
            if name not in ex.free_vars(t.expr):
                continue
            if t.klass == "I":
                continue
            if t.delta_at is None:
                group = SECOND
                break
            events.add(t.delta_at)
        groups[name] = group
        if group == FIRST and events:
            demoted_at[name] = tuple(sorted(events))
    for name in problem.state_names + problem.slack_names:
        groups[name] = SECOND
    for name in problem.param_names:
        groups[name] = PARAMETER
    return Classification(groups, demoted_at)


def split_NH(system: LagrangeSystem) -> tuple[tuple[RTerm, ...], tuple[RTerm, ...]]:
    first = set(system.classification.first)
    N: list[RTerm] = []
    H: list[RTerm] = []
    for t in system.terms:
        carries = ex.free_vars(t.expr) & first
        if carries and t.delta_at is None:
            if t.klass != "I":
                raise ProblemError(
                    f"running class II term from {t.source} contains first-group "
                    f"control(s) {sorted(carries)}")
            H.append(t)
        else:
            N.append(t)
    return tuple(N), tuple(H)


# --- adjoint equations ----------------------------------------------------


def _tidy(e: Expr) -> Expr:
    """Bubble unary minus out of products so derived rates read naturally."""
    if isinstance(e, Neg):
        return ex.neg(_tidy(e.arg))
    if isinstance(e, BinOp) and e.op in "*/":
        a, b = _tidy(e.left), _tidy(e.right)
        sign = 1
        if isinstance(a, Neg):
            sign, a = -sign, a.arg
        if isinstance(b, Neg):
            sign, b = -sign, b.arg
        out = ex.mul(a, b) if e.op == "*" else ex.div(a, b)
        return out if sign > 0 else ex.neg(out)
    if isinstance(e, BinOp):
        a, b = _tidy(e.left), _tidy(e.right)
        if e.op == "+":
            return ex.sub(a, b.arg) if isinstance(b, Neg) else ex.add(a, b)
        if e.op == "-":
            return ex.add(a, b.arg) if isinstance(b, Neg) else ex.sub(a, b)
        return ex.pow_(a, b)
    if isinstance(e, Call):
        return ex.call(e.fn, *[_tidy(a) for a in e.args])
    return e


def adjoint_system(system: LagrangeSystem) -> tuple[AdjointDef, ...]:
    """Stationarity of R in each integro-differentially bound state.

    dpsi = -d(running terms)/dx on (0, T); the terminal value collects the
    delta-event terms at T.  psi vanishes identically outside [0, T].
    """
    problem = system.problem
    T = problem.horizon
    defs: list[AdjointDef] = []
    for name, m in system.multipliers.items():
        if m.kind != "adjoint":
            continue
        state = m.state
        total: Expr = ex.ZERO
        for t in system.terms:
            if state not in ex.free_vars(t.expr):
                continue
            if t.form == "kernel":
                raise ProblemError(
                    f"state '{state}' appears under a kernel integral; its "
                    "adjoint equation is not reducible to a pointwise rate")
            if t.form in ("dpsi", "offset"):
                continue
            if t.delta_at is not None:
                if abs(t.delta_at - T) > 1e-12:
                    raise ProblemError(
                        f"state '{state}' enters an event term at "
                        f"t = {g12(t.delta_at)}; only events at the horizon "
                        "are supported by the adjoint reduction")
                continue
            total = ex.add(total, t.expr)
        rate = _tidy(ex.neg(ex.diff(total, state)))
        terminal: Expr = ex.ZERO
        for t in system.terms:
            if t.delta_at is None or state not in ex.free_vars(t.expr):
                continue
            terminal = ex.add(terminal, ex.diff(t.expr, state))
        defs.append(AdjointDef(state, m.j, rate, _tidy(terminal), T))
    return tuple(defs)


# --- canonical display ----------------------------------------------------


def _display_expr(system: LagrangeSystem, e: Expr, arg: str = "t") -> Expr:
    out = e
    for name, m in system.multipliers.items():
        if m.kind == "function":
            out = ex.substitute(out, name, Var(f"{name}({arg})"))
    return out


def print_term(system: LagrangeSystem, term: RTerm) -> tuple[str, str]:
    """Render one term as (sign, text) with sign in {'+', '-'}."""
    e = term.expr
    sign = "+"
    if isinstance(e, Neg):
        sign, e = "-", e.arg
    if term.form == "kernel":
        body = _display_expr(system, e, arg="tau")
        text = f"int_0^{ex._fmt_number(system.problem.horizon)} {ex.to_text(body)} dtau"
    else:
        text = ex.to_text(_display_expr(system, e))
        if term.delta_at is not None:
            text += f"*delta(t - {ex._fmt_number(term.delta_at)})"
    return sign, text


def print_sum(system: LagrangeSystem, terms: tuple[RTerm, ...]) -> str:
    shown = [t for t in terms if t.form != "offset"]
    ordered = [t for t in shown if t.delta_at is None] + \
              [t for t in shown if t.delta_at is not None]
    if not ordered:
        return "0"
    pieces: list[str] = []
    for k, t in enumerate(ordered):
        sign, text = print_term(system, t)
        if k == 0:
            pieces.append(text if sign == "+" else f"-{text}")
        else:
            pieces.append(f" {sign} {text}")
    return "".join(pieces)


def print_R(system: LagrangeSystem) -> str:
    return "R = " + print_sum(system, system.terms)


def print_contribution(system: LagrangeSystem, source: str) -> str:
    return print_sum(system, system.terms_for(source))


def report_text(system: LagrangeSystem) -> str:
    cls = system.classification
    lines = [print_R(system),
             "N = " + print_sum(system, system.N_terms),
             "H = " + print_sum(system, system.H_terms),
             ""]
    for name in sorted(cls.groups):
        tag = cls.groups[name]
        note = ""
        if name in cls.demoted_at:
            at = ", ".join(g12(v) for v in cls.demoted_at[name])
            note = f" (second at t = {at})"
        lines.append(f"group {name}: {tag}{note}")
    firsts = cls.first
    if firsts:
        lines.append("")
        for name in firsts:
            lines.append(f"{name}*(t) = argmax of H over the feasible set of {name}")
    adjoints = _safe_adjoints(system)
    if adjoints:
        lines.append("")
        for a in adjoints:
            lines.append(f"dpsi_{a.state} = {ex.to_text(_display_expr(system, a.rate))}")
            lines.append(f"psi_{a.state}({ex._fmt_number(a.terminal_time)}) = "
                         f"{ex.to_text(_display_expr(system, a.terminal))}")
    if system.slackness:
        lines.append("")
        for p in system.slackness:
            lines.append(f"{p.mult}(t) >= 0 and {p.mult}(t)*("
                         f"{ex.to_text(p.expr)}) = 0")
    if system.maximin_closure:
        lines.append(f"int_0^{ex._fmt_number(system.problem.horizon)} "
                     f"lam_0(t) dt = lam0")
    return "\n".join(lines) + "\n"


def report_json(system: LagrangeSystem) -> dict:
    cls = system.classification
    adjoints = _safe_adjoints(system)
    return {
        "R": print_R(system),
        "N": print_sum(system, system.N_terms),
        "H": print_sum(system, system.H_terms),
        "lambda0": system.lambda0,
        "classification": {
            "groups": dict(sorted(cls.groups.items())),
            "demoted_at": {k: list(v) for k, v in sorted(cls.demoted_at.items())},
        },
        "multipliers": [
            {"name": m.name, "kind": m.kind, "constraint": m.j,
             "state": m.state, "nonneg": m.nonneg}
            for m in system.multipliers.values()
        ],
        "adjoints": [
            {"state": a.state, "rate": ex.to_text(_display_expr(system, a.rate)),
             "terminal": ex.to_text(_display_expr(system, a.terminal)),
             "terminal_time": a.terminal_time}
            for a in adjoints
        ],
        "slackness": [
            {"multiplier": p.mult, "vanishes_with": ex.to_text(p.expr),
             "source": p.source}
            for p in system.slackness
        ],
        "maximin_closure": system.maximin_closure,
    }


def _safe_adjoints(system: LagrangeSystem) -> tuple[AdjointDef, ...]:
    try:
        return adjoint_system(system)
    except (ProblemError, ex.NonsmoothError):
        return ()
