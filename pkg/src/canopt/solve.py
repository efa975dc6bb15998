"""Two solver routes that meet in the middle.

``solve_indirect`` sweeps the optimality system directly: integrate the
state forward, the adjoint backward, and replace each interval's control by
the maximizer of the interval value of H.  It is fast and sharp but only
accepts problems built from ode constraints, at most one terminal equality,
and a criterion evaluated along or at the end of the trajectory.

``solve_collocation`` treats all nodal values as decision variables and
drives an exterior penalty on the residuals with a quasi-Newton method; the
gradients come from a traced twin of the quadrature in problem.py.  It is
slower but takes the whole constraint catalog, measure-valued controls, and
worst-value criteria.  Multipliers fall out of the final penalty round; the
adjoint is then rebuilt by a backward sweep so the reported candidate
satisfies the same weak form the verifier checks.

Both routes share one convention for the control on an interval: the value
of H attributed to interval k is the sum of its two endpoint values with the
interval's control at both ends.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import expr as ex
from ._codegen import compile_expr
from .candidate import RelaxedControl, SolutionCandidate
from .evalctx import SystemEvaluator
from .lagrange import LagrangeSystem, assemble
from .problem import (MAXIMIN_PARAM, CanonicalProblem, Mesh, ProblemError,
                      criterion_value, eval_functionals, steps_at_midpoint)
from .relax import extend, relaxed_criterion, relaxed_functionals

__all__ = ["SolveError", "SolverConfig", "simulate", "maximize_H",
           "solve_indirect", "solve_collocation", "optimize_params"]


class SolveError(Exception):
    """The iteration left the region where the method is meaningful."""


@dataclass
class SolverConfig:
    mesh_n: int = 200
    ugrid: int = 33
    refine: int = 3
    damping: float = 0.5
    max_sweeps: int = 400
    sweep_tol: float = 1e-11
    secant_tol: float = 1e-6
    secant_max: int = 40
    penalty_w0: float = 10.0
    penalty_growth: float = 10.0
    penalty_rounds: int = 6
    maximin_passes: int = 5
    seed: int = 0


# --- forward simulation ---------------------------------------------------

def _ode_constraints(problem: CanonicalProblem):
    out = []
    for c in problem.constraints:
        if c.kind in ("ode", "volterra"):
            out.append(c)
        elif c.kind in ("fredholm", "convolution"):
            raise ProblemError(
                f"state '{c.state}' is bound by a {c.kind} relation; "
                "trajectory simulation only integrates rate constraints")
    states = {c.state for c in out}
    missing = set(problem.state_names) - states
    if missing:
        raise ProblemError(
            f"no rate constraint for state(s) {sorted(missing)}; cannot simulate")
    return out


def simulate(problem: CanonicalProblem, mesh: Mesh,
             mixture: list[tuple[np.ndarray | None, dict[str, np.ndarray]]],
             params: dict[str, float] | None = None,
             ) -> dict[str, np.ndarray]:
    """Integrate the rate constraints with the residual quadrature itself.

    ``mixture`` is a list of (weights, controls) pairs; weights are (n,)
    arrays or None for an unweighted single atom.  Each step solves the
    interval trapezoid relation by fixed-point iteration, so the returned
    trajectory zeroes the discrete residual to iteration accuracy.
    """
    params = dict(params or {})
    odes = _ode_constraints(problem)
    names = ("t",) + problem.state_names + problem.control_names \
        + problem.param_names
    fns = {c.state: compile_expr(steps_at_midpoint(c.expr), names + ("_tmid",))
           for c in odes}
    n = mesh.n
    dt = mesh.dt
    t = mesh.nodes
    x = {c.state: np.empty(n + 1) for c in odes}
    for c in odes:
        x[c.state][0] = problem.state_init(c.state)
    pvals = {name: float(params.get(name, 0.0)) for name in problem.param_names}

    def rate(state, tk, xk, k, tmid):
        total = 0.0
        for w, u in mixture:
            env = {"t": tk, "_tmid": tmid}
            env.update(xk)
            env.update({name: float(arr[k]) for name, arr in u.items()})
            env.update(pvals)
            v = float(fns[state](*[env[nm] for nm in names + ("_tmid",)]))
            total += v if w is None else float(w[k]) * v
        return total

    for k in range(n):
        tmid = t[k] + 0.5 * dt
        xk = {s: x[s][k] for s in x}
        f0 = {s: rate(s, t[k], xk, k, tmid) for s in x}
        guess = {s: x[s][k] + dt * f0[s] for s in x}
        for _ in range(8):
            f1 = {s: rate(s, t[k + 1], guess, k, tmid) for s in x}
            new = {s: x[s][k] + 0.5 * dt * (f0[s] + f1[s]) for s in x}
            if all(abs(new[s] - guess[s]) <= 1e-14 * (1 + abs(new[s])) for s in x):
                guess = new
                break
            guess = new
        for s in x:
            if not np.isfinite(guess[s]):
                raise SolveError(f"state '{s}' diverged at t = {t[k + 1]:.6g}")
            x[s][k + 1] = guess[s]
    return x


# --- interval H maximization ----------------------------------------------

def _control_grid(problem: CanonicalProblem, names: tuple[str, ...],
                  ugrid: int) -> dict[str, np.ndarray]:
    """Cartesian trial table over the first-group controls, rows ascending
    lexicographically so that ties resolve to the smallest control."""
    axes = []
    for name in names:
        c = problem.control(name)
        if c.finite:
            axes.append(np.array(sorted(c.choices), dtype=float))
        else:
            axes.append(np.linspace(c.box[0], c.box[1], ugrid))
    rows = list(itertools.product(*axes))
    table = np.array(rows, dtype=float)
    return {name: table[:, i] for i, name in enumerate(names)}


def _golden_refine(h_of, point, name, lo, hi, iters):
    """Vectorized golden-section sweep of one control coordinate.

    ``h_of`` maps a full trial-control dict to the (n,) interval H values;
    all intervals shrink their brackets in lockstep.
    """
    inv = (np.sqrt(5) - 1) / 2
    a, b = lo.copy(), hi.copy()

    def at(v):
        trial = dict(point)
        trial[name] = v
        return h_of(trial)

    c, d = b - inv * (b - a), a + inv * (b - a)
    fc, fd = at(c), at(d)
    for _ in range(iters):
        take = fc >= fd
        b = np.where(take, d, b)
        a = np.where(take, a, c)
        c, d = b - inv * (b - a), a + inv * (b - a)
        fc, fd = at(c), at(d)
    return 0.5 * (a + b)


def maximize_H(ev: SystemEvaluator, cand: SolutionCandidate,
               config: SolverConfig | None = None,
               keep_tol: float = 1e-12,
               ) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Per-interval maximizer of H over the first-group controls.

    A trial table over the control boxes and sets picks the global basin;
    box controls then get a golden-section polish bracketing the better of
    the table winner and the current control.  Returns (controls, improved);
    intervals whose refined value does not beat the current control by more
    than ``keep_tol`` relative to the H scale keep their current value,
    which leaves flat stretches alone.
    """
    config = config or SolverConfig()
    first = tuple(n for n in ev.problem.control_names
                  if n in set(ev.system.classification.first))
    if not first:
        raise ProblemError("no first-group controls to maximize over")
    env = ev.env(cand)
    n = ev.mesh.n
    table = _control_grid(ev.problem, first, config.ugrid)
    vals = ev.H_interval_table(env, table)
    current = {name: cand.controls()[name].astype(float) for name in first}
    base = ev.H_interval_values(env, current)
    scale = 1.0 + float(np.max(np.abs(vals)))
    best_idx = np.argmax(vals, axis=0)
    seed = {name: table[name][best_idx] for name in first}
    grid_best = vals[best_idx, np.arange(n)]
    # polish around whichever is better, the table winner or the current u
    center = {}
    start_from_current = base >= grid_best
    for name in first:
        center[name] = np.where(start_from_current, current[name], seed[name])
    point = dict(center)
    for _ in range(max(config.refine, 0)):
        for name in first:
            c = ev.problem.control(name)
            if c.finite:
                continue
            span = (c.box[1] - c.box[0]) / (config.ugrid - 1)
            lo = np.maximum(c.box[0], point[name] - span)
            hi = np.minimum(c.box[1], point[name] + span)
            point[name] = _golden_refine(
                lambda trial: ev.H_interval_values(env, trial),
                point, name, lo, hi, 24)
    refined = ev.H_interval_values(env, point)
    final_val = np.maximum.reduce([refined, grid_best, base])
    out = {}
    for name in first:
        best = np.where(refined >= grid_best, point[name], seed[name])
        out[name] = np.where(base >= final_val, current[name], best)
    improved = final_val - base > keep_tol * scale
    return out, improved


# --- the indirect route ---------------------------------------------------

def _indirect_scope(problem: CanonicalProblem) -> int | None:
    """Validate the problem shape; returns the terminal constraint index."""
    terminal_j = None
    for j, c in enumerate(problem.constraints, start=1):
        if c.kind in ("ode", "volterra"):
            continue
        if c.kind == "terminal":
            if terminal_j is not None:
                raise ProblemError(
                    "the sweep method shoots on a single terminal equality; "
                    "use the collocation route for more")
            if abs(c.at - problem.horizon) > 1e-12:
                raise ProblemError("terminal equalities must sit at the horizon")
            terminal_j = j
            continue
        raise ProblemError(
            f"constraint {j} ({c.kind}) is outside the sweep method's scope; "
            "use the collocation route")
    if problem.param_names:
        raise ProblemError("the sweep method does not adjust parameters; "
                           "use the collocation route")
    for part in problem.criteria:
        if part.kind == "maximin":
            raise ProblemError(
                "worst-value criteria need the collocation route")
        if part.kind == "terminal" and abs(part.at - problem.horizon) > 1e-12:
            raise ProblemError("criterion events must sit at the horizon")
    return terminal_j


def _backward_psi(ev: SystemEvaluator, cand: SolutionCandidate) -> None:
    """Backward trapezoid sweep of the adjoint; writes cand.psi in place.

    Exactly zeroes the weak-form interval residuals when the rate does not
    involve psi; otherwise two corrector passes bring it to sweep accuracy.
    """
    mesh = ev.mesh
    psi_names = {f"psi_{a.state}" for a in ev.adjoints}
    psi_dep = any(ex.free_vars(a.rate) & psi_names for a in ev.adjoints)
    passes = 3 if psi_dep else 1
    for _ in range(passes):
        gaps = ev.adjoint_terminal_gap(cand)
        for adj in ev.adjoints:
            psi = cand.psi.setdefault(adj.state, np.zeros(mesh.n + 1))
            psi[-1] = psi[-1] - gaps[adj.state]
        env = ev.env(cand)
        rates = {adj.state: ev._rate_values(adj, cand, env) for adj in ev.adjoints}
        for adj in ev.adjoints:
            psi = cand.psi[adj.state]
            r = rates[adj.state]
            for k in range(mesh.n - 1, -1, -1):
                psi[k] = psi[k + 1] - 0.5 * mesh.dt * (r[k] + r[k + 1])


def _indirect_inner(problem: CanonicalProblem, ev: SystemEvaluator,
                    mesh: Mesh, config: SolverConfig,
                    lamt: dict[int, float]) -> tuple[SolutionCandidate, int]:
    first = [n for n in problem.control_names
             if n in set(ev.system.classification.first)]
    u = {}
    for name in problem.control_names:
        c = problem.control(name)
        mid = sorted(c.choices)[0] if c.finite else 0.5 * (c.box[0] + c.box[1])
        u[name] = np.full(mesh.n, mid)
    x = simulate(problem, mesh, [(None, u)])
    cand = SolutionCandidate(mesh=mesh, x=x, u=u, lamt=dict(lamt))
    history: list[float] = []
    for sweep in range(config.max_sweeps):
        _backward_psi(ev, cand)
        best, improved = maximize_H(ev, cand, config)
        du = 0.0
        for name in first:
            c = problem.control(name)
            if not c.finite:
                new = cand.u[name] + config.damping * (best[name] - cand.u[name])
            else:
                new = np.where(improved, best[name], cand.u[name])
            du = max(du, float(np.max(np.abs(new - cand.u[name]))))
            cand.u[name] = new
        cand.x = simulate(problem, mesh, [(None, cand.u)])
        value = criterion_value(problem, mesh, cand.x, cand.u)
        if not np.isfinite(value):
            raise SolveError("criterion diverged during the sweep iteration")
        history.append(value)
        stable = (len(history) >= 3 and
                  abs(history[-1] - history[-2]) <= config.sweep_tol * (1 + abs(value)) and
                  abs(history[-2] - history[-3]) <= config.sweep_tol * (1 + abs(value)))
        if stable or du <= 1e-12:
            break
    cand.objective = history[-1]
    return cand, sweep + 1


def solve_indirect(problem: CanonicalProblem, mesh: Mesh | None = None,
                   config: SolverConfig | None = None) -> SolutionCandidate:
    """Forward-backward sweeps with interval H maximization.

    With a terminal equality, shoots on its multiplier by the secant method
    until the end condition holds to ``secant_tol``.
    """
    config = config or SolverConfig()
    mesh = mesh or Mesh(config.mesh_n, problem.horizon)
    terminal_j = _indirect_scope(problem)
    system = assemble(problem)
    ev = SystemEvaluator(system, mesh)
    if not ev.adjoints:
        raise ProblemError("the sweep method needs an integrable adjoint system")

    if terminal_j is None:
        cand, sweeps = _indirect_inner(problem, ev, mesh, config, {})
        cand.meta = {"method": "indirect", "sweeps": sweeps}
        return cand

    c = problem.constraints[terminal_j - 1]

    def end_gap(lamt_value: float) -> tuple[float, SolutionCandidate, int]:
        cand, sweeps = _indirect_inner(problem, ev, mesh, config,
                                       {terminal_j: lamt_value})
        res = eval_functionals(problem, mesh, cand.x, cand.u)[terminal_j]
        return float(res[0]), cand, sweeps

    a, b = 0.0, 1.0
    ga, cand, sweeps = end_gap(a)
    if abs(ga) <= config.secant_tol:
        gb = ga
        b = a
    else:
        gb, cand, sweeps = end_gap(b)
    steps = 2
    while abs(gb) > config.secant_tol:
        if steps >= config.secant_max:
            raise SolveError(
                f"secant did not meet the end condition: |gap| = {abs(gb):.3e}")
        if gb == ga:
            raise SolveError("the end condition does not react to its multiplier")
        a, b = b, b - gb * (b - a) / (gb - ga)
        ga = gb
        gb, cand, sweeps = end_gap(b)
        steps += 1
    cand.lamt = {terminal_j: b}
    cand.meta = {"method": "indirect", "sweeps": sweeps, "secant_steps": steps}
    return cand


# --- the collocation route ------------------------------------------------

class _Traced:
    """Traced twin of the quadrature in problem.py; keep the two in lockstep.

    Everything here mirrors running_contribs / assemble_residual /
    criterion_contribs with jax arrays so the penalty objective is
    differentiable; a test pins the twin to the reference implementation.
    """

    def __init__(self, problem: CanonicalProblem, mesh: Mesh):
        import jax
        jax.config.update("jax_enable_x64", True)
        import jax.numpy as jnp
        self.jnp = jnp
        self.problem = problem
        self.mesh = mesh
        self.names = ("t",) + problem.state_names + problem.control_names \
            + problem.slack_names + problem.param_names
        self.qnames = self.names + ("_tmid",)
        self.knames = self.names + ("tau", "_tmid")
        self._q = {}
        self._k = {}
        self._n = {}

    def _quad_fn(self, e):
        if id(e) not in self._q:
            self._q[id(e)] = compile_expr(steps_at_midpoint(e), self.qnames,
                                          backend="jax")
        return self._q[id(e)]

    def _kernel_fn(self, e):
        if id(e) not in self._k:
            self._k[id(e)] = compile_expr(steps_at_midpoint(e), self.knames,
                                          backend="jax")
        return self._k[id(e)]

    def _node_fn(self, e):
        if id(e) not in self._n:
            self._n[id(e)] = compile_expr(e, self.names, backend="jax")
        return self._n[id(e)]

    def _env(self, x, u, slacks, params):
        env = {"t": self.mesh.nodes}
        env.update(x)
        for name, arr in u.items():
            env[name] = self.jnp.append(arr, arr[-1])
        env.update(slacks)
        for name in self.problem.param_names:
            env[name] = params.get(name, 0.0)
        return env

    def _interval(self, e, x, u, slacks, params):
        jnp = self.jnp
        t = self.mesh.nodes
        half = 0.5 * self.mesh.dt
        fn = self._quad_fn(e)

        def ends(tk, xsel, zsel, tmid):
            env = {"t": tk, "_tmid": tmid}
            env.update({k: v[xsel] for k, v in x.items()})
            env.update(u)
            env.update({k: v[xsel] for k, v in slacks.items()})
            for name in self.problem.param_names:
                env[name] = params.get(name, 0.0)
            return fn(*[env[n] for n in self.qnames])
        left = ends(t[:-1], slice(None, -1), slice(None, -1), t[:-1] + half)
        right = ends(t[1:], slice(1, None), slice(1, None), t[1:] - half)
        shape = (self.mesh.n,)
        return half * (jnp.broadcast_to(left, shape) + jnp.broadcast_to(right, shape))

    def _kernel(self, body, x, u, slacks, params):
        jnp = self.jnp
        t = self.mesh.nodes
        half = 0.5 * self.mesh.dt
        fn = self._kernel_fn(body)
        tau = t[:, None]

        def ends(tk, xsel, tmid):
            env = {"t": tk[None, :], "_tmid": tmid[None, :], "tau": tau}
            env.update({k: v[xsel][None, :] for k, v in x.items()})
            env.update({k: v[None, :] for k, v in u.items()})
            env.update({k: v[xsel][None, :] for k, v in slacks.items()})
            for name in self.problem.param_names:
                env[name] = params.get(name, 0.0)
            return fn(*[env[n] for n in self.knames])
        shape = (self.mesh.n + 1, self.mesh.n)
        left = jnp.broadcast_to(ends(t[:-1], slice(None, -1), t[:-1] + half), shape)
        right = jnp.broadcast_to(ends(t[1:], slice(1, None), t[1:] - half), shape)
        return half * (left + right)

    def _mixture_contrib(self, build, mixture):
        total = None
        for w, u in mixture:
            arr = build(u)
            if w is not None:
                arr = arr * (w if arr.ndim == 1 else w[None, :])
            total = arr if total is None else total + arr
        return total

    def residuals(self, x, mixture, slacks, params):
        jnp = self.jnp
        out = {}
        mean_u = None
        for j, c in enumerate(self.problem.constraints, start=1):
            if c.kind in ("ode", "volterra", "integral"):
                contrib = self._mixture_contrib(
                    lambda u: self._interval(c.expr, x, u, slacks, params), mixture)
                if c.kind == "integral":
                    out[j] = jnp.sum(contrib)[None]
                else:
                    x0 = self.problem.state_init(c.state)
                    cum = jnp.concatenate([jnp.zeros(1), jnp.cumsum(contrib)])
                    out[j] = x[c.state] - x0 - cum
                continue
            if c.kind in ("fredholm", "convolution"):
                if c.kind == "fredholm":
                    body = c.expr
                else:
                    shifted = ex.substitute(c.kernel, "s",
                                            ex.sub(ex.Var("tau"), ex.Var("t")))
                    body = ex.mul(ex.Var(c.control), shifted)
                contrib = self._mixture_contrib(
                    lambda u: self._kernel(body, x, u, slacks, params), mixture)
                out[j] = jnp.sum(contrib, axis=1) - x[c.state]
                continue
            if mean_u is None:
                mean_u = self._mean_controls(mixture)
            env = self._env(x, mean_u, slacks, params)
            if c.kind == "pointwise":
                out[j] = jnp.broadcast_to(
                    self._node_fn(c.expr)(*[env[n] for n in self.names]),
                    self.mesh.nodes.shape)
            elif c.kind == "terminal":
                k = self.mesh.snap(c.at, "terminal constraint")
                point = {n: (env[n][k] if getattr(env[n], "ndim", 0) else env[n])
                         for n in self.names}
                out[j] = jnp.reshape(
                    self._node_fn(c.expr)(*[point[n] for n in self.names]), (1,))
            else:  # ineq
                vals = jnp.broadcast_to(
                    self._node_fn(c.expr)(*[env[n] for n in self.names]),
                    self.mesh.nodes.shape)
                out[j] = vals - slacks[c.slack]
        return out

    def _mean_controls(self, mixture):
        out = None
        for w, u in mixture:
            part = {k: (v if w is None else w * v) for k, v in u.items()}
            out = part if out is None else {k: out[k] + part[k] for k in out}
        return out

    def criterion(self, x, mixture, slacks, params):
        jnp = self.jnp
        total = 0.0
        mean_u = None
        for part in self.problem.criteria:
            if part.kind == "integral":
                contrib = self._mixture_contrib(
                    lambda u: self._interval(part.expr, x, u, slacks, params),
                    mixture)
                total = total + jnp.sum(contrib)
                continue
            if mean_u is None:
                mean_u = self._mean_controls(mixture)
            env = self._env(x, mean_u, slacks, params)
            if part.kind == "terminal":
                k = self.mesh.snap(part.at, "terminal criterion")
                point = {n: (env[n][k] if getattr(env[n], "ndim", 0) else env[n])
                         for n in self.names}
                total = total + self._node_fn(part.expr)(
                    *[point[n] for n in self.names])
            else:  # maximin: the worst nodal value
                vals = jnp.broadcast_to(
                    self._node_fn(part.expr)(*[env[n] for n in self.names]),
                    self.mesh.nodes.shape)
                total = total + jnp.min(vals)
        return total


@dataclass
class _Segment:
    name: str
    kind: str
    shape: tuple[int, ...]
    lo: float | None
    hi: float | None
    start: int = 0


class _Pack:
    """Flat vector layout for the collocation variables."""

    def __init__(self, problem: CanonicalProblem, mesh: Mesh, slots: int | None):
        self.problem = problem
        self.mesh = mesh
        self.slots = slots
        n = mesh.n
        segs: list[_Segment] = []
        for name in problem.state_names:
            shape = (n,) if problem.state_init(name) is not None else (n + 1,)
            segs.append(_Segment(name, "state", shape, None, None))
        if slots is None:
            for name in problem.control_names:
                c = problem.control(name)
                if c.finite:
                    raise ProblemError(
                        f"control '{name}' takes finitely many values; solve the "
                        "relaxed problem and round, or use the sweep method")
                segs.append(_Segment(name, "control", (n,), c.box[0], c.box[1]))
        else:
            segs.append(_Segment("_gamma", "gamma", (slots, n), 0.0, 1.0))
            for name in problem.control_names:
                c = problem.control(name)
                if not c.finite:
                    segs.append(_Segment(name, "atoms", (slots, n),
                                         c.box[0], c.box[1]))
        for name in problem.slack_names:
            segs.append(_Segment(name, "slack", (n + 1,), 0.0, None))
        for name in problem.param_names:
            if name == MAXIMIN_PARAM:
                continue
            b = problem.param(name).bounds
            segs.append(_Segment(name, "param", (),
                                 None if b is None else b[0],
                                 None if b is None else b[1]))
        pos = 0
        for s in segs:
            s.start = pos
            pos += int(np.prod(s.shape)) if s.shape else 1
        self.segments = segs
        self.size = pos
        self.fixed_atoms = {}
        if slots is not None:
            for name in problem.control_names:
                c = problem.control(name)
                if c.finite:
                    vals = sorted(c.choices)
                    rows = [vals[min(i, len(vals) - 1)] for i in range(slots)]
                    self.fixed_atoms[name] = np.tile(
                        np.array(rows, dtype=float)[:, None], (1, n))

    def bounds(self):
        out = []
        for s in self.segments:
            count = int(np.prod(s.shape)) if s.shape else 1
            out.extend([(s.lo, s.hi)] * count)
        return out

    def initial(self, seed: int = 0) -> np.ndarray:
        vec = np.zeros(self.size)
        rng = np.random.default_rng(seed)
        for s in self.segments:
            count = int(np.prod(s.shape)) if s.shape else 1
            sl = slice(s.start, s.start + count)
            if s.kind == "state":
                init = self.problem.state_init(s.name)
                vec[sl] = 0.0 if init is None else init
            elif s.kind == "control":
                vec[sl] = 0.5 * (s.lo + s.hi)
            elif s.kind == "gamma":
                # uniform weights sit on a symmetry saddle; jitter breaks it
                g = 1.0 / self.slots + 0.05 * rng.uniform(-1, 1, size=count)
                vec[sl] = np.clip(g, 0.05, 0.95)
            elif s.kind == "atoms":
                spread = np.linspace(s.lo, s.hi, self.slots + 2)[1:-1]
                vec[sl] = np.repeat(spread, s.shape[1])
            elif s.kind == "slack":
                vec[sl] = 0.1
            else:  # param
                lo = s.lo if s.lo is not None else -1.0
                hi = s.hi if s.hi is not None else 1.0
                vec[sl] = 0.5 * (lo + hi)
        return vec

    def unpack(self, vec, xp=np):
        """Split a flat vector into (x, mixture, slacks, params)."""
        vals = {}
        for s in self.segments:
            count = int(np.prod(s.shape)) if s.shape else 1
            chunk = vec[s.start:s.start + count]
            vals[s.name] = chunk.reshape(s.shape) if s.shape else chunk[0]
        x = {}
        for name in self.problem.state_names:
            init = self.problem.state_init(name)
            if init is None:
                x[name] = vals[name]
            else:
                x[name] = xp.concatenate([xp.asarray([float(init)]), vals[name]])
        slacks = {name: vals[name] for name in self.problem.slack_names}
        params = {name: vals[name] for name in self.problem.param_names
                  if name != MAXIMIN_PARAM}
        if self.slots is None:
            u = {name: vals[name] for name in self.problem.control_names}
            mixture = [(None, u)]
        else:
            gamma = vals["_gamma"]
            mixture = []
            for i in range(self.slots):
                u = {}
                for name in self.problem.control_names:
                    if name in self.fixed_atoms:
                        u[name] = xp.asarray(self.fixed_atoms[name][i])
                    else:
                        u[name] = vals[name][i]
                mixture.append((gamma[i], u))
        return x, mixture, slacks, params


def _has_set_controls(problem: CanonicalProblem) -> bool:
    return any(problem.control(n).finite for n in problem.control_names)


def _constraint_weight(problem, mesh, j):
    # function-valued residuals are penalized through their integral norm;
    # trapezoid weights keep the recovered density -2*w*r uniform in k
    c = problem.constraints[j - 1]
    if c.kind in ("integral", "terminal"):
        return 1.0
    quad = np.full(mesh.n + 1, mesh.dt)
    quad[0] = quad[-1] = 0.5 * mesh.dt
    return quad


def solve_collocation(problem: CanonicalProblem, mesh: Mesh | None = None,
                      config: SolverConfig | None = None,
                      relaxed: bool | None = None) -> SolutionCandidate:
    """Penalty collocation over nodal values; the general route.

    ``relaxed=None`` picks the measure-valued formulation exactly when some
    control ranges over a finite set; ``relaxed=False`` on such a problem
    solves the relaxed one anyway and rounds each interval to its heaviest
    atom.
    """
    import jax

    config = config or SolverConfig()
    mesh = mesh or Mesh(config.mesh_n, problem.horizon)
    system = assemble(problem)
    round_after = False
    if relaxed is None:
        relaxed = _has_set_controls(problem)
    elif not relaxed and _has_set_controls(problem):
        relaxed = True
        round_after = True
    slots = extend(system).slots if relaxed else None
    pack = _Pack(problem, mesh, slots)
    traced = _Traced(problem, mesh)
    jnp = traced.jnp
    weights = {j: _constraint_weight(problem, mesh, j)
               for j in range(1, len(problem.constraints) + 1)}
    lam0 = float(system.lambda0)

    def objective(vec, w):
        x, mixture, slacks, params = pack.unpack(vec, xp=jnp)
        value = traced.criterion(x, mixture, slacks, params)
        res = traced.residuals(x, mixture, slacks, params)
        pen = 0.0
        for j, arr in res.items():
            pen = pen + jnp.sum(weights[j] * arr * arr)
        if pack.slots is not None:
            gamma = sum(g for g, _ in mixture)
            pen = pen + mesh.dt * jnp.sum((gamma - 1.0) ** 2)
        return -(lam0 * value - w * pen)

    fg = jax.jit(jax.value_and_grad(objective))

    def fun(v, w_now):
        val, grad = fg(v, w_now)
        return float(val), np.asarray(grad, dtype=float)

    vec = pack.initial(seed=config.seed)
    bounds = pack.bounds()
    from scipy.optimize import minimize
    w = config.penalty_w0
    rounds = 0
    for r in range(config.penalty_rounds):
        res = minimize(fun, vec, args=(w,), jac=True, method="L-BFGS-B",
                       bounds=bounds,
                       options={"maxiter": 800, "ftol": 1e-14, "gtol": 1e-12})
        vec = res.x
        if not np.all(np.isfinite(vec)):
            raise SolveError("collocation iterate left the finite region")
        rounds += 1
        if r + 1 < config.penalty_rounds:
            w *= config.penalty_growth
    cand = _vec_to_candidate(pack, vec)
    _finalize(problem, system, mesh, cand, config, w, rounds)
    if round_after:
        _round_to_atoms(problem, mesh, cand)
        _finalize(problem, system, mesh, cand, config, w, rounds)
    return cand


def _vec_to_candidate(pack: _Pack, vec: np.ndarray) -> SolutionCandidate:
    x, mixture, slacks, params = pack.unpack(np.asarray(vec, dtype=float))
    cand = SolutionCandidate(mesh=pack.mesh,
                             x={k: np.asarray(v, dtype=float) for k, v in x.items()},
                             slacks={k: np.asarray(v) for k, v in slacks.items()},
                             params={k: float(v) for k, v in params.items()})
    if pack.slots is None:
        cand.u = {k: np.asarray(v, dtype=float) for k, v in mixture[0][1].items()}
    else:
        gam = np.vstack([np.asarray(g, dtype=float) for g, _ in mixture])
        # renormalize the penalty-level weight drift away
        gam = np.clip(gam, 0.0, None)
        gam /= np.maximum(gam.sum(axis=0, keepdims=True), 1e-300)
        atoms = {}
        for name in pack.problem.control_names:
            atoms[name] = np.vstack([np.asarray(u[name], dtype=float)
                                     for _, u in mixture])
        cand.relaxed = RelaxedControl(gam, atoms)
    return cand


def _round_to_atoms(problem: CanonicalProblem, mesh: Mesh,
                    cand: SolutionCandidate) -> None:
    rc = cand.relaxed
    pick = np.argmax(rc.weights, axis=0)
    cand.u = {name: rc.atoms[name][pick, np.arange(mesh.n)]
              for name in problem.control_names}
    cand.relaxed = None
    cand.x = simulate(problem, mesh, [(None, cand.u)], cand.params)
    cand.meta["rounded"] = True


def _finalize(problem: CanonicalProblem, system: LagrangeSystem, mesh: Mesh,
              cand: SolutionCandidate, config: SolverConfig, w: float,
              rounds: int) -> None:
    """Recover multipliers from the last penalty round, rebuild the adjoint,
    and close a worst-value criterion exactly."""
    ev = SystemEvaluator(system, mesh)
    if cand.relaxed is not None:
        residuals = relaxed_functionals(problem, mesh, cand)
    else:
        residuals = eval_functionals(problem, mesh, cand.x, cand.u,
                                     cand.params, cand.slacks)
    for j, c in enumerate(problem.constraints, start=1):
        arr = residuals[j]
        if c.kind in ("integral",):
            cand.lam[j] = float(-2.0 * w * arr[0])
        elif c.kind == "terminal":
            cand.lamt[j] = float(-2.0 * w * arr[0])
        elif c.kind in ("pointwise", "fredholm", "convolution", "ineq"):
            lam = -2.0 * w * np.asarray(arr, dtype=float)
            if lam.size >= 4:
                # boundary nodes of the recovered density absorb the
                # quadrature compromise; continue linearly from the interior.
                # a nodal control mention spreads it over the last two nodes,
                # since the final interval value serves both
                lam[0] = 2.0 * lam[1] - lam[2]
                if (c.kind in ("pointwise", "ineq")
                        and ex.free_vars(c.expr) & set(problem.control_names)):
                    lam[-2] = 2.0 * lam[-3] - lam[-4]
                lam[-1] = 2.0 * lam[-2] - lam[-3]
            if c.kind == "ineq":
                np.clip(lam, 0.0, None, out=lam)
                z = np.asarray(cand.slacks[c.slack], dtype=float)
                # complementarity: no mass where the bound is clearly slack
                lam[z > 1e-6 * (1.0 + np.max(z))] = 0.0
            cand.lam[j] = lam
    has_maximin = any(p.kind == "maximin" for p in problem.criteria)
    if has_maximin:
        _maximin_postpass(problem, system, mesh, cand, config)
        ev = SystemEvaluator(system, mesh)
    if ev.adjoints and not has_maximin:
        _backward_psi(ev, cand)
    if cand.relaxed is not None:
        cand.objective = relaxed_criterion(problem, mesh, cand)
    else:
        cand.objective = criterion_value(problem, mesh, cand.x, cand.u, cand.params)
    cand.meta = {"method": "collocation", "penalty_weight": w, "rounds": rounds,
                 **({} if not cand.meta else cand.meta)}


def _maximin_postpass(problem: CanonicalProblem, system: LagrangeSystem,
                      mesh: Mesh, cand: SolutionCandidate,
                      config: SolverConfig) -> None:
    """Exact closure for a worst-value criterion.

    Repeats: simulate, set the level to the worst nodal value, put the
    multiplier mass on the argmin nodes (normalized so its trapezoid equals
    lambda0), rebuild psi as its right tail, and improve the control where H
    is not flat.  The closure construction runs last so the reported
    multipliers match the final trajectory exactly.
    """
    part = next(p for p in problem.criteria if p.kind == "maximin")
    ev = SystemEvaluator(system, mesh)
    names = ("t",) + problem.state_names + problem.control_names \
        + problem.slack_names + problem.param_names
    fn = compile_expr(part.expr, names)

    def f0_nodes() -> np.ndarray:
        env = {"t": mesh.nodes}
        env.update(cand.x)
        for name in problem.control_names:
            arr = cand.controls()[name]
            env[name] = np.append(arr, arr[-1])
        env.update(cand.slacks)
        env.update({name: float(cand.params.get(name, 0.0))
                    for name in problem.param_names})
        return np.broadcast_to(fn(*[env[n] for n in names]),
                               mesh.nodes.shape).astype(float)

    def close() -> np.ndarray:
        vals = f0_nodes()
        level = float(np.min(vals))
        cand.params[MAXIMIN_PARAM] = level
        scale = 1.0 + float(np.max(np.abs(vals)))
        mask = vals - level <= 1e-10 * scale
        quad = np.full(mesh.n + 1, mesh.dt)
        quad[0] = quad[-1] = 0.5 * mesh.dt
        lam = np.zeros(mesh.n + 1)
        lam[mask] = float(system.lambda0) / np.sum(quad[mask])
        cand.lam[0] = lam
        psi = np.zeros(mesh.n + 1)
        for k in range(mesh.n - 1, -1, -1):
            psi[k] = psi[k + 1] + 0.5 * mesh.dt * (lam[k] + lam[k + 1])
        for adj in ev.adjoints:
            cand.psi[adj.state] = psi.copy()
        return psi

    for _ in range(config.maximin_passes):
        mixture = [(None, cand.u)] if cand.relaxed is None else \
            [(cand.relaxed.weights[s],
              {k: v[s] for k, v in cand.relaxed.atoms.items()})
             for s in range(cand.relaxed.slots)]
        cand.x = simulate(problem, mesh, mixture, cand.params)
        psi = close()
        flat = np.abs(psi[:-1]) + np.abs(psi[1:]) <= 1e-12
        if np.all(flat) or cand.relaxed is not None:
            break
        best, improved = maximize_H(ev, cand, config, keep_tol=1e-9)
        target = improved & ~flat
        if not np.any(target):
            break
        for name in best:
            cand.u[name] = np.where(target, best[name], cand.u[name])
    mixture = [(None, cand.u)] if cand.relaxed is None else \
        [(cand.relaxed.weights[s],
          {k: v[s] for k, v in cand.relaxed.atoms.items()})
         for s in range(cand.relaxed.slots)]
    cand.x = simulate(problem, mesh, mixture, cand.params)
    close()


def optimize_params(problem: CanonicalProblem, mesh: Mesh,
                    cand: SolutionCandidate, steps: int = 100,
                    rate: float = 0.5) -> SolutionCandidate:
    """Projected gradient ascent of S over the declared parameters."""
    system = assemble(problem)
    ev = SystemEvaluator(system, mesh)
    out = cand.copy()
    names = [n for n in problem.param_names if n != MAXIMIN_PARAM]
    if not names:
        return out
    for _ in range(steps):
        moved = 0.0
        for name in names:
            g = ev.param_gradient(out, name)
            b = problem.param(name).bounds
            new = out.params.get(name, 0.0) + rate * g
            if b is not None:
                new = min(max(new, b[0]), b[1])
            moved = max(moved, abs(new - out.params.get(name, 0.0)))
            out.params[name] = new
        if moved <= 1e-12:
            break
    return out
