"""Numeric evaluation of an assembled multiplier system on a mesh.

One evaluator serves every consumer (solvers, the verifier, reports) so that
a classical candidate and a one-atom relaxed candidate produce bit-identical
numbers.  Conventions:

- multiplier functions are nodal arrays, linear between nodes, zero outside
  [0, T]; dpsi is the central difference of psi (one-sided at the ends);
- the running value of R at the nodes is N + H, with H averaged over the
  atoms of a relaxed control (the extended integrand); delta-event terms are
  kept separate and enter S as point values;
- kernel terms integrate over tau by the same midpoint-step trapezoid used
  for constraint residuals, with the step frozen at the tau-cell midpoint;
- the interval value of H used for maximization is the sum of its two
  endpoint values (twice the trapezoid average), with the interval's control
  at both ends.
"""

from __future__ import annotations

import numpy as np

from . import expr as ex
from ._codegen import compile_expr
from .candidate import SolutionCandidate
from .lagrange import AdjointDef, LagrangeSystem, RTerm, adjoint_system
from .problem import Mesh, ProblemError

__all__ = ["SystemEvaluator"]


def _steps_at_taumid(e: ex.Expr) -> ex.Expr:
    """Freeze the tau argument of unit steps at the tau-cell midpoint."""
    if isinstance(e, (ex.Const, ex.Var)):
        return e
    if isinstance(e, ex.Neg):
        return ex.Neg(_steps_at_taumid(e.arg))
    if isinstance(e, ex.BinOp):
        return ex.BinOp(e.op, _steps_at_taumid(e.left), _steps_at_taumid(e.right))
    assert isinstance(e, ex.Call)
    args = tuple(_steps_at_taumid(a) for a in e.args)
    if e.fn == "h":
        args = (ex.substitute(args[0], "tau", ex.Var("_taumid")),)
    return ex.Call(e.fn, args)


class SystemEvaluator:
    def __init__(self, system: LagrangeSystem, mesh: Mesh):
        self.system = system
        self.problem = system.problem
        self.mesh = mesh
        p = self.problem
        mult_names: list[str] = []
        for m in system.multipliers.values():
            mult_names.append(m.name)
            if m.kind == "adjoint":
                mult_names += [f"dpsi_{m.state}", f"psi0_{m.state}"]
        self.argnames = (("t",) + p.state_names + p.control_names
                         + p.slack_names + p.param_names + tuple(mult_names))
        self._fns = {}
        self._kernel_fns = {}
        try:
            self.adjoints: tuple[AdjointDef, ...] = adjoint_system(system)
        except (ProblemError, ex.NonsmoothError):
            self.adjoints = ()

    # -- compiled expression cache ----------------------------------------

    def _fn(self, e: ex.Expr):
        key = id(e)
        if key not in self._fns:
            self._fns[key] = (compile_expr(e, self.argnames), e)
        return self._fns[key][0]

    def _kernel_fn(self, body: ex.Expr):
        key = id(body)
        if key not in self._kernel_fns:
            prepared = _steps_at_taumid(body)
            names = self.argnames + ("tau", "_taumid")
            self._kernel_fns[key] = (compile_expr(prepared, names), prepared)
        return self._kernel_fns[key][0]

    # -- candidate environments -------------------------------------------

    def env(self, cand: SolutionCandidate, controls: dict[str, np.ndarray] | None = None,
            ) -> dict[str, np.ndarray | float]:
        """Nodal bindings for every argname; interval controls are extended
        to nodes by repeating the last interval value."""
        p = self.problem
        n = self.mesh.n
        out: dict[str, np.ndarray | float] = {"t": self.mesh.nodes}
        for name in p.state_names:
            out[name] = cand.x[name]
        uint = controls if controls is not None else cand.controls()
        for name in p.control_names:
            arr = np.asarray(uint[name], dtype=float)
            out[name] = np.append(arr, arr[-1]) if arr.shape == (n,) else arr
        for name in p.slack_names:
            out[name] = cand.slacks.get(name, np.zeros(n + 1))
        for name in p.param_names:
            out[name] = float(cand.params.get(name, 0.0))
        for m in self.system.multipliers.values():
            out.update(self._bind_multiplier(m, cand))
        return out

    def _bind_multiplier(self, m, cand: SolutionCandidate) -> dict:
        n = self.mesh.n
        if m.kind == "flag":
            return {m.name: float(cand.lam0)}
        if m.kind == "adjoint":
            psi = cand.psi.get(m.state)
            if psi is None:
                psi = np.zeros(n + 1)
            dpsi = np.gradient(psi, self.mesh.dt)
            return {m.name: psi, f"dpsi_{m.state}": dpsi,
                    f"psi0_{m.state}": float(psi[0])}
        if m.kind == "terminal":
            return {m.name: float(cand.lamt.get(m.j, 0.0))}
        key = m.j if m.j is not None else 0
        v = cand.lam.get(key, 0.0)
        if m.kind == "scalar":
            return {m.name: float(v)}
        arr = np.asarray(v, dtype=float)
        if arr.ndim == 0:
            arr = np.full(n + 1, float(arr))
        return {m.name: arr}

    # -- term values -------------------------------------------------------

    def term_values(self, term: RTerm, env: dict) -> np.ndarray:
        """Running value of one non-delta term at the nodes."""
        if term.form == "kernel":
            lam = env[term.mult.name]
            return self._kernel_integral(term.kernel_body, env, lam)
        vals = self._fn(term.expr)(*[env[n] for n in self.argnames])
        return np.broadcast_to(vals, self.mesh.nodes.shape).astype(float)

    def _kernel_integral(self, body: ex.Expr, env: dict, lam: np.ndarray,
                         ) -> np.ndarray:
        """int_0^T lam(tau) * body(t, ., tau) dtau along the rows of env.

        The running axis is taken from env["t"], which may be any slice of
        the node axis; the tau quadrature always spans the whole mesh, so
        ``lam`` must stay nodal.
        """
        nodes = self.mesh.nodes
        dt = self.mesh.dt
        fn = self._kernel_fn(body)
        cols: dict[str, np.ndarray | float] = {}
        for name in self.argnames:
            v = env[name]
            cols[name] = v[:, None] if isinstance(v, np.ndarray) else v
        taul = nodes[:-1][None, :]
        taur = nodes[1:][None, :]
        taumid = taul + 0.5 * dt
        args_l = [cols[n] for n in self.argnames] + [taul, taumid]
        args_r = [cols[n] for n in self.argnames] + [taur, taumid]
        shape = (len(np.atleast_1d(env["t"])), self.mesh.n)
        bl = np.broadcast_to(fn(*args_l), shape)
        br = np.broadcast_to(fn(*args_r), shape)
        lam = np.broadcast_to(lam, nodes.shape)
        return 0.5 * dt * np.sum(lam[None, :-1] * bl + lam[None, 1:] * br, axis=1)

    def sum_values(self, terms, env: dict) -> np.ndarray:
        total = np.zeros(self.mesh.n + 1)
        for t in terms:
            if t.delta_at is None:
                total = total + self.term_values(t, env)
        return total

    # -- N, H, R, S --------------------------------------------------------

    def N_values(self, cand: SolutionCandidate) -> np.ndarray:
        return self.sum_values(self.system.N_terms, self.env(cand))

    def H_values(self, cand: SolutionCandidate) -> np.ndarray:
        """Running H at the nodes; the atom average for a relaxed control."""
        rc = cand.relaxed
        if rc is None:
            return self.sum_values(self.system.H_terms, self.env(cand))
        total = np.zeros(self.mesh.n + 1)
        wbar = np.concatenate([rc.weights, rc.weights[:, -1:]], axis=1)
        for s in range(rc.slots):
            controls = dict(cand.u)
            controls.update({k: v[s] for k, v in rc.atoms.items()})
            env = self.env(cand, controls=controls)
            total = total + wbar[s] * self.sum_values(self.system.H_terms, env)
        return total

    def R_values(self, cand: SolutionCandidate) -> np.ndarray:
        return self.N_values(cand) + self.H_values(cand)

    def delta_values(self, cand: SolutionCandidate) -> list[tuple[RTerm, float]]:
        env = self.env(cand)
        out = []
        for t in self.system.terms:
            if t.delta_at is None:
                continue
            k = self.mesh.snap(t.delta_at, "event term")
            point = {n: (env[n][k] if isinstance(env[n], np.ndarray) else env[n])
                     for n in self.argnames}
            out.append((t, float(ex.evaluate(t.expr, point))))
        return out

    def S_value(self, cand: SolutionCandidate) -> float:
        running = float(np.trapezoid(self.R_values(cand), dx=self.mesh.dt))
        return running + sum(v for _, v in self.delta_values(cand))

    # -- H as a function of trial controls ---------------------------------

    def H_nodal(self, env: dict, overrides: dict[str, float | np.ndarray]) -> np.ndarray:
        """H at the nodes with some controls replaced by trial values."""
        env2 = dict(env)
        env2.update(overrides)
        return self.sum_values(self.system.H_terms, env2)

    def _endpoint_env(self, env: dict, sel: slice) -> dict:
        """Copy of env with every node-shaped array restricted to ``sel``."""
        shape = self.mesh.nodes.shape
        out = dict(env)
        for name in self.argnames:
            v = env[name]
            if isinstance(v, np.ndarray) and v.shape == shape:
                out[name] = v[sel]
        return out

    def H_interval_values(self, env: dict,
                          controls: dict[str, np.ndarray]) -> np.ndarray:
        """(n,) interval H with each interval's trial control at both ends.

        Kernel terms keep their full tau quadrature; only the running-time
        bindings follow the interval endpoints.
        """
        out = np.zeros(self.mesh.n)
        for sel in (slice(None, -1), slice(1, None)):
            env_s = self._endpoint_env(env, sel)
            # every control is frozen at its interval value, trial or not
            for name in self.problem.control_names:
                env_s[name] = env[name][:-1]
            env_s.update({k: np.asarray(v, dtype=float)
                          for k, v in controls.items()})
            for term in self.system.H_terms:
                if term.form == "kernel":
                    out = out + self._kernel_integral(
                        term.kernel_body, env_s, env[term.mult.name])
                else:
                    vals = self._fn(term.expr)(*[env_s[n] for n in self.argnames])
                    out = out + np.broadcast_to(vals, out.shape)
        return out

    def H_interval_table(self, env: dict, table: dict[str, np.ndarray]) -> np.ndarray:
        """(G, n) array of interval H values for G trial control points.

        Row g binds each control to the scalar table[name][g] on every
        interval.
        """
        g_count = len(next(iter(table.values())))
        out = np.empty((g_count, self.mesh.n))
        for g in range(g_count):
            const = {k: np.full(self.mesh.n, float(v[g]))
                     for k, v in table.items()}
            out[g] = self.H_interval_values(env, const)
        return out

    def H_interval_at(self, env: dict, k: int, controls: dict[str, float]) -> float:
        """Interval H at one interval for one trial control point."""
        env2 = self._endpoint_env(env, slice(k, k + 2))
        for name in self.problem.control_names:
            env2[name] = float(env[name][k])
        env2.update({k2: float(v) for k2, v in controls.items()})
        total = 0.0
        for term in self.system.H_terms:
            if term.form == "kernel":
                sub = self._kernel_integral(term.kernel_body, env2,
                                            env[term.mult.name])
                total += float(np.sum(sub))
            else:
                vals = self._fn(term.expr)(*[env2[n] for n in self.argnames])
                total += float(np.sum(np.broadcast_to(vals, (2,))))
        return total

    # -- stationarity ------------------------------------------------------

    def adjoint_weak_residuals(self, cand: SolutionCandidate) -> dict[str, np.ndarray]:
        """Per-interval residual psi(t_{k+1}) - psi(t_k) - int rate dt.

        The interval integral uses the trapezoid of the nodal rate, which is
        exactly consistent with nodal multiplier mass normalized by the same
        rule (concentrated maximin multipliers included).
        """
        env = self.env(cand)
        out = {}
        for adj in self.adjoints:
            rate = self._rate_values(adj, cand, env)
            psi = env[f"psi_{adj.state}"]
            quad = 0.5 * self.mesh.dt * (rate[:-1] + rate[1:])
            out[adj.state] = np.diff(psi) - quad
        return out

    def _rate_values(self, adj: AdjointDef, cand: SolutionCandidate, env: dict,
                     ) -> np.ndarray:
        rc = cand.relaxed
        first = set(self.system.classification.first)
        if rc is not None and ex.free_vars(adj.rate) & first:
            # the rate inherits the atom average of the H terms it came from
            total = np.zeros(self.mesh.n + 1)
            wbar = np.concatenate([rc.weights, rc.weights[:, -1:]], axis=1)
            for s in range(rc.slots):
                controls = dict(cand.u)
                controls.update({k: v[s] for k, v in rc.atoms.items()})
                env_s = self.env(cand, controls=controls)
                vals = self._fn(adj.rate)(*[env_s[n] for n in self.argnames])
                total = total + wbar[s] * np.broadcast_to(vals, total.shape)
            return total
        vals = self._fn(adj.rate)(*[env[n] for n in self.argnames])
        return np.broadcast_to(vals, self.mesh.nodes.shape).astype(float)

    def adjoint_terminal_gap(self, cand: SolutionCandidate) -> dict[str, float]:
        env = self.env(cand)
        out = {}
        for adj in self.adjoints:
            k = self.mesh.snap(adj.terminal_time, "adjoint terminal")
            point = {n: (env[n][k] if isinstance(env[n], np.ndarray) else env[n])
                     for n in self.argnames}
            want = float(ex.evaluate(adj.terminal, point))
            psi = env[f"psi_{adj.state}"]
            out[adj.state] = float(psi[k]) - want
        return out

    def algebraic_stationarity(self, cand: SolutionCandidate) -> dict[str, np.ndarray]:
        """dR/dv at the nodes for second-group variables with no adjoint.

        Covers kernel-bound states and demoted controls; ode states use the
        weak form and slacks are covered by the sign/slackness conditions.
        """
        adjoint_states = {a.state for a in self.adjoints}
        skip = adjoint_states | set(self.problem.slack_names)
        env = self.env(cand)
        out = {}
        for name in self.system.classification.second:
            if name in skip:
                continue
            total = np.zeros(self.mesh.n + 1)
            relevant = False
            for term in self.system.terms:
                if term.delta_at is not None or term.form in ("dpsi", "offset"):
                    continue
                if name not in ex.free_vars(term.expr):
                    continue
                relevant = True
                if term.form == "kernel":
                    dbody = ex.diff(term.kernel_body, name)
                    lam = env[term.mult.name]
                    total = total + self._kernel_integral(dbody, env, lam)
                else:
                    d = ex.diff(term.expr, name)
                    vals = self._fn(d)(*[env[n] for n in self.argnames])
                    total = total + np.broadcast_to(vals, total.shape)
            if relevant:
                out[name] = total
        return out

    # -- parameters --------------------------------------------------------

    def param_gradient(self, cand: SolutionCandidate, name: str) -> float:
        """dS/d<param> with states, controls, and multipliers held fixed."""
        env = self.env(cand)
        rc = cand.relaxed
        first = set(self.system.classification.first)
        running = np.zeros(self.mesh.n + 1)
        for term in self.system.terms:
            if term.delta_at is not None:
                continue
            if term.form == "kernel":
                if name not in ex.free_vars(term.kernel_body):
                    continue
                dbody = ex.diff(term.kernel_body, name)
                running = running + self._kernel_integral(dbody, env, env[term.mult.name])
                continue
            if name not in ex.free_vars(term.expr):
                continue
            d = ex.diff(term.expr, name)
            if rc is not None and term in self.system.H_terms and \
                    ex.free_vars(term.expr) & first:
                wbar = np.concatenate([rc.weights, rc.weights[:, -1:]], axis=1)
                for s in range(rc.slots):
                    controls = dict(cand.u)
                    controls.update({k: v[s] for k, v in rc.atoms.items()})
                    env_s = self.env(cand, controls=controls)
                    vals = self._fn(d)(*[env_s[n] for n in self.argnames])
                    running = running + wbar[s] * np.broadcast_to(vals, running.shape)
            else:
                vals = self._fn(d)(*[env[n] for n in self.argnames])
                running = running + np.broadcast_to(vals, running.shape)
        total = float(np.trapezoid(running, dx=self.mesh.dt))
        for term, _ in self.delta_values(cand):
            if name in ex.free_vars(term.expr):
                k = self.mesh.snap(term.delta_at, "event term")
                point = {n2: (env[n2][k] if isinstance(env[n2], np.ndarray) else env[n2])
                         for n2 in self.argnames}
                total += float(ex.evaluate(ex.diff(term.expr, name), point))
        return total
