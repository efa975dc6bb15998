"""Residual checks of the stationarity system against a solution candidate.

Every check reports a residual, the time of the worst violation, and the
tolerance it was held to; the overall verdict is the conjunction of the
individual pass flags.  The verifier never trusts the producer: the control
grid for the pointwise maximum test is four times finer than the solver
default, and a read-back fingerprint asserts the candidate is unmodified.

A check that does not apply to the problem at hand (no parameters, no
relaxation, and so on) is listed as passed with a note, so the report always
carries the full check roster in a fixed order.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import expr as ex
from .candidate import SolutionCandidate
from .evalctx import SystemEvaluator
from .lagrange import LagrangeSystem
from .problem import MAXIMIN_PARAM, Mesh, ProblemError, g12
from .solve import SolverConfig, _control_grid

__all__ = ["VerifyConfig", "CheckResult", "VerificationReport",
           "check_hmax", "check_stationarity", "check_param",
           "check_slackness", "check_maximin", "check_nontrivial",
           "check_weight_sum", "report"]


@dataclass(frozen=True)
class VerifyConfig:
    """Tolerances and grid resolution for the checks.

    ``ugrid`` is four times the solver default so the trial table probes
    between the producer's points.  Scale-dependent tolerances grow with the
    magnitude of the quantity under test.
    """
    hmax_tol: float = 1e-4
    stationarity_tol: float = 5e-3
    integral_tol: float = 1e-6
    param_tol: float = 1e-4
    nontrivial_floor: float = 1e-12
    ugrid: int = 4 * (SolverConfig.ugrid - 1) + 1
    active_tol: float = 1e-9


@dataclass(frozen=True)
class CheckResult:
    name: str
    residual: float
    location: float
    tol: float
    passed: bool
    note: str = ""


@dataclass
class VerificationReport:
    results: list[CheckResult] = field(default_factory=list)

    @property
    def verdict(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def nontrivial(self) -> bool:
        return all(r.passed for r in self.results if r.name == "nontrivial")

    def __getitem__(self, name: str) -> CheckResult:
        for r in self.results:
            if r.name == name:
                return r
        raise KeyError(name)

    def failed(self) -> tuple[str, ...]:
        return tuple(r.name for r in self.results if not r.passed)

    def text(self) -> str:
        rows = [("check", "residual", "at", "tol", "status")]
        for r in self.results:
            rows.append((r.name, g12(r.residual),
                         "-" if np.isnan(r.location) else g12(r.location),
                         g12(r.tol),
                         ("pass" if r.passed else "FAIL")
                         + (f"  ({r.note})" if r.note else "")))
        widths = [max(len(row[k]) for row in rows) for k in range(4)]
        lines = ["  ".join(val.ljust(w) for val, w in zip(row[:4], widths))
                 + "  " + row[4] for row in rows]
        lines.append("verdict: " + ("pass" if self.verdict else "FAIL"))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        def num(v):
            return None if np.isnan(v) else float(g12(v))
        payload = {
            "verdict": self.verdict,
            "checks": [{"name": r.name, "residual": num(r.residual),
                        "location": num(r.location), "tol": num(r.tol),
                        "passed": r.passed, "note": r.note}
                       for r in self.results],
        }
        return json.dumps(payload, indent=2) + "\n"


def _skip(name: str, why: str) -> CheckResult:
    return CheckResult(name=name, residual=0.0, location=float("nan"),
                       tol=float("nan"), passed=True, note=why)


def _worst(values: np.ndarray, t: np.ndarray) -> tuple[float, float]:
    k = int(np.argmax(values))
    return float(values[k]), float(t[k])


# --- individual checks ----------------------------------------------------

def check_hmax(ev: SystemEvaluator, cand: SolutionCandidate,
               cfg: VerifyConfig) -> CheckResult:
    """Per-interval maximum of H over a trial grid versus the candidate.

    For a relaxed candidate every active atom must attain the maximum, which
    also enforces equal H across the support.
    """
    first = [n for n in ev.problem.control_names
             if n in set(ev.system.classification.first)]
    if not first:
        return _skip("hmax", "no first-group controls")
    env = ev.env(cand)
    axes = _control_grid(ev.problem, tuple(first), cfg.ugrid)
    n = ev.mesh.n
    best = np.full(n, -np.inf)
    for combo in itertools.product(*[axes[name] for name in first]):
        trial = {name: np.full(n, v) for name, v in zip(first, combo)}
        best = np.maximum(best, ev.H_interval_values(env, trial))

    rc = cand.relaxed
    if rc is None:
        own = [ev.H_interval_values(env, {})]
        masks = [np.ones(n, dtype=bool)]
    else:
        own, masks = [], []
        for s in range(rc.slots):
            trial = {name: rc.atoms[name][s] for name in rc.atoms}
            own.append(ev.H_interval_values(env, trial))
            masks.append(rc.weights[s] > cfg.active_tol)

    scale = max(float(np.max(np.abs(v))) for v in own + [best])
    tol = cfg.hmax_tol * (1.0 + scale)
    gap = np.zeros(n)
    for vals, mask in zip(own, masks):
        gap = np.maximum(gap, np.where(mask, best - vals, 0.0))
    gap = np.clip(gap, 0.0, None)
    residual, at = _worst(gap, ev.mesh.nodes[:-1])
    return CheckResult("hmax", residual, at, tol, residual <= tol)


def check_stationarity(ev: SystemEvaluator, cand: SolutionCandidate,
                       cfg: VerifyConfig) -> CheckResult:
    """Stationarity of R on the second-group unknowns.

    Adjoint states are checked in weak form (interval residuals divided by
    the step, plus the end condition); the remaining unknowns through the
    derivative of R averaged over each interval.  Interval means are the
    natural resolution here: S is a trapezoid sum, so a node pair with zero
    net weight is invisible to it.  The tolerance is relative to the size of
    the multipliers entering R.
    """
    pieces = []
    mids = 0.5 * (ev.mesh.nodes[:-1] + ev.mesh.nodes[1:])
    if ev.adjoints:
        weak = ev.adjoint_weak_residuals(cand)
        gaps = ev.adjoint_terminal_gap(cand)
        for state, res in weak.items():
            pieces.append((np.abs(res) / ev.mesh.dt, mids))
            pieces.append((np.array([abs(gaps[state])]),
                           ev.mesh.nodes[-1:]))
    alg = ev.algebraic_stationarity(cand)
    for name, vals in alg.items():
        pieces.append((np.abs(0.5 * (vals[:-1] + vals[1:])), mids))
    if not pieces:
        return _skip("stationarity", "no second-group unknowns")
    residual, at = -1.0, float("nan")
    for vals, tt in pieces:
        r, a = _worst(vals, tt)
        if r > residual:
            residual, at = r, a
    scale = 1.0 + max([0.0]
                      + [float(np.max(np.abs(a))) for a in cand.psi.values()]
                      + [float(np.max(np.abs(np.atleast_1d(a))))
                         for a in cand.lam.values()]
                      + [abs(v) for v in cand.lamt.values()])
    tol = cfg.stationarity_tol * scale
    return CheckResult("stationarity", residual, at, tol, residual <= tol)


def check_param(ev: SystemEvaluator, cand: SolutionCandidate,
                cfg: VerifyConfig) -> CheckResult:
    """No feasible parameter variation may increase S to first order."""
    names = [n for n in ev.problem.param_names if n != MAXIMIN_PARAM]
    if not names:
        return _skip("param", "no parameters")
    scale = 1.0 + abs(ev.S_value(cand))
    residual = 0.0
    which = ""
    for name in names:
        g = ev.param_gradient(cand, name)
        a = float(cand.params.get(name, 0.0))
        bounds = ev.problem.param(name).bounds
        edge = 1e-9 * (1.0 + abs(a))
        viol = abs(g)
        if bounds is not None:
            lo, hi = bounds
            if a - lo <= edge:
                viol = max(0.0, g)      # only increases are feasible
            elif hi - a <= edge:
                viol = max(0.0, -g)
        if viol > residual:
            residual, which = viol, name
    tol = cfg.param_tol * scale
    return CheckResult("param", residual, float("nan"), tol,
                       residual <= tol, note=which)


def check_slackness(ev: SystemEvaluator, cand: SolutionCandidate,
                    cfg: VerifyConfig) -> CheckResult:
    """lam(t) >= 0 and lam(t) * f(t) = 0 for every inequality pair.

    Worst-value pairs are owned by the maximin check and skipped here.
    """
    pairs = [p for p in ev.system.slackness if p.source != "criterion"]
    if not pairs:
        return _skip("slackness", "no inequality constraints")
    env = ev.env(cand)
    residual, at = 0.0, float("nan")
    for pair in pairs:
        lam = np.broadcast_to(np.asarray(env[pair.mult], dtype=float),
                              ev.mesh.nodes.shape)
        f = np.broadcast_to(
            ev._fn(pair.expr)(*[env[n] for n in ev.argnames]),
            ev.mesh.nodes.shape)
        vals = np.maximum(np.abs(lam * f), np.maximum(0.0, -lam))
        r, a = _worst(vals, ev.mesh.nodes)
        if r > residual:
            residual, at = r, a
    scale = 1.0 + max(float(np.max(np.abs(np.asarray(env[p.mult]))))
                      for p in pairs)
    tol = cfg.integral_tol * scale
    return CheckResult("slackness", residual, at, tol, residual <= tol)


def check_maximin(ev: SystemEvaluator, cand: SolutionCandidate,
                  cfg: VerifyConfig) -> CheckResult:
    """The worst-value multiplier integrates to lam0 and is slack off the
    active set."""
    if not ev.problem.has_maximin:
        return _skip("maximin", "no worst-value criterion")
    lam = np.broadcast_to(np.asarray(cand.lam.get(0, 0.0), dtype=float),
                          ev.mesh.nodes.shape)
    closure = abs(float(np.trapezoid(lam, dx=ev.mesh.dt)) - float(cand.lam0))
    env = ev.env(cand)
    f0 = np.broadcast_to(
        ev._fn(ev.problem.maximin_part.expr)(*[env[n] for n in ev.argnames]),
        ev.mesh.nodes.shape)
    level = float(cand.params.get(MAXIMIN_PARAM, 0.0))
    slack = np.maximum(np.abs(lam * (f0 - level)), np.maximum(0.0, -lam))
    worst_slack, at = _worst(slack, ev.mesh.nodes)
    residual = max(closure, worst_slack)
    if closure >= worst_slack:
        at = float("nan")
    tol = cfg.integral_tol * (1.0 + float(np.max(np.abs(lam))))
    return CheckResult("maximin", residual, at, tol, residual <= tol)


def check_nontrivial(ev: SystemEvaluator, cand: SolutionCandidate,
                     cfg: VerifyConfig) -> CheckResult:
    """The multipliers must not vanish simultaneously."""
    mags = [abs(float(cand.lam0))]
    mags += [float(np.max(np.abs(np.asarray(v, dtype=float))))
             for v in cand.lam.values()]
    mags += [abs(float(v)) for v in cand.lamt.values()]
    mags += [float(np.max(np.abs(v))) for v in cand.psi.values()]
    top = max(mags) if mags else 0.0
    return CheckResult("nontrivial", top, float("nan"),
                       cfg.nontrivial_floor, top > cfg.nontrivial_floor)


def check_weight_sum(ev: SystemEvaluator, cand: SolutionCandidate,
                     cfg: VerifyConfig) -> CheckResult:
    """Relaxed weights are a probability vector on every interval."""
    rc = cand.relaxed
    if rc is None:
        return _skip("weight_sum", "not a relaxed candidate")
    drift = np.abs(rc.weights.sum(axis=0) - 1.0)
    neg = np.maximum(0.0, -rc.weights).max(axis=0)
    vals = np.maximum(drift, neg)
    residual, at = _worst(vals, ev.mesh.nodes[:-1])
    return CheckResult("weight_sum", residual, at, cfg.integral_tol,
                       residual <= cfg.integral_tol)


_CHECKS = (check_hmax, check_maximin, check_nontrivial, check_param,
           check_slackness, check_stationarity, check_weight_sum)


def report(system: LagrangeSystem, cand: SolutionCandidate,
           cfg: VerifyConfig | None = None) -> VerificationReport:
    """Run every applicable check; the candidate is left untouched."""
    cfg = cfg or VerifyConfig()
    before = cand.fingerprint()
    ev = SystemEvaluator(system, cand.mesh)
    out = VerificationReport()
    for chk in _CHECKS:
        out.results.append(chk(ev, cand, cfg))
    out.results.sort(key=lambda r: r.name)
    if cand.fingerprint() != before:
        raise RuntimeError("verification modified the candidate")
    return out
