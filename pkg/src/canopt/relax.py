"""Measure-valued controls: slot counts, exact reduction, averaged residuals.

A first-group control may take several values on one interval, each with a
weight.  Every running integrand is then replaced by its weighted average
over the atoms; nothing else in the problem changes.  Residuals and the
criterion are linear in the per-interval quadrature contributions, so the
averaged system is evaluated by averaging those contributions.

Two facts shape the code here.  The number of atoms ever needed per interval
is at most m + 1, where m counts the constraints whose running integrands
contain a first-group control, because only those m means plus the criterion
integrand react to the split.  And any heavier combination can be thinned to
m + 1 atoms without touching the constraint means or lowering the criterion
integrand; ``caratheodory_reduce`` does this in exact rational arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import expr as ex
from .candidate import SolutionCandidate
from .lagrange import LagrangeSystem
from .problem import (CanonicalProblem, Mesh, ProblemError, _NodeData,
                      assemble_residual, criterion_contribs,
                      criterion_part_value, criterion_value, eval_functionals,
                      running_contribs)

__all__ = ["RelaxedSystem", "extend", "caratheodory_reduce",
           "relaxed_functionals", "relaxed_criterion"]


@dataclass(frozen=True)
class RelaxedSystem:
    """Slot budget for a problem whose first-group controls may split."""
    system: LagrangeSystem
    slots: int
    counted: tuple[int, ...]


def extend(system: LagrangeSystem) -> RelaxedSystem:
    """Atom budget: one more than the number of constraints whose running
    integrands contain a first-group control."""
    first = set(system.classification.first)
    if not first:
        raise ProblemError("no first-group controls, nothing to relax")
    counted = []
    for j in range(1, len(system.problem.constraints) + 1):
        for t in system.terms_for(f"c{j}"):
            if t.is_running() and ex.free_vars(t.expr) & first:
                counted.append(j)
                break
    return RelaxedSystem(system=system, slots=len(counted) + 1,
                         counted=tuple(counted))


def _null_vector(rows: list[list[Fraction]]) -> list[Fraction] | None:
    """One nonzero rational vector annihilated by every row, or None."""
    rows = [list(r) for r in rows]
    ncols = len(rows[0])
    pivots: list[int] = []
    r = 0
    for c in range(ncols):
        pr = next((rr for rr in range(r, len(rows)) if rows[rr][c] != 0), None)
        if pr is None:
            continue
        rows[r], rows[pr] = rows[pr], rows[r]
        pv = rows[r][c]
        rows[r] = [v / pv for v in rows[r]]
        for rr in range(len(rows)):
            if rr != r and rows[rr][c] != 0:
                f = rows[rr][c]
                rows[rr] = [a - f * b for a, b in zip(rows[rr], rows[r])]
        pivots.append(c)
        r += 1
        if r == len(rows):
            break
    free = [c for c in range(ncols) if c not in pivots]
    if not free:
        return None
    fc = free[0]
    z = [Fraction(0)] * ncols
    z[fc] = Fraction(1)
    for rr, pc in enumerate(pivots):
        z[pc] = -rows[rr][fc]
    return z


def caratheodory_reduce(weights, f_matrix=None, f0=None) -> np.ndarray:
    """Thin a convex combination to at most m + 1 atoms.

    ``f_matrix`` holds m rows of function values at the atoms; their weighted
    means and the weight sum are preserved exactly (rational arithmetic up to
    the final float conversion).  When ``f0`` is given its mean never
    decreases.  Returns the full-length weight vector with zeros off the new
    support.
    """
    w = [Fraction(float(v)) for v in np.asarray(weights, dtype=float)]
    p = len(w)
    if min(w) < 0:
        raise ProblemError("weights must be nonnegative")
    fm = np.zeros((0, p)) if f_matrix is None else np.atleast_2d(
        np.asarray(f_matrix, dtype=float))
    if fm.shape[1] != p and fm.size:
        raise ProblemError("f_matrix columns must match the number of atoms")
    m = fm.shape[0]
    rows = [[Fraction(1)] * p]
    rows += [[Fraction(float(v)) for v in row] for row in fm]
    f0r = [Fraction(0)] * p if f0 is None else \
        [Fraction(float(v)) for v in np.asarray(f0, dtype=float)]
    support = [i for i in range(p) if w[i] > 0]
    while len(support) > m + 1:
        z = _null_vector([[rows[r][i] for i in support] for r in range(m + 1)])
        if z is None:
            break
        d = sum(f0r[i] * zi for i, zi in zip(support, z))
        if d < 0:
            z = [-zi for zi in z]
        # the weight-sum row forces z to carry both signs
        theta = min(-w[i] / zi for i, zi in zip(support, z) if zi < 0)
        for i, zi in zip(support, z):
            w[i] += theta * zi
        support = [i for i in support if w[i] != 0]
    out = np.zeros(p)
    for i in support:
        out[i] = float(w[i])
    return out


def _atom_data(problem: CanonicalProblem, mesh: Mesh, cand: SolutionCandidate,
               s: int) -> _NodeData:
    rc = cand.relaxed
    u = dict(cand.u)
    u.update({k: v[s] for k, v in rc.atoms.items()})
    return _NodeData(problem, mesh, cand.x, u, cand.params, cand.slacks)


def _guard_point_relation(what: str, e: ex.Expr, problem: CanonicalProblem,
                          rc) -> None:
    for name in ex.free_vars(e) & set(problem.control_names):
        arr = rc.atoms.get(name)
        if arr is not None and np.ptp(arr, axis=0).max() > 0:
            raise ProblemError(
                f"control '{name}' has split atoms but enters {what}, "
                "which holds pointwise; its atoms must agree")


def relaxed_functionals(problem: CanonicalProblem, mesh: Mesh,
                        cand: SolutionCandidate) -> dict[int, np.ndarray]:
    """Residuals with every running integrand averaged over the atoms.

    Matches ``eval_functionals`` exactly for a one-atom candidate.  Controls
    entering pointwise or point relations must carry identical atoms.
    """
    rc = cand.relaxed
    if rc is None:
        return eval_functionals(problem, mesh, cand.x, cand.u, cand.params,
                                cand.slacks)
    rc.validate()
    if rc.n != mesh.n:
        raise ProblemError("relaxed weights do not match the mesh")
    datas = [_atom_data(problem, mesh, cand, s) for s in range(rc.slots)]
    mean_u = dict(cand.u)
    mean_u.update(rc.mean_controls())
    mean_data = _NodeData(problem, mesh, cand.x, mean_u, cand.params, cand.slacks)
    out: dict[int, np.ndarray] = {}
    for j, c in enumerate(problem.constraints, start=1):
        contribs = [running_contribs(c, problem, d) for d in datas]
        if contribs[0] is None:
            _guard_point_relation(f"constraint {j} ({c.kind})", c.expr, problem, rc)
            out[j] = assemble_residual(c, problem, mean_data, None)
            continue
        acc = np.zeros_like(contribs[0])
        for s, arr in enumerate(contribs):
            g = rc.weights[s]
            acc = acc + arr * (g if arr.ndim == 1 else g[None, :])
        out[j] = assemble_residual(c, problem, mean_data, acc)
        if not np.all(np.isfinite(out[j])):
            raise ex.EvalError(f"constraint {j} ({c.kind}) produced non-finite residuals")
    return out


def relaxed_criterion(problem: CanonicalProblem, mesh: Mesh,
                      cand: SolutionCandidate) -> float:
    """Criterion with integral parts averaged over the atoms."""
    rc = cand.relaxed
    if rc is None:
        return criterion_value(problem, mesh, cand.x, cand.u, cand.params)
    rc.validate()
    datas = [_atom_data(problem, mesh, cand, s) for s in range(rc.slots)]
    mean_u = dict(cand.u)
    mean_u.update(rc.mean_controls())
    mean_data = _NodeData(problem, mesh, cand.x, mean_u, cand.params, {})
    total = 0.0
    for part in problem.criteria:
        if part.kind == "integral":
            for s, d in enumerate(datas):
                total += float(np.sum(rc.weights[s] * criterion_contribs(part, problem, d)))
        else:
            _guard_point_relation(f"the {part.kind} criterion", part.expr,
                                  problem, rc)
            total += criterion_part_value(part, problem, mean_data)
    return total
