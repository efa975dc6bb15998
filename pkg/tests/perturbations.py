"""Canned candidate corruptions used to probe the verifier.

Each corruption returns a modified copy of a candidate, or None when the
pattern does not apply to the given problem (no maximizing control to bump,
no adjoint to scale, and so on).  EXPECTED records, per bundled problem,
exactly which checks a corruption is built to trip; the discrimination test
asserts that the report fails those checks and no others, which is what
makes the verifier an instrument rather than a single pass bit.
"""

from __future__ import annotations

import numpy as np

from canopt.evalctx import SystemEvaluator

__all__ = ["PERTURBATIONS", "EXPECTED"]

BUMP = 0.5


def _first_group(problem, system):
    first = set(system.classification.first)
    return [n for n in problem.control_names if n in first]


def bump_control(problem, system, cand):
    """Move one interval of a maximizing control away from the H argmax.

    The interval is chosen where a downward shift costs the most H, and the
    corruption is skipped when no shift costs anything (H flat in u, as in a
    sliding regime, where the maximum condition is insensitive by nature).
    """
    first = _first_group(problem, system)
    if not first or cand.relaxed is not None:
        return None
    name = first[0]
    ev = SystemEvaluator(system, cand.mesh)
    env = ev.env(cand)
    own = ev.H_interval_values(env, {})
    down = ev.H_interval_values(env, {name: cand.u[name] - BUMP})
    drop = own - down
    k = int(np.argmax(drop))
    if drop[k] < 1e-3 * (1.0 + float(np.max(np.abs(own)))):
        return None
    out = cand.copy()
    out.u[name][k] -= BUMP
    return out


def scale_adjoint(problem, system, cand):
    """Double every adjoint; stationarity must notice."""
    if not cand.psi:
        return None
    top = max(float(np.max(np.abs(v))) for v in cand.psi.values())
    if top < 0.1:
        return None
    out = cand.copy()
    out.psi = {k: 2.0 * v for k, v in out.psi.items()}
    return out


def zero_multipliers(problem, system, cand):
    """The all-trivial multiplier set; only nontriviality can reject it."""
    out = cand.copy()
    out.lam0 = 0
    out.lam = {j: v * 0.0 for j, v in out.lam.items()}
    out.lamt = {j: 0.0 for j in out.lamt}
    out.psi = {k: 0.0 * v for k, v in out.psi.items()}
    return out


def violate_slackness(problem, system, cand):
    """Put multiplier mass where the paired factor is far from zero."""
    if problem.has_maximin and 0 in cand.lam:
        out = cand.copy()
        arr = np.array(np.broadcast_to(
            np.asarray(out.lam[0], dtype=float), (out.mesh.n + 1,)))
        arr[out.mesh.n // 2] += 0.5
        out.lam[0] = arr
        return out
    if not system.slackness:
        return None
    ev = SystemEvaluator(system, cand.mesh)
    env = ev.env(cand)
    pair = system.slackness[0]
    f = np.broadcast_to(ev._fn(pair.expr)(*[env[n] for n in ev.argnames]),
                        ev.mesh.nodes.shape)
    k = int(np.argmax(np.abs(f)))
    if abs(f[k]) < 1e-6:
        return None
    j = int(pair.mult.split("_")[1])
    out = cand.copy()
    arr = np.array(np.broadcast_to(
        np.asarray(out.lam.get(j, 0.0), dtype=float), (out.mesh.n + 1,)))
    # small mass: far above the slackness tolerance, below stationarity's
    arr[k] += 1e-3
    out.lam[j] = arr
    return out


def scale_weights(problem, system, cand):
    """Deflate the relaxed weights so they no longer sum to one."""
    if cand.relaxed is None:
        return None
    out = cand.copy()
    out.relaxed.weights *= 0.9
    return out


PERTURBATIONS = {
    "bump_control": bump_control,
    "scale_adjoint": scale_adjoint,
    "zero_multipliers": zero_multipliers,
    "violate_slackness": violate_slackness,
    "scale_weights": scale_weights,
}

# (problem, corruption) -> the exact set of checks that must fail.  Pairs
# absent from this table must come back as inapplicable (None).
EXPECTED = {
    ("lq", "bump_control"): {"hmax"},
    ("terminal", "bump_control"): {"hmax"},
    ("isoperimetric", "bump_control"): {"hmax"},
    ("butkovskii", "bump_control"): {"hmax"},
    ("convolution", "bump_control"): {"hmax"},
    ("volterra", "bump_control"): {"hmax"},
    ("pontryagin", "bump_control"): {"hmax"},
    ("maximin", "bump_control"): {"hmax"},
    ("lq", "scale_adjoint"): {"hmax", "stationarity"},
    ("terminal", "scale_adjoint"): {"hmax", "stationarity"},
    ("volterra", "scale_adjoint"): {"hmax", "stationarity"},
    ("pontryagin", "scale_adjoint"): {"hmax", "stationarity"},
    ("pointwise", "scale_adjoint"): {"stationarity"},
    ("maximin", "scale_adjoint"): {"stationarity"},
    ("maximin", "violate_slackness"): {"maximin"},
    ("sliding", "scale_weights"): {"weight_sum"},
}
for _name in ("lq", "pontryagin", "terminal", "sliding", "butkovskii",
              "convolution", "volterra", "pointwise", "isoperimetric",
              "maximin"):
    EXPECTED[(_name, "zero_multipliers")] = {"nontrivial"}
