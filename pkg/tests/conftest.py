"""Shared fixtures: solved corpus candidates, computed once per session."""

import pytest

from canopt.lagrange import assemble
from canopt.problem import load_bundled
from canopt.solve import SolverConfig, solve_collocation

CORPUS = ("lq", "pontryagin", "terminal", "sliding", "butkovskii",
          "convolution", "volterra", "pointwise", "isoperimetric", "maximin")


@pytest.fixture(scope="session")
def corpus_candidates():
    """name -> (problem, system, collocation candidate) for every bundled
    problem; the heavy solves are shared across test modules."""
    out = {}
    for name in CORPUS:
        prob = load_bundled(name)
        cand = solve_collocation(prob, config=SolverConfig(seed=3))
        out[name] = (prob, assemble(prob), cand)
    return out
