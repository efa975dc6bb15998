import warnings

import numpy as np
import pytest

from canopt.candidate import RelaxedControl, SolutionCandidate
from canopt.chatter import (ChatterPlan, build_plan, convergence_study,
                            simulate_chatter)
from canopt.problem import Mesh, ProblemError, load_bundled, parse_problem_text
from canopt.solve import solve_indirect


def _sliding_candidate(n=200):
    prob = load_bundled("sliding")
    mesh = Mesh(n, prob.horizon)
    rc = RelaxedControl(weights=np.full((2, mesh.n), 0.5),
                        atoms={"u": np.vstack([np.full(mesh.n, -1.0),
                                               np.full(mesh.n, 1.0)])})
    cand = SolutionCandidate(mesh=mesh, x={"x": np.zeros(mesh.n + 1)},
                             u={}, relaxed=rc)
    return prob, cand


# --- plan construction ----------------------------------------------------

def test_plan_half_half_alternates_equal_pieces():
    prob, cand = _sliding_candidate()
    plan = build_plan(cand, 4)
    assert plan.pieces == 8
    assert np.array_equal(plan.breaks, np.linspace(0, 1, 9))
    assert np.array_equal(plan.values["u"], np.tile([-1.0, 1.0], 4))
    assert np.array_equal(plan.slot, np.tile([0, 1], 4))


def test_plan_ratio_rule():
    prob, cand = _sliding_candidate()
    cand.relaxed.weights[0, :] = 0.25
    cand.relaxed.weights[1, :] = 0.75
    plan = build_plan(cand, 2)
    lengths = np.diff(plan.breaks)
    assert np.allclose(lengths, [0.125, 0.375, 0.125, 0.375])
    # first piece of each subinterval carries a quarter of its width
    assert lengths[0] / 0.5 == pytest.approx(0.25)
    assert lengths[2] / 0.5 == pytest.approx(0.25)


def test_plan_tiles_the_horizon_exactly():
    prob, cand = _sliding_candidate()
    rng = np.random.default_rng(2)
    g = rng.uniform(0.1, 0.9, size=cand.mesh.n)
    cand.relaxed.weights[0, :] = g
    cand.relaxed.weights[1, :] = 1 - g
    for i in (1, 3, 7, 16):
        plan = build_plan(cand, i)
        assert plan.breaks[0] == 0.0 and plan.breaks[-1] == 1.0
        assert np.all(np.diff(plan.breaks) > 0)
        # every subinterval boundary of the i-partition is a piece boundary
        for b in np.linspace(0, 1, i + 1):
            assert np.min(np.abs(plan.breaks - b)) == 0.0
        # admissibility: values are drawn from the frozen atoms only
        assert set(np.unique(plan.values["u"])) <= {-1.0, 1.0}


def test_plan_drops_zero_weight_pieces():
    prob, cand = _sliding_candidate()
    cand.relaxed.weights[0, :] = 0.0
    cand.relaxed.weights[1, :] = 1.0
    plan = build_plan(cand, 5)
    assert plan.pieces == 5
    assert np.all(plan.values["u"] == 1.0)
    tg, x = simulate_chatter(prob, plan)
    assert np.max(np.abs(x["x"] - tg)) < 1e-13


def test_plan_classical_candidate_samples_midpoints():
    prob = load_bundled("lq")
    mesh = Mesh(50, prob.horizon)
    u = {"u": np.linspace(0, 1, mesh.n, endpoint=False)}
    cand = SolutionCandidate(mesh=mesh, x={"x": np.ones(mesh.n + 1)}, u=u)
    plan = build_plan(cand, 10)
    assert plan.pieces == 10
    mids = (np.arange(10) + 0.5) / 10
    want = u["u"][np.minimum((mids / mesh.dt).astype(int), mesh.n - 1)]
    assert np.array_equal(plan.values["u"], want)


def test_control_at_is_left_closed():
    prob, cand = _sliding_candidate()
    plan = build_plan(cand, 4)
    at = plan.control_at([0.0, 0.1249, 0.125, 0.999, 1.0])
    assert np.array_equal(at["u"], [-1.0, -1.0, 1.0, 1.0, 1.0])


# --- the sliding oracle ---------------------------------------------------

def test_sliding_study_matches_the_closed_form():
    prob, cand = _sliding_candidate()
    nsub = 6
    study = convergence_study(prob, cand, i_list=(4, 8, 16, 32, 64), nsub=nsub)
    assert study.reference == pytest.approx(0.0, abs=1e-15)
    for row in study.rows:
        assert row.note == ""
        # trapezoid value of the triangle wave, worked out in closed form
        want = (1.0 / (12 * row.i ** 2)) * (1 + 1.0 / (2 * nsub ** 2))
        assert row.gap == pytest.approx(want, rel=1e-9)
        assert row.max_residual == pytest.approx(1.0 / (2 * row.i), abs=1e-14)
        assert row.state_dev == pytest.approx(1.0 / (2 * row.i), abs=1e-14)
    assert study.gap_slope() == pytest.approx(-2.0, abs=1e-6)
    assert study.residual_slope() == pytest.approx(-1.0, abs=1e-6)


def test_sliding_gap_tracks_inverse_square_within_five_percent():
    prob, cand = _sliding_candidate()
    study = convergence_study(prob, cand)
    for row in study.rows:
        assert row.gap == pytest.approx(1.0 / (12 * row.i ** 2), rel=0.05)


# --- classical and kernel paths -------------------------------------------

def test_classical_solution_needs_no_switching():
    prob = load_bundled("lq")
    cand = solve_indirect(prob)
    study = convergence_study(prob, cand, i_list=(4, 8, 16))
    for row in study.rows:
        # only sampling error remains, and it shrinks with i
        assert abs(row.criterion - cand.objective) < 0.2 / row.i
    assert study.rows[-1].gap < 5e-3


def test_kernel_state_recovered_on_the_fine_grid():
    prob = load_bundled("butkovskii")
    mesh = Mesh(100, prob.horizon)
    t = mesh.nodes
    xstar = 1 - np.exp(-t)
    cand = SolutionCandidate(mesh=mesh, x={"x": xstar.copy()},
                             u={"u": np.ones(mesh.n)})
    plan = build_plan(cand, 8)
    tg, x = simulate_chatter(prob, plan)
    assert np.max(np.abs(x["x"] - (1 - np.exp(-tg)))) < 1e-4
    study = convergence_study(prob, cand, i_list=(4, 8))
    for row in study.rows:
        assert row.note == ""
        assert row.max_residual < 1e-3
        assert row.state_dev < 1e-3


# --- failure reporting ----------------------------------------------------

def test_diverging_row_is_reported_not_raised():
    prob = parse_problem_text("""
horizon 1
state x init 3
control u box 0 1
criterion integral "-(x^2)"
constraint ode x "x*x + u"
""")
    mesh = Mesh(20, prob.horizon)
    cand = SolutionCandidate(mesh=mesh, x={"x": np.zeros(mesh.n + 1)},
                             u={"u": np.ones(mesh.n)})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        study = convergence_study(prob, cand, i_list=(4,))
    assert len(study.rows) == 1
    assert study.rows[0].note != ""
    assert not np.isfinite(study.rows[0].criterion)


def test_build_plan_rejects_zero_partitions():
    prob, cand = _sliding_candidate()
    with pytest.raises(ProblemError):
        build_plan(cand, 0)


def test_csv_has_one_row_per_partition_count():
    prob, cand = _sliding_candidate()
    study = convergence_study(prob, cand, i_list=(4, 8))
    lines = study.to_csv().strip().splitlines()
    assert lines[0] == "i,criterion,gap,max_residual,state_dev,note"
    assert len(lines) == 3
    assert lines[1].startswith("4,")
