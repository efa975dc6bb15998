import itertools

import numpy as np
import pytest

from canopt.candidate import RelaxedControl, SolutionCandidate
from canopt.lagrange import assemble
from canopt.problem import (Mesh, ProblemError, criterion_value,
                            eval_functionals, load_bundled, parse_problem_text)
from canopt.relax import (caratheodory_reduce, extend, relaxed_criterion,
                          relaxed_functionals)


# --- slot budgets ---------------------------------------------------------

def test_slot_budget_counts_u_bearing_constraints():
    assert extend(assemble(load_bundled("sliding"))).slots == 2
    assert extend(assemble(load_bundled("lq"))).slots == 2
    assert extend(assemble(load_bundled("butkovskii"))).slots == 2
    rs = extend(assemble(load_bundled("isoperimetric")))
    assert rs.slots == 3
    assert rs.counted == (1, 2)


def test_slot_budget_ignores_u_free_constraints():
    text = """
horizon 1
state x init 0
control u box -1 1
criterion integral "-(x^2)"
constraint ode x "u"
constraint integral "x - 0.1"
"""
    rs = extend(assemble(parse_problem_text(text)))
    assert rs.slots == 2
    assert rs.counted == (1,)


def test_extend_requires_first_group():
    with pytest.raises(ProblemError, match="first-group"):
        extend(assemble(load_bundled("pointwise")))


# --- averaged residuals ---------------------------------------------------

def test_one_atom_matches_classical():
    for name in ("sliding", "butkovskii", "isoperimetric"):
        prob = load_bundled(name)
        mesh = Mesh(30, prob.horizon)
        rng = np.random.default_rng(11)
        u = rng.uniform(-1, 1, 30)
        x = rng.standard_normal(31)
        plain = eval_functionals(prob, mesh, {"x": x}, {"u": u})
        cand = SolutionCandidate(mesh=mesh, x={"x": x},
                                 relaxed=RelaxedControl.classical({"u": u}))
        rel = relaxed_functionals(prob, mesh, cand)
        assert set(rel) == set(plain)
        for j in plain:
            np.testing.assert_array_equal(rel[j], plain[j])
        v1 = criterion_value(prob, mesh, {"x": x}, {"u": u})
        assert relaxed_criterion(prob, mesh, cand) == v1


def test_sliding_half_half_is_feasible_and_optimal():
    prob = load_bundled("sliding")
    mesh = Mesh(64, prob.horizon)
    w = np.full((2, 64), 0.5)
    atoms = {"u": np.vstack([np.ones(64), -np.ones(64)])}
    cand = SolutionCandidate(mesh=mesh, x={"x": np.zeros(65)},
                             relaxed=RelaxedControl(w, atoms))
    res = relaxed_functionals(prob, mesh, cand)
    assert np.max(np.abs(res[1])) == 0.0
    assert relaxed_criterion(prob, mesh, cand) == 0.0


def test_average_interpolates_between_atoms():
    # residual of the averaged system equals the weighted residual average
    # for integrands linear in the control
    prob = load_bundled("sliding")
    mesh = Mesh(20, prob.horizon)
    rng = np.random.default_rng(2)
    g = rng.random(20)
    w = np.vstack([g, 1 - g])
    atoms = {"u": np.vstack([np.ones(20), -np.ones(20)])}
    x = rng.standard_normal(21)
    cand = SolutionCandidate(mesh=mesh, x={"x": x},
                             relaxed=RelaxedControl(w, atoms))
    res = relaxed_functionals(prob, mesh, cand)[1]
    rp = eval_functionals(prob, mesh, {"x": x}, {"u": np.ones(20)})[1]
    rm = eval_functionals(prob, mesh, {"x": x}, {"u": -np.ones(20)})[1]
    # cumulative sums mix per interval; check the increments instead
    want = np.diff(rp - x) * g + np.diff(rm - x) * (1 - g) + np.diff(x)
    np.testing.assert_allclose(np.diff(res), want, atol=1e-14)


def test_kernel_average_weights_integration_columns():
    prob = load_bundled("butkovskii")
    mesh = Mesh(16, prob.horizon)
    rng = np.random.default_rng(9)
    g = rng.random(16)
    w = np.vstack([g, 1 - g])
    ua, ub = rng.uniform(-2, 2, 16), rng.uniform(-2, 2, 16)
    atoms = {"u": np.vstack([ua, ub])}
    x = rng.standard_normal(17)
    cand = SolutionCandidate(mesh=mesh, x={"x": x},
                             relaxed=RelaxedControl(w, atoms))
    res = relaxed_functionals(prob, mesh, cand)[1]
    ra = eval_functionals(prob, mesh, {"x": x}, {"u": ua})[1]
    rb = eval_functionals(prob, mesh, {"x": x}, {"u": ub})[1]
    # the kernel residual is linear in the per-column contributions, but the
    # weights multiply columns, not the assembled rows; with weights constant
    # in tau the row identity still holds
    const = SolutionCandidate(
        mesh=mesh, x={"x": x},
        relaxed=RelaxedControl(np.vstack([np.full(16, 0.25), np.full(16, 0.75)]),
                               atoms))
    resc = relaxed_functionals(prob, mesh, const)[1]
    np.testing.assert_allclose(resc, 0.25 * ra + 0.75 * rb, atol=1e-13)
    assert res.shape == (17,)


def test_point_relations_reject_split_controls():
    prob = load_bundled("pointwise")
    mesh = Mesh(8, prob.horizon)
    w = np.full((2, 8), 0.5)
    atoms = {"u": np.vstack([np.ones(8), -np.ones(8)])}
    cand = SolutionCandidate(mesh=mesh, x={"x": np.zeros(9)},
                             relaxed=RelaxedControl(w, atoms))
    with pytest.raises(ProblemError, match="pointwise|atoms must agree"):
        relaxed_functionals(prob, mesh, cand)
    same = SolutionCandidate(
        mesh=mesh, x={"x": np.zeros(9)},
        relaxed=RelaxedControl(w, {"u": np.zeros((2, 8))}))
    out = relaxed_functionals(prob, mesh, same)
    assert set(out) == {1, 2}


def test_weight_validation_is_enforced():
    prob = load_bundled("sliding")
    mesh = Mesh(8, prob.horizon)
    w = np.full((2, 8), 0.4)
    cand = SolutionCandidate(
        mesh=mesh, x={"x": np.zeros(9)},
        relaxed=RelaxedControl(w, {"u": np.zeros((2, 8))}))
    with pytest.raises(ProblemError, match="sum"):
        relaxed_functionals(prob, mesh, cand)


# --- caratheodory reduction ----------------------------------------------

def _random_instance(rng):
    m = int(rng.integers(0, 4))
    p = int(rng.integers(m + 2, 11))
    w = rng.random(p)
    w /= w.sum()
    F = rng.standard_normal((m, p))
    f0 = rng.standard_normal(p)
    return w, F, f0, m


def test_reduce_support_means_and_gain():
    rng = np.random.default_rng(20240817)
    for _ in range(100):
        w, F, f0, m = _random_instance(rng)
        w2 = caratheodory_reduce(w, F, f0)
        assert np.count_nonzero(w2) <= m + 1
        assert np.min(w2) >= 0
        assert abs(w2.sum() - 1.0) <= 1e-12
        if m:
            assert np.max(np.abs(F @ w2 - F @ w)) <= 1e-12
        assert f0 @ w2 >= f0 @ w - 1e-12


def test_reduce_exact_on_dyadic_data():
    # dyadic weights and integer values make every step exact in floats too
    w = np.array([1, 2, 3, 2, 4, 4], dtype=float) / 16
    F = np.array([[1.0, -2.0, 0.0, 3.0, 1.0, -1.0]])
    f0 = np.array([0.0, 1.0, 2.0, 3.0, 4.0, 5.0])
    w2 = caratheodory_reduce(w, F, f0)
    assert np.count_nonzero(w2) <= 2
    assert w2.sum() == 1.0
    assert float((F @ w2)[0]) == float((F @ w)[0])
    assert f0 @ w2 >= f0 @ w


def test_reduce_no_constraints_picks_best_atom():
    w = np.array([0.25, 0.5, 0.25])
    f0 = np.array([1.0, -1.0, 2.0])
    w2 = caratheodory_reduce(w, None, f0)
    np.testing.assert_array_equal(w2, [0.0, 0.0, 1.0])


def test_reduce_preserves_already_small_support():
    w = np.array([0.5, 0.5, 0.0, 0.0])
    F = np.array([[1.0, 2.0, 3.0, 4.0]])
    out = caratheodory_reduce(w, F)
    np.testing.assert_array_equal(out, w)


def _brute_best(w, F, f0):
    """Best achievable f0-mean over supports of size <= m + 1 with the same
    constrained means; small instances only."""
    m, p = F.shape
    b = np.concatenate([[1.0], F @ w])
    best = None
    for size in range(1, m + 2):
        for S in itertools.combinations(range(p), size):
            A = np.vstack([np.ones(size), F[:, S]])
            sol, res, rank, _ = np.linalg.lstsq(A, b, rcond=None)
            if np.max(np.abs(A @ sol - b)) > 1e-9 or np.min(sol) < -1e-9:
                continue
            val = float(f0[list(S)] @ sol)
            if best is None or val > best:
                best = val
    return best


def test_reduce_brute_force_bracket():
    rng = np.random.default_rng(99)
    for _ in range(20):
        m = int(rng.integers(1, 3))
        p = int(rng.integers(m + 2, 7))
        w = rng.random(p)
        w /= w.sum()
        F = rng.standard_normal((m, p))
        f0 = rng.standard_normal(p)
        w2 = caratheodory_reduce(w, F, f0)
        achieved = float(f0 @ w2)
        best = _brute_best(w, F, f0)
        assert best is not None
        assert float(f0 @ w) - 1e-9 <= achieved <= best + 1e-9
