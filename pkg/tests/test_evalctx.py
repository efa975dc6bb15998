import numpy as np
import pytest

from canopt.candidate import RelaxedControl, SolutionCandidate
from canopt.evalctx import SystemEvaluator
from canopt.lagrange import assemble
from canopt.problem import Mesh, load_bundled


def _lq_exact(n=200):
    prob = load_bundled("lq")
    mesh = Mesh(n, prob.horizon)
    t = mesh.nodes
    x = np.cosh(1 - t) / np.cosh(1)
    psi = -2 * np.sinh(1 - t) / np.cosh(1)
    u = (-np.sinh(1 - t) / np.cosh(1))[:-1]
    cand = SolutionCandidate(mesh=mesh, x={"x": x}, u={"u": u}, psi={"x": psi})
    return prob, mesh, cand


def test_lq_S_matches_optimum():
    prob, mesh, cand = _lq_exact()
    ev = SystemEvaluator(assemble(prob), mesh)
    assert ev.S_value(cand) == pytest.approx(-np.tanh(1), abs=1e-5)


def test_lq_weak_residual_small():
    prob, mesh, cand = _lq_exact()
    ev = SystemEvaluator(assemble(prob), mesh)
    res = ev.adjoint_weak_residuals(cand)["x"]
    assert res.shape == (mesh.n,)
    assert np.max(np.abs(res)) < 1e-7
    assert ev.adjoint_terminal_gap(cand)["x"] == pytest.approx(0.0, abs=1e-12)


def test_lq_interval_argmax_tracks_psi_over_two():
    prob, mesh, cand = _lq_exact(100)
    ev = SystemEvaluator(assemble(prob), mesh)
    env = ev.env(cand)
    grid = np.linspace(-4, 4, 321)
    table = ev.H_interval_table(env, {"u": grid})
    assert table.shape == (321, mesh.n)
    arg = grid[np.argmax(table, axis=0)]
    psi = cand.psi["x"]
    best = 0.25 * (psi[:-1] + psi[1:])
    assert np.max(np.abs(arg - best)) < 8 / 320


def test_interval_table_agrees_with_single_point():
    prob, mesh, cand = _lq_exact(30)
    ev = SystemEvaluator(assemble(prob), mesh)
    env = ev.env(cand)
    grid = np.array([-2.0, 0.0, 1.5])
    table = ev.H_interval_table(env, {"u": grid})
    for g in range(3):
        for k in (0, 13, 29):
            one = ev.H_interval_at(env, k, {"u": float(grid[g])})
            assert one == pytest.approx(table[g, k], abs=1e-13)


def test_kernel_H_paths_agree():
    prob = load_bundled("butkovskii")
    mesh = Mesh(25, prob.horizon)
    ev = SystemEvaluator(assemble(prob), mesh)
    t = mesh.nodes
    cand = SolutionCandidate(mesh=mesh, x={"x": 0.5 * t}, u={"u": np.ones(25)},
                             lam={1: 0.3 + 0.1 * t})
    env = ev.env(cand)
    grid = np.array([-3.0, 0.5, 2.0])
    table = ev.H_interval_table(env, {"u": grid})
    for g in range(3):
        for k in (0, 11, 24):
            one = ev.H_interval_at(env, k, {"u": float(grid[g])})
            assert one == pytest.approx(table[g, k], abs=1e-13)


def test_kernel_stationarity_formula():
    # dR/dx at the nodes is -2*(x - 1) - lam_1(t): no tau integral survives
    prob = load_bundled("butkovskii")
    mesh = Mesh(40, prob.horizon)
    ev = SystemEvaluator(assemble(prob), mesh)
    t = mesh.nodes
    lam = 0.3 * np.ones(41)
    cand = SolutionCandidate(mesh=mesh, x={"x": 0.5 * t}, u={"u": np.ones(40)},
                             lam={1: lam})
    alg = ev.algebraic_stationarity(cand)
    assert set(alg) == {"x"}
    want = -2 * (0.5 * t - 1) - 0.3
    np.testing.assert_allclose(alg["x"], want, atol=1e-13)


def test_control_stationarity_under_pointwise_link():
    # u is second group here; dR/du = psi_x + lam_2(t)
    prob = load_bundled("pointwise")
    mesh = Mesh(20, prob.horizon)
    ev = SystemEvaluator(assemble(prob), mesh)
    psi = np.linspace(1.0, 0.0, 21)
    cand = SolutionCandidate(mesh=mesh, x={"x": np.zeros(21)}, u={"u": np.zeros(20)},
                             psi={"x": psi}, lam={2: -psi})
    alg = ev.algebraic_stationarity(cand)
    assert "u" in alg
    np.testing.assert_allclose(alg["u"], np.zeros(21), atol=1e-14)


def test_delta_values_pontryagin():
    prob = load_bundled("pontryagin")
    mesh = Mesh(10, prob.horizon)
    ev = SystemEvaluator(assemble(prob), mesh)
    x = np.linspace(1.0, 0.4, 11)
    cand = SolutionCandidate(mesh=mesh, x={"x": x}, u={"u": np.zeros(10)})
    vals = ev.delta_values(cand)
    assert len(vals) == 1
    term, v = vals[0]
    assert term.delta_at == prob.horizon
    assert v == pytest.approx(0.4)


def test_relaxed_H_is_atom_average():
    prob = load_bundled("sliding")
    mesh = Mesh(16, prob.horizon)
    ev = SystemEvaluator(assemble(prob), mesh)
    psi = np.linspace(0.5, 0.0, 17)
    w = np.full((2, 16), 0.5)
    atoms = {"u": np.vstack([np.ones(16), -np.ones(16)])}
    cand = SolutionCandidate(mesh=mesh, x={"x": np.zeros(17)},
                             relaxed=RelaxedControl(w, atoms), psi={"x": psi})
    np.testing.assert_allclose(ev.H_values(cand), np.zeros(17), atol=1e-14)
    one = SolutionCandidate(mesh=mesh, x={"x": np.zeros(17)},
                            relaxed=RelaxedControl.classical({"u": np.ones(16)}),
                            psi={"x": psi})
    plain = SolutionCandidate(mesh=mesh, x={"x": np.zeros(17)},
                              u={"u": np.ones(16)}, psi={"x": psi})
    np.testing.assert_array_equal(ev.H_values(one), ev.H_values(plain))


def test_maximin_closure_gradient_identity():
    # dS/da_crit = lam0 - integral of lam_0; zero exactly at closure
    prob = load_bundled("maximin")
    mesh = Mesh(50, prob.horizon)
    ev = SystemEvaluator(assemble(prob), mesh)
    lam = np.zeros(51)
    lam[0] = 1.0 / (mesh.dt / 2)
    psi = np.zeros(51)
    psi[0] = 1.0
    cand = SolutionCandidate(mesh=mesh, x={"x": np.zeros(51)}, u={"u": np.zeros(50)},
                             psi={"x": psi}, lam={0: lam}, params={"a_crit": -0.125})
    assert np.trapezoid(lam, dx=mesh.dt) == pytest.approx(1.0, abs=1e-15)
    assert ev.param_gradient(cand, "a_crit") == pytest.approx(0.0, abs=1e-12)
    off = cand.copy()
    off.lam[0] = lam * 0.9
    assert ev.param_gradient(off, "a_crit") == pytest.approx(0.1, abs=1e-12)


def test_maximin_weak_residual_exact_with_spike():
    # psi carries the concentrated multiplier mass: the trapezoid of lam
    # over interval 0 is exactly psi[0] - psi[1]
    prob = load_bundled("maximin")
    mesh = Mesh(50, prob.horizon)
    ev = SystemEvaluator(assemble(prob), mesh)
    lam = np.zeros(51)
    lam[0] = 1.0 / (mesh.dt / 2)
    psi = np.zeros(51)
    psi[0] = 1.0
    cand = SolutionCandidate(mesh=mesh, x={"x": np.zeros(51)}, u={"u": np.zeros(50)},
                             psi={"x": psi}, lam={0: lam}, params={"a_crit": -0.125})
    res = ev.adjoint_weak_residuals(cand)["x"]
    np.testing.assert_allclose(res, np.zeros(50), atol=1e-15)


def test_S_includes_delta_terms():
    prob = load_bundled("pontryagin")
    mesh = Mesh(200, prob.horizon)
    ev = SystemEvaluator(assemble(prob), mesh)
    t = mesh.nodes
    # optimum of the terminal-reward regulator: psi(1) = 1, u = psi/2
    # x' = u, psi' = 2x; closed form via cosh/sinh with psi(1) = 1
    # Here only check S = I + terminal reward consistency on a crude candidate.
    x = 1 - 0.25 * t
    u = np.full(200, -0.25)
    cand = SolutionCandidate(mesh=mesh, x={"x": x}, u={"u": u},
                             psi={"x": np.zeros(201)})
    from canopt.problem import criterion_value
    S = ev.S_value(cand)
    I = criterion_value(prob, mesh, cand.x, cand.u)
    assert S == pytest.approx(I, abs=1e-12)
