"""Canonical problem form: parsing, rewrite to (f1, f2), residual quadrature."""

import numpy as np
import pytest

from canopt import expr as ex
from canopt import problem as pb

LQ_TEXT = """
horizon 1
state x init 1
control u box -10 10
criterion integral "-(x^2 + u^2)"
constraint ode x "u"
"""


def lq_problem():
    return pb.parse_problem_text(LQ_TEXT)


def test_build_counts():
    p = lq_problem()
    assert p.horizon == 1.0
    assert p.state_names == ("x",)
    assert p.control_names == ("u",)
    assert len(p.constraints) == 1 and p.constraints[0].kind == "ode"


def test_inequality_gets_slack():
    p = pb.parse_problem_text("""
horizon 1
state x init 0.5
control u box -1 1
criterion integral "-u^2 - x"
constraint ode x "u"
constraint ineq "x"
""")
    assert p.slack_names == ("z2",)
    assert p.constraints[1].slack == "z2"


def test_undeclared_state_rejected():
    with pytest.raises(pb.ProblemError, match="undeclared state"):
        pb.parse_problem_text("""
horizon 1
control u box -1 1
criterion integral "-u^2"
constraint ode y "u"
""")


def test_missing_init_rejected():
    with pytest.raises(pb.ProblemError, match="initial value"):
        pb.parse_problem_text("""
horizon 1
state x
control u box -1 1
criterion integral "-u^2"
constraint ode x "u"
""")


def test_undeclared_name_in_expression():
    with pytest.raises(ex.ExprError, match="undeclared"):
        pb.parse_problem_text("""
horizon 1
state x init 0
control u box -1 1
criterion integral "-q^2"
constraint ode x "u"
""")


def test_maximin_registers_level_param():
    p = pb.parse_problem_text("""
horizon 1
state x init 0
control u box -1 1
criterion maximin "x"
constraint ode x "u"
""")
    assert pb.MAXIMIN_PARAM in p.param_names
    assert p.has_maximin


def test_maximin_cannot_combine():
    with pytest.raises(pb.ProblemError, match="cannot be combined"):
        pb.parse_problem_text("""
horizon 1
state x init 0
control u box -1 1
criterion maximin "x"
criterion integral "-u^2"
constraint ode x "u"
""")


def test_to_canonical_ode():
    p = lq_problem()
    form = pb.to_canonical(p.constraints[0], p)
    # f1 = -u h(tau - t) - x0/T with x0 = 1, T = 1; f2 = x.
    assert ex.to_text(form.f1) == "-(u*h(tau - t)) - 1"
    assert form.f2 == ex.Var("x")
    assert form.tau_dependent


def test_to_canonical_integral_and_terminal():
    p = pb.parse_problem_text("""
horizon 1
control u box -1 1
criterion integral "-u^2"
constraint integral "u - 0.5"
constraint terminal "u - 0.25" at 1
""")
    f_int = pb.to_canonical(p.constraints[0], p)
    assert f_int.f1 == ex.parse("u - 0.5") and f_int.f2 is None
    assert not f_int.tau_dependent
    f_term = pb.to_canonical(p.constraints[1], p)
    assert f_term.f1 is None and f_term.f2 == ex.parse("u - 0.25")
    assert f_term.event_at == 1.0


def test_to_canonical_is_pure():
    p = lq_problem()
    a = pb.to_canonical(p.constraints[0], p)
    b = pb.to_canonical(p.constraints[0], p)
    assert a == b


def test_mesh_snap_warns():
    mesh = pb.Mesh(10, 1.0)
    with pytest.warns(UserWarning, match="snapped"):
        k = mesh.snap(0.54)
    assert k == 5
    assert mesh.snap(1.0) == 10


# --- quadrature behaviour -------------------------------------------------

def test_linear_dynamics_exact():
    p = lq_problem()
    mesh = pb.Mesh(7, 1.0)
    x = {"x": 1.0 + mesh.nodes}
    u = {"u": np.ones(7)}
    res = pb.eval_functionals(p, mesh, x, u)
    assert np.abs(res[1]).max() <= 1e-10


def test_ode_residual_tracks_defect():
    # x held at zero while u = 1: J(tau) = -tau exactly at the nodes.
    p = pb.parse_problem_text("""
horizon 1
state x init 0
control u box -2 2
criterion integral "-x^2"
constraint ode x "u"
""")
    mesh = pb.Mesh(8, 1.0)
    res = pb.eval_functionals(p, mesh, {"x": np.zeros(9)}, {"u": np.ones(8)})
    assert np.allclose(res[1], -mesh.nodes, atol=1e-12)


def test_integral_constraint_residual():
    p = pb.parse_problem_text("""
horizon 1
state x init 0.5
control u box -1 1
criterion integral "-u^2"
constraint ode x "u"
constraint integral "x - 0.5"
""")
    mesh = pb.Mesh(6, 1.0)
    res = pb.eval_functionals(p, mesh, {"x": np.full(7, 0.5)}, {"u": np.zeros(6)})
    assert abs(res[2][0]) <= 1e-12


def test_convolution_matches_equivalent_ode():
    # k(s) = exp(-s) h(s) convolved with u equals the solution of x' = u - x, x(0)=0.
    p = pb.parse_problem_text("""
horizon 1
state x
control u box 0 3
criterion integral "-(x - 1)^2"
constraint convolution x u kernel "exp(-s)*h(s)"
""")
    mesh = pb.Mesh(200, 1.0)
    t = mesh.nodes
    x_exact = 1.0 - np.exp(-t)        # response to u = 1
    res = pb.eval_functionals(p, mesh, {"x": x_exact}, {"u": np.ones(200)})
    assert np.abs(res[1]).max() <= 2e-4   # trapezoid error only


def test_quadrature_error_second_order():
    # Nonlinear rhs: residual of the exact trajectory shrinks ~4x per mesh doubling.
    p = pb.parse_problem_text("""
horizon 1
state x init 1
control u box -1 1
criterion integral "-x^2"
constraint ode x "x"
""")
    errs = []
    for n in (50, 100, 200):
        mesh = pb.Mesh(n, 1.0)
        res = pb.eval_functionals(p, mesh, {"x": np.exp(mesh.nodes)},
                                  {"u": np.zeros(n)})
        errs.append(np.abs(res[1]).max())
    assert 3.0 <= errs[0] / errs[1] <= 5.0
    assert 3.0 <= errs[1] / errs[2] <= 5.0


def test_pointwise_and_slack_residuals():
    p = pb.parse_problem_text("""
horizon 1
state x init 0
control u box -1 1
criterion integral "-x^2"
constraint ode x "u"
constraint pointwise "u - x"
constraint ineq "x"
""")
    mesh = pb.Mesh(4, 1.0)
    x = {"x": np.zeros(5)}
    u = {"u": np.zeros(4)}
    res = pb.eval_functionals(p, mesh, x, u, slacks={"z3": np.zeros(5)})
    assert np.abs(res[2]).max() == 0.0
    assert np.abs(res[3]).max() == 0.0


def test_criterion_terminal_and_maximin_values():
    p = pb.parse_problem_text("""
horizon 1
state x init 0
control u box -1 1
criterion terminal "x" at 1
constraint ode x "u"
""")
    mesh = pb.Mesh(4, 1.0)
    assert pb.criterion_value(p, mesh, {"x": mesh.nodes.copy()}, {"u": np.ones(4)}) == 1.0

    q = pb.parse_problem_text("""
horizon 1
state x init 0
control u box -1 1
criterion maximin "x - t"
constraint ode x "u"
""")
    v = pb.criterion_value(q, mesh, {"x": mesh.nodes.copy()}, {"u": np.ones(4)})
    assert v == 0.0


def test_residual_csv_layout(tmp_path):
    p = lq_problem()
    mesh = pb.Mesh(4, 1.0)
    res = pb.eval_functionals(p, mesh, {"x": 1.0 + mesh.nodes}, {"u": np.ones(4)})
    out = tmp_path / "res.csv"
    pb.residuals_to_csv(out, mesh, res)
    lines = out.read_text().splitlines()
    assert lines[0] == "tau,J_1"
    assert len(lines) == 6
