import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convopf.case_io import to_network
from convopf.expr import Affine, Var, evaluate
from convopf.ipm import (
    INFEASIBLE,
    MAX_ITER,
    NUMERICAL_FAILURE,
    OPTIMAL,
    SolverOptions,
    kkt_residuals,
    solve,
    write_log_csv,
)
from convopf.model import Constraint, NlpModel, Variable
from convopf.network import build_admittance
from convopf.powerflow import bus_mismatch, dispatch_from_point, newton_raphson_pf

from oracles import dense_admittance, small_qp_by_enumeration, two_bus_case, two_bus_pq_solution
from pipelines import PAPER, convex, multistart, network, nonconvex, powerflow

x, y = Var("x"), Var("y")


def test_square_with_lower_limit():
    m = NlpModel((Variable("x", -10, 10, 3.0),), x**2, (), (Constraint(1 - x, "x>=1"),))
    sol = solve(m)
    assert sol.status == OPTIMAL
    assert sol.x["x"] == pytest.approx(1.0, abs=1e-6)
    assert sol.objective == pytest.approx(1.0, abs=1e-6)
    assert sol.mu[0] == pytest.approx(2.0, rel=1e-4)  # d/dx x^2 at 1


def test_projection_onto_line():
    m = NlpModel((Variable("x", -10, 10), Variable("y", -10, 10)), (x - 2) ** 2 + (y - 3) ** 2,
                 (Constraint(x + y - 4, "sum"),))
    sol = solve(m)
    assert sol.optimal
    assert (sol.x["x"], sol.x["y"]) == (pytest.approx(1.5, abs=1e-6), pytest.approx(2.5, abs=1e-6))
    # stationarity: 2(x-2) + lam = 0
    assert sol.lam[0] == pytest.approx(1.0, rel=1e-5)


def test_bound_multipliers():
    m = NlpModel((Variable("x", 1.0, 5.0, 3.0),), (x + 1) ** 2)
    sol = solve(m)
    assert sol.optimal and sol.x["x"] == pytest.approx(1.0, abs=1e-6)
    assert sol.z_lower["x"] == pytest.approx(4.0, rel=1e-4) and sol.z_upper["x"] == pytest.approx(0.0, abs=1e-6)


def test_fixed_variables_are_held():
    m = NlpModel((Variable("x", 2.0, 2.0), Variable("y", -5, 5, 0.0)), (y - x) ** 2)
    sol = solve(m)
    assert sol.x["x"] == 2.0 and sol.x["y"] == pytest.approx(2.0, abs=1e-6)


@pytest.mark.parametrize("case, mode", [("ieee14", "nonconvex"), ("ieee14", "convex"), ("ieee30", "convex")])
def test_kkt_certificate(case, mode):
    if mode == "nonconvex":
        model, sol, _ = nonconvex(case)
    else:
        _, model, sol, _, _ = convex(case)
    assert sol.optimal
    r = kkt_residuals(model, sol)
    assert r["stationarity"] <= 1e-6
    assert r["feasibility"] <= 1e-6
    assert r["complementarity"] <= 1e-6


def test_ieee14_objectives():
    _, sol, _ = nonconvex("ieee14")
    assert sol.objective == pytest.approx(PAPER["ieee14"]["nonconvex"], rel=5e-3)
    _, _, csol, _, _ = convex("ieee14")
    assert csol.objective == pytest.approx(PAPER["ieee14"]["convex"], rel=5e-3)


def test_max_iter():
    model, _, _ = nonconvex("ieee14")
    sol = solve(model, SolverOptions(max_iter=3))
    assert sol.status == MAX_ITER and sol.iterations == 3
    assert np.isfinite(sol.objective)


def test_infeasible_equality():
    m = NlpModel((Variable("x", 0, 1, 0.5),), x * x, (Constraint(x - 5, "e"),))
    assert solve(m).status == INFEASIBLE
    m = NlpModel((Variable("x", -10, 10, 0.5), Variable("y", -10, 10, 0.5)), x * x + y * y,
                 (Constraint(x * x + y * y + 1, "e"),))
    assert solve(m).status == INFEASIBLE


def test_infeasible_inequalities():
    m = NlpModel((Variable("x", 0, 1, 0.5), Variable("y", 0, 1, 0.5)), x + y, (),
                 (Constraint(1.5 - x, "x>=1.5"),))
    assert solve(m).status == INFEASIBLE


def test_numerical_failure_when_regularisation_is_capped():
    # indefinite Hessian on a feasible problem, but inertia correction may not exceed 1e-9
    m = NlpModel((Variable("x", -10, 10, 0.5), Variable("y", -10, 10, 0.5)), -x * x - y * y,
                 (Constraint(x * y - 1, "e"),))
    assert solve(m, SolverOptions(reg_max=1e-9)).status == NUMERICAL_FAILURE
    assert solve(m).optimal


def test_fixed_centring_strategy():
    model, ref, _ = nonconvex("ieee14")
    sol = solve(model, SolverOptions(mu_strategy="fixed", max_iter=300))
    assert sol.optimal
    assert sol.objective == pytest.approx(ref.objective, rel=1e-6)


def test_log_csv(tmp_path):
    _, sol, _ = nonconvex("ieee14")
    path = tmp_path / "log.csv"
    write_log_csv(sol, path)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["iter", "objective", "primal_inf", "dual_inf", "mu", "alpha_p", "alpha_d"]
    assert len(rows) == sol.iterations + 1
    assert [int(r["iter"]) for r in rows] == list(range(sol.iterations + 1))
    assert float(rows[-1]["objective"]) == pytest.approx(sol.objective, rel=1e-9)


def test_solve_is_deterministic():
    model, ref, _ = nonconvex("ieee14")
    again = solve(model)
    assert again.iterations == ref.iterations
    assert again.x == ref.x


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_convex_qp_matches_active_set_enumeration(seed):
    rng = np.random.default_rng(seed)
    n, k = 3, int(rng.integers(1, 4))
    names = [f"x{i}" for i in range(n)]
    w = rng.uniform(0.5, 3.0, n)
    c = rng.uniform(-3, 3, n)
    A = rng.normal(size=(k, n))
    xhat = rng.uniform(-1, 1, n)
    b = A @ xhat + rng.uniform(0.0, 1.0, k)
    obj = sum((w[i] * (Var(names[i]) - c[i]) ** 2 for i in range(n)), Affine((), 0.0))
    ineqs = tuple(Constraint(Affine(tuple(zip(names, A[j])), -b[j]), f"row{j}") for j in range(k))
    m = NlpModel(tuple(Variable(nm, -5, 5, 0.0) for nm in names), obj, (), ineqs)
    sol = solve(m)
    assert sol.optimal
    r = kkt_residuals(m, sol)
    assert max(r.values()) <= 1e-6
    f_ref, x_ref = small_qp_by_enumeration(w, c, A, b, np.full(n, -5.0), np.full(n, 5.0))
    assert sol.objective == pytest.approx(f_ref, rel=1e-6, abs=1e-7)
    assert np.abs(sol.vector(names) - x_ref).max() <= 1e-5


# --------------------------------------------------------------------------
# multistart


@pytest.mark.parametrize("case", ["ieee14", "ieee30"])
def test_random_starts_agree(case):
    runs = multistart(case)
    assert all(s.optimal for s in runs)
    obj = np.array([s.objective for s in runs])
    assert (obj.max() - obj.min()) / abs(obj.mean()) <= 1e-5
    ref = convex(case)[2].objective
    assert np.all(np.abs(obj - ref) / abs(ref) <= 1e-5)


# --------------------------------------------------------------------------
# power flow


def test_flat_zero_load():
    base = two_bus_case(r=0.0, x=0.1, pd=0.0)
    net = to_network(base)
    pf = newton_raphson_pf(net, build_admittance(net), {"Pg": np.zeros(1), "V": np.ones(2)})
    assert pf.converged and pf.iterations <= 1
    assert np.allclose(pf.V, 1.0) and np.allclose(pf.theta, 0.0)


def test_two_bus_closed_form():
    net = to_network(two_bus_case(r=0.0, x=0.1, pd=50.0))
    pf = newton_raphson_pf(net, build_admittance(net), {"Pg": np.zeros(1), "V": np.ones(2)})
    v2, d = two_bus_pq_solution(0.5, 0.1)
    assert pf.converged
    assert abs(pf.V[1] - v2) <= 1e-8 and abs(pf.theta[1] - d) <= 1e-8
    assert pf.pg[0] == pytest.approx(0.5, abs=1e-8)  # lossless line


def test_quadratic_convergence():
    net, Y = network("ieee30")
    _, sol, _ = nonconvex("ieee30")
    d = dispatch_from_point(net, sol.x)
    pf = newton_raphson_pf(net, Y, {"Pg": d["Pg"], "V": d["V"]})  # flat angles
    h = [v for v in pf.history if v > 1e-13]
    assert pf.converged and pf.iterations <= 6
    # each step at least squares the error once close enough
    assert h[-1] <= max(h[-2] ** 1.5, 1e-9)


def test_divergence_reported():
    net = to_network(two_bus_case(r=0.0, x=0.1, pd=2000.0))  # far beyond the line's transfer limit
    pf = newton_raphson_pf(net, build_admittance(net), {"Pg": np.zeros(1), "V": np.ones(2)})
    assert not pf.converged and pf.status in ("Diverged", "MaxIter")


@pytest.mark.parametrize("case", ["ieee14", "ieee57"])
def test_powerflow_at_convex_dispatch(case):
    net, Y = network(case)
    pf = powerflow(case)
    assert pf.converged and pf.mismatch <= 1e-8
    # independent residual from the dense textbook admittance
    v = pf.V * np.exp(1j * pf.theta)
    s = v * np.conj(dense_admittance(net) @ v)
    sg = np.zeros(net.n_bus, dtype=complex)
    np.add.at(sg, net.gen_bus, pf.pg + 1j * pf.qg)
    assert np.abs(sg - net.pd - 1j * net.qd - s).max() <= 1e-8
    assert np.abs(bus_mismatch(net, Y, pf.V, pf.theta, pf.pg, pf.qg)).max() <= 1e-8


def test_repriced_dispatch_close_to_published():
    net, _ = network("ieee14")
    model, _, _, rec, _ = convex("ieee14")
    pf = powerflow("ieee14")
    pt = dict(rec.x)
    pt.update({f"Pg[{i}]": pf.pg[i] for i in range(net.n_gen)})
    cost = evaluate(model.objective, pt)
    assert cost == pytest.approx(PAPER["ieee14"]["convex"], rel=5e-3)
