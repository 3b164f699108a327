import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convopf.expr import (
    Affine,
    Const,
    DomainError,
    NotExpandable,
    Poly,
    Power,
    Signomial,
    Var,
    cos,
    eval_all,
    eval_grad,
    eval_hess,
    evaluate,
    expand,
    from_terms,
    map_nodes,
    sin,
    substitute,
    variables,
)

from oracles import central_grad, central_jac
from strategies import VAR_NAMES, random_expression, random_point

x, y = Var("x"), Var("y")


def _dense(expr, pt, names):
    g = eval_grad(expr, pt)
    h = eval_hess(expr, pt)
    G = np.array([g.get(n, 0.0) for n in names])
    H = np.zeros((len(names), len(names)))
    pos = {n: i for i, n in enumerate(names)}
    for (a, b), v in h.items():
        H[pos[a], pos[b]] = H[pos[b], pos[a]] = v
    return G, H


def _as_fn(expr, names):
    return lambda v: evaluate(expr, dict(zip(names, v)))


def test_square():
    e = x**2
    assert evaluate(e, {"x": 3.0}) == 9.0
    assert eval_grad(e, {"x": 3.0}) == {"x": 6.0}
    assert eval_hess(e, {"x": 3.0}) == {("x", "x"): 2.0}


def test_sin_at_zero():
    e = sin(x)
    assert evaluate(e, {"x": 0.0}) == 0.0
    assert eval_grad(e, {"x": 0.0})["x"] == 1.0


def test_signomial_gradient_vs_central_differences():
    rng = np.random.default_rng(7)
    for _ in range(50):
        c, p1, p2 = rng.uniform(-3, 3), rng.uniform(-2, 2), rng.uniform(-2, 2)
        e = Signomial.of(c, {"x1": p1, "x2": p2})
        v = rng.uniform(0.3, 3.0, 2)
        g, _ = _dense(e, {"x1": v[0], "x2": v[1]}, ["x1", "x2"])
        fd = central_grad(_as_fn(e, ["x1", "x2"]), v)
        assert np.allclose(g, fd, rtol=1e-6, atol=1e-6 * max(1.0, np.abs(fd).max()))


def test_fractional_power_of_nonpositive_base():
    with pytest.raises(DomainError):
        evaluate(Power(x, 0.5), {"x": -1.0})
    with pytest.raises(DomainError):
        evaluate(Signomial.of(1.0, {"x": 1.5}), {"x": 0.0})
    assert evaluate(Power(x, 2.0), {"x": -3.0}) == 9.0


def test_operators_build_the_expected_tree():
    e = 3 * x * y - x / 2 + 1
    assert evaluate(e, {"x": 2.0, "y": 5.0}) == pytest.approx(30.0 - 1.0 + 1.0)
    assert variables(e) == {"x", "y"}
    assert variables(Affine.of({"a": 1.0}) + Signomial.of(2.0, {"b": 0.5})) == {"a", "b"}


def test_poly_node():
    e = Poly(x, (1.0, 0.0, -0.5), "taylor-cos")
    assert evaluate(e, {"x": 0.2}) == pytest.approx(1 - 0.02)
    assert eval_grad(e, {"x": 0.2})["x"] == pytest.approx(-0.2)
    assert eval_hess(e, {"x": 0.2})[("x", "x")] == pytest.approx(-1.0)


def test_batched_evaluation_matches_scalar():
    rng = np.random.default_rng(3)
    for _ in range(30):
        e = random_expression(rng)
        pts = [random_point(rng) for _ in range(5)]
        batch = {n: np.array([p[n] for p in pts]) for n in VAR_NAMES}
        v, g, h = eval_all(e, batch)
        for i, p in enumerate(pts):
            vs, gs, hs = eval_all(e, p)
            assert np.broadcast_to(v, (5,))[i] == pytest.approx(vs, rel=1e-12, abs=1e-12)
            for k in gs:
                assert np.broadcast_to(g[k], (5,))[i] == pytest.approx(gs[k], rel=1e-12, abs=1e-12)
            for k in hs:
                assert np.broadcast_to(h[k], (5,))[i] == pytest.approx(hs[k], rel=1e-12, abs=1e-12)


def test_gradient_and_hessian_on_1000_random_expressions():
    """Analytic derivatives agree with central differences to 1e-5 relative."""
    rng = np.random.default_rng(2024)
    names = list(VAR_NAMES)
    worst = 0.0
    for i in range(1000):
        e = random_expression(rng)
        v = rng.uniform(0.6, 1.9, len(names))
        pt = dict(zip(names, v))
        G, H = _dense(e, pt, names)
        fd_g = central_grad(_as_fn(e, names), v)
        fd_h = central_jac(lambda w: _dense(e, dict(zip(names, w)), names)[0], v)
        for a, b in ((G, fd_g), (H, fd_h)):
            err = np.abs(a - b).max() / max(1.0, np.abs(b).max())
            worst = max(worst, err)
            assert err <= 1e-5, (i, str(e), err)
    assert worst <= 1e-5


def test_hessian_keys_are_ordered_pairs():
    h = eval_hess(x * y + y**2, {"x": 1.0, "y": 2.0})
    assert set(h) == {("x", "y"), ("y", "y")}


# --------------------------------------------------------------------------
# rewriting


def test_expand_collects_like_terms():
    e = (x + y) ** 2 - x * y
    terms = expand(e)
    got = {t.monomial: t.coef for t in terms}
    assert got == {(("x", 2.0),): 1.0, (("x", 1.0), ("y", 1.0)): 1.0, (("y", 2.0),): 1.0}


def test_expand_keeps_trig_factors_of_affine_arguments():
    e = x * y * cos(Var("a") - Var("b"))
    (t,) = expand(e)
    assert t.trig == (("cos", ((("a", 1.0), ("b", -1.0)), 0.0)),)


def test_expand_rejects_nonaffine_trig_argument():
    with pytest.raises(NotExpandable):
        expand(sin(x * y))
    with pytest.raises(NotExpandable):
        expand(Power(x + y, 0.5))


def test_expand_round_trip_on_random_expressions():
    rng = np.random.default_rng(11)
    checked = 0
    for _ in range(300):
        e = random_expression(rng)
        try:
            back = from_terms(expand(e))
        except NotExpandable:
            continue
        pt = random_point(rng)
        a, b = evaluate(e, pt), evaluate(back, pt)
        # expansion can cancel large monomials, so scale by their magnitude
        scale = 1.0 + sum(abs(evaluate(t.to_expr(), pt)) for t in expand(e))
        assert abs(a - b) <= 1e-12 * scale
        checked += 1
    assert checked > 100


def test_substitute_and_map_nodes():
    e = Signomial.of(2.0, {"x": 2.0}) + sin(x)
    s = substitute(e, {"x": Var("u") + 1.0})
    assert evaluate(s, {"u": 0.5}) == pytest.approx(2 * 1.5**2 + math.sin(1.5))
    m = map_nodes(e, lambda n: Const(0.0) if n.__class__.__name__ == "Sin" else None)
    assert evaluate(m, {"x": 3.0}) == pytest.approx(18.0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gradient_property(seed):
    rng = np.random.default_rng(seed)
    e = random_expression(rng, depth=2)
    names = list(VAR_NAMES)
    v = rng.uniform(0.6, 1.9, len(names))
    G, _ = _dense(e, dict(zip(names, v)), names)
    fd = central_grad(_as_fn(e, names), v)
    assert np.abs(G - fd).max() <= 1e-5 * max(1.0, np.abs(fd).max())
