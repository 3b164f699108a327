"""Polar AC optimal power flow as an :class:`~convopf.model.NlpModel`.

Variables (all per-unit, angles in radians)::

    Pg[i], Qg[i]   generator i output
    V[k], theta[k] bus k voltage magnitude and angle

Objective is the total quadratic generation cost in $/h.  Each bus has one
active and one reactive balance equality written with exact sin/cos of the
angle differences.  Branches with a positive MVA rating get squared
apparent-flow limits at both terminals.
"""

from __future__ import annotations

import math

import numpy as np

from .case_io import NetworkData
from .expr import Const, Cos, Expression, Affine, Power, Product, Sin, Sum, Var
from .model import Constraint, ModelError, NlpModel, Variable
from .network import AdmittanceMatrix

__all__ = ["build_opf", "pg", "qg", "vm", "va", "ANGLE_LIMIT"]

ANGLE_LIMIT = math.pi


def pg(i: int) -> str:
    return f"Pg[{i}]"


def qg(i: int) -> str:
    return f"Qg[{i}]"


def vm(k: int) -> str:
    return f"V[{k}]"


def va(k: int) -> str:
    return f"theta[{k}]"


def _angle_diff(k: int, m: int) -> Affine:
    return Affine(((va(k), 1.0), (va(m), -1.0)))


def _flow_terms(V_f, V_t, dth, g_ff, b_ff, g_ft, b_ft):
    """(P, Q) entering a branch terminal, as expressions."""
    cos_, sin_ = Cos(dth), Sin(dth)
    VV = Product((Var(V_f), Var(V_t)))
    p = Sum((Power(Var(V_f), 2.0), Product((VV, cos_)), Product((VV, sin_))), (g_ff, g_ft, b_ft))
    q = Sum((Power(Var(V_f), 2.0), Product((VV, sin_)), Product((VV, cos_))), (-b_ff, g_ft, -b_ft))
    return p, q


def build_opf(net: NetworkData, Y: AdmittanceMatrix, angle_limit: float = ANGLE_LIMIT) -> NlpModel:
    n = net.n_bus
    G = Y.G.tocsr()
    B = Y.B.tocsr()
    if len(net.pmin) and (np.any(net.pmin > net.pmax) or np.any(net.qmin > net.qmax)):
        raise ModelError("infeasible generator bounds")
    if np.any(net.vmin > net.vmax):
        raise ModelError("infeasible voltage bounds")
    connected = set(Y.f_bus.tolist()) | set(Y.t_bus.tolist())
    isolated = sorted(set(range(n)) - connected) if n > 1 else []
    if isolated:
        raise ModelError(f"isolated bus(es) {isolated}")

    variables = []
    for i in range(net.n_gen):
        variables.append(Variable(pg(i), net.pmin[i], net.pmax[i], 0.5 * (net.pmin[i] + net.pmax[i])))
    for i in range(net.n_gen):
        variables.append(Variable(qg(i), net.qmin[i], net.qmax[i], 0.5 * (net.qmin[i] + net.qmax[i])))
    for k in range(n):
        variables.append(Variable(vm(k), net.vmin[k], net.vmax[k], float(np.clip(1.0, net.vmin[k], net.vmax[k]))))
    for k in range(n):
        lim = 0.0 if k == net.slack else angle_limit
        variables.append(Variable(va(k), -lim, lim, 0.0))

    cost_terms = []
    cost_w = []
    const = 0.0
    for i in range(net.n_gen):
        const += net.c0[i]
        if net.c1[i]:
            cost_terms.append(Var(pg(i)))
            cost_w.append(net.c1[i])
        if net.c2[i]:
            cost_terms.append(Power(Var(pg(i)), 2.0))
            cost_w.append(net.c2[i])
    cost_terms.append(Const(const))
    cost_w.append(1.0)
    objective = Sum(tuple(cost_terms), tuple(cost_w))

    gens_at = [[] for _ in range(n)]
    for i, k in enumerate(net.gen_bus):
        gens_at[k].append(i)

    eqs = []
    for kind in ("P", "Q"):
        for k in range(n):
            terms: list[Expression] = []
            w: list[float] = []
            for i in gens_at[k]:
                terms.append(Var(pg(i) if kind == "P" else qg(i)))
                w.append(1.0)
            terms.append(Const(net.pd[k] if kind == "P" else net.qd[k]))
            w.append(-1.0)
            cols = G.indices[G.indptr[k]:G.indptr[k + 1]]
            for pos, m in enumerate(cols):
                g_km = G.data[G.indptr[k] + pos]
                b_km = B.data[B.indptr[k] + pos]
                if m == k:
                    # cos(0) = 1, sin(0) = 0
                    coef = g_km if kind == "P" else -b_km
                    if coef:
                        terms.append(Power(Var(vm(k)), 2.0))
                        w.append(-coef)
                    continue
                VV = Product((Var(vm(k)), Var(vm(m))))
                dth = _angle_diff(k, m)
                if kind == "P":
                    pairs = ((g_km, Cos(dth)), (b_km, Sin(dth)))
                else:
                    pairs = ((g_km, Sin(dth)), (-b_km, Cos(dth)))
                for coef, trig in pairs:
                    if coef:
                        terms.append(Product((VV, trig)))
                        w.append(-coef)
            eqs.append(Constraint(Sum(tuple(terms), tuple(w)), f"{kind}-balance@{k}", {"bus": k, "kind": kind}))

    ineqs = []
    for j in range(net.n_branch):
        rate = net.rate_a[j]
        if rate <= 0:
            continue
        f, t = int(net.f_bus[j]), int(net.t_bus[j])
        yff, yft, ytf, ytt = Y.yff[j], Y.yft[j], Y.ytf[j], Y.ytt[j]
        for side, (a, bnode, y_self, y_mut) in (("from", (f, t, yff, yft)), ("to", (t, f, ytt, ytf))):
            p, q = _flow_terms(vm(a), vm(bnode), _angle_diff(a, bnode), y_self.real, y_self.imag, y_mut.real, y_mut.imag)
            s2 = Sum((Product((p, p)), Product((q, q)), Const(rate * rate)), (1.0, 1.0, -1.0))
            ineqs.append(Constraint(s2, f"flow@{j}:{side}", {"branch": j, "side": side}))

    meta = {"kind": "opf", "n_bus": n, "n_gen": net.n_gen, "slack": net.slack, "base_mva": net.base_mva}
    return NlpModel(tuple(variables), objective, tuple(eqs), tuple(ineqs), meta)
