"""Independent reference computations used by the tests.

Nothing here imports the code under test beyond plain data records, so a
bug in the package cannot hide behind the same bug in its oracle.
"""

import math

import numpy as np

from convopf.case_io import BranchRecord, BusRecord, CaseData, CostRecord, GenRecord


def two_bus_case(r=0.0, x=0.1, b=0.0, pd=50.0, qd=0.0, tap=1.0, base=100.0):
    """Slack bus 1 with one generator, PQ load bus 2, one branch."""
    return CaseData(
        base,
        (BusRecord(1, "slack", 0.0, 0.0, vmin=0.9, vmax=1.1), BusRecord(2, "PQ", pd, qd, vmin=0.5, vmax=1.5)),
        (BranchRecord(1, 2, r, x, b, tap=tap),),
        (GenRecord(1, 0.0, 0.0, 0.0, 300.0, -300.0, 300.0),),
        (CostRecord(0, 0.01, 10.0, 0.0),),
        name="two",
    )


def dense_admittance(net):
    """Textbook pi-model assembly into a dense complex matrix, one branch at a time."""
    n = net.n_bus
    Y = np.zeros((n, n), dtype=complex)
    for k in range(net.n_branch):
        f, t = int(net.f_bus[k]), int(net.t_bus[k])
        y = 1.0 / complex(net.r[k], net.x[k])
        a = net.tap[k] if net.tap[k] != 0 else 1.0
        a = a * complex(math.cos(net.shift[k]), math.sin(net.shift[k]))
        ysh = 1j * net.b[k] / 2.0
        Y[f, f] += (y + ysh) / (abs(a) ** 2)
        Y[t, t] += y + ysh
        Y[f, t] += -y / a.conjugate()
        Y[t, f] += -y / a
    for k in range(n):
        Y[k, k] += complex(net.gs[k], net.bs[k])
    return Y


def two_bus_pq_solution(pd, x, v1=1.0):
    """Closed form for a lossless line feeding a unity-power-factor PQ load.

    With Q2 = 0 the receiving voltage is V2 = V1 cos(d) and the active
    balance gives sin(2d) = -2 Pd x / V1^2 (high-voltage branch).
    """
    d = -0.5 * math.asin(2.0 * pd * x / v1**2)
    return v1 * math.cos(d), d


def complex_flow(vf, vt, x):
    """Complex power leaving the from end of a lossless uncharged branch."""
    return vf * np.conj((vf - vt) / (1j * x))


def _richardson(d, h):
    """Combine central differences at h and h/2 to cancel the h^2 error term."""
    return (4.0 * d(h / 2) - d(h)) / 3.0


def central_grad(f, x, h_rel=1e-4):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = 1.0

        def d(h):
            return (f(x + h * e) - f(x - h * e)) / (2 * h)

        g[i] = _richardson(d, h_rel * (1.0 + abs(x[i])))
    return g


def central_jac(grad, x, h_rel=1e-4):
    """Finite-difference Jacobian of a gradient function (i.e. a Hessian)."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = 1.0

        def d(h):
            return (np.asarray(grad(x + h * e)) - np.asarray(grad(x - h * e))) / (2 * h)

        cols.append(_richardson(d, h_rel * (1.0 + abs(x[i]))))
    return np.array(cols).T


def flat_start_p_residual(net, G, pg_at_bus):
    """P balance at V=1, theta=0: cos=1 and sin=0 leave Pg - Pd - sum_m G_km."""
    return pg_at_bus - net.pd - G.sum(axis=1)


def sin_remainder_bound(t):
    return np.abs(t) ** 5 / 120.0


def cos_remainder_bound(t):
    return t**4 / 24.0


def min_hessian_eig_1d(second_derivative, lo, hi, n=10_000):
    x = np.linspace(lo, hi, n)
    return float(np.min(second_derivative(x)))


def small_qp_by_enumeration(w, c, A, b, lo, hi):
    """min sum w (x - c)^2 s.t. A x <= b, lo <= x <= hi, by trying every active set.

    The optimum minimises the objective on the face of its active rows, so
    the cheapest feasible face minimiser over all subsets of at most n rows
    is the answer.  Exact up to linear solves; only for tiny n.
    """
    import itertools

    n = len(w)
    rows = [(A[j], b[j]) for j in range(len(b))]
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        rows += [(e, hi[i]), (-e, -lo[i])]
    best = (np.inf, None)
    for k in range(n + 1):
        for act in itertools.combinations(range(len(rows)), k):
            G = np.array([rows[j][0] for j in act]).reshape(k, n)
            h = np.array([rows[j][1] for j in act])
            K = np.block([[np.diag(2 * w), G.T], [G, np.zeros((k, k))]])
            try:
                sol = np.linalg.solve(K, np.concatenate([2 * w * c, h]))
            except np.linalg.LinAlgError:
                continue
            xs = sol[:n]
            if all(r @ xs <= v + 1e-9 for r, v in rows):
                f = float(w @ (xs - c) ** 2)
                if f < best[0]:
                    best = (f, xs)
    return best
