"""Symmetric indefinite factorisation of the primal-dual KKT matrix.

The matrix is ``[[W + dw*I, J^T], [J, -dc*I]]``.  Large systems go through
a sparse LDL^T (``qdldl``, AMD ordering); small ones through a dense
Bunch-Kaufman factorisation.  Both report the inertia so the caller can
regularise ``W`` until it has ``n`` positive and ``m`` negative eigenvalues.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

try:
    import qdldl
except ImportError:  # pragma: no cover - optional accelerator
    qdldl = None

__all__ = ["KKTFactor", "factor_kkt", "DENSE_LIMIT"]

DENSE_LIMIT = 200


class KKTFactor:
    def __init__(self, solve, n_pos, n_neg, n_zero):
        self._solve = solve
        self.n_pos = n_pos
        self.n_neg = n_neg
        self.n_zero = n_zero

    def solve(self, rhs):
        return self._solve(rhs)


def _assemble(W, J, dw, dc):
    n = W.shape[0]
    m = J.shape[0]
    Wd = W + dw * sp.eye(n, format="csc") if dw else W
    lower = -dc * sp.eye(m, format="csc") if m else None
    return sp.bmat([[Wd, J.T], [J, lower]], format="csc") if m else Wd.tocsc()


def _dense_factor(K):
    Kd = K.toarray() if sp.issparse(K) else np.asarray(K)
    lu, d, perm = sla.ldl(Kd, lower=True)
    # d is block diagonal with 1x1 and 2x2 blocks
    eig = []
    i = 0
    N = d.shape[0]
    while i < N:
        if i + 1 < N and d[i + 1, i] != 0.0:
            eig.extend(np.linalg.eigvalsh(d[i : i + 2, i : i + 2]))
            i += 2
        else:
            eig.append(d[i, i])
            i += 1
    eig = np.array(eig)
    scale = max(1.0, np.abs(eig).max(initial=0.0))
    tol = 1e-14 * scale
    n_pos = int((eig > tol).sum())
    n_neg = int((eig < -tol).sum())
    n_zero = N - n_pos - n_neg
    if n_zero:
        return KKTFactor(None, n_pos, n_neg, n_zero)
    lu_p = lu[perm]
    d_fac = sla.lu_factor(d)  # cheap: block diagonal

    def solve(rhs):
        y = sla.solve_triangular(lu_p, rhs[perm], lower=True, unit_diagonal=True)
        z = sla.lu_solve(d_fac, y)
        out = np.empty_like(rhs)
        out[perm] = sla.solve_triangular(lu_p.T, z, lower=False, unit_diagonal=True)
        return out

    return KKTFactor(solve, n_pos, n_neg, 0)


def _sparse_factor(K):
    try:
        F = qdldl.Solver(K)
    except (ValueError, RuntimeError):
        return KKTFactor(None, 0, 0, K.shape[0])
    D = F.factors()[1]
    if not np.all(np.isfinite(D)):
        return KKTFactor(None, 0, 0, K.shape[0])
    # pivots of the -dc block can be tiny next to fill-in pivots, so only
    # an exact (or denormal) zero counts as singular
    tiny = np.abs(D) < 1e-200
    n_pos = int((D > 0).sum() - (tiny & (D > 0)).sum())
    n_neg = int((D < 0).sum() - (tiny & (D < 0)).sum())

    def solve(rhs):
        x = F.solve(rhs)
        for _ in range(2):
            r = rhs - K @ x
            if np.abs(r).max(initial=0.0) <= 1e-14 * (1.0 + np.abs(rhs).max(initial=0.0)):
                break
            x = x + F.solve(r)
        return x

    return KKTFactor(solve, n_pos, n_neg, K.shape[0] - n_pos - n_neg)


def factor_kkt(W, J, dw=0.0, dc=0.0, dense: bool | None = None) -> KKTFactor:
    """Factor the regularised KKT matrix; ``W`` is the full symmetric block."""
    K = _assemble(sp.csc_matrix(W), sp.csc_matrix(J), dw, dc)
    if dense is None:
        dense = K.shape[0] < DENSE_LIMIT or qdldl is None
    return _dense_factor(K) if dense else _sparse_factor(K)
