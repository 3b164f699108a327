"""Vectorised evaluation of a whole :class:`~convopf.model.NlpModel`.

Every objective/constraint expression is expanded into flat terms
``coef * prod(factor)`` where a factor is ``x_i ** p`` or ``sin``/``cos`` of
an affine form in at most two variables.  Terms with the same number of
factors are stacked into arrays, so values, the Jacobian and the Hessian of
the Lagrangian come from a handful of numpy operations with a fixed sparsity
pattern.  Rows whose expressions do not expand (or have wider trig
arguments) are evaluated through the expression tree instead.

Row 0 is the objective, rows ``1 .. 1+m_eq`` the equalities, then the
inequalities.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .expr import NotExpandable, eval_all, evaluate, expand, variables
from .model import NlpModel

__all__ = ["CompiledModel"]

_POW, _SIN, _COS = 0, 1, 2


class _Bucket:
    """All terms with exactly ``F`` factors."""

    def __init__(self, F, rows, coefs, kinds, idx, pw, w, c0):
        self.F = F
        self.row = np.asarray(rows, dtype=np.int64)
        self.coef = np.asarray(coefs, dtype=float)
        T = len(rows)
        self.kind = np.asarray(kinds, dtype=np.int8).reshape(T, F)
        self.idx = np.asarray(idx, dtype=np.int64).reshape(T, F, 2)
        self.p = np.asarray(pw, dtype=float).reshape(T, F)
        self.w = np.asarray(w, dtype=float).reshape(T, F, 2)
        self.c0 = np.asarray(c0, dtype=float).reshape(T, F)
        self.is_pow = self.kind == _POW
        self.is_sin = self.kind == _SIN
        self.is_cos = self.kind == _COS

    def factors(self, xe):
        """Factor values and derivatives w.r.t. their two argument slots."""
        T, F = self.kind.shape
        u = xe[self.idx[..., 0]]
        phi = np.ones((T, F))
        d = np.zeros((T, F, 2))
        dd = np.zeros((T, F, 2, 2))
        m = self.is_pow
        if m.any():
            uu, p = u[m], self.p[m]
            with np.errstate(divide="ignore", invalid="ignore"):
                phi[m] = np.power(uu, p)
                d1 = np.where(p == 1.0, 1.0, p * np.power(uu, p - 1.0))
                d2 = np.where((p == 1.0) | (p == 0.0), 0.0,
                              np.where(p == 2.0, 2.0, p * (p - 1.0) * np.power(uu, p - 2.0)))
            d[m, 0] = d1
            dd[m, 0, 0] = d2
        t = ~m
        if t.any():
            a = (self.w[..., 0] * u + self.w[..., 1] * xe[self.idx[..., 1]] + self.c0)[t]
            s, c = np.sin(a), np.cos(a)
            is_sin = self.is_sin[t]
            f0 = np.where(is_sin, s, c)
            f1 = np.where(is_sin, c, -s)
            f2 = np.where(is_sin, -s, -c)
            wt = self.w[t]
            phi[t] = f0
            d[t] = f1[:, None] * wt
            dd[t] = f2[:, None, None] * wt[:, :, None] * wt[:, None, :]
        return phi, d, dd

    def excl(self, phi):
        T, F = phi.shape
        pre = np.ones((T, F + 1))
        suf = np.ones((T, F + 1))
        for f in range(F):
            pre[:, f + 1] = pre[:, f] * phi[:, f]
            suf[:, F - f - 1] = suf[:, F - f] * phi[:, F - f - 1]
        ex1 = pre[:, :F] * suf[:, 1:]
        ex2 = {}
        for f in range(F):
            for g in range(f + 1, F):
                prod = np.ones(T)
                for h in range(F):
                    if h != f and h != g:
                        prod = prod * phi[:, h]
                ex2[f, g] = prod
        return pre[:, F], ex1, ex2


class CompiledModel:
    def __init__(self, model: NlpModel):
        self.model = model
        self.names = model.names
        self.n = model.n
        self.m_eq = len(model.equalities)
        self.m_ineq = len(model.inequalities)
        self.n_rows = 1 + self.m_eq + self.m_ineq
        pos = model.index()
        exprs = [model.objective] + [c.expr for c in model.equalities] + [c.expr for c in model.inequalities]
        n = self.n
        pad = n  # index of the extra zero slot appended to x

        per_F: dict[int, list] = {}
        self.tree_rows: dict[int, object] = {}
        for r, e in enumerate(exprs):
            try:
                terms = expand(e)
                for t in terms:
                    if any(len(arg[0]) > 2 for _, arg in t.trig):
                        raise NotExpandable("trig argument with more than two variables")
            except NotExpandable:
                self.tree_rows[r] = e
                continue
            for t in terms:
                fac = []
                for name, p in t.monomial:
                    fac.append((_POW, pos[name], pad, p, 1.0, 0.0, 0.0))
                for kind, (ws, c0) in t.trig:
                    (i, wi), (j, wj) = ([(pos[a], b) for a, b in ws] + [(pad, 0.0)])[:2]
                    fac.append((_SIN if kind == "sin" else _COS, i, j, 0.0, wi, wj, c0))
                per_F.setdefault(len(fac), []).append((r, t.coef, fac))

        self.buckets = []
        for F in sorted(per_F):
            items = per_F[F]
            rows = [it[0] for it in items]
            coefs = [it[1] for it in items]
            flat = [f for it in items for f in it[2]]
            kinds = [f[0] for f in flat]
            idx = [(f[1], f[2]) for f in flat]
            pw = [f[3] for f in flat]
            w = [(f[4], f[5]) for f in flat]
            c0 = [f[6] for f in flat]
            self.buckets.append(_Bucket(F, rows, coefs, kinds, idx, pw, w, c0))

        self._build_patterns()

    # ------------------------------------------------------------------
    def _build_patterns(self):
        n = self.n
        jr, jc = [], []
        hr, hc, hmul = [], [], []
        self._jmask = []
        self._hplan = []
        for b in self.buckets:
            T, F = b.kind.shape
            jm = b.idx < n  # (T, F, 2)
            self._jmask.append(jm)
            rows = np.broadcast_to(b.row[:, None, None], b.idx.shape)
            jr.append(rows[jm])
            jc.append(b.idx[jm])
            plan = []
            # same-factor second derivatives: slots (0,0), (0,1), (1,1)
            for f in range(F):
                for a, c in ((0, 0), (0, 1), (1, 1)):
                    i, j = b.idx[:, f, a], b.idx[:, f, c]
                    ok = (i < n) & (j < n)
                    plan.append(("same", f, a, c, ok))
                    hr.append(np.minimum(i, j)[ok])
                    hc.append(np.maximum(i, j)[ok])
                    hmul.append(np.ones(ok.sum()))
            for f in range(F):
                for g in range(f + 1, F):
                    for a in (0, 1):
                        for c in (0, 1):
                            i, j = b.idx[:, f, a], b.idx[:, g, c]
                            ok = (i < n) & (j < n)
                            plan.append(("cross", f, g, a, c, ok))
                            hr.append(np.minimum(i, j)[ok])
                            hc.append(np.maximum(i, j)[ok])
                            hmul.append(np.where(i == j, 2.0, 1.0)[ok])
            self._hplan.append(plan)
        self._hmul = np.concatenate(hmul) if hmul else np.zeros(0)

        # tree-evaluated rows contribute through the same patterns
        self._tree_j = []
        self._tree_h = []
        pos = {nm: i for i, nm in enumerate(self.names)}
        for r, e in self.tree_rows.items():
            vs = sorted(variables(e), key=pos.get)
            self._tree_j.append((r, vs))
            jr.append(np.full(len(vs), r))
            jc.append(np.array([pos[v] for v in vs], dtype=np.int64))
            pairs = [(a, b) for k, a in enumerate(vs) for b in vs[k:]]
            self._tree_h.append((r, pairs))
            hr.append(np.array([min(pos[a], pos[b]) for a, b in pairs], dtype=np.int64))
            hc.append(np.array([max(pos[a], pos[b]) for a, b in pairs], dtype=np.int64))

        jr = np.concatenate(jr) if jr else np.zeros(0, dtype=np.int64)
        jc = np.concatenate(jc) if jc else np.zeros(0, dtype=np.int64)
        self._jac_S, self._jac_rows, self._jac_cols = _summation(jr, jc, (self.n_rows, n))
        hr = np.concatenate(hr) if hr else np.zeros(0, dtype=np.int64)
        hc = np.concatenate(hc) if hc else np.zeros(0, dtype=np.int64)
        self._hess_S, self._hess_rows, self._hess_cols = _summation(hr, hc, (n, n))

    # ------------------------------------------------------------------
    def _point(self, x):
        return {nm: float(v) for nm, v in zip(self.names, x)}

    def values(self, x) -> np.ndarray:
        xe = np.append(np.asarray(x, dtype=float), 0.0)
        out = np.zeros(self.n_rows)
        for b in self.buckets:
            phi, _, _ = b.factors(xe)
            out += np.bincount(b.row, b.coef * phi.prod(axis=1), minlength=self.n_rows)
        if self.tree_rows:
            pt = self._point(x)
            for r, e in self.tree_rows.items():
                out[r] += float(evaluate(e, pt))
        return out

    def jacobian(self, x) -> sp.csr_matrix:
        """Sparse Jacobian of all rows (objective gradient is row 0)."""
        xe = np.append(np.asarray(x, dtype=float), 0.0)
        parts = []
        for b, jm in zip(self.buckets, self._jmask):
            phi, d, _ = b.factors(xe)
            _, ex1, _ = b.excl(phi)
            contrib = (b.coef[:, None] * ex1)[:, :, None] * d
            parts.append(contrib[jm])
        if self.tree_rows:
            pt = self._point(x)
            for r, vs in self._tree_j:
                _, g, _ = eval_all(self.tree_rows[r], pt)
                parts.append(np.array([float(g.get(v, 0.0)) for v in vs]))
        data = self._jac_S @ np.concatenate(parts) if parts else np.zeros(0)
        return sp.csr_matrix((data, (self._jac_rows, self._jac_cols)), shape=(self.n_rows, self.n))

    def hessian(self, x, weights) -> sp.csr_matrix:
        """Upper triangle of ``sum_r weights[r] * Hess(row r)``."""
        weights = np.asarray(weights, dtype=float)
        xe = np.append(np.asarray(x, dtype=float), 0.0)
        parts = []
        for b, plan in zip(self.buckets, self._hplan):
            phi, d, dd = b.factors(xe)
            _, ex1, ex2 = b.excl(phi)
            cw = b.coef * weights[b.row]
            for item in plan:
                ok = item[-1]
                if item[0] == "same":
                    _, f, a, c, _ = item
                    v = cw * ex1[:, f] * dd[:, f, a, c]
                else:
                    _, f, g, a, c, _ = item
                    v = cw * ex2[f, g] * d[:, f, a] * d[:, g, c]
                parts.append(v[ok])
        vals = np.concatenate(parts) * self._hmul if parts else np.zeros(0)
        if self.tree_rows:
            pt = self._point(x)
            extra = []
            for r, pairs in self._tree_h:
                _, _, h = eval_all(self.tree_rows[r], pt)
                extra.append(weights[r] * np.array([float(h.get((a, b) if a <= b else (b, a), 0.0)) for a, b in pairs]))
            vals = np.concatenate([vals] + extra)
        data = self._hess_S @ vals
        return sp.csr_matrix((data, (self._hess_rows, self._hess_cols)), shape=(self.n, self.n))

    def hessian_full(self, x, weights) -> sp.csr_matrix:
        U = self.hessian(x, weights)
        return (U + U.T - sp.diags(U.diagonal())).tocsr()


def _summation(r, c, shape):
    """Matrix mapping contribution vectors onto unique (r, c) slots."""
    if len(r) == 0:
        return sp.csr_matrix((0, 0)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    key = r.astype(np.int64) * shape[1] + c
    uniq, inv = np.unique(key, return_inverse=True)
    S = sp.csr_matrix((np.ones(len(key)), (inv, np.arange(len(key)))), shape=(len(uniq), len(key)))
    return S, uniq // shape[1], uniq % shape[1]
