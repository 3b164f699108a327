"""Primal-dual interior-point solver for smooth NLPs.

Solves::

    min f(x)  s.t.  g(x) = 0,  h(x) <= 0,  lo <= x <= hi

Inequalities and finite bounds are stacked into ``H(x) <= 0`` with slacks
``z > 0`` (``H + z = 0``) and multipliers ``mu``.  Each iteration solves the
reduced Newton system::

    [ M     Jg^T ] [dx  ]   [ -N ]
    [ Jg    0    ] [dlam] = [ -g ]

    M = Hess(L) + JH^T diag(mu/z) JH,   N = grad(L) + JH^T ((mu*H + gamma)/z)

with inertia correction on ``M``.  The centring target ``gamma`` comes from
a Mehrotra predictor step; the corrector reuses the same factorisation.
Bound rows are linear, so ``H + z = 0`` holds exactly for them and iterates
never leave the box (power terms with fractional exponents stay real).

Fixed variables (``lo == hi``) are eliminated before solving.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .compiled import CompiledModel
from .expr import eval_grad, evaluate
from .kkt import factor_kkt
from .model import NlpModel

logger = logging.getLogger(__name__)

__all__ = ["SolverOptions", "Solution", "solve", "kkt_residuals", "write_log_csv"]

OPTIMAL = "Optimal"
MAX_ITER = "MaxIter"
INFEASIBLE = "Infeasible"
NUMERICAL_FAILURE = "NumericalFailure"


@dataclass
class SolverOptions:
    tol_kkt: float = 1e-6  # stationarity
    tol_feas: float = 1e-6  # scaled primal feasibility
    tol_comp: float = 1e-6  # complementarity
    tol_cost: float = 1e-6
    max_iter: int = 200
    mu_strategy: str = "mehrotra"  # or "fixed"
    sigma_fixed: float = 0.1
    step_frac: float = 0.99995
    bound_push: float = 1e-2
    reg_init: float = 1e-8
    reg_growth: float = 10.0
    reg_max: float = 1e20
    dual_reg: float = 1e-10
    obj_scale: float | None = None  # None = gradient-based
    line_search: bool = True
    dense: bool | None = None
    merge_split_pairs: bool = False
    verbose: bool = False


@dataclass
class Solution:
    status: str
    x: dict[str, float]
    objective: float
    lam: np.ndarray  # equality multipliers
    mu: np.ndarray  # nonlinear inequality multipliers
    z_lower: dict[str, float]
    z_upper: dict[str, float]
    max_eq_residual: float
    max_ineq_violation: float
    iterations: int
    wall_time: float
    log: list[dict] = field(default_factory=list)
    info: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL

    def vector(self, names) -> np.ndarray:
        return np.array([self.x[n] for n in names])


def write_log_csv(sol: Solution, path) -> None:
    import csv

    cols = ["iter", "objective", "primal_inf", "dual_inf", "mu", "alpha_p", "alpha_d"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for row in sol.log:
            w.writerow({k: row[k] for k in cols})


def _as_model(model) -> NlpModel:
    return model if isinstance(model, NlpModel) else model.model


def solve(model, opts: SolverOptions | None = None, x0=None) -> Solution:
    """Solve ``model`` (an NlpModel or anything with a ``.model`` attribute)."""
    opts = opts or SolverOptions()
    if opts.merge_split_pairs and hasattr(model, "merged"):
        inner, where = model.merged()
        if where is not None:
            # duals refer to the rows of the merged model
            sol = solve(inner, opts, x0)
            sol.info["rows"] = "merged"
            return sol
    t_start = time.perf_counter()
    model = _as_model(model)
    cm = CompiledModel(model)
    n_all = model.n
    lo_all, hi_all = model.lower(), model.upper()
    x_all = model.x0() if x0 is None else np.asarray(x0, dtype=float).copy()
    fixed = lo_all == hi_all
    free = np.flatnonzero(~fixed)
    x_all[fixed] = lo_all[fixed]
    lo, hi = lo_all[free], hi_all[free]
    n = len(free)
    me, mi = cm.m_eq, cm.m_ineq

    # push the start strictly inside the box
    x = x_all[free].copy()
    with np.errstate(invalid="ignore"):
        span = np.where(np.isfinite(hi - lo), hi - lo, np.inf)
        push_l = np.minimum(opts.bound_push * np.maximum(1.0, np.abs(lo)), 0.5 * span)
        push_u = np.minimum(opts.bound_push * np.maximum(1.0, np.abs(hi)), 0.5 * span)
        x = np.where(np.isfinite(lo), np.maximum(x, lo + push_l), x)
        x = np.where(np.isfinite(hi), np.minimum(x, hi - push_u), x)

    iu = np.flatnonzero(np.isfinite(hi))
    il = np.flatnonzero(np.isfinite(lo))
    nu, nl = len(iu), len(il)
    m = mi + nu + nl
    JB = sp.vstack(
        [
            sp.csr_matrix((np.ones(nu), (np.arange(nu), iu)), shape=(nu, n)),
            sp.csr_matrix((-np.ones(nl), (np.arange(nl), il)), shape=(nl, n)),
        ]
    ).tocsr()

    def full(xf):
        xa = x_all.copy()
        xa[free] = xf
        return xa

    def evaluate_all(xf, need_derivs=True):
        xa = full(xf)
        vals = cm.values(xa)
        out = {"f": vals[0], "g": vals[1 : 1 + me], "h": vals[1 + me :], "xa": xa}
        if need_derivs:
            J = cm.jacobian(xa)[:, free].tocsr()
            out["df"] = np.asarray(J[0].todense()).ravel()
            out["Jg"] = J[1 : 1 + me]
            out["Jh"] = J[1 + me :]
        return out

    def stack_H(ev, xf):
        return np.concatenate([ev["h"], xf[iu] - hi[iu], lo[il] - xf[il]])

    ev = evaluate_all(x)
    if not np.isfinite(ev["f"]) or not np.all(np.isfinite(ev["g"])):
        return _fail(model, NUMERICAL_FAILURE, full(x), t_start, 0, [])
    if opts.obj_scale is not None:
        sf = opts.obj_scale
    else:
        gmax = np.abs(ev["df"]).max(initial=0.0)
        sf = min(1.0, 100.0 / gmax) if gmax > 0 else 1.0

    JH = sp.vstack([ev["Jh"], JB]).tocsr() if mi else JB
    H = stack_H(ev, x)
    z0 = 1.0
    z = np.maximum(-H, z0)
    z[mi:] = -H[mi:]  # bound rows: keep H + z = 0 exactly
    mu = np.where(1.0 / z > z0, 1.0 / z, z0)
    lam = np.zeros(me)
    f = ev["f"] * sf
    f_prev = f
    log = []
    reg_last = 0.0
    status = MAX_ITER
    small_steps = 0
    it = 0

    def conditions(ev, JH, H, z, mu, lam, f, f_prev, xf):
        Lx = ev["df"] * sf + ev["Jg"].T @ lam + JH.T @ mu
        xnorm = np.abs(xf).max(initial=0.0)
        feas = max(np.abs(ev["g"]).max(initial=0.0), H.max(initial=0.0)) / (1.0 + max(xnorm, np.abs(z).max(initial=0.0)))
        grad = np.abs(Lx).max(initial=0.0) / (1.0 + max(np.abs(lam).max(initial=0.0), np.abs(mu).max(initial=0.0)))
        comp = (z @ mu) / (1.0 + xnorm)
        cost = abs(f - f_prev) / (1.0 + abs(f_prev))
        return Lx, feas, grad, comp, cost

    Lx, feas, grad, comp, cost = conditions(ev, JH, H, z, mu, lam, f, f_prev, x)
    log.append(_log_row(0, f / sf, feas, grad, (z @ mu) / max(m, 1), 0.0, 0.0))
    while it < opts.max_iter:
        if feas < opts.tol_feas and grad < opts.tol_kkt and comp < opts.tol_comp and (it > 0 and cost < opts.tol_cost):
            status = OPTIMAL
            break
        it += 1
        weights = np.concatenate([[sf], lam, mu[:mi]])
        W = cm.hessian_full(ev["xa"], weights)[free][:, free]
        zinv = 1.0 / z
        M = (W + JH.T @ sp.diags(mu * zinv) @ JH).tocsc()

        fac, reg_last = _factor_with_inertia(M, ev["Jg"], n, me, reg_last, opts)
        if fac is None:
            status = NUMERICAL_FAILURE
            break

        def direction(target):
            N = Lx + JH.T @ (zinv * (mu * H + target))
            rhs = np.concatenate([-N, -ev["g"]])
            sol = fac.solve(rhs)
            dx, dlam = sol[:n], sol[n:]
            dz = -H - z - JH @ dx
            dmu = -mu + zinv * (target - mu * dz)
            return dx, dlam, dz, dmu

        gap = (z @ mu) / max(m, 1)
        if opts.mu_strategy == "mehrotra" and m:
            dx, dlam, dz, dmu = direction(np.zeros(m))
            ap = _max_step(z, dz, 1.0)
            ad = _max_step(mu, dmu, 1.0)
            gap_aff = ((z + ap * dz) @ (mu + ad * dmu)) / m
            sigma = min(max((gap_aff / gap) ** 3, 1e-4), 0.9) if gap > 0 else 0.1
            target = sigma * gap - dz * dmu
            # corrector can overshoot far from a solution; fall back to plain centring
            dx2, dlam2, dz2, dmu2 = direction(target)
            if not np.all(np.isfinite(dx2)):
                dx2, dlam2, dz2, dmu2 = direction(np.full(m, sigma * gap))
            dx, dlam, dz, dmu = dx2, dlam2, dz2, dmu2
        else:
            dx, dlam, dz, dmu = direction(np.full(m, opts.sigma_fixed * gap))

        if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dlam))):
            status = NUMERICAL_FAILURE
            break

        ap = _max_step(z, dz, opts.step_frac)
        ad = _max_step(mu, dmu, opts.step_frac)

        # backtracking safeguard on primal infeasibility and barrier objective
        theta0 = _infeas(ev, H, z)
        phi0 = f - gap * np.log(z).sum()
        for _ in range(12 if opts.line_search else 1):
            xn = x + ap * dx
            zn = z + ap * dz
            evn = evaluate_all(xn, need_derivs=False)
            ok = np.isfinite(evn["f"]) and np.all(np.isfinite(evn["g"])) and np.all(np.isfinite(evn["h"]))
            if ok and opts.line_search:
                Hn = stack_H(evn, xn)
                theta1 = _infeas(evn, Hn, zn)
                phi1 = evn["f"] * sf - gap * np.log(zn).sum()
                ok = theta1 <= max(1e-4, 0.9999 * theta0 + 1e-10) * 10.0 if theta1 > theta0 else True
                ok = ok and (theta1 < theta0 or phi1 <= phi0 + 1e-4 * max(1.0, abs(phi0)) or theta1 < 1e-8)
            if ok:
                break
            ap *= 0.5
        else:
            if not ok:
                xn, zn = x + ap * dx, z + ap * dz
                evn = evaluate_all(xn, need_derivs=False)
        if not (np.isfinite(evn["f"]) and np.all(np.isfinite(evn["g"]))):
            status = NUMERICAL_FAILURE
            break

        x = xn
        z = zn
        lam = lam + ad * dlam
        mu = mu + ad * dmu
        ev = evaluate_all(x)
        JH = sp.vstack([ev["Jh"], JB]).tocsr() if mi else JB
        H = stack_H(ev, x)
        # bound rows are linear, so the stepped slack equals -H up to rounding;
        # recomputing it from H can cancel to zero next to a large bound
        f_prev = f
        f = ev["f"] * sf
        Lx, feas, grad, comp, cost = conditions(ev, JH, H, z, mu, lam, f, f_prev, x)
        log.append(_log_row(it, f / sf, feas, grad, (z @ mu) / max(m, 1), ap, ad))
        if opts.verbose:
            print("%4d %16.8f %9.2e %9.2e %9.2e %9.2e %6.3f %6.3f reg=%.1e" % (it, f / sf, feas, grad, comp, cost, ap, ad, reg_last))
        small_steps = small_steps + 1 if ap < 1e-10 else 0
        if small_steps >= 10:
            status = INFEASIBLE
            break
    else:
        if feas < opts.tol_feas and grad < opts.tol_kkt and comp < opts.tol_comp and cost < opts.tol_cost:
            status = OPTIMAL

    if status == NUMERICAL_FAILURE and feas >= opts.tol_feas:
        viol = _restoration(cm, full, x, lo, hi, me)
        if viol > opts.tol_feas:
            status = INFEASIBLE
        logger.info("restoration after failure: min violation %.3e", viol)

    xa = full(x)
    bl = np.zeros(n_all)
    bu = np.zeros(n_all)
    bu[free[iu]] = mu[mi : mi + nu] / sf
    bl[free[il]] = mu[mi + nu :] / sf
    names = model.names
    res_eq = float(np.abs(ev["g"]).max(initial=0.0))
    res_in = float(np.maximum(ev["h"], 0.0).max(initial=0.0))
    return Solution(
        status=status,
        x=dict(zip(names, map(float, xa))),
        objective=float(ev["f"]),
        lam=lam / sf,
        mu=mu[:mi] / sf,
        z_lower={nm: float(v) for nm, v in zip(names, bl)},
        z_upper={nm: float(v) for nm, v in zip(names, bu)},
        max_eq_residual=res_eq,
        max_ineq_violation=res_in,
        iterations=it,
        wall_time=time.perf_counter() - t_start,
        log=log,
    )


def _restoration(cm, full, x, lo, hi, me):
    """Smallest ``|g|_inf + max(h, 0)`` reachable from ``x`` by minimising the squared violation over the box."""
    from scipy.optimize import minimize

    def fun(xf):
        xa = full(xf)
        v = cm.values(xa)
        r = np.concatenate([v[1 : 1 + me], np.maximum(v[1 + me :], 0.0)])
        J = cm.jacobian(xa)[1:][:, free_idx]
        return 0.5 * r @ r, J.T @ r

    free_idx = np.flatnonzero(full(np.zeros_like(x)) != full(np.ones_like(x)))
    start = np.clip(np.where(np.isfinite(x), x, 0.0), lo, hi)
    with np.errstate(all="ignore"):
        try:
            res = minimize(fun, start, jac=True, method="L-BFGS-B", bounds=list(zip(lo, hi)),
                           options={"maxiter": 500, "ftol": 1e-16, "gtol": 1e-12})
        except (ValueError, FloatingPointError):
            return np.inf
    v = cm.values(full(res.x))
    if not np.all(np.isfinite(v)):
        return np.inf
    return float(max(np.abs(v[1 : 1 + me]).max(initial=0.0), np.maximum(v[1 + me :], 0.0).max(initial=0.0)))


def _infeas(ev, H, z):
    return float(np.abs(ev["g"]).sum() + np.abs(H + z).sum())


def _log_row(it, f, feas, grad, gap, ap, ad):
    return {"iter": it, "objective": f, "primal_inf": feas, "dual_inf": grad, "mu": gap, "alpha_p": ap, "alpha_d": ad}


def _max_step(v, dv, frac):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, frac * np.min(-v[neg] / dv[neg])))


def _factor_with_inertia(M, Jg, n, me, reg_last, opts):
    """Factor with the smallest diagonal shift that gives inertia (n, me, 0)."""
    dc = opts.dual_reg if me else 0.0
    reg = 0.0
    for _ in range(60):
        fac = factor_kkt(M, Jg, reg, dc, dense=opts.dense)
        if fac.n_zero == 0 and fac.n_pos == n and fac.n_neg == me:
            return fac, reg
        if fac.n_zero and dc < 1e-8 and me:
            dc = 1e-8
        if reg == 0.0:
            reg = max(opts.reg_init, reg_last / 3.0) if reg_last else opts.reg_init
        else:
            reg *= opts.reg_growth
        if reg > opts.reg_max:
            break
    return None, reg


def _fail(model, status, xa, t_start, it, log):
    names = model.names
    zeros = {nm: 0.0 for nm in names}
    return Solution(status, dict(zip(names, map(float, xa))), float("nan"), np.zeros(len(model.equalities)),
                    np.zeros(len(model.inequalities)), zeros, dict(zeros), float("nan"), float("nan"), it,
                    time.perf_counter() - t_start, log)


def kkt_residuals(model, sol: Solution) -> dict[str, float]:
    """Re-evaluate first-order conditions at ``sol`` with the expression trees.

    This deliberately bypasses :class:`~convopf.compiled.CompiledModel`, so it
    is an independent check of what the solver reports.  Feasibility is the
    absolute max violation; stationarity and complementarity are max-norms
    divided by ``1 + max |multiplier|``, since multipliers of balance rows
    are nodal prices in $/h per p.u. and can be in the thousands.
    """
    if sol.info.get("rows") == "merged" and hasattr(model, "merged"):
        model = model.merged()[0]
    model = _as_model(model)
    pt = sol.x
    names = model.names
    grad = dict.fromkeys(names, 0.0)
    for k, v in eval_grad(model.objective, pt).items():
        grad[k] += v
    for lam, c in zip(sol.lam, model.equalities):
        for k, v in eval_grad(c.expr, pt).items():
            grad[k] += lam * v
    for mu, c in zip(sol.mu, model.inequalities):
        for k, v in eval_grad(c.expr, pt).items():
            grad[k] += mu * v
    for k in names:
        grad[k] += sol.z_upper[k] - sol.z_lower[k]
    free = [v.name for v in model.variables if not v.fixed]
    g_eq = [evaluate(c.expr, pt) for c in model.equalities]
    g_in = [evaluate(c.expr, pt) for c in model.inequalities]
    comp = [abs(mu * g) for mu, g in zip(sol.mu, g_in)]
    for v in model.variables:
        if v.fixed:
            continue
        if np.isfinite(v.lo):
            comp.append(abs(sol.z_lower[v.name] * (pt[v.name] - v.lo)))
        if np.isfinite(v.hi):
            comp.append(abs(sol.z_upper[v.name] * (v.hi - pt[v.name])))
    mult_scale = 1.0 + max(np.abs(sol.lam).max(initial=0.0), np.abs(sol.mu).max(initial=0.0),
                           max(sol.z_lower.values(), default=0.0), max(sol.z_upper.values(), default=0.0))
    return {
        "stationarity": float(max(abs(grad[k]) for k in free) / mult_scale) if free else 0.0,
        "feasibility": float(max([abs(g) for g in g_eq] + [max(g, 0.0) for g in g_in] + [0.0])),
        "complementarity": float(max(comp, default=0.0) / mult_scale),
    }
