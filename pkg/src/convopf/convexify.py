"""From the polar OPF model to a signomial model with convex constraint halves.

Stages, each a model-to-model rewrite:

1. :func:`shift_positive` moves reactive outputs and bus angles onto
   nonnegative ranges (``Qtr = Qg + |min Qmin|``, ``theta + 2 pi``).
2. :func:`taylor_substitute` gives every angle difference ``theta_n - theta_m``
   an auxiliary variable ``dth`` (bounded by ``max_angle_diff``) and replaces
   ``sin``/``cos`` of it by ``d - d**3/6`` and ``1 - d**2/2``.
3. :func:`reformulate` lifts the two Taylor polynomials of each angle pair
   into their own positive variables, splits every nonlinear equality into
   two inequalities, picks power substitutions that make every term of
   every half convex and appends the inverse relations.

:func:`convexify` runs all three; :func:`recover` maps a solution of the
result back to the original variables.

Lifting the polynomials matters: ``-V_n V_m d**3`` would need an exponent
of 1/9 on ``d`` to pass the concave-term test, which is not on the default
grid, while ``-V_n V_m sn`` only needs 1/3 on each factor.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .expr import (
    Affine,
    Const,
    Cos,
    Expression,
    NotExpandable,
    Poly,
    Sin,
    Sum,
    Term,
    Var,
    evaluate,
    expand,
    from_terms,
    map_nodes,
    substitute,
)
from .ipm import Solution
from .model import Constraint, ModelError, NlpModel, Variable
from .signomial import (
    DEFAULT_GRID,
    SignomialTerm,
    TransformationPlan,
    classify_term,
    plan_transformations,
    sign_transform_inverse,
    verify_convexity_sampled,
)

logger = logging.getLogger(__name__)

__all__ = [
    "ShiftRecord",
    "ConvexModel",
    "ConvexityError",
    "shift_positive",
    "taylor_substitute",
    "reformulate",
    "convexify",
    "recover",
    "start_point",
    "random_start",
    "MAX_ANGLE_DIFF",
    "TWO_PI",
]

MAX_ANGLE_DIFF = 0.6
TWO_PI = 2.0 * math.pi
SIN_COEFFS = (0.0, 1.0, 0.0, -1.0 / 6.0)
COS_COEFFS = (1.0, 0.0, -0.5)

_INDEX = re.compile(r"\[(\d+)\]$")


class ConvexityError(ModelError):
    pass


@dataclass(frozen=True)
class ShiftRecord:
    """Original variable -> (shifted variable, offset); shifted = original + offset."""

    q_offset: float
    angle_offset: float
    forward: dict

    def shifted(self, name: str) -> str:
        return self.forward[name][0] if name in self.forward else name

    def to_original(self, point: dict) -> dict:
        back = {new: (old, off) for old, (new, off) in self.forward.items()}
        out = {}
        for k, v in point.items():
            if k in back:
                old, off = back[k]
                out[old] = v - off
            else:
                out[k] = v
        return out

    def to_shifted(self, point: dict) -> dict:
        out = {}
        for k, v in point.items():
            if k in self.forward:
                new, off = self.forward[k]
                out[new] = v + off
            else:
                out[k] = v
        return out


@dataclass(eq=False)
class ConvexModel:
    model: NlpModel
    plan: TransformationPlan
    shifts: ShiftRecord
    taylor: dict
    original: NlpModel | None = None
    inverse_mode: str = "equality"
    trace: dict = field(default_factory=dict)

    def split_pairs(self):
        """Indices of (le, ge) inequality pairs that came from one equality."""
        pairs = {}
        for i, c in enumerate(self.model.inequalities):
            j = c.meta.get("split")
            if j is not None:
                pairs.setdefault(j, [None, None])[0 if c.meta["half"] == "le" else 1] = i
        return [tuple(v) for _, v in sorted(pairs.items())]

    def merged(self):
        """Equivalent model with each split pair back as one equality row.

        On the set where the inverse relations hold, the two halves of a pair
        are negatives of each other, so keeping the ``le`` half as an
        equality describes the same feasible set without the degenerate pair
        of inequalities.  Only valid with equality inverse relations.

        Returns the model and, per row of the split model's inequalities,
        ``("eq", j)`` or ``("ineq", j)`` locating it in the merged model.
        """
        if self.inverse_mode != "equality":
            return self.model, None
        m = self.model
        eqs = list(m.equalities)
        ineqs = []
        where = [None] * len(m.inequalities)
        for le, ge in self.split_pairs():
            c = m.inequalities[le]
            where[le] = ("eq", len(eqs))
            where[ge] = ("eq-neg", len(eqs))
            eqs.append(Constraint(c.expr, c.origin.rsplit("|", 1)[0], dict(c.meta, half="eq")))
        for i, c in enumerate(m.inequalities):
            if where[i] is None:
                where[i] = ("ineq", len(ineqs))
                ineqs.append(c)
        return m.with_(equalities=tuple(eqs), inequalities=tuple(ineqs)), where

    def certify(self, n_samples: int = 10_000, seed: int = 0):
        """Sampled-Hessian check of every nonlinear term of the convex halves.

        Returns a list of ``(origin, term, result)`` for failing terms.
        """
        box = {v.name: (v.lo, v.hi) for v in self.model.variables}
        failures = []
        checked = set()
        for c in self.model.inequalities:
            if c.meta.get("untransformed") or c.meta.get("side") == "reverse":
                continue
            for t in expand(c.expr):
                if t.trig or t.is_constant() or t.is_linear():
                    continue
                st = SignomialTerm.from_term(t)
                if st in checked:
                    continue
                checked.add(st)
                sub = {n: box[n] for n in st.vars}
                res = verify_convexity_sampled(st.to_expr(), sub, n_samples=n_samples, seed=seed)
                if not res.ok:
                    failures.append((c.origin, st, res))
        return failures

    def trace_json(self) -> str:
        return json.dumps(self.trace, indent=1, sort_keys=True)


# --------------------------------------------------------------------------
# stage 1


def _is_angle(name: str) -> bool:
    return name.startswith("theta[")


def _is_reactive(name: str) -> bool:
    return name.startswith("Qg[")


def shift_positive(model: NlpModel):
    """Shift ``Qg`` by the largest ``|Qmin|`` and every angle by ``2 pi``."""
    qmins = [v.lo for v in model.variables if _is_reactive(v.name)]
    q_off = abs(min(qmins)) if qmins else 0.0
    forward = {}
    mapping = {}
    new_vars = []
    for v in model.variables:
        if _is_reactive(v.name):
            new, off = "Qtr" + v.name[2:], q_off
        elif _is_angle(v.name):
            new, off = "thtr" + v.name[5:], TWO_PI
        else:
            new_vars.append(v)
            continue
        forward[v.name] = (new, off)
        mapping[v.name] = Affine(((new, 1.0),), -off)
        new_vars.append(Variable(new, v.lo + off, v.hi + off, v.init + off))

    def sub(e):
        return substitute(e, mapping)

    m = NlpModel(
        tuple(new_vars),
        sub(model.objective),
        tuple(Constraint(sub(c.expr), c.origin, c.meta) for c in model.equalities),
        tuple(Constraint(sub(c.expr), c.origin, c.meta) for c in model.inequalities),
        dict(model.meta, shifted=True),
    )
    return m, ShiftRecord(q_off, TWO_PI, forward)


# --------------------------------------------------------------------------
# stage 2


def _label(name: str, fallback: int) -> str:
    m = _INDEX.search(name)
    return m.group(1) if m else str(fallback)


def taylor_substitute(model: NlpModel, max_angle_diff: float = MAX_ANGLE_DIFF) -> NlpModel:
    """Replace sin/cos of angle differences by their truncated series."""
    if not 0.0 < max_angle_diff < math.sqrt(2.0):
        raise ValueError("max_angle_diff must lie in (0, sqrt(2))")
    pos = model.index()
    aux: dict[tuple[str, str], str] = {}

    def pair_of(arg: Expression):
        try:
            ts = expand(arg)
        except NotExpandable:
            raise ModelError(f"unsupported trigonometric argument {arg}")
        lin = {}
        const = 0.0
        for t in ts:
            if t.is_constant():
                const += t.coef
            elif t.is_linear():
                lin[t.monomial[0][0]] = t.coef
            else:
                raise ModelError(f"unsupported trigonometric argument {arg}")
        if abs(const) > 1e-9 or len(lin) != 2 or sorted(lin.values()) != [-1.0, 1.0]:
            raise ModelError(f"trigonometric argument is not an angle difference: {arg}")
        a = next(n for n, w in lin.items() if w == 1.0)
        b = next(n for n, w in lin.items() if w == -1.0)
        key, sign = ((a, b), 1.0) if pos[a] < pos[b] else ((b, a), -1.0)
        if key not in aux:
            aux[key] = f"dth[{_label(key[0], pos[key[0]])},{_label(key[1], pos[key[1]])}]"
        return aux[key], sign

    def fn(e):
        if isinstance(e, Sin):
            name, s = pair_of(e.arg)
            return Poly(Var(name), tuple(s * c for c in SIN_COEFFS), "taylor-sin")
        if isinstance(e, Cos):
            name, _ = pair_of(e.arg)
            return Poly(Var(name), COS_COEFFS, "taylor-cos")
        return None

    eqs = tuple(Constraint(map_nodes(c.expr, fn), c.origin, c.meta) for c in model.equalities)
    ineqs = tuple(Constraint(map_nodes(c.expr, fn), c.origin, c.meta) for c in model.inequalities)
    objective = map_nodes(model.objective, fn)
    a = max_angle_diff
    init = model.point(model.x0())
    new_vars = list(model.variables)
    defs = []
    for (na, nb), name in aux.items():
        d0 = float(np.clip(init[na] - init[nb], -a, a))
        new_vars.append(Variable(name, -a, a, d0))
        defs.append(Constraint(Affine(((name, 1.0), (na, -1.0), (nb, 1.0))), f"angle-diff@{name}",
                               {"aux": name, "from": na, "to": nb}))
    taylor = {
        "orders": {"sin": 3, "cos": 2},
        "max_angle_diff": a,
        "aux": [[name, na, nb] for (na, nb), name in aux.items()],
        "remainder": {"sin": a**5 / 120.0, "cos": a**4 / 24.0},
    }
    return NlpModel(tuple(new_vars), objective, eqs + tuple(defs), ineqs, dict(model.meta, taylor=taylor))


# --------------------------------------------------------------------------
# stage 3


def _lift(model: NlpModel):
    """Positive shift of ``dth`` and lifting of the Taylor polynomials."""
    taylor = model.meta.get("taylor")
    if not taylor:
        return model, {}
    a = taylor["max_angle_diff"]
    d_off = a + 1.0
    s_amp = a - a**3 / 6.0
    s_off = s_amp + 1.0
    new_vars = []
    mapping = {}
    lifted = {}
    extra_eqs = []
    aux_names = {row[0] for row in taylor["aux"]}
    for v in model.variables:
        if v.name not in aux_names:
            new_vars.append(v)
            continue
        tag = v.name[3:]  # "[n,m]"
        d, cs, sn = "d" + tag, "cs" + tag, "sn" + tag
        new_vars.append(Variable(d, v.lo + d_off, v.hi + d_off, v.init + d_off))
        c0 = 1.0 - v.init**2 / 2.0
        s0 = v.init - v.init**3 / 6.0 + s_off
        new_vars.append(Variable(cs, 1.0 - a * a / 2.0, 1.0, c0))
        new_vars.append(Variable(sn, s_off - s_amp, s_off + s_amp, s0))
        delta = Affine(((d, 1.0),), -d_off)
        mapping[v.name] = delta
        lifted[v.name] = (cs, sn)
        extra_eqs.append(Constraint(Sum((Var(cs), Poly(delta, COS_COEFFS)), (1.0, -1.0)),
                                    f"taylor-cos@{tag}", {"aux": cs}))
        extra_eqs.append(Constraint(Sum((Var(sn), Poly(delta, SIN_COEFFS), Const(s_off)), (1.0, -1.0, -1.0)),
                                    f"taylor-sin@{tag}", {"aux": sn}))

    def fn(e):
        if isinstance(e, Poly) and isinstance(e.arg, Var) and e.arg.name in lifted:
            cs, sn = lifted[e.arg.name]
            if e.label == "taylor-cos":
                return Var(cs)
            if e.label == "taylor-sin":
                s = e.coeffs[1]
                return Affine(((sn, s),), -s * s_off)
        if isinstance(e, Var) and e.name in mapping:
            return mapping[e.name]
        if isinstance(e, Affine) and any(n in mapping for n, _ in e.coefs):
            return substitute(e, mapping)
        return None

    def rw(c):
        return Constraint(map_nodes(c.expr, fn), c.origin, c.meta)

    m = NlpModel(
        tuple(new_vars),
        map_nodes(model.objective, fn),
        tuple(rw(c) for c in model.equalities) + tuple(extra_eqs),
        tuple(rw(c) for c in model.inequalities),
        model.meta,
    )
    return m, {"d_offset": d_off, "sn_offset": s_off}


def _is_affine(terms) -> bool:
    return all(t.is_constant() or t.is_linear() for t in terms)


def reformulate(model: NlpModel, exponent_grid=DEFAULT_GRID, inverse_mode: str = "equality",
                method: str = "auto") -> ConvexModel:
    """Split, plan and transform a shifted, Taylor-substituted model."""
    if inverse_mode not in ("equality", "relaxed"):
        raise ValueError("inverse_mode must be 'equality' or 'relaxed'")
    lifted, offsets = _lift(model)
    bounds = {v.name: (v.lo, v.hi) for v in lifted.variables}

    obj_terms = expand(lifted.objective)
    for t in obj_terms:
        if t.trig:
            raise ConvexityError("objective has trigonometric terms")
        if not (t.is_constant() or t.is_linear()) and not classify_term(SignomialTerm.from_term(t)).convex:
            raise ConvexityError(f"objective term {SignomialTerm.from_term(t)} is not convex")

    eqs = []
    halves = []  # (origin, meta, terms, sign)
    for k, c in enumerate(lifted.equalities):
        ts = expand(c.expr)
        if any(t.trig for t in ts):
            raise ConvexityError(f"{c.origin}: trigonometric terms left after substitution")
        if _is_affine(ts):
            eqs.append(c)
            continue
        halves.append((c, ts, 1.0, k))
        halves.append((c, ts, -1.0, k))
    kept = []
    for c in lifted.inequalities:
        ts = expand(c.expr)
        if any(t.trig for t in ts):
            kept.append(Constraint(c.expr, c.origin, dict(c.meta, untransformed=True)))
        else:
            halves.append((c, ts, 1.0, None))

    sterms = []
    for _, ts, s, _ in halves:
        for t in ts:
            if not (t.is_constant() or t.is_linear()):
                sterms.append(SignomialTerm.of(s * t.coef, dict(t.monomial)))
    plan = plan_transformations(sterms, exponent_grid, bounds=bounds, method=method)

    ineqs = []
    for c, ts, s, k in halves:
        out = []
        for t in ts:
            if t.is_constant() or t.is_linear():
                out.append(Term(s * t.coef, t.monomial))
            else:
                r = plan.transform(SignomialTerm.of(s * t.coef, dict(t.monomial)))
                out.append(Term(r.coef, r.powers))
        meta = dict(c.meta)
        if k is not None:
            meta.update(split=k, half="le" if s > 0 else "ge")
            origin = f"{c.origin}|{'le' if s > 0 else 'ge'}"
        else:
            origin = c.origin
        ineqs.append(Constraint(from_terms(out), origin, meta))

    new_vars = list(lifted.variables)
    init = lifted.point(lifted.x0())
    inverse = []
    for sub in plan.substitutions:
        x0 = min(max(init[sub.var], bounds[sub.var][0]), bounds[sub.var][1])
        new_vars.append(Variable(sub.new, sub.lo, sub.hi, x0 ** (1.0 / sub.q)))
        rel = sign_transform_inverse(sub.var, sub.q, sub.new)
        inverse.append(rel)
    inv_eqs = [r.equality for r in inverse] if inverse_mode == "equality" else []
    inv_ineqs = [r.convex for r in inverse] if inverse_mode == "relaxed" else []

    out = NlpModel(
        tuple(new_vars),
        lifted.objective,
        tuple(eqs) + tuple(inv_eqs),
        tuple(ineqs) + tuple(kept) + tuple(inv_ineqs),
        dict(lifted.meta, convex=True, offsets=offsets),
    )
    taylor = dict(model.meta.get("taylor") or {})
    trace = {
        "reformulate": {
            "variables": out.n,
            "affine_equalities": len(eqs),
            "split_equalities": sum(1 for h in halves if h[3] is not None) // 2,
            "convex_inequalities": len(ineqs),
            "untransformed_inequalities": len(kept),
            "inverse_relations": len(inverse),
            "inverse_mode": inverse_mode,
            "transformed_terms": sum(1 for tp in plan.terms if tp.assignment),
            "substitutions": [[s.var, s.q, s.new] for s in plan.substitutions],
            "offsets": offsets,
        }
    }
    return ConvexModel(out, plan, ShiftRecord(0.0, 0.0, {}), taylor, None, inverse_mode, trace)


def _counts(m: NlpModel) -> dict:
    return {"variables": m.n, "equalities": len(m.equalities), "inequalities": len(m.inequalities)}


def _remainder_summary(model: NlpModel, taylor: dict) -> dict:
    """Per-row bound on the Taylor error: sum |coef| * max|monomial| * remainder."""
    hi = {v.name: max(abs(v.lo), abs(v.hi)) for v in model.variables}
    rs, rc = taylor["remainder"]["sin"], taylor["remainder"]["cos"]
    worst = 0.0
    origin = ""
    for c in model.equalities:
        total = 0.0
        for t in expand(c.expr):
            if not t.trig:
                continue
            mag = abs(t.coef)
            for n, p in t.monomial:
                mag *= hi[n] ** p
            for kind, _ in t.trig:
                mag *= rs if kind == "sin" else rc
            total += mag
        if total > worst:
            worst, origin = total, c.origin
    return {"sin_term": rs, "cos_term": rc, "max_row_bound": worst, "max_row": origin}


def convexify(model: NlpModel, max_angle_diff: float = MAX_ANGLE_DIFF, exponent_grid=DEFAULT_GRID,
              inverse_mode: str = "equality", method: str = "auto") -> ConvexModel:
    """Run shift, Taylor substitution and reformulation on an OPF model."""
    shifted, rec = shift_positive(model)
    tay = taylor_substitute(shifted, max_angle_diff)
    cm = reformulate(tay, exponent_grid, inverse_mode, method)
    cm.shifts = rec
    cm.original = model
    trace = {
        "original": _counts(model),
        "shift": dict(_counts(shifted), q_offset=rec.q_offset, angle_offset=rec.angle_offset),
        "taylor": dict(_counts(tay), aux=len(tay.meta["taylor"]["aux"]),
                       remainder=_remainder_summary(shifted, tay.meta["taylor"])),
    }
    trace.update(cm.trace)
    trace["reformulate"].update(_counts(cm.model))
    cm.trace = trace
    return cm


def start_point(cm: ConvexModel, original_point: dict) -> np.ndarray:
    """Map a point of the original model onto all variables of ``cm``."""
    pt = cm.shifts.to_shifted(original_point)
    offs = cm.model.meta.get("offsets", {})
    for name, na, nb in cm.taylor.get("aux", []):
        tag = name[3:]
        a = cm.taylor["max_angle_diff"]
        dl = float(np.clip(pt[na] - pt[nb], -a, a))
        pt["d" + tag] = dl + offs["d_offset"]
        pt["cs" + tag] = 1.0 - dl * dl / 2.0
        pt["sn" + tag] = dl - dl**3 / 6.0 + offs["sn_offset"]
    for s in cm.plan.substitutions:
        pt[s.new] = pt[s.var] ** (1.0 / s.q)
    return np.array([pt[n] for n in cm.model.names])


def random_start(cm: ConvexModel, rng, margin: float = 0.1) -> np.ndarray:
    """Random interior start drawn on the original variables.

    Each original variable is uniform on its box shrunk by ``margin`` of the
    span at both ends; angles are drawn so that every pairwise difference
    stays inside the Taylor window.  The point is then mapped through
    :func:`start_point`, so the transformed variables agree with it.
    """
    a = cm.taylor.get("max_angle_diff", MAX_ANGLE_DIFF)
    pt = {}
    for v in cm.original.variables:
        if v.fixed:
            pt[v.name] = v.lo
        elif v.name.startswith("theta"):
            pt[v.name] = rng.uniform(-a / 2, a / 2) * (1 - 2 * margin)
        else:
            span = v.hi - v.lo
            pt[v.name] = rng.uniform(v.lo + margin * span, v.hi - margin * span)
    return start_point(cm, pt)


# --------------------------------------------------------------------------
# recovery


def recover(sol: Solution, shifts: ShiftRecord, plan: TransformationPlan, model: NlpModel | None = None,
            convex: ConvexModel | None = None) -> Solution:
    """Undo shifts on a convex-model solution.

    Transformed variables are dropped after checking them against
    ``x = X ** q``; the largest mismatch is kept in ``info["transform_gap"]``.
    With ``model`` (the original OPF) the point is re-evaluated on the exact
    equations and the residuals replace those of the convex model.
    """
    gap = 0.0
    new = {s.new for s in plan.substitutions}
    for s in plan.substitutions:
        if s.new in sol.x and s.var in sol.x:
            gap = max(gap, abs(sol.x[s.var] - sol.x[s.new] ** s.q))
    pt = {k: v for k, v in sol.x.items() if k not in new}
    pt = shifts.to_original(pt)
    info = dict(sol.info, transform_gap=gap)
    lam = sol.lam
    mu = sol.mu
    z_lo = shifts.to_original({k: v for k, v in sol.z_lower.items() if k not in new})
    z_hi = shifts.to_original({k: v for k, v in sol.z_upper.items() if k not in new})
    # undo the offset applied to multipliers by to_original
    z_lo = {k: sol.z_lower[shifts.shifted(k)] for k in z_lo}
    z_hi = {k: sol.z_upper[shifts.shifted(k)] for k in z_hi}
    eq_res, in_res = sol.max_eq_residual, sol.max_ineq_violation
    if model is not None:
        keep = {n: pt[n] for n in model.names}
        x = np.array([keep[n] for n in model.names])
        r = model.residuals(x)
        eq_res, in_res = r["max_eq"], r["max_ineq"]
        info["objective_convex"] = sol.objective
        objective = float(evaluate(model.objective, keep))
        if convex is not None:
            lam = _equality_duals(model, convex, sol)
            mu = np.zeros(len(model.inequalities))
        pt = keep
        z_lo = {n: z_lo.get(n, 0.0) for n in model.names}
        z_hi = {n: z_hi.get(n, 0.0) for n in model.names}
    else:
        objective = sol.objective
    return Solution(sol.status, pt, objective, lam, mu, z_lo, z_hi, float(eq_res), float(in_res),
                    sol.iterations, sol.wall_time, sol.log, info)


def _equality_duals(model: NlpModel, cm: ConvexModel, sol: Solution) -> np.ndarray:
    """Original equality multipliers from the convex-model solution."""
    by_origin = {}
    if sol.info.get("rows") == "merged":
        for lam, c in zip(sol.lam, cm.merged()[0].equalities):
            by_origin[c.origin] = lam
    else:
        for i, c in enumerate(cm.model.inequalities):
            if "half" in c.meta:
                base = c.origin.rsplit("|", 1)[0]
                sign = 1.0 if c.meta["half"] == "le" else -1.0
                by_origin[base] = by_origin.get(base, 0.0) + sign * sol.mu[i]
    return np.array([by_origin.get(c.origin, 0.0) for c in model.equalities])
