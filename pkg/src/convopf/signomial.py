"""Signomial terms: convexity classes, power transformations, inverse constraints.

A signomial term is ``c * prod(x_i ** p_i)`` over strictly positive
variables.  Two sufficient conditions certify convexity:

* ``c > 0`` and every ``p_i < 0``; or ``c > 0``, exactly one ``p_k > 0``,
  all others negative and ``sum(p) >= 1``  (convex positive term)
* ``c < 0``, every ``p_i > 0`` and ``0 <= sum(p) <= 1``  (convex negative term)

A term failing both can often be fixed with power substitutions
``x = X ** q``, which turn ``x ** p`` into ``X ** (p*q)``.  The nonconvexity
moves into the inverse relation ``X = x ** (1/q)``.

Substitutions are chosen per term: the same variable may be substituted in
one term and left alone (or substituted with another exponent) in a
different term, each distinct ``(x, q)`` pair costing one new variable.
:func:`plan_transformations` looks for the assignment with the fewest new
variables, breaking ties by ``sum(|1/q|)``.
"""

from __future__ import annotations

import enum
import itertools
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping

import numpy as np
from scipy.optimize import Bounds, LinearConstraint, milp
import scipy.sparse as sp

from .expr import Affine, DomainError, Expression, Signomial, Sum, Term, Var, eval_hess, variables
from .model import Constraint

logger = logging.getLogger(__name__)

__all__ = [
    "TermClass",
    "SignomialTerm",
    "classify_term",
    "NoViolation",
    "CounterexamplePoint",
    "verify_convexity_sampled",
    "DEFAULT_GRID",
    "Substitution",
    "TermPlan",
    "TransformationPlan",
    "NoPlanFound",
    "plan_transformations",
    "InverseRelation",
    "sign_transform_inverse",
    "transformed_name",
]

DEFAULT_GRID = (1 / 3, -1 / 3, 1 / 2, -1 / 2, 1.0, -1.0, 2.0, -2.0, 3.0, -3.0)


class TermClass(enum.Enum):
    CONVEX_POSITIVE = "ConvexPositive"
    CONVEX_NEGATIVE = "ConvexNegative"
    NONCONVEX = "Nonconvex"

    @property
    def convex(self) -> bool:
        return self is not TermClass.NONCONVEX


@dataclass(frozen=True)
class SignomialTerm:
    coef: float
    powers: tuple[tuple[str, float], ...]

    def __post_init__(self):
        if not self.powers:
            raise ValueError("signomial term needs at least one variable")

    @classmethod
    def of(cls, coef: float, powers: Mapping[str, float]) -> "SignomialTerm":
        ps = tuple(sorted((k, float(p)) for k, p in powers.items() if p != 0.0))
        return cls(float(coef), ps)

    @classmethod
    def from_term(cls, t: Term) -> "SignomialTerm":
        if t.trig:
            raise ValueError("trigonometric factor in a signomial term")
        return cls.of(t.coef, dict(t.monomial))

    @property
    def vars(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.powers)

    def is_affine(self) -> bool:
        return len(self.powers) == 1 and self.powers[0][1] == 1.0

    def to_expr(self) -> Expression:
        if self.is_affine():
            return Affine(((self.powers[0][0], self.coef),))
        return Signomial(self.coef, self.powers)

    def __str__(self):
        return str(Signomial(self.coef, self.powers))


def _classify(c, P):
    """Vectorised classification of exponent rows ``P`` (shape (N, k))."""
    pos = P > 0
    neg = P < 0
    s = P.sum(axis=1)
    npos = pos.sum(axis=1)
    allneg = neg.all(axis=1)
    if c > 0:
        ok = allneg | ((npos == 1) & ((pos | neg).all(axis=1)) & (s >= 1.0 - 1e-12))
        return np.where(ok, 1, 0)
    if c < 0:
        ok = pos.all(axis=1) & (s >= 0.0) & (s <= 1.0 + 1e-12)
        return np.where(ok, -1, 0)
    return np.zeros(len(P), dtype=int)


def classify_term(t: SignomialTerm) -> TermClass:
    code = _classify(t.coef, np.array([[p for _, p in t.powers]]))[0]
    if code == 1:
        return TermClass.CONVEX_POSITIVE
    if code == -1:
        return TermClass.CONVEX_NEGATIVE
    return TermClass.NONCONVEX


# --------------------------------------------------------------------------
# sampled Hessian oracle


@dataclass(frozen=True)
class NoViolation:
    min_eig: float
    n_samples: int

    ok = True


@dataclass(frozen=True)
class CounterexamplePoint:
    point: dict
    min_eig: float

    ok = False


def verify_convexity_sampled(f: Expression, box: Mapping[str, tuple[float, float]], n_samples: int = 10_000,
                             seed: int = 0, tol: float = 1e-8, chunk: int = 5_000):
    """Look for negative curvature of ``f`` at random interior points of ``box``.

    A point counts as a counterexample when the smallest Hessian eigenvalue
    is below ``-tol * max(1, max|H|)``.  Passing is a necessary condition for
    convexity only.
    """
    names = sorted(box)
    missing = variables(f) - set(names)
    if missing:
        raise ValueError(f"box does not cover {sorted(missing)}")
    lo = np.array([box[n][0] for n in names], dtype=float)
    hi = np.array([box[n][1] for n in names], dtype=float)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))) or np.any(lo > hi):
        raise ValueError("box must be finite with lo <= hi")
    rng = np.random.default_rng(seed)
    d = len(names)
    pos = {n: i for i, n in enumerate(names)}
    worst = np.inf
    done = 0
    while done < n_samples:
        k = min(chunk, n_samples - done)
        X = lo + (hi - lo) * rng.uniform(0.0, 1.0, size=(k, d))
        # keep off the boundary so fractional powers stay defined
        X = np.clip(X, lo + 1e-12 * (hi - lo), hi - 1e-12 * (hi - lo))
        pt = {n: X[:, i] for i, n in enumerate(names)}
        h = eval_hess(f, pt)
        Hs = np.zeros((k, d, d))
        for (a, b), v in h.items():
            i, j = pos[a], pos[b]
            Hs[:, i, j] = v
            Hs[:, j, i] = v
        if not np.all(np.isfinite(Hs)):
            raise DomainError("Hessian not finite inside the box")
        eig = np.linalg.eigvalsh(Hs)[:, 0] if d else np.zeros(k)
        scale = np.maximum(1.0, np.abs(Hs).reshape(k, -1).max(axis=1, initial=0.0))
        bad = eig < -tol * scale
        if np.any(bad):
            i = int(np.argmin(np.where(bad, eig / scale, np.inf)))
            return CounterexamplePoint({n: float(X[i, j]) for j, n in enumerate(names)}, float(eig[i]))
        worst = min(worst, float(eig.min(initial=np.inf)))
        done += k
    return NoViolation(worst, n_samples)


# --------------------------------------------------------------------------
# transformation plans


class NoPlanFound(ValueError):
    def __init__(self, terms):
        self.terms = list(terms)
        super().__init__("no exponent assignment convexifies: " + ", ".join(map(str, self.terms[:5])))


def _frac(q: float) -> str:
    return str(Fraction(q).limit_denominator(1000))


def transformed_name(var: str, q: float) -> str:
    return f"{var}~{_frac(q)}"


@dataclass(frozen=True)
class Substitution:
    """``var = new ** q`` with ``new`` in ``[lo, hi]``."""

    var: str
    q: float
    new: str
    lo: float = float("nan")
    hi: float = float("nan")

    @property
    def inverse_exponent(self) -> float:
        return 1.0 / self.q


@dataclass(frozen=True)
class TermPlan:
    term: SignomialTerm
    assignment: tuple[tuple[str, float], ...]  # var -> q, identity omitted
    result: SignomialTerm
    cls: TermClass


@dataclass
class TransformationPlan:
    substitutions: list[Substitution] = field(default_factory=list)
    terms: list[TermPlan] = field(default_factory=list)

    def __post_init__(self):
        self._by_term = {tp.term: tp for tp in self.terms}

    @property
    def empty(self) -> bool:
        return not self.substitutions

    @property
    def n_new(self) -> int:
        return len(self.substitutions)

    @property
    def cost(self) -> float:
        return sum(abs(1.0 / s.q) for s in self.substitutions)

    def lookup(self, term: SignomialTerm) -> TermPlan | None:
        return self._by_term.get(term)

    def transform(self, term: SignomialTerm) -> SignomialTerm:
        tp = self._by_term.get(term)
        return term if tp is None else tp.result

    def dump(self) -> str:
        lines = []
        for s in self.substitutions:
            lines.append(f"subst {s.var} = ({s.new})^({_frac(s.q)})  {s.new} in [{s.lo:.12g}, {s.hi:.12g}]"
                         f"  inverse {s.new} = {s.var}^({_frac(1.0 / s.q)})")
        for tp in self.terms:
            if tp.assignment:
                a = ", ".join(f"{v}:{_frac(q)}" for v, q in tp.assignment)
                lines.append(f"term {tp.term} [{a}] -> {tp.result} ({tp.cls.value})")
        return "\n".join(lines) + ("\n" if lines else "")


def _transform(term: SignomialTerm, assign: Mapping[str, float]) -> SignomialTerm:
    pw = {}
    for v, p in term.powers:
        q = assign.get(v)
        if q is None:
            pw[v] = pw.get(v, 0.0) + p
        else:
            n = transformed_name(v, q)
            pw[n] = pw.get(n, 0.0) + p * q
    return SignomialTerm.of(term.coef, pw)


def _options(term: SignomialTerm, grid):
    """Convexifying assignments of ``term`` as (pairs, cost) tuples."""
    qs = np.array([1.0] + [q for q in grid if q != 1.0])
    k = len(term.powers)
    p = np.array([pw for _, pw in term.powers])
    idx = np.array(list(itertools.product(range(len(qs)), repeat=k)), dtype=int)
    Q = qs[idx]
    ok = _classify(term.coef, Q * p) != 0
    out = []
    for row in idx[ok]:
        pairs = tuple((term.vars[j], float(qs[i])) for j, i in enumerate(row) if i != 0)
        out.append(pairs)
    # keep assignments whose pair set is minimal under inclusion
    sets = [frozenset(a) for a in out]
    keep = []
    for i, s in enumerate(sets):
        if not any(o < s for o in sets):
            keep.append(out[i])
    return sorted(set(keep), key=lambda a: (len(a), sum(abs(1.0 / q) for _, q in a), a))


def _pair_cost(pair) -> float:
    return abs(1.0 / pair[1])


def _search_exhaustive(options):
    """Depth-first branch and bound over per-term option lists."""
    order = sorted(range(len(options)), key=lambda i: len(options[i]))
    best = [None, (np.inf, np.inf)]
    chosen = [None] * len(options)

    def rec(depth, used):
        key = (len(used), sum(_pair_cost(p) for p in used))
        if key >= best[1]:  # both parts only grow deeper down
            return
        if depth == len(order):
            best[0] = list(chosen)
            best[1] = key
            return
        t = order[depth]
        for a in options[t]:
            chosen[t] = a
            rec(depth + 1, used | set(a))
        chosen[t] = None

    rec(0, frozenset())
    return best[0]


def _search_hitting(terms, options, max_pops=200):
    """Exact search that works when per-variable lower bounds are attained.

    For every variable, the terms that must substitute it (no option leaves
    it alone) force its exponent set to hit each set of exponents those
    terms can use.  The minimum hitting sets give a lower bound on both the
    pair count and, among count-optimal plans, on ``sum |1/q|``.  Candidate
    combinations are tried best-first; the first jointly feasible one is
    optimal.  Returns None when no combination within ``max_pops`` works.
    """
    need: dict[str, set] = {}
    touched = set()
    for t, opts in zip(terms, options):
        for v in t.vars:
            qs = [dict(a).get(v) for a in opts]
            touched.add(v)
            if all(q is not None for q in qs):
                need.setdefault(v, set()).add(frozenset(qs))
    names = sorted(need)
    cands = []
    for v in names:
        sets = [q for q in need[v] if not any(o < q for o in need[v])]
        universe = sorted(set().union(*sets))
        found = []
        for k in range(1, len(universe) + 1):
            found = [c for c in itertools.combinations(universe, k) if all(set(c) & q for q in sets)]
            if found:
                break
        found.sort(key=lambda c: (sum(abs(1.0 / q) for q in c), c))
        cands.append([(sum(abs(1.0 / q) for q in c), c) for c in found])

    def feasible(chosen):
        allowed = {(v, q) for v, (_, c) in zip(names, chosen) for q in c}
        out = []
        for opts in options:
            for a in opts:
                if all(p in allowed for p in a):
                    out.append(a)
                    break
            else:
                return None
        return out

    import heapq

    start = (0,) * len(names)
    heap = [(sum(c[0][0] for c in cands), start, 0)]
    seen = {start}
    for _ in range(max_pops):
        if not heap:
            return None
        _, idx, _ = heapq.heappop(heap)
        res = feasible([cands[i][j] for i, j in enumerate(idx)])
        if res is not None:
            return res
        for i in range(len(names)):
            if idx[i] + 1 < len(cands[i]):
                nxt = idx[:i] + (idx[i] + 1,) + idx[i + 1:]
                if nxt not in seen:
                    seen.add(nxt)
                    cost = sum(cands[k][j][0] for k, j in enumerate(nxt))
                    heapq.heappush(heap, (cost, nxt, i))
    return None


def _search_milp(options, time_limit=None):
    """Two-stage MILP: fewest pairs, then least ``sum |1/q|``."""
    pairs = sorted({p for opts in options for a in opts for p in a})
    if not pairs:
        return [opts[0] for opts in options]
    pidx = {p: i for i, p in enumerate(pairs)}
    ny = len(pairs)
    cols = []  # (term, option)
    for t, opts in enumerate(options):
        for a in opts:
            cols.append((t, a))
    ns = len(cols)
    nv = ny + ns
    # sum_a s[t,a] = 1
    rows, cs, vals = [], [], []
    for j, (t, _) in enumerate(cols):
        rows.append(t)
        cs.append(ny + j)
        vals.append(1.0)
    A_eq = sp.csr_matrix((vals, (rows, cs)), shape=(len(options), nv))
    # s[t,a] - y[p] <= 0 for p in a
    rows, cs, vals = [], [], []
    r = 0
    for j, (_, a) in enumerate(cols):
        for p in a:
            rows += [r, r]
            cs += [ny + j, pidx[p]]
            vals += [1.0, -1.0]
            r += 1
    A_link = sp.csr_matrix((vals, (rows, cs)), shape=(r, nv))
    cons = [LinearConstraint(A_eq, 1.0, 1.0)]
    if r:
        cons.append(LinearConstraint(A_link, -np.inf, 0.0))
    integrality = np.concatenate([np.ones(ny), np.zeros(ns)])
    bounds = Bounds(np.zeros(nv), np.ones(nv))
    opts = {"disp": False}
    if time_limit:
        opts["time_limit"] = time_limit
    c1 = np.concatenate([np.ones(ny), np.zeros(ns)])
    res = milp(c1, constraints=cons, integrality=integrality, bounds=bounds, options=opts)
    if res.x is None:
        raise RuntimeError(f"exponent MILP failed: {res.message}")
    count = round(res.fun)
    c2 = np.concatenate([[_pair_cost(p) for p in pairs], np.zeros(ns)])
    cons.append(LinearConstraint(sp.csr_matrix(c1), -np.inf, count + 0.5))
    res = milp(c2, constraints=cons, integrality=integrality, bounds=bounds, options=opts)
    if res.x is None:
        raise RuntimeError(f"exponent MILP failed: {res.message}")
    used = {p for p, y in zip(pairs, res.x[:ny]) if y > 0.5}
    chosen = []
    for t, opts_t in enumerate(options):
        # any option whose pairs are all switched on is valid; take the cheapest
        ok = [a for a in opts_t if set(a) <= used]
        chosen.append(ok[0])
    return chosen


def plan_transformations(terms: Iterable[SignomialTerm], exponent_grid=DEFAULT_GRID,
                         bounds: Mapping[str, tuple[float, float]] | None = None,
                         method: str = "auto", exhaustive_limit: int = 10) -> TransformationPlan:
    """Choose substitutions that make every term convex.

    ``bounds`` (variable -> (lo, hi)) fills in the bounds of the new
    variables.  ``method`` is ``"exhaustive"``, ``"milp"`` or ``"auto"``
    (exhaustive when at most ``exhaustive_limit`` terms need work).
    """
    grid = tuple(float(q) for q in exponent_grid)
    if any(q == 0.0 for q in grid):
        raise ValueError("exponent grid contains 0")
    todo = []
    seen = set()
    for t in terms:
        if t in seen:
            continue
        seen.add(t)
        if t.is_affine() or classify_term(t).convex:
            continue
        todo.append(t)
    if not todo:
        return TransformationPlan()
    options = [_options(t, grid) for t in todo]
    bad = [t for t, o in zip(todo, options) if not o]
    if bad:
        raise NoPlanFound(bad)
    chosen = None
    if method == "auto":
        chosen = _search_hitting(todo, options)
        if chosen is None:
            method = "exhaustive" if len(todo) <= exhaustive_limit else "milp"
            logger.info("per-variable bound not attained, falling back to %s search", method)
    if chosen is not None:
        pass
    elif method == "exhaustive":
        chosen = _search_exhaustive(options)
    elif method == "milp":
        chosen = _search_milp(options)
    elif method == "hitting":
        chosen = _search_hitting(todo, options)
        if chosen is None:
            raise RuntimeError("hitting-set search did not attain the lower bound")
    else:
        raise ValueError(f"unknown method {method!r}")

    pairs = sorted({p for a in chosen for p in a})
    subs = []
    for v, q in pairs:
        lo = hi = float("nan")
        if bounds is not None and v in bounds:
            lo, hi = _new_bounds(bounds[v], 1.0 / q)
        subs.append(Substitution(v, q, transformed_name(v, q), lo, hi))
    tplans = []
    for t, a in zip(todo, chosen):
        res = _transform(t, dict(a))
        tplans.append(TermPlan(t, a, res, classify_term(res)))
    return TransformationPlan(subs, tplans)


def _new_bounds(b, a):
    lo, hi = b
    if not lo > 0:
        raise DomainError(f"power transformation needs a positive lower bound, got {lo}")
    u, w = lo**a, hi**a
    return (min(u, w), max(u, w))


# --------------------------------------------------------------------------
# inverse relations


@dataclass(frozen=True, eq=False)
class InverseRelation:
    """``X = x ** a`` split into its convex side and the reverse side.

    ``convex`` is the inequality (``<= 0``) that is convex in ``(x, X)``;
    ``reverse`` is the other half.  ``flipped`` is true for ``0 < a < 1``,
    where the concave power is negated to get the convex side.
    """

    x: str
    X: str
    a: float
    flipped: bool
    convex: Constraint
    reverse: Constraint

    @property
    def equality(self) -> Constraint:
        """The relation as one equality, written as its convex side."""
        return Constraint(self.convex.expr, f"transform-inverse@{self.x}",
                          dict(self.convex.meta, side="equality"))


def sign_transform_inverse(x_var: str, p: float, new_var: str | None = None) -> InverseRelation:
    """Inverse constraint of the substitution ``x = X ** p``."""
    if p == 0:
        raise ValueError("substitution exponent must be nonzero")
    a = 1.0 / p
    X = new_var or transformed_name(x_var, p)
    power = Signomial.of(1.0, {x_var: a}) if a != 1.0 else Var(x_var)
    flipped = 0.0 < a < 1.0
    if flipped:
        convex = Sum((Var(X), power), (1.0, -1.0))  # X - x^a, convex since x^a is concave
        reverse = Sum((power, Var(X)), (1.0, -1.0))
    else:
        convex = Sum((power, Var(X)), (1.0, -1.0))  # x^a - X
        reverse = Sum((Var(X), power), (1.0, -1.0))
    meta = {"var": x_var, "new": X, "p": p, "a": a, "flipped": flipped}
    return InverseRelation(
        x_var, X, a, flipped,
        Constraint(convex, f"transform-inverse@{x_var}", dict(meta, side="convex")),
        Constraint(reverse, f"transform-inverse@{x_var}", dict(meta, side="reverse")),
    )
