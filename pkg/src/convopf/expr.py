"""Expression trees with exact first and second derivatives.

Expressions are built from named variables with the usual operators::

    x, y = Var("x"), Var("y")
    e = 3 * x**2 * y + sin(x - y)
    evaluate(e, {"x": 1.0, "y": 2.0})
    eval_grad(e, {"x": 1.0, "y": 2.0})   # {"x": ..., "y": ...}
    eval_hess(e, {"x": 1.0, "y": 2.0})   # {("x", "x"): ..., ("x", "y"): ...}

Derivatives come from forward-mode second-order propagation over the tree,
so they are exact up to rounding.  Point values may be floats or equally
shaped numpy arrays, in which case every result is batched over the array
shape (used by the sampled convexity checks).

Hessians are returned as dictionaries keyed by ``(a, b)`` with ``a <= b``.

:func:`expand` rewrites an expression as a flat list of :class:`Term`
objects (coefficient times a monomial times optional sin/cos factors of
affine arguments).  The signomial machinery and the vectorised evaluator in
:mod:`convopf.compiled` both work on that form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

__all__ = [
    "DomainError",
    "NotExpandable",
    "Expression",
    "Const",
    "Var",
    "Sum",
    "Affine",
    "Product",
    "Power",
    "Sin",
    "Cos",
    "Signomial",
    "Poly",
    "sin",
    "cos",
    "as_expr",
    "evaluate",
    "eval_grad",
    "eval_hess",
    "variables",
    "substitute",
    "map_nodes",
    "Term",
    "expand",
    "from_terms",
]


class DomainError(ValueError):
    """Raised when a power node is evaluated outside its real domain."""


class NotExpandable(ValueError):
    """Raised by :func:`expand` for trees with no finite term form."""


# --------------------------------------------------------------------------
# jets: (value, gradient, upper-triangular Hessian)


class _Jet:
    __slots__ = ("v", "g", "h")

    def __init__(self, v, g=None, h=None):
        self.v = v
        self.g = g if g is not None else {}
        self.h = h if h is not None else {}


def _key(a, b):
    return (a, b) if a <= b else (b, a)


def _add_into(dst, src, w=1.0):
    for k, val in src.items():
        if k in dst:
            dst[k] = dst[k] + w * val
        else:
            dst[k] = w * val


def _jet_mul(u: _Jet, w: _Jet, order: int) -> _Jet:
    v = u.v * w.v
    g = {}
    h = {}
    if order >= 1:
        _add_into(g, u.g, w.v)
        _add_into(g, w.g, u.v)
    if order >= 2:
        _add_into(h, u.h, w.v)
        _add_into(h, w.h, u.v)
        for a, ga in u.g.items():
            for b, gb in w.g.items():
                k = _key(a, b)
                val = ga * gb
                if a == b:
                    val = 2.0 * val
                h[k] = h[k] + val if k in h else val
    return _Jet(v, g, h)


def _jet_unary(u: _Jet, f0, f1, f2, order: int) -> _Jet:
    g = {}
    h = {}
    if order >= 1:
        _add_into(g, u.g, f1)
    if order >= 2:
        _add_into(h, u.h, f1)
        items = list(u.g.items())
        for i, (a, ga) in enumerate(items):
            for b, gb in items[i:]:
                k = _key(a, b)
                val = f2 * ga * gb
                h[k] = h[k] + val if k in h else val
    return _Jet(f0, g, h)


def _power_derivs(u, p):
    """Value and first two derivatives of ``u**p``."""
    p = float(p)
    integral = p.is_integer()
    bad = (u <= 0) if not integral else ((u == 0) & (p < 0))
    if np.any(bad):
        raise DomainError(f"power {p:g} of non-positive base")
    f0 = np.power(u, p) if not isinstance(u, float) else u**p
    if p == 0.0:
        return f0, 0.0 * u, 0.0 * u
    if p == 1.0:
        return f0, 1.0 + 0.0 * u, 0.0 * u
    if p == 2.0:
        return f0, 2.0 * u, 2.0 + 0.0 * u
    f1 = p * np.power(u, p - 1.0)
    f2 = p * (p - 1.0) * np.power(u, p - 2.0)
    return f0, f1, f2


# --------------------------------------------------------------------------
# node types


class Expression:
    """Base class of expression nodes."""

    __slots__ = ()

    def _jet(self, point, order):  # pragma: no cover - abstract
        raise NotImplementedError

    def children(self) -> tuple["Expression", ...]:
        return ()

    # arithmetic sugar -----------------------------------------------------
    def __add__(self, other):
        return Sum((self, as_expr(other)))

    def __radd__(self, other):
        return Sum((as_expr(other), self))

    def __sub__(self, other):
        return Sum((self, as_expr(other)), (1.0, -1.0))

    def __rsub__(self, other):
        return Sum((as_expr(other), self), (1.0, -1.0))

    def __neg__(self):
        return Sum((self,), (-1.0,))

    def __mul__(self, other):
        return Product((self, as_expr(other)))

    def __rmul__(self, other):
        return Product((as_expr(other), self))

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return Sum((self,), (1.0 / other,))
        return Product((self, Power(as_expr(other), -1.0)))

    def __pow__(self, p):
        return Power(self, float(p))

    def value(self, point):
        return evaluate(self, point)


@dataclass(frozen=True, eq=False, slots=True)
class Const(Expression):
    value_: float

    def _jet(self, point, order):
        return _Jet(self.value_)

    def __str__(self):
        return f"{self.value_:.12g}"


@dataclass(frozen=True, eq=False, slots=True)
class Var(Expression):
    name: str

    def _jet(self, point, order):
        try:
            v = point[self.name]
        except KeyError:
            raise KeyError(f"no value for variable {self.name!r}") from None
        g = {self.name: 1.0 + 0.0 * v} if order >= 1 else {}
        return _Jet(v, g)

    def __str__(self):
        return self.name


@dataclass(frozen=True, eq=False, slots=True)
class Sum(Expression):
    terms: tuple[Expression, ...]
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.weights is not None and len(self.weights) != len(self.terms):
            raise ValueError("weights and terms differ in length")

    def children(self):
        return self.terms

    def _w(self):
        return self.weights if self.weights is not None else (1.0,) * len(self.terms)

    def _jet(self, point, order):
        v = 0.0
        g = {}
        h = {}
        for w, t in zip(self._w(), self.terms):
            j = t._jet(point, order)
            v = v + w * j.v
            _add_into(g, j.g, w)
            _add_into(h, j.h, w)
        return _Jet(v, g, h)

    def __str__(self):
        parts = []
        for w, t in zip(self._w(), self.terms):
            s = str(t)
            if w == 1.0:
                parts.append(f"+ {s}" if parts else s)
            elif w == -1.0:
                parts.append(f"- {s}")
            else:
                parts.append(f"+ {w:.12g}*({s})" if parts else f"{w:.12g}*({s})")
        return "(" + " ".join(parts) + ")" if parts else "0"


@dataclass(frozen=True, eq=False, slots=True)
class Affine(Expression):
    """``const + sum(coefs[name] * name)``."""

    coefs: tuple[tuple[str, float], ...]
    const: float = 0.0

    @classmethod
    def of(cls, coefs: Mapping[str, float], const: float = 0.0) -> "Affine":
        return cls(tuple((k, float(v)) for k, v in coefs.items() if v != 0.0), float(const))

    def _jet(self, point, order):
        v = self.const
        g = {}
        for name, a in self.coefs:
            x = point[name]
            v = v + a * x
            if order >= 1:
                g[name] = g.get(name, 0.0) + a + 0.0 * x
        return _Jet(v, g)

    def __str__(self):
        s = " ".join(f"{a:+.12g}*{n}" for n, a in self.coefs)
        if self.const or not s:
            s = f"{s} {self.const:+.12g}".strip()
        return f"[{s}]"


@dataclass(frozen=True, eq=False, slots=True)
class Product(Expression):
    factors: tuple[Expression, ...]

    def children(self):
        return self.factors

    def _jet(self, point, order):
        acc = None
        for f in self.factors:
            j = f._jet(point, order)
            acc = j if acc is None else _jet_mul(acc, j, order)
        return acc if acc is not None else _Jet(1.0)

    def __str__(self):
        return "*".join(_paren(f) for f in self.factors)


@dataclass(frozen=True, eq=False, slots=True)
class Power(Expression):
    """``base ** exponent``; a fractional exponent needs a positive base."""

    base: Expression
    exponent: float

    def children(self):
        return (self.base,)

    def _jet(self, point, order):
        u = self.base._jet(point, order)
        f0, f1, f2 = _power_derivs(u.v, self.exponent)
        return _jet_unary(u, f0, f1, f2, order)

    def __str__(self):
        return f"{_paren(self.base)}^{self.exponent:.12g}"


@dataclass(frozen=True, eq=False, slots=True)
class Sin(Expression):
    arg: Expression

    def children(self):
        return (self.arg,)

    def _jet(self, point, order):
        u = self.arg._jet(point, order)
        s, c = np.sin(u.v), np.cos(u.v)
        return _jet_unary(u, s, c, -s, order)

    def __str__(self):
        return f"sin({self.arg})"


@dataclass(frozen=True, eq=False, slots=True)
class Cos(Expression):
    arg: Expression

    def children(self):
        return (self.arg,)

    def _jet(self, point, order):
        u = self.arg._jet(point, order)
        s, c = np.sin(u.v), np.cos(u.v)
        return _jet_unary(u, c, -s, -c, order)

    def __str__(self):
        return f"cos({self.arg})"


@dataclass(frozen=True, eq=False, slots=True)
class Signomial(Expression):
    """A single signomial term ``coef * prod(x_i ** p_i)``."""

    coef: float
    powers: tuple[tuple[str, float], ...]

    @classmethod
    def of(cls, coef: float, powers: Mapping[str, float]) -> "Signomial":
        return cls(float(coef), tuple(sorted((k, float(p)) for k, p in powers.items())))

    def _jet(self, point, order):
        acc = _Jet(self.coef)
        for name, p in self.powers:
            u = Var(name)._jet(point, order)
            f0, f1, f2 = _power_derivs(u.v, p)
            acc = _jet_mul(acc, _jet_unary(u, f0, f1, f2, order), order)
        return acc

    def __str__(self):
        mono = "*".join(n if p == 1.0 else f"{n}^{p:.12g}" for n, p in self.powers)
        return f"{self.coef:.12g}*{mono}" if mono else f"{self.coef:.12g}"


@dataclass(frozen=True, eq=False, slots=True)
class Poly(Expression):
    """Univariate polynomial ``sum(coeffs[k] * arg**k)``.

    ``label`` marks where the polynomial came from (for example a truncated
    Taylor series) so later rewrites can find it again.
    """

    arg: Expression
    coeffs: tuple[float, ...]
    label: str = ""

    def children(self):
        return (self.arg,)

    def _jet(self, point, order):
        u = self.arg._jet(point, order)
        c = self.coeffs
        x = u.v
        f0 = 0.0 * x
        f1 = 0.0 * x
        f2 = 0.0 * x
        for k in range(len(c) - 1, -1, -1):  # Horner on value and derivatives
            f2 = f2 * x + 2.0 * f1
            f1 = f1 * x + f0
            f0 = f0 * x + c[k]
        return _jet_unary(u, f0, f1, f2, order)

    def __str__(self):
        body = " ".join(f"{a:+.12g}*{_paren(self.arg)}^{k}" for k, a in enumerate(self.coeffs) if a)
        return f"poly[{self.label}]({body or '0'})"


def _paren(e):
    s = str(e)
    if isinstance(e, (Var, Const, Sin, Cos, Poly, Affine)) or s.startswith("("):
        return s
    return f"({s})"


def sin(arg) -> Sin:
    return Sin(as_expr(arg))


def cos(arg) -> Cos:
    return Cos(as_expr(arg))


def as_expr(x) -> Expression:
    if isinstance(x, Expression):
        return x
    if isinstance(x, (int, float, np.floating, np.integer)):
        return Const(float(x))
    raise TypeError(f"cannot convert {type(x).__name__} to Expression")


# --------------------------------------------------------------------------
# evaluation entry points


def evaluate(expr: Expression, point: Mapping[str, float]):
    return expr._jet(point, 0).v


def eval_grad(expr: Expression, point: Mapping[str, float]) -> dict[str, float]:
    return expr._jet(point, 1).g


def eval_hess(expr: Expression, point: Mapping[str, float]) -> dict[tuple[str, str], float]:
    return expr._jet(point, 2).h


def eval_all(expr: Expression, point: Mapping[str, float]):
    """Value, gradient and Hessian in one pass."""
    j = expr._jet(point, 2)
    return j.v, j.g, j.h


def variables(expr: Expression) -> set[str]:
    out: set[str] = set()
    stack = [expr]
    while stack:
        e = stack.pop()
        if isinstance(e, Var):
            out.add(e.name)
        elif isinstance(e, Affine):
            out.update(n for n, _ in e.coefs)
        elif isinstance(e, Signomial):
            out.update(n for n, _ in e.powers)
        else:
            stack.extend(e.children())
    return out


def substitute(expr: Expression, mapping: Mapping[str, Expression]) -> Expression:
    """Replace variables by expressions, rebuilding the tree bottom-up."""

    def rec(e):
        if isinstance(e, Var):
            return mapping.get(e.name, e)
        if isinstance(e, Const):
            return e
        if isinstance(e, Affine):
            if not any(n in mapping for n, _ in e.coefs):
                return e
            parts = [Const(e.const)] + [Sum((rec(Var(n)),), (a,)) for n, a in e.coefs]
            return Sum(tuple(parts))
        if isinstance(e, Signomial):
            if not any(n in mapping for n, _ in e.powers):
                return e
            fs = [Const(e.coef)] + [rec(Var(n)) if p == 1.0 else Power(rec(Var(n)), p) for n, p in e.powers]
            return Product(tuple(fs))
        if isinstance(e, Sum):
            return Sum(tuple(rec(t) for t in e.terms), e.weights)
        if isinstance(e, Product):
            return Product(tuple(rec(f) for f in e.factors))
        if isinstance(e, Power):
            return Power(rec(e.base), e.exponent)
        if isinstance(e, Sin):
            return Sin(rec(e.arg))
        if isinstance(e, Cos):
            return Cos(rec(e.arg))
        if isinstance(e, Poly):
            return Poly(rec(e.arg), e.coeffs, e.label)
        raise TypeError(f"unknown node {type(e).__name__}")

    return rec(expr)


def map_nodes(expr: Expression, fn) -> Expression:
    """Rewrite ``expr`` top-down: ``fn(node)`` returns a replacement or None."""

    def rec(e):
        r = fn(e)
        if r is not None:
            return r
        if isinstance(e, Sum):
            return Sum(tuple(rec(t) for t in e.terms), e.weights)
        if isinstance(e, Product):
            return Product(tuple(rec(f) for f in e.factors))
        if isinstance(e, Power):
            return Power(rec(e.base), e.exponent)
        if isinstance(e, Sin):
            return Sin(rec(e.arg))
        if isinstance(e, Cos):
            return Cos(rec(e.arg))
        if isinstance(e, Poly):
            return Poly(rec(e.arg), e.coeffs, e.label)
        return e

    return rec(expr)


# --------------------------------------------------------------------------
# flat term form

#: affine argument of a trig factor: ((name, weight), ...), const
AffineArg = tuple[tuple[tuple[str, float], ...], float]


@dataclass(frozen=True)
class Term:
    """``coef * prod(x**p) * prod(trig(arg))``.

    ``monomial`` is sorted by variable name; ``trig`` holds
    ``("sin" | "cos", affine_arg)`` pairs in a canonical order.
    """

    coef: float
    monomial: tuple[tuple[str, float], ...] = ()
    trig: tuple[tuple[str, AffineArg], ...] = ()

    @property
    def key(self):
        return (self.monomial, self.trig)

    def is_constant(self) -> bool:
        return not self.monomial and not self.trig

    def is_linear(self) -> bool:
        return not self.trig and len(self.monomial) == 1 and self.monomial[0][1] == 1.0

    def degree_vars(self) -> set[str]:
        out = {n for n, _ in self.monomial}
        for _, (ws, _) in self.trig:
            out.update(n for n, _ in ws)
        return out

    def to_expr(self) -> Expression:
        if not self.trig:
            if not self.monomial:
                return Const(self.coef)
            return Signomial(self.coef, self.monomial)
        fs: list[Expression] = [Signomial(self.coef, self.monomial)]
        for kind, (ws, c0) in self.trig:
            arg = Affine(ws, c0)
            fs.append(Sin(arg) if kind == "sin" else Cos(arg))
        return Product(tuple(fs))


def _mono_mul(a, b):
    d = dict(a)
    for n, p in b:
        d[n] = d.get(n, 0.0) + p
    return tuple(sorted((n, p) for n, p in d.items() if p != 0.0))


def _collect(terms: Iterable[Term], drop_tol: float = 0.0) -> list[Term]:
    acc: dict = {}
    order = []
    for t in terms:
        k = t.key
        if k in acc:
            acc[k] += t.coef
        else:
            acc[k] = t.coef
            order.append(k)
    out = []
    for k in order:
        c = acc[k]
        if abs(c) > drop_tol:
            out.append(Term(c, k[0], k[1]))
    return out


def _mul_terms(xs: list[Term], ys: list[Term]) -> list[Term]:
    out = []
    for a in xs:
        for b in ys:
            trig = tuple(sorted(a.trig + b.trig))
            out.append(Term(a.coef * b.coef, _mono_mul(a.monomial, b.monomial), trig))
    return _collect(out)


def _as_affine_arg(terms: list[Term]) -> AffineArg:
    const = 0.0
    ws = {}
    for t in terms:
        if t.is_constant():
            const += t.coef
        elif t.is_linear():
            n = t.monomial[0][0]
            ws[n] = ws.get(n, 0.0) + t.coef
        else:
            raise NotExpandable("trig argument is not affine")
    return tuple(sorted((n, w) for n, w in ws.items() if w != 0.0)), const


def expand(expr: Expression) -> list[Term]:
    """Flatten ``expr`` into a list of :class:`Term` with like terms merged."""
    if isinstance(expr, Const):
        return [Term(expr.value_)] if expr.value_ != 0.0 else []
    if isinstance(expr, Var):
        return [Term(1.0, ((expr.name, 1.0),))]
    if isinstance(expr, Affine):
        ts = [Term(a, ((n, 1.0),)) for n, a in expr.coefs]
        if expr.const:
            ts.append(Term(expr.const))
        return _collect(ts)
    if isinstance(expr, Signomial):
        return [Term(expr.coef, expr.powers)] if expr.coef != 0.0 else []
    if isinstance(expr, Sum):
        out = []
        for w, t in zip(expr._w(), expr.terms):
            out.extend(Term(w * s.coef, s.monomial, s.trig) for s in expand(t))
        return _collect(out)
    if isinstance(expr, Product):
        acc = [Term(1.0)]
        for f in expr.factors:
            acc = _mul_terms(acc, expand(f))
            if not acc:
                return []
        return acc
    if isinstance(expr, Power):
        p = expr.exponent
        base = expand(expr.base)
        if len(base) == 1 and not base[0].trig:
            t = base[0]
            if p.is_integer() or t.coef > 0:
                mono = tuple((n, q * p) for n, q in t.monomial)
                return [Term(t.coef**p, mono)]
        if p.is_integer() and p >= 0:
            acc = [Term(1.0)]
            for _ in range(int(p)):
                acc = _mul_terms(acc, base)
            return acc
        raise NotExpandable(f"power {p:g} of a multi-term base")
    if isinstance(expr, (Sin, Cos)):
        arg = _as_affine_arg(expand(expr.arg))
        kind = "sin" if isinstance(expr, Sin) else "cos"
        if not arg[0]:
            v = math.sin(arg[1]) if kind == "sin" else math.cos(arg[1])
            return [Term(v)] if v != 0.0 else []
        return [Term(1.0, (), ((kind, arg),))]
    if isinstance(expr, Poly):
        base = expand(expr.arg)
        out = []
        power = [Term(1.0)]
        for k, a in enumerate(expr.coeffs):
            if k > 0:
                power = _mul_terms(power, base)
            if a:
                out.extend(Term(a * t.coef, t.monomial, t.trig) for t in power)
        return _collect(out)
    raise NotExpandable(f"unknown node {type(expr).__name__}")


def from_terms(terms: Iterable[Term]) -> Expression:
    """Rebuild an expression from flat terms (affine part folded together)."""
    lin: dict[str, float] = {}
    const = 0.0
    rest = []
    for t in terms:
        if t.is_constant():
            const += t.coef
        elif t.is_linear():
            n = t.monomial[0][0]
            lin[n] = lin.get(n, 0.0) + t.coef
        else:
            rest.append(t.to_expr())
    parts: list[Expression] = []
    if lin or const:
        parts.append(Affine.of(lin, const))
    parts.extend(rest)
    if not parts:
        return Const(0.0)
    if len(parts) == 1:
        return parts[0]
    return Sum(tuple(parts))
