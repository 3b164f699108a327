"""Generic smooth NLP container.

An :class:`NlpModel` is::

    min  objective(x)
    s.t. eq(x)   = 0     for eq in equalities
         ineq(x) <= 0    for ineq in inequalities
         lo <= x <= hi

Each constraint carries an ``origin`` tag such as ``"P-balance@3"`` or
``"flow@12"`` plus a free-form ``meta`` dict that later rewrites use.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .expr import Expression, evaluate, variables

__all__ = ["Variable", "Constraint", "NlpModel", "ModelError"]


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Variable:
    name: str
    lo: float = -np.inf
    hi: float = np.inf
    init: float = 0.0

    @property
    def fixed(self) -> bool:
        return self.lo == self.hi


@dataclass(frozen=True, eq=False)
class Constraint:
    expr: Expression
    origin: str
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class NlpModel:
    variables: tuple[Variable, ...]
    objective: Expression
    equalities: tuple[Constraint, ...] = ()
    inequalities: tuple[Constraint, ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise ModelError("duplicate variable names")
        for v in self.variables:
            if v.lo > v.hi:
                raise ModelError(f"variable {v.name}: lower bound above upper bound")
        declared = set(names)
        for e in self._all_exprs():
            missing = variables(e) - declared
            if missing:
                raise ModelError(f"undeclared variable(s) {sorted(missing)[:5]}")

    def _all_exprs(self) -> Iterable[Expression]:
        yield self.objective
        for c in self.equalities:
            yield c.expr
        for c in self.inequalities:
            yield c.expr

    # --------------------------------------------------------------------
    @property
    def names(self) -> list[str]:
        return [v.name for v in self.variables]

    @property
    def n(self) -> int:
        return len(self.variables)

    def var(self, name: str) -> Variable:
        for v in self.variables:
            if v.name == name:
                return v
        raise KeyError(name)

    def index(self) -> dict[str, int]:
        return {v.name: i for i, v in enumerate(self.variables)}

    def lower(self) -> np.ndarray:
        return np.array([v.lo for v in self.variables])

    def upper(self) -> np.ndarray:
        return np.array([v.hi for v in self.variables])

    def x0(self) -> np.ndarray:
        return np.array([v.init for v in self.variables])

    def point(self, x) -> dict[str, float]:
        return {v.name: float(xi) for v, xi in zip(self.variables, x)}

    def with_(self, **kw) -> "NlpModel":
        return replace(self, **kw)

    def with_start(self, x) -> "NlpModel":
        vs = tuple(replace(v, init=float(xi)) for v, xi in zip(self.variables, x))
        return replace(self, variables=vs)

    def residuals(self, x) -> dict[str, float]:
        """Max |equality| and max inequality violation at ``x``."""
        pt = self.point(x)
        eq = max((abs(evaluate(c.expr, pt)) for c in self.equalities), default=0.0)
        iq = max((max(evaluate(c.expr, pt), 0.0) for c in self.inequalities), default=0.0)
        return {"max_eq": float(eq), "max_ineq": float(iq)}

    def dump(self) -> str:
        """Line-oriented text listing, stable for golden-file comparisons."""
        lines = []
        for v in self.variables:
            lines.append(f"var {v.name} [{v.lo:.12g}, {v.hi:.12g}] init={v.init:.12g}")
        lines.append(f"min {self.objective}")
        for c in self.equalities:
            lines.append(f"eq {c.origin}: {c.expr} = 0")
        for c in self.inequalities:
            lines.append(f"ineq {c.origin}: {c.expr} <= 0")
        return "\n".join(lines) + "\n"
