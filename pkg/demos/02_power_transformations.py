"""
Power transformations on a one-variable signomial
=================================================

"""

# %%
from convopf.expr import Signomial
from convopf.signomial import (
    SignomialTerm,
    classify_term,
    plan_transformations,
    sign_transform_inverse,
    verify_convexity_sampled,
)

# f(x) = x^4 + 80 x^2 - 160 x + 100 - 15 x^3 on [1, 6]
terms = [SignomialTerm.of(1, {"x": 4}), SignomialTerm.of(80, {"x": 2}),
         SignomialTerm.of(-160, {"x": 1}), SignomialTerm.of(-15, {"x": 3})]
for t in terms:
    print(f"{str(t):12s}", classify_term(t).value)

# %%
f = sum((t.to_expr() for t in terms), Signomial.of(100.0, {}))
print(verify_convexity_sampled(f, {"x": (1.0, 6.0)}))

# %% [markdown]
# Only the cubic term is in the way. The search tries every exponent of the
# grid and keeps the cheapest assignment.

# %%
plan = plan_transformations(terms, bounds={"x": (1.0, 6.0)})
print(plan.dump())

# %%
g = sum((plan.transform(t).to_expr() for t in terms), Signomial.of(100.0, {}))
box = {"x": (1.0, 6.0), **{s.new: (s.lo, s.hi) for s in plan.substitutions}}
print(verify_convexity_sampled(g, box))

# %% [markdown]
# The nonconvexity has moved into the link between x and the new variable.
# Its convex half depends on the sign and size of the inverse exponent.

# %%
for q in (1 / 3, 3.0, -2.0):
    r = sign_transform_inverse("x", q, "X")
    print(f"q = {q:6.3f}  a = {r.a:6.3f}  flipped={r.flipped!s:5s}  convex side: {r.convex.expr} <= 0")
