"""
IEEE 14-bus: original and convexified OPF side by side
======================================================

"""

# %%
import numpy as np

from convopf import build_admittance, build_opf, bundled_case, convexify, recover, solve, to_network
from convopf.powerflow import dispatch_from_point, newton_raphson_pf

net = to_network(bundled_case("ieee14"))
Y = build_admittance(net)
print(net.n_bus, "buses,", net.n_gen, "generators,", round(net.pd.sum() * net.base_mva, 2), "MW of load")

# %% [markdown]
# The polar model, solved directly. The interior-point method only
# promises a local optimum here.

# %%
model = build_opf(net, Y)
base = solve(model)
print(base.status, round(base.objective, 2), "$/h in", base.iterations, "iterations")

# %% [markdown]
# Shift, Taylor-substitute, split and transform. The trace keeps the
# row counts of every stage.

# %%
cm = convexify(model)
for stage, counts in cm.trace.items():
    print(f"{stage:12s}", {k: v for k, v in counts.items() if isinstance(v, (int, float))})
print(cm.plan.n_new, "substitutions, e.g.")
print("\n".join(cm.plan.dump().splitlines()[:3]))

# %%
sol = solve(cm)
rec = recover(sol, cm.shifts, cm.plan, model, cm)
pg = sum(rec.x[f"Pg[{i}]"] for i in range(net.n_gen)) * net.base_mva
print(sol.status, round(sol.objective, 2), "$/h, total Pg", round(pg, 2), "MW")
print("largest exact balance residual at the recovered point:", f"{rec.max_eq_residual:.1e} p.u.")

# %% [markdown]
# Fix the recovered dispatch and let Newton-Raphson settle the voltages.

# %%
pf = newton_raphson_pf(net, Y, dispatch_from_point(net, rec.x))
print(pf.status, "after", pf.iterations, "iteration(s), mismatch", f"{pf.mismatch:.1e}")
print("voltage change:", f"{np.abs(pf.V - [rec.x[f'V[{k}]'] for k in range(net.n_bus)]).max():.1e} p.u.")
