"""
The four IEEE cases through the batch harness
=============================================

Same numbers as ``convopf suite``, here as Python objects.
"""

# %%
from convopf.cli import format_reports, run_case

reports = [run_case(name, "both") for name in ("ieee14", "ieee30", "ieee57", "ieee118")]
print(format_reports(reports))

# %% [markdown]
# Gap between the two models, relative to the original objective.

# %%
for rep in reports:
    a, b = rep.records["nonconvex"].objective, rep.records["convex"].objective
    print(f"{rep.case:8s} {100 * (b - a) / a:+.4f} %   substitutions: {rep.plan['transformed_variables']}")
