"""Convexified polar AC optimal power flow.

The original OPF (quadratic costs, polar power balance, voltage and
generator limits) is rewritten as a convex program: angle differences are
bounded and sin/cos replaced by low-order Taylor polynomials, variables are
shifted to be strictly positive, and every remaining signomial term is made
convex by power substitutions ``x = X**q`` chosen from a small exponent grid.
Both models are solved with the bundled primal-dual interior-point method and
checked with a Newton-Raphson power flow.

Typical use::

    from convopf import bundled_case, to_network, build_admittance, build_opf
    from convopf import convexify, solve, recover

    net = to_network(bundled_case("ieee14"))
    Y = build_admittance(net)
    model = build_opf(net, Y)
    cm = convexify(model)
    sol = recover(solve(cm), cm.shifts, cm.plan, model, cm)
"""

from .case_io import (
    BUNDLED_CASES,
    CaseData,
    CaseParseError,
    CaseValidationError,
    NetworkData,
    bundled_case,
    load_case,
    parse_matpower,
    serialize_matpower,
    to_network,
)
from .convexify import ConvexityError, ConvexModel, convexify, random_start, recover, start_point
from .model import Constraint, ModelError, NlpModel, Variable
from .network import AdmittanceMatrix, build_admittance
from .opf import build_opf
from .signomial import (
    DEFAULT_GRID,
    SignomialTerm,
    TermClass,
    TransformationPlan,
    classify_term,
    plan_transformations,
    sign_transform_inverse,
    verify_convexity_sampled,
)
from .solver import PfSolution, Solution, SolverOptions, kkt_residuals, newton_raphson_pf, solve

__version__ = "0.1.0"

__all__ = [
    "BUNDLED_CASES",
    "CaseData",
    "CaseParseError",
    "CaseValidationError",
    "NetworkData",
    "bundled_case",
    "load_case",
    "parse_matpower",
    "serialize_matpower",
    "to_network",
    "AdmittanceMatrix",
    "build_admittance",
    "NlpModel",
    "Variable",
    "Constraint",
    "ModelError",
    "build_opf",
    "SignomialTerm",
    "TermClass",
    "TransformationPlan",
    "DEFAULT_GRID",
    "classify_term",
    "plan_transformations",
    "sign_transform_inverse",
    "verify_convexity_sampled",
    "ConvexModel",
    "ConvexityError",
    "convexify",
    "recover",
    "start_point",
    "random_start",
    "Solution",
    "SolverOptions",
    "PfSolution",
    "solve",
    "kkt_residuals",
    "newton_raphson_pf",
]
