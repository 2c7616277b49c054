"""Factorization of parabolic equations along smooth maps of Riemannian charts.

Build operators from metrics, test whether they descend along a fibering,
recover the reduced operator, solve and lift, and decide which discrete
base symmetries lift to the total space.
"""

__version__ = "0.1.0"

from .expr import DomainError, Expr, ParseError, diff, evaluate, parse, to_string  # noqa: E402
from .geometry import Chart, MetricField, VectorField, euclidean, laplace_beltrami, theta_field  # noqa: E402
from .operators import (CanonicalMorphismSpec, Morphism, ParabolicOperator, apply,  # noqa: E402
                        canonical_operator_D, classify_diffusivity, heat_operator, invariance_check)
from .projectibility import (Fibering, SmoothMap, conformal_factor_check, fiber_constancy,  # noqa: E402
                             project_operator, quotient_consistency)
from .solver import Grid, GridField, residual, solve  # noqa: E402
from .connection import GroupFibering, Loop, connection_form, curvature, decompose, lift_check  # noqa: E402
from .manifest import Fixture, parse_manifest, read_manifest  # noqa: E402

__all__ = [
    "DomainError", "Expr", "ParseError", "diff", "evaluate", "parse", "to_string",
    "Chart", "MetricField", "VectorField", "euclidean", "laplace_beltrami", "theta_field",
    "CanonicalMorphismSpec", "Morphism", "ParabolicOperator", "apply", "canonical_operator_D",
    "classify_diffusivity", "heat_operator", "invariance_check",
    "Fibering", "SmoothMap", "conformal_factor_check", "fiber_constancy", "project_operator",
    "quotient_consistency", "Grid", "GridField", "residual", "solve",
    "GroupFibering", "Loop", "connection_form", "curvature", "decompose", "lift_check",
    "Fixture", "parse_manifest", "read_manifest",
]
