"""Inexact progressive hedging for multistage stochastic variational inequalities."""

from .core import IphaParams, IphaState, SolveResult, solve
from .errors import (
    BudgetError,
    ConfigurationError,
    ConsistencyError,
    DegenerateStepError,
    DimensionError,
    IntegrityError,
    IphaError,
    ParameterError,
    SchemaError,
)
from .nash import NashGameParams, NashRanges, assemble_instance, counterexample_instance, random_family
from .problem import (
    AffineMapping,
    Box,
    CappedPairs,
    CustomConstraint,
    Orthant,
    SviInstance,
    check_monotone,
    evaluate_F,
    extensive_residual,
    project_C,
)
from .space import ScenarioSpace, inner_product, mr_norm, norm, project_M, project_N
from .subsolvers import SubsolverConfig, build_certificate, fpa_solve, snm_solve

__version__ = "0.1.0"
