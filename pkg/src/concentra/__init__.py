"""Concentrating solutions of singularly perturbed elliptic equations with
anisotropic diffusion: limit profiles, penalized energies, solvers, a finite
dimensional reduction and diagnostics.
"""
import os as _os

# cap BLAS threads before numpy is imported anywhere in the package
if _os.environ.get("CONCENTRA_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["CONCENTRA_THREADS"])

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConcentraError,
    ConfigError,
    ContractionError,
    DegenerateBasisError,
    DomainError,
    EllipticityError,
    GridSizeError,
    NonConvergenceError,
    PreconditionError,
    SolverError,
)
from .fields import (  # noqa: E402
    AffineDiffusion,
    ConstantDiffusion,
    ConstantPotential,
    DiagonalDiffusion,
    GaussianWells,
    QuadraticWell,
    diagonalizing_transform,
    find_gamma_critical_points,
    gamma_eval,
    gamma_values,
    identity_diffusion,
)
from .limit_profile import (  # noqa: E402
    RadialProfile,
    cached_profile,
    frozen_sigma_numeric,
    scaled_profile,
    sigma_closed_form,
    solve_radial_ground_state,
)
from .penalty import PenaltyConfig, make_penalty, penalized_nonlinearity  # noqa: E402
from .discretization import DiscreteEnergy, GridDomain, GridFunction, ProblemSpec, build_grid  # noqa: E402
from .solvers import (  # noqa: E402
    mountain_pass_level,
    multi_start,
    nehari_minimize,
    newton_refine,
    solve_concentrating,
)
from .reduction import (  # noqa: E402
    ReductionProblem,
    reduced_critical_points,
    reduced_energy,
    solve_correction,
    tangent_basis,
)
from .diagnostics import (  # noqa: E402
    barycenter,
    concentration_gradient_test,
    concentration_series,
    exterior_bound_check,
    global_max_point,
    pucci_serrin_residual,
)

__all__ = [
    "__version__",
    "ConcentraError",
    "ConfigError",
    "ContractionError",
    "DegenerateBasisError",
    "DomainError",
    "EllipticityError",
    "GridSizeError",
    "NonConvergenceError",
    "PreconditionError",
    "SolverError",
    "AffineDiffusion",
    "ConstantDiffusion",
    "ConstantPotential",
    "DiagonalDiffusion",
    "GaussianWells",
    "QuadraticWell",
    "diagonalizing_transform",
    "find_gamma_critical_points",
    "gamma_eval",
    "gamma_values",
    "identity_diffusion",
    "RadialProfile",
    "cached_profile",
    "frozen_sigma_numeric",
    "scaled_profile",
    "sigma_closed_form",
    "solve_radial_ground_state",
    "mountain_pass_level",
    "multi_start",
    "nehari_minimize",
    "newton_refine",
    "solve_concentrating",
    "ReductionProblem",
    "reduced_critical_points",
    "reduced_energy",
    "solve_correction",
    "tangent_basis",
    "barycenter",
    "concentration_gradient_test",
    "concentration_series",
    "exterior_bound_check",
    "global_max_point",
    "pucci_serrin_residual",
    "PenaltyConfig",
    "make_penalty",
    "penalized_nonlinearity",
    "DiscreteEnergy",
    "GridDomain",
    "GridFunction",
    "ProblemSpec",
    "build_grid",
]
