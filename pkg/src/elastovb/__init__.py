"""Subspace variational inference for elastographic inverse problems.

Infers a per-element log-modulus field from noisy displacement data by
combining a plane-strain finite-element forward model with a mean-field
variational posterior confined to an adaptively grown low-dimensional
subspace, and validates the result by importance sampling.
"""

from .mesh_fem import (BoundarySpec, MaterialField, Mesh2D, SingularSystemError,
                       adjoint_jacobian, assemble_and_solve, observe)
from .forward import (CallCounter, FemForwardModel, ForwardEval, ForwardModel,
                      ForwardSolveError, LinearOracleModel, free_dofs)
from .vb import (ElboBreakdown, ReducedPosterior, concentrated_tau_prior, elbo,
                 posterior_psi_stats, q_fixed_point, update_q_tau, update_q_theta)
from .stiefel import bb_step, cayley_step, grad_FW, optimize_W
from .mean_update import (MuPhaseResult, SmoothPrior, em_phi, gauss_newton_step,
                          log_prior_mu_and_grad, update_mu)
from .driver import (DriverConfig, RunTrace, add_basis, info_gain,
                     next_prior_precision, run, state_from_dict)
from .importance import (ISReport, compare_vb_is, ess, marginal_log_likelihood,
                         run_is)
from .config import (ObservationFile, RunConfig, build_model, example1_config,
                     generate_data, initial_mu, load_config)

__version__ = "0.1.0"

__all__ = [
    "BoundarySpec", "MaterialField", "Mesh2D", "SingularSystemError",
    "adjoint_jacobian", "assemble_and_solve", "observe",
    "CallCounter", "FemForwardModel", "ForwardEval", "ForwardModel",
    "ForwardSolveError", "LinearOracleModel", "free_dofs",
    "ElboBreakdown", "ReducedPosterior", "concentrated_tau_prior", "elbo",
    "posterior_psi_stats", "q_fixed_point", "update_q_tau", "update_q_theta",
    "bb_step", "cayley_step", "grad_FW", "optimize_W",
    "MuPhaseResult", "SmoothPrior", "em_phi", "gauss_newton_step",
    "log_prior_mu_and_grad", "update_mu",
    "DriverConfig", "RunTrace", "add_basis", "info_gain",
    "next_prior_precision", "run", "state_from_dict",
    "ISReport", "compare_vb_is", "ess", "marginal_log_likelihood", "run_is",
    "ObservationFile", "RunConfig", "build_model", "example1_config",
    "generate_data", "initial_mu", "load_config",
    "__version__",
]
