"""Bayesian and deterministic inversion for mixed linear/nonlinear problems.

The measurement model is u = A(m) g + noise with an ill-conditioned linear
part in g and a low-dimensional nonlinear geometry parameter m. This
package samples the joint posterior over (m, log10 C), where C is the
Tikhonov regularization constant treated as a random variable, and ships
the classic deterministic selection rules (GCV, discrepancy, maximum
likelihood) it is compared against.
"""

from .estimators import BayesianInverter, GlobalDiscrepancyInverter
from .exceptions import (
    ConfigError,
    DataError,
    EvaluationError,
    MixinvError,
    NoRootError,
    NumericalError,
    PlaneIntersectsSurfaceError,
    SingularRegularizerError,
    SolverConvergenceError,
    ZeroDataError,
)
from .linops import (
    LinearOperator,
    RegularizerMatrix,
    SpectralSummary,
    WhitenedOperator,
    dense_det_oracle,
    influence_residual,
    log_det_whitened,
    solve_gmin,
    solve_whitened,
    truncated_singular_values,
    whiten_operator,
)
from .models import (
    ForwardModel,
    GroundTruth,
    Observation,
    SlipBump,
    assemble_A,
    dense_test_operator,
    generate_observations,
    make_forward_model,
    make_R,
    synth_slip,
)
from .posterior import (
    AugmentedState,
    DensityEval,
    EvalConfig,
    PriorSpec,
    log_prior,
    log_unnormalized_posterior,
    make_posterior_evaluator,
    ml_ratio,
    quadrature_marginal_oracle,
    sigma_max_sq,
)
from .regselect import (
    GlobalDiscrepancyResult,
    SelectionResult,
    cls_select,
    default_c_grid,
    gcv_score,
    gcv_select,
    global_discrepancy,
    minimize_f_C,
    ml_select,
    pointwise_objective,
)
from .sampler import (
    ChainResult,
    RunningMoments,
    SamplerConfig,
    TransitionMatrix,
    build_transition_matrix,
    mh_accept,
    propose_gaussian,
    run_parallel_chain,
    run_single_chain,
)

__version__ = "0.1.0"
