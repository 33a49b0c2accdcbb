"""Constrained maximum-likelihood iterative reconstruction with
statistical stopping rules.

ISRA handles Gaussian noise (nonnegative least squares), EM handles
Poisson noise (Kullback-Leibler divergence); both are plain multiplicative
schemes stopped by a pluggable rule, centered on the backprojected-residual
criterion that keeps working when the data leaves the operator's cone.
"""

from .objectives import NoiseKind, NoiseModel, cbr_expected, cbr_residual, d_kl, d_ls
from .operators import (
    ForwardOperator,
    ImageVector,
    adjoint_apply,
    apply,
    build_blur_operator,
    build_dense_positive,
    load_operator_csv,
    save_operator_csv,
    squared_adjoint_apply,
)
from .solvers import (
    IterationState,
    ReconstructionResult,
    SolverKind,
    StopReason,
    em_step,
    flux_matched_start,
    initial_state,
    isra_step,
    multiplicative_step,
    run,
)
from .stopping import (
    RuleKind,
    RuleTrace,
    StoppingRule,
    default_tau,
    evaluate,
    write_trace_csv,
)
from .simkit import (
    GaussianSource,
    NoisySample,
    PhantomSpec,
    build_ill_posed_instance,
    build_phantom,
    certify_outside_cone,
    four_source_phantom,
    make_noisy_sample,
    sample_noise,
)
from .evaluation import (
    PhotometryReport,
    SourcePhotometry,
    box_flux,
    l2_error_trace,
    photometry,
    stop_quality_study,
)

__version__ = "0.1.0"
