"""Adaptive Monte Carlo where the target or kernel is tuned from the
chain's own output: learned independence proposals, non-reversible parallel
tempering with a variational reference, transport-map samplers, and a
numerical lab for the supporting convergence theory."""

from .core import (
    AcceptanceStats,
    ChainAbort,
    ComposedKernel,
    DensityError,
    IidKernel,
    IndependenceMHKernel,
    KernelError,
    MarkovKernel,
    MixtureKernel,
    RandomWalkKernel,
    SliceKernel,
    TargetDensity,
    compose_kernels,
    mh_accept,
    mix_kernels,
    parallel_map,
    run_chain,
    rwmh_kernel,
    slice_kernel,
)
from .expfam import (
    DiagGaussianFamily,
    ExpFamily,
    InfeasibleMomentError,
    KnownVarianceGaussianFamily,
    NaturalDomainError,
    SuffStatAccumulator,
    curse_of_dim_experiment,
    forward_kl_optimum,
    imh_kernel,
    moment_to_natural,
    natural_to_moment,
    online_update,
)
from .moi import AdaptiveState, MoiProblem, adaptive_step, nt_schedule, run_moi
from .optim import (
    DivergenceError,
    OptimizerState,
    constant_schedule,
    parametric_schedule,
    run_sgd,
    sgd_step,
)
from .rng import RngStream
from .tempering import (
    AnnealingPath,
    Schedule,
    equally_spaced_schedule,
    ess,
    nrpt_run,
    single_leg_path,
    tune_variational_reference,
    two_leg_path,
)
from .transport import AffineMap, adaptive_transport_run, affine_map

__version__ = "0.1.0"
