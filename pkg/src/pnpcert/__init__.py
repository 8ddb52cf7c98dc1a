"""Plug-and-play and RED solvers with numerical convergence certificates."""
from .certify import (
    Certificate,
    PairSampler,
    build_certificate,
    check_theorem1,
    check_theorem2,
    check_theorem3,
    error_bound_epsilon,
    estimate_lipschitz,
    estimate_srec_mu,
)
from .linops import (
    DenseOp,
    IdentityOp,
    MeasurementOp,
    PatchBlockOp,
    RadialFourierOp,
    Signal,
    make_gaussian_block_operator,
    make_radial_fourier_operator,
    spectral_norm,
)
from .priors import (
    ConvResidualPrior,
    IdentityPrior,
    ScaledPrior,
    SubspaceProjector,
    TVProxPrior,
    load_conv_residual_prior,
    make_scaled_prior,
    make_subspace_projector,
    make_tv_prox_prior,
)
from .solvers import (
    DivergenceError,
    Problem,
    SolverConfig,
    SolverTrace,
    contraction_constant,
    grad_datafit,
    pnp_pgm,
    sd_red,
    step_size_window,
)

__version__ = "0.1.0"
