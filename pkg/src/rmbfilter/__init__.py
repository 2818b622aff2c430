"""Filtering a hidden terminal value from observations of a randomised Markov bridge."""

from .bridge import (
    BridgeSpec,
    RmbPath,
    bridge_transition_density,
    euler_rmb_step,
    likelihood_ratio,
    sample_bridge_path,
    sample_rmb_path,
    simulate,
    uniform_grid,
)
from .errors import (
    ConfigError,
    ConstructionError,
    DomainError,
    NumericError,
    QuadratureWarning,
    RMBError,
    UnsupportedOperationError,
)
from .filter import (
    FilterInput,
    posterior,
    price,
    rmb_ck_residual,
    rmb_transition_density,
    terminal_limit_gap,
    unnormalized_posterior,
)
from .kernels import (
    BrownianKernel,
    FiniteChainKernel,
    OrnsteinUhlenbeckKernel,
    TransitionKernel,
    ck_residual,
)
from .statespace import (
    Posterior,
    Prior,
    StateSpace,
    WeightedMeasure,
    expectation,
    make_atomic_prior,
    make_density_prior,
    total_variation,
)

__version__ = "0.1.0"
