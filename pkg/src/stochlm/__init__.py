"""Stochastic landmark dynamics with Eulerian transport noise.

Forward simulation of the stochastic landmark Hamiltonian system,
moment-closure approximation of its Fokker-Planck equation, guided
diffusion bridges conditioned on endpoint configurations, and noise
parameter inference by moment matching or Monte-Carlo EM / MLE.
"""

from .errors import (
    BridgeError,
    ConfigError,
    EstimationError,
    InputError,
    IntegrationError,
    NumericError,
    StochlmError,
)
from .kernels import (
    KernelSpec,
    NoiseModel,
    concat_noise,
    kernel_eval,
    make_grid_noise,
    noise_field_eval,
)
from .hamiltonian import (
    LandmarkState,
    ShootOpts,
    ShootResult,
    Trajectory,
    ellipse_landmarks,
    flow_deterministic,
    ham_vector_field,
    hamiltonian,
    shoot,
)
from .sde import (
    EndpointSamples,
    SdePath,
    diffusion_matrix,
    ito_drift,
    sample_endpoints,
    simulate_additive_baseline,
    simulate_sde,
)
from .moments import (
    MomentState,
    MomentTrajectory,
    empirical_moments,
    integrate_moments,
    moment_rhs,
)

__version__ = "0.1.0"
