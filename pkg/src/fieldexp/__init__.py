"""Error exponents for Neyman-Pearson detection of a correlated Gaussian
field under uniform, clustered, and arbitrary periodic sensor activation,
with a Monte Carlo detection oracle validating every closed form."""

__version__ = "0.1.0"

from .errors import (
    InternalConsistencyError,
    NumericFailure,
    RootNotFound,
    SingularRegimeError,
)
from .field_model import (
    Clustered,
    FieldParams,
    Hypothesis,
    Periodic,
    SensorLayout,
    Uniform,
    correlation_from_spacing,
    derive_rng,
    sample_observation_matrix,
    sample_observations,
    signal_covariance,
    step_correlations,
)
from .kalman_exponent import (
    ExponentResult,
    ScalarInnovations,
    StateSpace,
    VectorInnovations,
    build_periodic_state_space,
    clustering_exponent,
    scalar_exponent,
    scalar_exponent_from_correlation,
    scalar_riccati_fixed_point,
    vector_exponent,
    vector_lyapunov_solve,
    vector_riccati_solve,
)
from .config_opt import (
    OptimalSpacingResult,
    SweepResult,
    cluster_size_sweep,
    correlation_sweep,
    offset_sweep_m2,
    offset_sweep_m3,
    optimal_correlation,
    optimal_spacing,
    snr_sweep,
)
from .mc_detector import (
    DetectionEstimate,
    ValidationBudget,
    ValidationReport,
    clustered_family,
    estimate_miss_probability,
    family_from_layout,
    llr_direct,
    llr_innovations,
    periodic_family,
    uniform_family,
    validate_exponent,
)

__all__ = [name for name in dir() if not name.startswith("_")]
