"""bitstab: simulation and analysis of bit-rate-minimal stabilization.

Closed-loop simulation of unstable stochastic linear plants controlled
through a finite-alphabet channel with floor(a) + 1 quantization bins, the
minimum at which a finite beta-moment is attainable.  Includes the
adaptive-zoom round machine (magnitude tests, emergency probing), its
generalizations (observation delay, partial transmission schedules,
correlated Gaussian noise, vector plants on time-shared schedules),
numeric converse calculators, and a Monte Carlo harness with pathwise
certificates.
"""

from .core import (
    ConfigError,
    ControllerConfig,
    InitialStateSpec,
    SystemModel,
    TransmissionSchedule,
    Violation,
    checked_config,
    derive_constants,
    derive_moment_gap,
    derive_probe_factor,
    derive_round_length,
    min_bins,
    validate_config,
)
from .noise import (
    NoiseSpec,
    NoiseStream,
    ell1_spectral_bound,
    sample_noise,
    verify_alpha_moment,
    whitening_complement,
)
from .scalar import (
    Mode,
    RoundRecord,
    TrajectoryTrace,
    bin_index,
    bin_midpoint,
    control_law,
    simulate_trajectory,
    trajectory_rng,
    wrap_delay,
    wrap_schedule,
    write_trace_csv,
)
from .batch import BatchResult, auto_scale_B, run_sharded, simulate_batch
from .analysis import (
    bounded_noise_certificate,
    check_lemma_max,
    check_normal_bound,
    epi_lower_bound,
    estimate_beta_moment,
    round_contraction_stats,
    tau_tail,
    weak_converse_bound,
    wilson_interval,
)
from .vector import (
    BallCode,
    SpectralDecomposition,
    SubspaceSchedule,
    VectorController,
    allocate_schedules,
    ball_cover_decode,
    ball_cover_encode,
    design_vector_controller,
    real_jordan,
    reduce_to_delayed,
    simulate_vector,
    stabilizable_decompose,
)
from .cli import main, run_experiment

__version__ = "0.1.0"

__all__ = [
    "BallCode", "BatchResult", "ConfigError", "ControllerConfig",
    "InitialStateSpec", "Mode", "NoiseSpec", "NoiseStream", "RoundRecord",
    "SpectralDecomposition", "SubspaceSchedule", "SystemModel",
    "TrajectoryTrace", "TransmissionSchedule", "VectorController",
    "Violation", "allocate_schedules", "auto_scale_B", "ball_cover_decode",
    "ball_cover_encode", "bin_index", "bin_midpoint",
    "bounded_noise_certificate", "check_lemma_max", "check_normal_bound",
    "checked_config", "control_law", "derive_constants",
    "derive_moment_gap", "derive_probe_factor", "derive_round_length",
    "design_vector_controller", "ell1_spectral_bound", "epi_lower_bound",
    "estimate_beta_moment", "main", "min_bins", "real_jordan",
    "reduce_to_delayed", "round_contraction_stats", "run_experiment",
    "run_sharded", "sample_noise", "simulate_batch", "simulate_trajectory",
    "simulate_vector", "stabilizable_decompose", "tau_tail",
    "trajectory_rng", "validate_config", "verify_alpha_moment",
    "weak_converse_bound", "whitening_complement", "wilson_interval",
    "wrap_delay", "wrap_schedule", "write_trace_csv",
]
