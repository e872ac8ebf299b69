"""Federated goodness-of-fit testing under differential privacy.

Servers each hold ``n`` noisy observations of a signal in the Gaussian
sequence model and may only send privatised transcripts. The package
provides the model, the privacy mechanisms, three private tests and their
adaptive combination, the closed-form separation rates, and a Monte Carlo
harness with a command-line front end.
"""

from .adaptive import (
    AdaptiveCalibration,
    AdaptiveOutcome,
    AdaptiveProcedure,
    ResolutionGrid,
    adaptive_test_local,
    adaptive_test_shared,
    calibrate_adaptive,
    partition_grid,
    resolution_grid,
    smoothness_mesh,
)
from .harness import (
    BoundaryEstimate,
    BracketError,
    CalibratedTest,
    RiskEstimate,
    calibrate_test,
    compare_protocols,
    detection_boundary,
    estimate_risk,
)
from .privacy import (
    MechanismRecord,
    PrivacyBudget,
    check_set_A_sampled,
    check_set_B,
    clip,
    composed_epsilon,
    gaussian_release,
)
from .procedures import (
    PROTOCOLS,
    SharedRandomness,
    TestOutcome,
    Transcript,
    calibrate_threshold,
    classical_stat,
    haar_rotation,
    partition_servers,
    stat_I,
    test_I,
    test_II,
    test_III,
    thresholds_T_L,
    transcript_I,
    transcript_II,
    transcript_III,
)
from .rates import (
    RegimeReport,
    classify_regime,
    optimal_resolution,
    separation_rate_local,
    separation_rate_shared,
)
from .sequence_model import (
    DistributedData,
    ModelConfig,
    Signal,
    besov_norm,
    gen_signal_prior,
    gen_signal_single_level,
    project,
    sample_besov_ball,
    sample_data,
)

__version__ = "0.1.0"
