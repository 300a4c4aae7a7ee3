"""Learning stable arm-motion dynamics, coupling a follower to a leader,
and running the coupled pair as a real-time handover controller."""

from .errors import (
    FitError,
    FormatError,
    HandoverCdsError,
    InputError,
    IntegrationError,
    ModelIntegrityError,
    ParseError,
    ProtocolError,
)
from .gaussians import (
    ConditioningSpec,
    EMConfig,
    Gaussian,
    GaussianMixture,
    fit_em,
    gmr_condition,
    log_density,
    responsibilities,
    sample_mixture,
)
from .seds import (
    FitReport,
    SedsConfig,
    StableDS,
    State,
    fit_stable_ds,
    integrate,
    integrate_batch,
    velocity_at,
    verify_stability,
)
from .cds import (
    CoupledSystem,
    CouplingFunction,
    CouplingKind,
    CouplingModel,
    cds_step,
    infer_slave_target,
    learn_coupled_system,
    learn_coupling,
    run_interaction,
)
from .trajectories import (
    ActionLabel,
    Demonstration,
    DemoSet,
    Frame,
    GeometryConfig,
    Role,
    generate_synthetic_handover,
    generate_synthetic_place,
    load_demos,
    preprocess,
    project_yz,
    save_demos,
)
from .recognition import (
    IntentEstimate,
    IntentLabel,
    RecognizerConfig,
    StreamClassifier,
    calibrate_recognizer,
    score_window,
)
from .bundle import ModelBundle, load_bundle, save_bundle

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
