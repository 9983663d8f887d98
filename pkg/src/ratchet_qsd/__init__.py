"""Simulation and quasi-stationary inference for the Muller ratchet."""
from __future__ import annotations

__version__ = "0.1.0"

from .core import (
    ModelParams,
    Params,
    Profile,
    Trajectory,
    aggregated_m1,
    delta,
    deterministic_flow,
    drift_aggregated,
    drift_full,
    model_params,
    moment,
    moment_drift,
    moment_qv,
    poisson_profile,
    project_pi_k,
    validate_profile,
    wf_covariance,
)
from .diffusion import (
    IntegratorConfig,
    euler_step,
    moment_drift_check,
    run_ensemble,
    simulate_aggregated_path,
    simulate_path,
)
from .discrete import DiscreteParams, DiscretePopulation, simulate_until_click, step_generation
from .errors import (
    Extinct,
    InvalidK,
    InvalidProfile,
    InvalidStart,
    NegativeEntry,
    NoDecayWindow,
    NotNormalized,
    ParseError,
    RatchetError,
    StatisticalFloor,
    StepTooLarge,
    ValidationError,
    WindowTooThin,
)
from .qsd import (
    ParticleEnsemble,
    QsdEstimate,
    SurvivalCurve,
    beta_sample,
    conditioned_ensemble_evolve,
    estimate_eta,
    estimate_qsd,
    estimate_rho0,
    fleming_viot_evolve,
    qsd_pushforward_check,
    sample_qprocess,
)
from .rng import Stream
