"""Federated bilevel optimization with adaptive STORM estimators."""
from . import kernels
from .adafbio import (
    AdaptiveState,
    ClientState,
    ConfigError,
    ContractViolation,
    NumericalError,
    ScheduleConfig,
    eta,
    init_estimators,
    local_step,
    select_output,
    storm_update_v,
    storm_update_w,
    update_adaptive,
)
from .federation import RunTrace, ServerState, accounting, aggregate, run, server_sync
from .hypergrad import (
    NeumannConfig,
    bias_bound,
    choose_K,
    empirical_bias,
    neumann_enumerated,
    neumann_hypergrad,
)
from .problems import *  # noqa: F401,F403

__version__ = "0.1.0"
