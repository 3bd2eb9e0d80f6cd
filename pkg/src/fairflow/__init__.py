"""Fair dynamic pricing and admission control for a two-stage fluid queue."""

from fairflow.model import (
    ClassParams,
    Control,
    HiddenState,
    Observation,
    SystemParams,
    aggregate_derivative,
    dropout_rate,
    hidden_derivative,
    service_rate,
    service_rate_slope,
)
from fairflow.metrics import FairnessWindow, RevenueAccumulator
from fairflow.cbf import ExtendedState, LieBundle, eta1, eta2, lie_bundle, predict_state
from fairflow.robust import (
    ConsistencySet,
    EmptyConsistencySet,
    state_bounds,
    vertices,
    worst_case_eta1,
    worst_case_eta2,
)
from fairflow.controller import (
    ControllerConfig,
    Decision,
    fallback,
    robust_fair_decide,
    surge_decide,
)
from fairflow.sim import DemandProfile, Scenario, TraceRow, presets, run

__version__ = "0.1.0"
