"""Discrete-event simulator of self-balancing semi-hierarchical payment channel networks."""

from .engine import Network, Simulation, run
from .loadgen import (
    ArrivalProcess,
    LoadProfile,
    PaymentRequest,
    RequestStream,
    ScenarioTable,
    build_profile,
    generate_requests,
)
from .metrics import CostModel, MetricsLog, completion_cdf, per_minute_series, success_rate, sweep_summary
from .model import ActionKind, EventKind, InvariantError, PaymentKind, SimConfig
from .topology import (
    EURO,
    Topology,
    TopologyParams,
    generate_topology,
    parse_topology,
    scaled_europe_params,
    serialize_topology,
    total_routing_liquidity,
    validate,
)

__version__ = "0.1.0"
