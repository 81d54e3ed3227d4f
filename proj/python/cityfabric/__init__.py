"""Python access to the cityfabric core."""

from ._core import (
    Error,
    Gateway,
    Store,
    aggregate_stream,
    allocate_edge_flows,
    arrival_counts,
    choose_device,
    client_frames,
    coarse_graph,
    evaluate_baseline,
    fedavg,
    load_scenario,
    run_scenario,
    sweep,
    validate_scenario,
)

__all__ = [
    "Error",
    "Gateway",
    "Store",
    "aggregate_stream",
    "allocate_edge_flows",
    "arrival_counts",
    "choose_device",
    "client_frames",
    "coarse_graph",
    "evaluate_baseline",
    "fedavg",
    "load_scenario",
    "run_scenario",
    "sweep",
    "validate_scenario",
]
