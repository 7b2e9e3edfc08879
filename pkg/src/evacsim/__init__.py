"""Microscopic evacuation-traffic simulation and analysis."""

from .network import (RoadNetwork, NetworkError, NetworkSyntaxError, NetworkSemanticError,
                      parse_network, load_network, save_network, serialize_network,
                      validate_network, route_exists, total_length_by_type)
from .policy import (PolicyError, PolicyScript, ReverseEdge, BlockLaneAtJunction, RemoveSignal,
                     ForbidLaneChange, CloseEdge, apply_policy, reverse_edge,
                     block_lane_at_junction, remove_signal, forbid_lane_change)
from .demand import (Trip, DemandSet, GammaTemporal, SpatialAllocation, allocate_origins,
                     sample_departures, generate_demand)
from .routing import (TravelTimeTable, Route, shortest_path_distance, fastest_path,
                      record_traversal, reroute_batch)
from .engine import SimConfig, ClosureEvent, SimOutputs, safe_speed, run
from .metrics import EvacCurve, SpeedMap, build_curves, build_speed_map, gap_area, summarize_scenarios
from .pointprocess import EventRecord, PointProcessModel, pp_fit, pp_loglik, pp_simulate

__all__ = [
    "RoadNetwork", "NetworkError", "NetworkSyntaxError", "NetworkSemanticError", "parse_network",
    "load_network", "save_network", "serialize_network", "validate_network", "route_exists",
    "total_length_by_type", "PolicyError", "PolicyScript", "ReverseEdge", "BlockLaneAtJunction",
    "RemoveSignal", "ForbidLaneChange", "CloseEdge", "apply_policy", "reverse_edge",
    "block_lane_at_junction", "remove_signal", "forbid_lane_change", "Trip", "DemandSet",
    "GammaTemporal", "SpatialAllocation", "allocate_origins", "sample_departures",
    "generate_demand", "TravelTimeTable", "Route", "shortest_path_distance", "fastest_path",
    "record_traversal", "reroute_batch", "SimConfig", "ClosureEvent", "SimOutputs", "safe_speed",
    "run", "EvacCurve", "SpeedMap", "build_curves", "build_speed_map", "gap_area",
    "summarize_scenarios", "EventRecord", "PointProcessModel", "pp_fit", "pp_loglik", "pp_simulate",
]

__version__ = "0.1.0"
