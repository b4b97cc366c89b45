"""Joint order dispatch and sensing-route planning for mixed courier/robot fleets."""

from .domain import (
    Agent,
    AgentKind,
    AssignmentSet,
    DomainError,
    GridMap,
    Order,
    OrderStatus,
    RegionAttr,
    StateEncoder,
    encode_state,
    neighbors8,
    travel_time,
)

__all__ = [
    "Agent",
    "AgentKind",
    "AssignmentSet",
    "DomainError",
    "GridMap",
    "Order",
    "OrderStatus",
    "RegionAttr",
    "StateEncoder",
    "encode_state",
    "neighbors8",
    "travel_time",
]
__version__ = "0.1.0"
