"""Configuration snapshots shared by the planner and the lifecycle machines."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Mapping

from .model import Application, Connection, NodeStatus


class ComponentState(str, enum.Enum):
    ABSENT = "Absent"
    INSTANTIATED = "Instantiated"
    CONNECTED = "Connected"
    ACTIVE = "Active"
    DEACTIVATED = "Deactivated"
    FAILED = "Failed"


class ConnStatus(str, enum.Enum):
    ESTABLISHED = "Established"
    SEVERED = "Severed"


@dataclass(frozen=True)
class ConfigurationState:
    """Status of a deployed application at one simulated instant.

    ``processes`` maps a process-group id to the node its process runs on.
    A component's location is the location of its group's process.  Values are
    never mutated in place; updates go through :meth:`evolve`.
    """

    time: int = 0
    comp_states: Mapping[str, ComponentState] = field(default_factory=dict)
    mapping: Mapping[str, str] = field(default_factory=dict)
    connections: Mapping[Connection, ConnStatus] = field(default_factory=dict)
    node_status: Mapping[str, NodeStatus] = field(default_factory=dict)
    processes: Mapping[str, str] = field(default_factory=dict)

    __hash__ = None

    def evolve(self, **changes) -> "ConfigurationState":
        return replace(self, **changes)

    def state_of(self, cid: str) -> ComponentState:
        return self.comp_states.get(cid, ComponentState.ABSENT)

    def node_of(self, app: Application, cid: str) -> str | None:
        """Node currently running ``cid``'s process, if any."""
        return self.processes.get(app.group_of[cid])

    def online(self, node: str) -> bool:
        return self.node_status.get(node) is NodeStatus.ONLINE

    def established(self) -> set[Connection]:
        return {c for c, s in self.connections.items() if s is ConnStatus.ESTABLISHED}

    @classmethod
    def empty(cls, node_status: Mapping[str, NodeStatus], time: int = 0) -> "ConfigurationState":
        return cls(time=time, node_status=dict(node_status))

    def to_dict(self) -> dict:
        return {
            "time": self.time,
            "comp_states": {k: v.value for k, v in sorted(self.comp_states.items())},
            "mapping": dict(sorted(self.mapping.items())),
            "connections": [
                dict(c.to_dict(), status=s.value) for c, s in sorted(self.connections.items())
            ],
            "node_status": {k: v.value for k, v in sorted(self.node_status.items())},
            "processes": dict(sorted(self.processes.items())),
        }
