"""Resilient deployment and reconfiguration of component-based distributed applications."""
from .errors import (
    AlreadyOffline,
    CyclicDependency,
    DeployError,
    FlowViolationError,
    IllegalTransition,
    InvalidApplication,
    NoFeasibleNode,
    NoNodesOnline,
    NoSpareNode,
    ParseError,
    UnknownComponent,
    UnknownNode,
    WrongNode,
)
from .failure import AffectedSet, HeartbeatDetector, affected_set, detect, recover
from .lifecycle import NodeDM, apply_action, crash_node, heartbeat_due, transition
from .model import (
    Application,
    Cluster,
    ComponentInstance,
    Level,
    Link,
    NodeStatus,
    PhysicalNode,
    Port,
    PortKind,
    SecurityLabel,
    activation_order,
    process_groups,
    validate_application,
)
from .orchestrator import LeadState, elect_leader, execute_plan, takeover
from .planner import (
    ActionKind,
    DeployAction,
    DeploymentPlan,
    check_label_flows,
    check_resources,
    diff_plans,
    map_nodes,
    synth_plan,
    synth_teardown,
)
from .simnet import EventLog, RunReport, Scenario, SimResult, run
from .state import ComponentState, ConfigurationState, ConnStatus

__version__ = "0.1.0"
