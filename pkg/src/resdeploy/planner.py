"""Node mapping, feasibility audits, and deployment/teardown plan synthesis."""
from __future__ import annotations

import enum
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping

from .errors import InvalidApplication, NoFeasibleNode, UnknownComponent
from .model import (
    Application,
    Cluster,
    Connection,
    PhysicalNode,
    SecurityLabel,
    activation_order,
    validate_application,
)
from .state import ComponentState, ConfigurationState, ConnStatus

NodeMapping = dict  # virtual-node id -> physical node id


class ActionKind(str, enum.Enum):
    START_PROCESS = "StartProcess"
    INSTANTIATE = "Instantiate"
    CONNECT = "Connect"
    ACTIVATE = "Activate"
    DEACTIVATE = "Deactivate"
    DISCONNECT = "Disconnect"
    DESTROY = "Destroy"
    STOP_PROCESS = "StopProcess"


DEPLOY_PHASES = (
    ActionKind.START_PROCESS,
    ActionKind.INSTANTIATE,
    ActionKind.CONNECT,
    ActionKind.ACTIVATE,
)
TEARDOWN_PHASES = (
    ActionKind.DEACTIVATE,
    ActionKind.DISCONNECT,
    ActionKind.DESTROY,
    ActionKind.STOP_PROCESS,
)


@dataclass(frozen=True)
class DeployAction:
    kind: ActionKind
    subject: str | Connection  # component id, process-group id, or connection
    node: str

    def to_dict(self) -> dict:
        subject = self.subject.to_dict() if isinstance(self.subject, Connection) else self.subject
        return {"kind": self.kind.value, "subject": subject, "node": self.node}

    @classmethod
    def from_dict(cls, d: Mapping) -> "DeployAction":
        subject = d["subject"]
        if isinstance(subject, Mapping):
            subject = Connection.from_dict(subject)
        return cls(ActionKind(d["kind"]), subject, d["node"])

    def __str__(self) -> str:
        return f"{self.kind.value}({self.subject})@{self.node}"


@dataclass(frozen=True)
class Phase:
    kind: ActionKind
    actions: tuple[DeployAction, ...] = ()


@dataclass(frozen=True)
class DeploymentPlan:
    """Phased action list; no action of a phase starts before the previous phase is acknowledged."""

    phases: tuple[Phase, ...] = ()

    @property
    def actions(self) -> list[DeployAction]:
        return [a for p in self.phases for a in p.actions]

    def __iter__(self) -> Iterator[DeployAction]:
        return iter(self.actions)

    def __len__(self) -> int:
        return sum(len(p.actions) for p in self.phases)

    def phase(self, kind: ActionKind) -> tuple[DeployAction, ...]:
        for p in self.phases:
            if p.kind is kind:
                return p.actions
        return ()

    def to_dict(self) -> dict:
        return {
            "phases": [
                {"phase": p.kind.value, "actions": [a.to_dict() for a in p.actions]} for p in self.phases
            ]
        }

    def to_jsonl_records(self) -> list[dict]:
        return [
            dict(a.to_dict(), phase=i, phase_kind=p.kind.value)
            for i, p in enumerate(self.phases)
            for a in p.actions
        ]


# -- node mapping ------------------------------------------------------------

REASONS = ("KindMismatch", "MissingHardware", "InsufficientMemory", "InsufficientCpu")


@dataclass(frozen=True)
class _Demand:
    kind: str
    mem: int
    cpu: int
    hw: frozenset


def _demands(app: Application) -> dict[str, _Demand]:
    mem = defaultdict(int)
    cpu = defaultdict(int)
    hw = defaultdict(set)
    for c in app.components:
        v = app.sigma.get(c.id)
        mem[v] += c.mem_demand
        cpu[v] += c.cpu_demand
        hw[v] |= c.hw_required
    return {v: _Demand(k, mem[v], cpu[v], frozenset(hw[v])) for v, k in app.virtual_nodes.items()}


def _misfit(node: PhysicalNode, need: _Demand, used: tuple[int, int]) -> int | None:
    """Index into REASONS of the first failed check, or None if ``need`` fits."""
    if node.kind != need.kind:
        return 0
    if not need.hw <= node.hw_tags:
        return 1
    if used[0] + need.mem > node.mem_capacity:
        return 2
    if used[1] + need.cpu > node.cpu_capacity:
        return 3
    return None


def _mapping_order(app: Application, demands: Mapping[str, _Demand]) -> list[str]:
    return sorted(app.virtual_nodes, key=lambda v: (-demands[v].mem, v))


def _place_pinned(order, demands, online, pinned, used, mapping):
    by_id = {n.id: n for n in online}
    for v in order:
        nid = (pinned or {}).get(v)
        node = by_id.get(nid)
        if node is not None and _misfit(node, demands[v], used[nid]) is None:
            mapping[v] = nid
            used[nid] = (used[nid][0] + demands[v].mem, used[nid][1] + demands[v].cpu)


def _greedy(order, demands, online, used, mapping):
    """Plain first fit; returns {vnode: reason} for virtual nodes it could not place."""
    failures = {}
    for v in order:
        if v in mapping:
            continue
        worst = -1
        for node in online:
            miss = _misfit(node, demands[v], used[node.id])
            if miss is None:
                mapping[v] = node.id
                used[node.id] = (used[node.id][0] + demands[v].mem, used[node.id][1] + demands[v].cpu)
                break
            worst = max(worst, miss)
        else:
            failures[v] = REASONS[max(worst, 0)]
    return failures


def _backtrack(free, demands, online, used, mapping, budget):
    """First-fit order depth-first search; the leftmost complete branch is the greedy answer."""
    steps = [0]

    def go(i):
        if i == len(free):
            return True
        v = free[i]
        for node in online:
            steps[0] += 1
            if steps[0] > budget:
                return False
            if _misfit(node, demands[v], used[node.id]) is None:
                prev = used[node.id]
                used[node.id] = (prev[0] + demands[v].mem, prev[1] + demands[v].cpu)
                mapping[v] = node.id
                if go(i + 1):
                    return True
                used[node.id] = prev
                del mapping[v]
        return False

    return go(0)


def map_nodes(
    app: Application,
    cluster: Cluster,
    pinned: Mapping[str, str] | None = None,
    *,
    search_budget: int = 200_000,
) -> NodeMapping:
    """Bind every virtual node to an online physical node.

    Feasible pinned bindings are kept.  The rest are placed first-fit, virtual
    nodes by descending memory demand and physical nodes by ascending id.  When
    plain first fit dead-ends, the same ordering is searched depth-first (up to
    ``search_budget`` probes) before giving up.
    """
    demands = _demands(app)
    order = _mapping_order(app, demands)
    online = [n for n in cluster.nodes if n.online]
    used = {n.id: (0, 0) for n in online}
    mapping: dict[str, str] = {}
    _place_pinned(order, demands, online, pinned, used, mapping)

    trial_used, trial = dict(used), dict(mapping)
    failures = _greedy(order, demands, online, trial_used, trial)
    if not failures:
        return trial
    free = [v for v in order if v not in mapping]
    if _backtrack(free, demands, online, dict(used), mapping, search_budget):
        return mapping
    vnode = next(v for v in order if v in failures)
    raise NoFeasibleNode(vnode, failures[vnode])


def map_nodes_partial(
    app: Application, cluster: Cluster, pinned: Mapping[str, str] | None = None
) -> tuple[NodeMapping, dict[str, str]]:
    """Greedy mapping that skips unplaceable virtual nodes; returns (mapping, {vnode: reason})."""
    demands = _demands(app)
    order = _mapping_order(app, demands)
    online = [n for n in cluster.nodes if n.online]
    used = {n.id: (0, 0) for n in online}
    mapping: dict[str, str] = {}
    _place_pinned(order, demands, online, pinned, used, mapping)
    failures = _greedy(order, demands, online, used, mapping)
    return mapping, failures


# -- audits ------------------------------------------------------------------


@dataclass(frozen=True)
class ResourceReport:
    utilization: dict  # node -> {"mem": fraction, "cpu": fraction}
    violations: tuple[tuple[str, str], ...]  # (node, reason)
    links: dict  # "a|b" -> {"bandwidth", "encrypted", "flows"}; informational only

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "utilization": self.utilization,
            "violations": [{"node": n, "reason": r} for n, r in self.violations],
            "links": self.links,
        }


def _fraction(demand: int, capacity: int) -> float | None:
    # None marks demand on a zero-capacity node (JSON has no infinity)
    if capacity == 0:
        return 0.0 if demand == 0 else None
    return demand / capacity


def check_resources(app: Application, mapping: Mapping[str, str], cluster: Cluster) -> ResourceReport:
    mem = defaultdict(int)
    cpu = defaultdict(int)
    hw = defaultdict(set)
    for c in app.components:
        nid = mapping[app.sigma[c.id]]
        mem[nid] += c.mem_demand
        cpu[nid] += c.cpu_demand
        hw[nid] |= c.hw_required
    util = {}
    violations = []
    for node in cluster.nodes:
        util[node.id] = {
            "mem": _fraction(mem[node.id], node.mem_capacity),
            "cpu": _fraction(cpu[node.id], node.cpu_capacity),
        }
        if not hw[node.id] <= node.hw_tags:
            violations.append((node.id, "MissingHardware"))
        if mem[node.id] > node.mem_capacity:
            violations.append((node.id, "InsufficientMemory"))
        if cpu[node.id] > node.cpu_capacity:
            violations.append((node.id, "InsufficientCpu"))
    for vnode, nid in sorted(mapping.items()):
        node = cluster.by_id.get(nid)
        if node is None or not node.online:
            violations.append((nid, "NodeUnavailable"))
        elif node.kind != app.virtual_nodes.get(vnode):
            violations.append((nid, "KindMismatch"))

    flows = defaultdict(int)
    for conn in app.connections:
        if conn.is_topic:
            continue
        a = mapping[app.sigma[conn.owner]]
        b = mapping[app.sigma[conn.server]]
        if a != b:
            flows[tuple(sorted((a, b)))] += 1
    links = {}
    for link in cluster.links:
        key = tuple(sorted((link.a, link.b)))
        links["|".join(key)] = {
            "bandwidth": link.bandwidth,
            "encrypted": link.encrypted,
            "flows": flows.get(key, 0),
        }
    return ResourceReport(util, tuple(violations), links)


@dataclass(frozen=True)
class FlowViolation:
    sender: str
    sender_label: SecurityLabel
    receiver: str
    receiver_label: SecurityLabel
    via: str

    def __str__(self) -> str:
        return (
            f"FlowViolation{{{self.sender}{self.sender_label} -> "
            f"{self.receiver}{self.receiver_label} via {self.via}}}"
        )

    def to_dict(self) -> dict:
        return {
            "sender": self.sender,
            "sender_label": {"level": self.sender_label.level.label_name, "domain": self.sender_label.domain},
            "receiver": self.receiver,
            "receiver_label": {"level": self.receiver_label.level.label_name, "domain": self.receiver_label.domain},
            "via": self.via,
        }


def information_flows(app: Application) -> list[tuple[str, str, str]]:
    """Every (sender, receiver, via) edge that carries data at run time."""
    edges = []
    for client, server in sorted(set(app.dependencies)):
        # request and reply both carry data
        edges.append((client, server, f"request:{client}->{server}"))
        edges.append((server, client, f"reply:{server}->{client}"))
    for pub, sub, topic in app.topic_flows():
        edges.append((pub, sub, f"topic:{topic}"))
    return edges


def check_label_flows(app: Application) -> list[FlowViolation]:
    """Flag every flow whose receiver's label does not dominate the sender's."""
    out = []
    for sender, receiver, via in information_flows(app):
        s = app.component(sender).label
        r = app.component(receiver).label
        if not r.dominates(s):
            out.append(FlowViolation(sender, s, receiver, r, via))
    return out


# -- plan synthesis ----------------------------------------------------------


def _require_valid(app: Application) -> list[str]:
    report = validate_application(app)
    if not report.ok:
        raise InvalidApplication(report.violations)
    return activation_order(app)


def _node_for(app: Application, mapping: Mapping[str, str], cid: str) -> str:
    return mapping[app.sigma[cid]]


def synth_plan(app: Application, mapping: Mapping[str, str]) -> DeploymentPlan:
    """Full deployment: start processes, instantiate, connect, then activate in dependency order."""
    order = _require_valid(app)
    starts = tuple(
        DeployAction(ActionKind.START_PROCESS, gid, _node_for(app, mapping, members[0]))
        for gid, members in app.groups.items()
    )
    inst = tuple(DeployAction(ActionKind.INSTANTIATE, c, _node_for(app, mapping, c)) for c in order)
    conns = tuple(
        DeployAction(ActionKind.CONNECT, conn, _node_for(app, mapping, conn.owner)) for conn in app.connections
    )
    acts = tuple(DeployAction(ActionKind.ACTIVATE, c, _node_for(app, mapping, c)) for c in order)
    return DeploymentPlan(
        (
            Phase(ActionKind.START_PROCESS, starts),
            Phase(ActionKind.INSTANTIATE, inst),
            Phase(ActionKind.CONNECT, conns),
            Phase(ActionKind.ACTIVATE, acts),
        )
    )


def _teardown_phases(app, config, order, deactivate, disconnect, destroy, stop) -> list[Phase]:
    rev = list(reversed(order))
    where = lambda c: config.node_of(app, c)  # noqa: E731
    return [
        Phase(ActionKind.DEACTIVATE, tuple(DeployAction(ActionKind.DEACTIVATE, c, where(c)) for c in rev if c in deactivate)),
        Phase(
            ActionKind.DISCONNECT,
            tuple(DeployAction(ActionKind.DISCONNECT, conn, where(conn.owner)) for conn in sorted(disconnect)),
        ),
        Phase(ActionKind.DESTROY, tuple(DeployAction(ActionKind.DESTROY, c, where(c)) for c in rev if c in destroy)),
        Phase(
            ActionKind.STOP_PROCESS,
            tuple(DeployAction(ActionKind.STOP_PROCESS, g, config.processes[g]) for g in sorted(stop)),
        ),
    ]


def synth_teardown(app: Application, config: ConfigurationState, subset: Iterable[str]) -> DeploymentPlan:
    """Remove ``subset``: deactivate clients before servers, disconnect, destroy, stop processes."""
    subset = set(subset)
    for cid in sorted(subset):
        if cid not in app.by_id:
            raise UnknownComponent(cid)
    order = activation_order(app)
    live = {c for c in subset if config.state_of(c) is not ComponentState.ABSENT}
    deactivate = {c for c in live if config.state_of(c) is ComponentState.ACTIVE}
    disconnect = {conn for conn in config.connections if conn.owner in live}
    stop = set()
    for gid, members in app.groups.items():
        if gid not in config.processes:
            continue
        if all(m in subset or config.state_of(m) is ComponentState.ABSENT for m in members):
            stop.add(gid)
    if not live and not stop:
        return DeploymentPlan(())
    return DeploymentPlan(tuple(_teardown_phases(app, config, order, deactivate, disconnect, live, stop)))


def diff_plans(
    current: ConfigurationState,
    app: Application,
    target: Mapping[str, str],
    hold: Iterable[str] = (),
) -> DeploymentPlan:
    """Actions that move ``current`` to "everything Active on ``target``".

    Components whose node changes, or that failed, are torn down and recreated;
    surviving transitive clients of those are deactivated first and reconnected.
    Components in ``hold`` are only deactivated (if Active) and otherwise left
    alone; this is used for best-effort plans when part of the app cannot be placed.
    Only non-empty phases are returned.
    """
    order = _require_valid(app)
    hold = set(hold)
    state = current.state_of
    where = lambda c: current.node_of(app, c)  # noqa: E731
    goal = lambda c: target.get(app.sigma[c])  # noqa: E731

    teardown = {
        c
        for c in app.by_id
        if c not in hold
        and state(c) is not ComponentState.ABSENT
        and (state(c) is ComponentState.FAILED or where(c) != goal(c))
    }
    create = teardown | {c for c in app.by_id if c not in hold and state(c) is ComponentState.ABSENT}
    impacted = app.transitive_clients(teardown)
    deactivate = {c for c in teardown | impacted | hold if state(c) is ComponentState.ACTIVE}

    wanted = {conn for conn in app.connections if conn.owner not in hold}
    disconnect = {
        conn
        for conn in current.connections
        if conn.owner not in hold
        and (conn.owner in teardown or conn.server in teardown or conn not in wanted)
    }
    kept = {
        conn
        for conn, st in current.connections.items()
        if st is ConnStatus.ESTABLISHED and conn not in disconnect
    }
    stop = {
        gid
        for gid, members in app.groups.items()
        if gid in current.processes
        and not any(m in hold for m in members)
        and current.processes[gid] != goal(members[0])
    }
    start = {
        gid
        for gid, members in app.groups.items()
        if not any(m in hold for m in members) and (gid in stop or gid not in current.processes)
    }

    phases = _teardown_phases(app, current, order, deactivate, disconnect, teardown, stop)
    phases.append(
        Phase(
            ActionKind.START_PROCESS,
            tuple(
                DeployAction(ActionKind.START_PROCESS, gid, goal(members[0]))
                for gid, members in app.groups.items()
                if gid in start
            ),
        )
    )
    phases.append(
        Phase(ActionKind.INSTANTIATE, tuple(DeployAction(ActionKind.INSTANTIATE, c, goal(c)) for c in order if c in create))
    )
    phases.append(
        Phase(
            ActionKind.CONNECT,
            tuple(DeployAction(ActionKind.CONNECT, conn, goal(conn.owner)) for conn in sorted(wanted - kept)),
        )
    )
    will_be_active = {
        c for c in app.by_id if state(c) is ComponentState.ACTIVE and c not in deactivate
    }
    phases.append(
        Phase(
            ActionKind.ACTIVATE,
            tuple(
                DeployAction(ActionKind.ACTIVATE, c, goal(c))
                for c in order
                if c not in hold and c not in will_be_active
            ),
        )
    )
    return DeploymentPlan(tuple(p for p in phases if p.actions))
