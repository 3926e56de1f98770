"""Component lifecycle state machine and the per-node Deployment Manager (DM)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

from .errors import AlreadyOffline, IllegalTransition, UnknownNode, WrongNode
from .model import Application, NodeStatus
from .planner import ActionKind, DeployAction
from .state import ComponentState, ConfigurationState, ConnStatus

S = ComponentState
A = ActionKind

# Every state change the engine may perform: (from, trigger, to).  "Connects"
# stands for the moment the last required connection is acknowledged, "Crash"
# for the hosting node going offline.
TRANSITIONS = frozenset(
    {
        (S.ABSENT, A.INSTANTIATE.value, S.INSTANTIATED),
        (S.INSTANTIATED, "Connects", S.CONNECTED),
        (S.CONNECTED, A.ACTIVATE.value, S.ACTIVE),
        (S.ACTIVE, A.DEACTIVATE.value, S.DEACTIVATED),
        (S.DEACTIVATED, A.ACTIVATE.value, S.CONNECTED),
        (S.DEACTIVATED, A.DESTROY.value, S.ABSENT),
        (S.FAILED, A.DESTROY.value, S.ABSENT),
        # teardown of an incarnation that never reached Active
        (S.INSTANTIATED, A.DESTROY.value, S.ABSENT),
        (S.CONNECTED, A.DESTROY.value, S.ABSENT),
    }
    | {(s, "Crash", S.FAILED) for s in S if s not in (S.ABSENT, S.FAILED)}
)


class Transition(NamedTuple):
    component: str
    before: ComponentState
    after: ComponentState

    def to_dict(self) -> dict:
        return {"component": self.component, "from": self.before.value, "to": self.after.value}


class Idempotent(Exception):
    """The action's effect is already in place; acknowledge without change."""


def _fully_connected(app: Application, conns, cid: str) -> bool:
    return all(conns.get(c) is ConnStatus.ESTABLISHED for c in app.required_connections(cid))


def transition(
    config: ConfigurationState, app: Application, action: DeployAction
) -> tuple[ConfigurationState, list[Transition]]:
    """Apply ``action`` to ``config``.

    Returns the new configuration and the component transitions it caused.
    Raises :class:`Idempotent` for repeats, :class:`IllegalTransition` or
    :class:`WrongNode` for refused actions.  Node liveness is the caller's concern.
    """
    kind, subject, node = action.kind, action.subject, action.node
    states = dict(config.comp_states)
    conns = dict(config.connections)
    procs = dict(config.processes)
    changes: list[Transition] = []

    def move(cid, after):
        changes.append(Transition(cid, states.get(cid, S.ABSENT), after))
        if after is S.ABSENT:
            states.pop(cid, None)
        else:
            states[cid] = after

    def hosted_here(cid):
        where = procs.get(app.group_of[cid])
        if where != node:
            raise WrongNode(cid, node, where)

    if kind is A.START_PROCESS:
        where = procs.get(subject)
        if where == node:
            raise Idempotent()
        if where is not None:
            raise IllegalTransition(subject, f"running on {where}", kind.value)
        procs[subject] = node

    elif kind is A.STOP_PROCESS:
        where = procs.get(subject)
        if where is None:
            raise Idempotent()
        if where != node:
            raise WrongNode(subject, node, where)
        live = [m for m in app.groups[subject] if states.get(m, S.ABSENT) is not S.ABSENT]
        if live:
            raise IllegalTransition(subject, f"members alive: {','.join(live)}", kind.value)
        del procs[subject]

    elif kind is A.INSTANTIATE:
        hosted_here(subject)
        cur = states.get(subject, S.ABSENT)
        if cur is S.FAILED:
            raise IllegalTransition(subject, cur.value, kind.value)
        if cur is not S.ABSENT:
            raise Idempotent()
        move(subject, S.INSTANTIATED)
        if _fully_connected(app, conns, subject):
            move(subject, S.CONNECTED)

    elif kind is A.CONNECT:
        owner = subject.owner
        hosted_here(owner)
        cur = states.get(owner, S.ABSENT)
        if conns.get(subject) is ConnStatus.ESTABLISHED and cur in (S.INSTANTIATED, S.CONNECTED, S.ACTIVE, S.DEACTIVATED):
            raise Idempotent()
        # a Connected owner may be missing a connection after its server was
        # replaced; re-establishing it does not change the owner's state
        if cur not in (S.INSTANTIATED, S.CONNECTED, S.DEACTIVATED):
            raise IllegalTransition(str(subject), cur.value, kind.value)
        conns[subject] = ConnStatus.ESTABLISHED
        if cur is S.INSTANTIATED and _fully_connected(app, conns, owner):
            move(owner, S.CONNECTED)

    elif kind is A.DISCONNECT:
        owner = subject.owner
        if subject not in conns:
            raise Idempotent()
        hosted_here(owner)
        cur = states.get(owner, S.ABSENT)
        if cur is S.ACTIVE:
            raise IllegalTransition(str(subject), cur.value, kind.value)
        del conns[subject]

    elif kind is A.ACTIVATE:
        hosted_here(subject)
        cur = states.get(subject, S.ABSENT)
        if cur is S.ACTIVE:
            raise Idempotent()
        if cur is S.DEACTIVATED and _fully_connected(app, conns, subject):
            move(subject, S.CONNECTED)
            move(subject, S.ACTIVE)
        elif cur is S.CONNECTED:
            move(subject, S.ACTIVE)
        else:
            raise IllegalTransition(subject, cur.value, kind.value)

    elif kind is A.DEACTIVATE:
        hosted_here(subject)
        cur = states.get(subject, S.ABSENT)
        if cur is S.DEACTIVATED:
            raise Idempotent()
        if cur is not S.ACTIVE:
            raise IllegalTransition(subject, cur.value, kind.value)
        move(subject, S.DEACTIVATED)

    elif kind is A.DESTROY:
        cur = states.get(subject, S.ABSENT)
        if cur is S.ABSENT:
            raise Idempotent()
        hosted_here(subject)
        if cur in (S.ACTIVE,):
            raise IllegalTransition(subject, cur.value, kind.value)
        for conn in [c for c in conns if c.owner == subject]:
            del conns[conn]
        move(subject, S.ABSENT)

    else:  # pragma: no cover - enum is closed
        raise ValueError(kind)

    for t in changes:
        trigger = "Connects" if (t.before, t.after) == (S.INSTANTIATED, S.CONNECTED) else kind.value
        assert (t.before, trigger, t.after) in TRANSITIONS, t
    return config.evolve(comp_states=states, connections=conns, processes=procs), changes


def crash_node(config: ConfigurationState, app: Application, node: str) -> ConfigurationState:
    """Take ``node`` offline: its components fail and connections touching it are severed."""
    if node not in config.node_status:
        raise UnknownNode(node)
    if config.node_status[node] is NodeStatus.OFFLINE:
        raise AlreadyOffline(node)
    return _mark_offline(config, app, node)


def _mark_offline(config, app, node):
    status = dict(config.node_status)
    status[node] = NodeStatus.OFFLINE
    on_node = {c for c in app.by_id if config.processes.get(app.group_of[c]) == node}
    states = {
        c: (S.FAILED if c in on_node and s is not S.ABSENT else s) for c, s in config.comp_states.items()
    }
    conns = {
        conn: (ConnStatus.SEVERED if conn.owner in on_node or conn.server in on_node else st)
        for conn, st in config.connections.items()
    }
    return config.evolve(node_status=status, comp_states=states, connections=conns)


def sever_offline(config: ConfigurationState, app: Application) -> ConfigurationState:
    """Mark failed every component/connection touching a node already recorded Offline."""
    for node, st in sorted(config.node_status.items()):
        if st is NodeStatus.OFFLINE:
            config = _mark_offline(config, app, node)
    return config


# -- node DM -----------------------------------------------------------------


@dataclass(frozen=True)
class Ack:
    action: DeployAction
    node: str
    time: int
    transitions: tuple[Transition, ...] = ()
    idempotent: bool = False

    def to_dict(self) -> dict:
        return {
            "action": self.action.to_dict(),
            "node": self.node,
            "time": self.time,
            "transitions": [t.to_dict() for t in self.transitions],
            "idempotent": self.idempotent,
        }


@dataclass(frozen=True)
class Refusal:
    action: DeployAction
    node: str
    time: int
    reason: str
    detail: str = ""


@dataclass(frozen=True)
class Heartbeat:
    node: str
    time: int


@dataclass
class NodeDM:
    """Deployment Manager of one node: executes actions on the node-local state."""

    node: str
    app: Application
    heartbeat_period: int = 10
    last_sent: int = 0
    online: bool = True
    local: ConfigurationState = field(default=None)

    def __post_init__(self):
        if self.local is None:
            self.local = ConfigurationState(node_status={self.node: NodeStatus.ONLINE})

    @property
    def hosted_groups(self) -> list[str]:
        return sorted(self.local.processes)

    def apply_action(self, action: DeployAction, now: int = 0) -> Ack | Refusal:
        if not self.online:
            return Refusal(action, self.node, now, "NodeOffline")
        if action.node != self.node:
            return Refusal(action, self.node, now, "WrongNode", f"addressed to {action.node}")
        try:
            new, changes = transition(self.local, self.app, action)
        except Idempotent:
            return Ack(action, self.node, now, (), idempotent=True)
        except (IllegalTransition, WrongNode) as exc:
            return Refusal(action, self.node, now, type(exc).__name__, str(exc))
        self.local = new.evolve(time=now)
        return Ack(action, self.node, now, tuple(changes))

    def heartbeat_due(self, now: int) -> Heartbeat | None:
        if not self.online or now < self.last_sent + self.heartbeat_period:
            return None
        self.last_sent = now
        return Heartbeat(self.node, now)

    def crash(self, now: int = 0) -> list[Transition]:
        """Crash-stop this node; returns the components that failed."""
        if not self.online:
            raise AlreadyOffline(self.node)
        self.online = False
        failed = [Transition(c, s, S.FAILED) for c, s in sorted(self.local.comp_states.items()) if s is not S.ABSENT]
        states = {c: S.FAILED for c, _, _ in failed}
        self.local = self.local.evolve(
            time=now, comp_states=states, node_status={self.node: NodeStatus.OFFLINE}
        )
        return failed

    def state_report(self) -> dict:
        return {
            "node": self.node,
            "processes": dict(self.local.processes),
            "comp_states": dict(self.local.comp_states),
            "connections": dict(self.local.connections),
        }


def apply_action(dm: NodeDM, action: DeployAction, now: int = 0) -> Ack | Refusal:
    return dm.apply_action(action, now)


def heartbeat_due(dm: NodeDM, now: int) -> Heartbeat | None:
    return dm.heartbeat_due(now)


def merge_truth(app: Application, dms, node_status) -> ConfigurationState:
    """Global configuration assembled from every DM's local state (simulator ground truth)."""
    states, conns, procs = {}, {}, {}
    for dm in sorted(dms, key=lambda d: d.node):
        if not dm.online:
            continue
        states.update(dm.local.comp_states)
        conns.update(dm.local.connections)
        procs.update(dm.local.processes)
    for dm in sorted(dms, key=lambda d: d.node):
        if dm.online:
            continue
        for gid, where in dm.local.processes.items():
            procs.setdefault(gid, where)
        for cid, st in dm.local.comp_states.items():
            if cid not in states and procs.get(app.group_of[cid]) == dm.node:
                states[cid] = st
        for conn, st in dm.local.connections.items():
            if procs.get(app.group_of[conn.owner]) == dm.node:
                conns.setdefault(conn, ConnStatus.SEVERED)
    offline_hosts = {n for n, s in node_status.items() if s is NodeStatus.OFFLINE}
    for conn in list(conns):
        if conn.server and procs.get(app.group_of[conn.server]) in offline_hosts:
            conns[conn] = ConnStatus.SEVERED
    return ConfigurationState(
        time=max((dm.local.time for dm in dms), default=0),
        comp_states=states,
        connections=conns,
        node_status=dict(node_status),
        processes=procs,
    )


def project_online(config: ConfigurationState, app: Application, nodes=None) -> dict:
    """The part of a configuration that lives on Online nodes (or on ``nodes``), as plain data."""
    if nodes is None:
        online = {n for n, s in config.node_status.items() if s is NodeStatus.ONLINE}
    else:
        online = set(nodes)
    procs = {g: n for g, n in config.processes.items() if n in online}
    hosted = {c for c in app.by_id if procs.get(app.group_of[c]) in online}
    return {
        "processes": dict(sorted(procs.items())),
        "comp_states": {c: config.state_of(c).value for c in sorted(hosted)},
        "connections": sorted(
            (str(conn), st.value) for conn, st in config.connections.items() if conn.owner in hosted
        ),
    }

