"""Cluster-lead Deployment Manager: plan execution, leader election, and takeover.

Every node runs a :class:`NodeAgent` (its DM, a heartbeat detector, and a view
of which peers are alive).  The agent with the smallest id it believes to be
online acts as lead and drives plans through :class:`ClusterLead`.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterator, Mapping

from .errors import NoNodesOnline, NoSpareNode
from .failure import AffectedSet, HeartbeatDetector, affected_set, recover
from .lifecycle import Ack, Idempotent, NodeDM, Refusal, crash_node, transition
from .model import Application, Cluster, NodeStatus
from .planner import ActionKind, DeployAction, DeploymentPlan, map_nodes, synth_plan
from .state import ComponentState, ConfigurationState, ConnStatus

log = logging.getLogger(__name__)

MESSAGE_KINDS = ("Dispatch", "Ack", "Heartbeat", "QueryState", "StateReport", "LeaderClaim")


def elect_leader(node_status: Mapping[str, NodeStatus]) -> str:
    """Smallest online node id."""
    online = [n for n, s in node_status.items() if s is NodeStatus.ONLINE]
    if not online:
        raise NoNodesOnline()
    return min(online)


@dataclass(frozen=True)
class DmMessage:
    kind: str
    src: str
    dst: str
    sent: int
    body: object = None


class PlanRun:
    """Dispatch bookkeeping for one plan.

    Phases are barriers.  Inside an Activate phase a component waits for the
    Activate acks of its servers; inside a Deactivate phase a server waits for
    its clients.
    """

    def __init__(self, app: Application, plan: DeploymentPlan, tag: str, purpose: str = "deploy"):
        self.app = app
        self.tag = tag
        self.purpose = purpose
        self.phases = [p for p in plan.phases if p.actions]
        self.outstanding: dict[str, DeployAction] = {}
        self._pending: list[tuple[str, DeployAction]] = []
        self._acked: set[str] = set()
        self._deps: dict[str, set[str]] = {}
        self._enter(0)

    def _enter(self, index: int) -> None:
        self.cursor = index
        self._acked = set()
        self._deps = {}
        if self.done:
            self._pending = []
            return
        phase = self.phases[index]
        self._pending = [(f"{self.tag}.{index}.{j}", a) for j, a in enumerate(phase.actions)]
        by_comp = {a.subject: aid for aid, a in self._pending}
        if phase.kind is ActionKind.ACTIVATE:
            related = self.app.servers_of
        elif phase.kind is ActionKind.DEACTIVATE:
            related = self.app.clients_of
        else:
            return
        for aid, a in self._pending:
            self._deps[aid] = {by_comp[o] for o in related(a.subject) if o in by_comp}

    @property
    def done(self) -> bool:
        return self.cursor >= len(self.phases)

    @property
    def phase_kind(self) -> ActionKind | None:
        return None if self.done else self.phases[self.cursor].kind

    def ready(self) -> list[tuple[str, DeployAction]]:
        """Actions that may be dispatched now; they become outstanding."""
        out = []
        while not self.done:
            waiting = []
            for aid, action in self._pending:
                if self._deps.get(aid, set()) <= self._acked:
                    out.append((aid, action))
                    self.outstanding[aid] = action
                else:
                    waiting.append((aid, action))
            self._pending = waiting
            if self._pending or self.outstanding:
                break
            self._enter(self.cursor + 1)
        return out

    def ack(self, aid: str) -> bool:
        if aid not in self.outstanding:
            return False
        del self.outstanding[aid]
        self._acked.add(aid)
        return True

    def drop_node(self, node: str) -> list[str]:
        lost = [aid for aid, a in self.outstanding.items() if a.node == node]
        for aid in lost:
            del self.outstanding[aid]
        return lost


@dataclass
class LeadState:
    leader: str
    replica: ConfigurationState
    run: PlanRun | None = None

    @property
    def outstanding(self) -> dict:
        return dict(self.run.outstanding) if self.run else {}

    @property
    def phase(self) -> int:
        return self.run.cursor if self.run else 0


def _apply_to_replica(replica: ConfigurationState, app: Application, action: DeployAction, now: int):
    try:
        new, changes = transition(replica, app, action)
    except Idempotent:
        return replica, []
    return new.evolve(time=now), changes


def execute_plan(lead: LeadState, plan: DeploymentPlan, dms: Mapping[str, NodeDM], app: Application, now: int = 0) -> Iterator[dict]:
    """Drive ``plan`` synchronously against in-process DMs, yielding event records.

    No delays or failures; this is the protocol without the network.  The
    simulator runs the same :class:`PlanRun` logic message by message.
    """
    run = PlanRun(app, plan, tag="sync")
    lead.run = run
    while not run.done:
        batch = run.ready()
        if not batch:
            break
        for aid, action in batch:
            yield {"kind": "Dispatch", "aid": aid, "action": action.to_dict(), "to": action.node}
            result = dms[action.node].apply_action(action, now)
            if isinstance(result, Refusal):
                yield {"kind": "PlanAborted", "cause": result.reason, "action": action.to_dict()}
                return
            yield {"kind": "ActionAck", "aid": aid, **result.to_dict()}
            lead.replica, _ = _apply_to_replica(lead.replica, app, action, now)
            run.ack(aid)
    yield {"kind": "PlanComplete"}


# -- replica reconstruction ---------------------------------------------------


def rebuild_replica(
    app: Application,
    reports: Mapping[str, dict],
    node_status: Mapping[str, NodeStatus],
    claim: dict | None = None,
    now: int = 0,
) -> ConfigurationState:
    """Global configuration from the StateReports of all online DMs.

    Bindings come from the newest plan claim the DMs heard, overridden by
    where processes actually run.  Virtual nodes bound to offline nodes get
    their components marked Failed there, as if the crash had been observed.
    """
    procs, states, conns = {}, {}, {}
    for node in sorted(reports):
        r = reports[node]
        procs.update(r["processes"])
        states.update(r["comp_states"])
        conns.update(r["connections"])
    mapping = dict(claim["mapping"]) if claim else {}
    for gid, node in procs.items():
        mapping[app.sigma[app.groups[gid][0]]] = node
    offline = {n for n, s in node_status.items() if s is NodeStatus.OFFLINE}
    for gid, members in app.groups.items():
        bound = mapping.get(app.sigma[members[0]])
        if gid not in procs and bound in offline:
            procs[gid] = bound
            for m in members:
                states[m] = ComponentState.FAILED
    for conn in list(conns):
        if conn.server and procs.get(app.group_of[conn.server]) in offline:
            conns[conn] = ConnStatus.SEVERED
    return ConfigurationState(
        time=now,
        comp_states=states,
        mapping=mapping,
        connections=conns,
        node_status=dict(node_status),
        processes=procs,
    )


def newest_claim(claims) -> dict | None:
    claims = [c for c in claims if c]
    return max(claims, key=lambda c: c["epoch"]) if claims else None


def takeover(
    new_leader: str,
    dms: Mapping[str, NodeDM],
    app: Application,
    claims: Mapping[str, dict] | None = None,
    now: int = 0,
) -> LeadState:
    """Rebuild the lead state by querying every online DM directly."""
    status = {n: (NodeStatus.ONLINE if dm.online else NodeStatus.OFFLINE) for n, dm in dms.items()}
    if elect_leader(status) != new_leader:
        raise ValueError(f"{new_leader} is not the smallest online node")
    reports = {n: dm.state_report() for n, dm in dms.items() if dm.online}
    claim = newest_claim((claims or {}).get(n) for n in reports)
    return LeadState(new_leader, rebuild_replica(app, reports, status, claim, now))


# -- event-driven agents -----------------------------------------------------


class ClusterLead:
    """Lead-DM behavior hosted by the agent that is currently leader."""

    def __init__(self, agent: "NodeAgent"):
        self.agent = agent
        self.sim = agent.sim
        self.app = agent.app
        self.cluster = agent.cluster
        self.state = LeadState(agent.node, ConfigurationState.empty(agent.view()))
        self.mode = "idle"
        self.epoch = 0
        self.complete = False
        self.unrecoverable = False
        self.pending: set[str] = set()
        self.handled: set[str] = {n.id for n in agent.cluster.nodes if not n.online}
        self._runs = 0
        self._reports: dict[str, dict] = {}
        self._waiting: set[str] = set()

    # helpers
    @property
    def replica(self) -> ConfigurationState:
        return self.state.replica

    @replica.setter
    def replica(self, value: ConfigurationState) -> None:
        self.state.replica = value

    @property
    def idle(self) -> bool:
        return self.mode == "idle"

    def _log(self, kind, **fields):
        self.sim.log(kind, **fields)

    def _claim(self) -> dict:
        return {
            "leader": self.agent.node,
            "epoch": self.epoch,
            "mapping": dict(sorted(self.replica.mapping.items())),
            "complete": self.complete,
        }

    def _broadcast_claim(self):
        claim = self._claim()
        self.agent.claim = claim
        for peer in self.agent.live_peers():
            self.sim.send(self.agent.node, peer, "LeaderClaim", claim)

    def _start_run(self, plan: DeploymentPlan, purpose: str):
        self._runs += 1
        self.state.run = PlanRun(self.app, plan, f"{self.agent.node}:{self.epoch}:{self._runs}", purpose)
        self.mode = "executing"
        self._pump()

    # initial deployment
    def start_deployment(self):
        view = self.cluster.with_status(self.agent.view())
        mapping = map_nodes(self.app, view)
        plan = synth_plan(self.app, mapping)
        self.epoch = 1
        self.replica = self.replica.evolve(mapping=mapping)
        self._log("PlanStarted", leader=self.agent.node, mapping=dict(sorted(mapping.items())), actions=len(plan))
        self._broadcast_claim()
        self._start_run(plan, "deploy")

    def _pump(self):
        run = self.state.run
        while self.mode == "executing" and run is not None and not run.done:
            batch = run.ready()
            if not batch:
                break
            for aid, action in batch:
                if action.node in self.agent.suspected:
                    self.replica, changes = _apply_to_replica(self.replica, self.app, action, self.sim.now)
                    self._log(
                        "Bookkeeping",
                        aid=aid,
                        action=action.to_dict(),
                        transitions=[t.to_dict() for t in changes],
                    )
                    run.ack(aid)
                else:
                    self.sim.send(self.agent.node, action.node, "Dispatch", {"aid": aid, "action": action})
        if self.mode == "executing" and run is not None and run.done:
            self._finish_run()

    def _all_active(self) -> bool:
        return all(self.replica.state_of(c) is ComponentState.ACTIVE for c in self.app.by_id)

    def _finish_run(self):
        purpose = self.state.run.purpose
        self.mode = "idle"
        if purpose == "degraded":
            self._log("PlanAborted", cause="NoSpareNode")
        elif purpose == "recovery":
            self._log("RecoveryComplete", leader=self.agent.node)
        if purpose in ("deploy", "recovery") and not self.complete and self._all_active():
            self.complete = True
            self._log("PlanComplete", leader=self.agent.node)
        self._broadcast_claim()

    # messages
    def on_ack(self, msg: DmMessage):
        body = msg.body
        run = self.state.run
        action: DeployAction = body["action"]
        if not body["ok"]:
            if body["reason"] in ("IllegalTransition", "WrongNode"):
                self._log("PlanAborted", cause=body["reason"], action=action.to_dict())
                if run is not None:
                    run.outstanding.clear()
                self.mode = "idle"
            return
        self.replica, _ = _apply_to_replica(self.replica, self.app, action, self.sim.now)
        if run is None or not run.ack(body["aid"]):
            return
        if self.mode == "executing":
            self._pump()
        elif self.mode == "draining":
            self._maybe_recover()

    def on_failure(self, node: str):
        self._log("FailureDetected", node=node, by=self.agent.node)
        if self.replica.node_status.get(node) is NodeStatus.ONLINE:
            self.replica = crash_node(self.replica, self.app, node)
        self.pending.add(node)
        if self.mode == "takeover":
            self._waiting.discard(node)
            self._maybe_finish_takeover()
            return
        if self.state.run is not None:
            self.state.run.drop_node(node)
        self.mode = "draining"
        self._maybe_recover()

    def _maybe_recover(self):
        run = self.state.run
        if run is not None and run.outstanding:
            return
        self._start_recovery()

    def _start_recovery(self):
        failed_nodes = sorted(self.pending)
        self.pending.clear()
        self.handled.update(failed_nodes)
        affected = AffectedSet()
        for node in failed_nodes:
            affected = affected | affected_set(self.app, self.replica, node)
        self.epoch += 1
        try:
            plan, mapping = recover(self.app, self.cluster, self.replica, affected)
        except NoSpareNode as exc:
            self.unrecoverable = True
            self._log(
                "Unrecoverable",
                node_kind=exc.kind,
                vnode=exc.vnode,
                nodes=failed_nodes,
                blocked=list(exc.blocked),
                **affected.to_dict(),
            )
            self._start_run(exc.degraded_plan, "degraded")
            return
        self.unrecoverable = False
        self.replica = self.replica.evolve(mapping=mapping)
        self._log(
            "RecoveryPlanned",
            nodes=failed_nodes,
            mapping=dict(sorted(mapping.items())),
            actions=len(plan),
            **affected.to_dict(),
        )
        self._broadcast_claim()
        self._start_run(plan, "recovery")

    # takeover
    def begin_takeover(self):
        self.mode = "takeover"
        self._log("LeaderElected", leader=self.agent.node, suspected=sorted(self.agent.suspected))
        self._reports = {self.agent.node: self.agent.report()}
        self._waiting = set(self.agent.live_peers())
        for peer in sorted(self._waiting):
            self.sim.send(self.agent.node, peer, "QueryState", None)
        self._maybe_finish_takeover()

    def on_report(self, msg: DmMessage):
        if self.mode != "takeover" or msg.src not in self._waiting:
            return
        self._waiting.discard(msg.src)
        self._reports[msg.src] = msg.body
        self._maybe_finish_takeover()

    def _maybe_finish_takeover(self):
        if self.mode != "takeover" or self._waiting:
            return
        reports = {n: r for n, r in self._reports.items() if n not in self.agent.suspected}
        claim = newest_claim(r["claim"] for r in reports.values())
        self.epoch = claim["epoch"] if claim else 0
        self.complete = bool(claim and claim["complete"])
        self.replica = rebuild_replica(
            self.app, {n: r["dm"] for n, r in reports.items()}, self.agent.view(), claim, self.sim.now
        )
        self.sim.record_takeover(self.agent.node, self.replica)
        self._log(
            "TakeoverComplete",
            leader=self.agent.node,
            reports=sorted(reports),
            replica=self.replica.to_dict(),
        )
        self.pending = set(self.agent.suspected) - self.handled
        for node in sorted(self.pending):
            self._log("FailureDetected", node=node, by=self.agent.node)
        affected = AffectedSet()
        for node in sorted(self.pending):
            affected = affected | affected_set(self.app, self.replica, node)
        try:
            plan, _ = recover(self.app, self.cluster, self.replica, affected)
            needs_replan = bool(affected) or len(plan) > 0
        except NoSpareNode:
            needs_replan = True
        self.mode = "idle"
        if needs_replan:
            self._start_recovery()
        else:
            self.handled |= self.pending
            self.pending.clear()
            self._broadcast_claim()


class NodeAgent:
    """One node's DM plus its failure detector, wired to the simulated network."""

    def __init__(self, node: str, app: Application, cluster: Cluster, sim, period: int, misses: int):
        self.node = node
        self.app = app
        self.cluster = cluster
        self.sim = sim
        self.dm = NodeDM(node, app, period)
        peers = [n.id for n in cluster.nodes if n.id != node]
        self.detector = HeartbeatDetector(peers, period, misses)
        self.suspected: set[str] = {n.id for n in cluster.nodes if not n.online}
        self.detector.suspected |= self.suspected
        self.claim: dict | None = None
        self.lead: ClusterLead | None = None

    @property
    def online(self) -> bool:
        return self.dm.online

    def view(self) -> dict[str, NodeStatus]:
        return {
            n.id: (NodeStatus.OFFLINE if n.id in self.suspected else NodeStatus.ONLINE) for n in self.cluster.nodes
        }

    def live_peers(self) -> list[str]:
        return [n.id for n in self.cluster.nodes if n.id != self.node and n.id not in self.suspected]

    def report(self) -> dict:
        return {"dm": self.dm.state_report(), "claim": self.claim}

    def become_lead(self) -> ClusterLead:
        self.lead = ClusterLead(self)
        return self.lead

    def on_tick(self, now: int):
        hb = self.dm.heartbeat_due(now)
        if hb is not None:
            self.sim.log("Heartbeat", node=self.node)
            for peer in self.live_peers():
                self.sim.send(self.node, peer, "Heartbeat", None)
        for peer in self.detector.detect(now):
            self._suspect(peer)

    def _suspect(self, peer: str):
        self.suspected.add(peer)
        self.sim.log("Suspected", node=peer, by=self.node)
        if self.lead is not None:
            self.lead.on_failure(peer)
        elif elect_leader(self.view()) == self.node:
            self.become_lead().begin_takeover()

    def on_message(self, msg: DmMessage):
        kind = msg.kind
        if kind == "Heartbeat":
            self.detector.observe(msg.src, msg.sent)
        elif kind == "Dispatch":
            self._on_dispatch(msg)
        elif kind == "Ack":
            if self.lead is not None:
                self.lead.on_ack(msg)
        elif kind == "QueryState":
            self.sim.send(self.node, msg.src, "StateReport", self.report())
        elif kind == "StateReport":
            if self.lead is not None:
                self.lead.on_report(msg)
        elif kind == "LeaderClaim":
            self.claim = msg.body
        else:  # pragma: no cover
            raise ValueError(f"unknown message kind {kind}")

    def _on_dispatch(self, msg: DmMessage):
        aid, action = msg.body["aid"], msg.body["action"]
        result = self.dm.apply_action(action, self.sim.now)
        if isinstance(result, Ack):
            for t in result.transitions:
                self.sim.log("Transition", node=self.node, **t.to_dict())
            self.sim.log(
                "ActionAck", node=self.node, aid=aid, action=action.to_dict(), idempotent=result.idempotent
            )
            body = {"aid": aid, "action": action, "ok": True, "idempotent": result.idempotent}
        else:
            self.sim.log(
                "Refused", node=self.node, aid=aid, action=action.to_dict(), reason=result.reason, detail=result.detail
            )
            body = {"aid": aid, "action": action, "ok": False, "reason": result.reason}
        self.sim.send(self.node, msg.src, "Ack", body)

    def crash(self, now: int):
        for t in self.dm.crash(now):
            self.sim.log("Transition", node=self.node, **t.to_dict())

