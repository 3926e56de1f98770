"""Deterministic discrete-event simulation of the cluster.

Events are processed in ``(time, seq)`` order.  All randomness (message
delays) comes from one ``random.Random(seed)``, so a run is a pure function of
its inputs.
"""
from __future__ import annotations

import heapq
import itertools
import json
import random
from dataclasses import dataclass, field
from typing import Any

from .errors import FlowViolationError, InvalidApplication, NoNodesOnline
from .lifecycle import merge_truth, project_online
from .model import Application, Cluster, NodeStatus, validate_application
from .orchestrator import DmMessage, NodeAgent, elect_leader
from .planner import check_label_flows, map_nodes
from .state import ComponentState, ConfigurationState

CONVERGED = "Converged"
UNRECOVERABLE = "Unrecoverable"
HORIZON_EXCEEDED = "HorizonExceeded"

# Messages that keep the protocol busy; heartbeats flow forever and are ignored
# by the quiescence check.
_PROTOCOL = frozenset({"Dispatch", "Ack", "QueryState", "StateReport", "LeaderClaim"})


@dataclass(frozen=True)
class Scenario:
    crashes: tuple = ()
    delay: tuple[int, int] = (1, 1)
    seed: int = 0
    horizon: int = 10_000
    heartbeat_period: int = 10
    misses: int = 3

    def __post_init__(self):
        crashes = tuple(sorted((str(n), int(t)) for n, t in self.crashes))
        object.__setattr__(self, "crashes", tuple(sorted(crashes, key=lambda c: (c[1], c[0]))))
        if isinstance(self.delay, int):
            object.__setattr__(self, "delay", (self.delay, self.delay))
        else:
            object.__setattr__(self, "delay", tuple(int(d) for d in self.delay))
        lo, hi = self.delay
        if any(t < 0 for _, t in self.crashes):
            raise ValueError("crash times must be >= 0")
        if lo < 0 or lo > hi:
            raise ValueError(f"bad delay range {self.delay}")
        if self.heartbeat_period <= 0 or self.misses <= 0:
            raise ValueError("heartbeat period and miss threshold must be positive")
        if hi > self.misses * self.heartbeat_period:
            # a slower network would make healthy nodes look dead
            raise ValueError("maximum delay exceeds the detector's silence threshold")
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")

    def to_dict(self) -> dict:
        lo, hi = self.delay
        return {
            "crashes": [list(c) for c in self.crashes],
            "delay": {"fixed": lo} if lo == hi else {"range": [lo, hi]},
            "seed": self.seed,
            "horizon": self.horizon,
            "heartbeat_period": self.heartbeat_period,
            "misses": self.misses,
        }


@dataclass(frozen=True)
class TimerFire:
    node: str


@dataclass(frozen=True)
class CrashInjection:
    node: str


@dataclass(frozen=True)
class StartDeployment:
    node: str


@dataclass(order=True)
class SimEvent:
    time: int
    seq: int
    payload: Any = field(compare=False)


class EventLog:
    """Append-only list of ``{t, seq, kind, ...}`` records."""

    def __init__(self):
        self.entries: list[dict] = []

    def emit(self, t: int, kind: str, **fields) -> dict:
        entry = {"t": t, "seq": len(self.entries), "kind": kind, **fields}
        self.entries.append(entry)
        return entry

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def of_kind(self, *kinds: str) -> list[dict]:
        return [e for e in self.entries if e["kind"] in kinds]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True, separators=(",", ":")) + "\n" for e in self.entries)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_jsonl())


@dataclass
class TakeoverCheck:
    time: int
    leader: str
    replica: dict
    truth: dict

    @property
    def lossless(self) -> bool:
        return self.replica == self.truth


@dataclass
class RunReport:
    outcome: str
    actions: int = 0
    failures: int = 0
    recoveries: int = 0
    final_states: dict = field(default_factory=dict)
    end_time: int = 0
    plan_complete_at: int | None = None
    detail: str = ""

    def to_dict(self) -> dict:
        return {
            "outcome": self.outcome,
            "counts": {"actions": self.actions, "failures": self.failures, "recoveries": self.recoveries},
            "final_states": dict(sorted(self.final_states.items())),
            "timings": {"end": self.end_time, "plan_complete": self.plan_complete_at},
            "detail": self.detail,
        }

    def to_text(self) -> str:
        lines = [
            f"outcome: {self.outcome}",
            f"actions: {self.actions}  failures: {self.failures}  recoveries: {self.recoveries}",
            f"end time: {self.end_time}  plan complete at: {self.plan_complete_at}",
        ]
        if self.detail:
            lines.append(f"detail: {self.detail}")
        lines += [f"  {c}: {s}" for c, s in sorted(self.final_states.items())]
        return "\n".join(lines)


@dataclass
class SimResult:
    log: EventLog
    final: ConfigurationState
    outcome: str
    report: RunReport
    takeovers: list[TakeoverCheck]


class Simulator:
    def __init__(self, app: Application, cluster: Cluster, scenario: Scenario):
        self.app = app
        self.cluster = cluster
        self.scenario = scenario
        self.now = 0
        self.rng = random.Random(scenario.seed)
        self.events = EventLog()
        self.status = dict(cluster.node_status)
        self.takeovers: list[TakeoverCheck] = []
        self._queue: list[SimEvent] = []
        self._seq = itertools.count()
        self._fifo: dict[tuple[str, str], int] = {}
        self._undelivered: dict[int, SimEvent] = {}
        self._cancelled: set[int] = set()
        self._in_flight = 0
        self._pending_crashes = len(scenario.crashes)
        period, misses = scenario.heartbeat_period, scenario.misses
        self.agents = {n.id: NodeAgent(n.id, app, cluster, self, period, misses) for n in cluster.nodes}
        for nid, agent in self.agents.items():
            if self.status[nid] is NodeStatus.OFFLINE:
                agent.dm.online = False

    # interface used by the agents
    def log(self, kind: str, **fields) -> dict:
        return self.events.emit(self.now, kind, **fields)

    def schedule(self, time: int, payload) -> SimEvent:
        ev = SimEvent(time, next(self._seq), payload)
        heapq.heappush(self._queue, ev)
        return ev

    def _delay(self) -> int:
        lo, hi = self.scenario.delay
        return self.rng.randint(lo, hi)

    def send(self, src: str, dst: str, kind: str, body=None) -> SimEvent:
        at = max(self.now + self._delay(), self._fifo.get((src, dst), 0))
        self._fifo[(src, dst)] = at
        msg = DmMessage(kind, src, dst, self.now, body)
        ev = self.schedule(at, msg)
        self._undelivered[ev.seq] = ev
        if kind in _PROTOCOL:
            self._in_flight += 1
            self.log("Send", msg=kind, src=src, dst=dst, deliver_at=at, body=_plain(body))
        return ev

    def record_takeover(self, leader: str, replica: ConfigurationState) -> None:
        truth = merge_truth(self.app, self.agents_list(), self.status)
        both = {
            n
            for n in self.status
            if self.status[n] is NodeStatus.ONLINE and replica.node_status.get(n) is NodeStatus.ONLINE
        }
        self.takeovers.append(
            TakeoverCheck(self.now, leader, project_online(replica, self.app, both), project_online(truth, self.app, both))
        )

    def agents_list(self):
        return [a.dm for _, a in sorted(self.agents.items())]

    # event handling
    def _deliver(self, ev: SimEvent) -> None:
        msg: DmMessage = ev.payload
        del self._undelivered[ev.seq]
        if msg.kind in _PROTOCOL:
            self._in_flight -= 1
        if self.status[msg.dst] is not NodeStatus.ONLINE:
            self.log("Dropped", msg=msg.kind, src=msg.src, dst=msg.dst, reason="DestinationOffline")
            return
        if msg.kind in ("Dispatch", "Ack"):
            self.log("Deliver", msg=msg.kind, src=msg.src, dst=msg.dst, aid=msg.body["aid"])
        elif msg.kind in _PROTOCOL:
            self.log("Deliver", msg=msg.kind, src=msg.src, dst=msg.dst)
        self.agents[msg.dst].on_message(msg)

    def _crash(self, node: str) -> None:
        self._pending_crashes -= 1
        if node not in self.status:
            self.log("CrashIgnored", node=node, reason="UnknownNode")
            return
        if self.status[node] is NodeStatus.OFFLINE:
            self.log("CrashIgnored", node=node, reason="AlreadyOffline")
            return
        self.status[node] = NodeStatus.OFFLINE
        self.log("Crash", node=node)
        self.agents[node].crash(self.now)
        for seq in sorted(self._undelivered):
            ev = self._undelivered[seq]
            msg = ev.payload
            if node in (msg.src, msg.dst):
                del self._undelivered[seq]
                self._cancelled.add(seq)
                if msg.kind in _PROTOCOL:
                    self._in_flight -= 1
                    self.log("Dropped", msg=msg.kind, src=msg.src, dst=msg.dst, reason="Crash")

    def _tick(self, node: str) -> None:
        if self.status[node] is not NodeStatus.ONLINE:
            return
        self.agents[node].on_tick(self.now)
        self.schedule(self.now + self.scenario.heartbeat_period, TimerFire(node))

    def current_lead(self):
        online = [a for nid, a in sorted(self.agents.items()) if self.status[nid] is NodeStatus.ONLINE and a.lead]
        return online[0].lead if online else None

    def _quiescent(self) -> bool:
        if self._pending_crashes or self._in_flight:
            return False
        lead = self.current_lead()
        if lead is None or not lead.idle:
            return False
        offline = {n for n, s in self.status.items() if s is NodeStatus.OFFLINE}
        return offline <= lead.handled

    def run(self) -> str:
        leader = elect_leader(self.status)
        self.schedule(0, StartDeployment(leader))
        for node, t in self.scenario.crashes:
            self.schedule(t, CrashInjection(node))
        for nid in sorted(self.agents):
            if self.status[nid] is NodeStatus.ONLINE:
                self.schedule(self.scenario.heartbeat_period, TimerFire(nid))
        while self._queue:
            ev = heapq.heappop(self._queue)
            if ev.seq in self._cancelled:
                self._cancelled.discard(ev.seq)
                continue
            if ev.time > self.scenario.horizon:
                self.now = self.scenario.horizon
                self.log("HorizonExceeded", horizon=self.scenario.horizon)
                return HORIZON_EXCEEDED
            self.now = ev.time
            p = ev.payload
            if isinstance(p, DmMessage):
                self._deliver(ev)
            elif isinstance(p, TimerFire):
                self._tick(p.node)
            elif isinstance(p, CrashInjection):
                self._crash(p.node)
            elif isinstance(p, StartDeployment):
                self.log("LeaderElected", leader=p.node, suspected=[])
                self.agents[p.node].become_lead().start_deployment()
            if self._quiescent():
                self.log("Quiescent")
                return CONVERGED if all_active(self.final_state(), self.app) else UNRECOVERABLE
        # the queue only drains once every node is down; nothing can host the application
        if all(s is NodeStatus.OFFLINE for s in self.status.values()):
            self.log("AllNodesOffline")
            return UNRECOVERABLE
        self.log("HorizonExceeded", horizon=self.scenario.horizon)
        return HORIZON_EXCEEDED

    def final_state(self) -> ConfigurationState:
        truth = merge_truth(self.app, self.agents_list(), self.status)
        lead = self.current_lead()
        mapping = dict(lead.replica.mapping) if lead else {}
        return truth.evolve(mapping=mapping, time=self.now)


def _plain(body):
    """JSON-ready copy of a message body for the log."""
    if body is None or isinstance(body, (str, int, float, bool)):
        return body
    if isinstance(body, dict):
        return {k if isinstance(k, str) else str(k): _plain(v) for k, v in body.items()}
    if isinstance(body, (list, tuple)):
        return [_plain(v) for v in body]
    if hasattr(body, "to_dict"):
        return body.to_dict()
    if hasattr(body, "value"):
        return body.value
    return str(body)


def preflight(app: Application, cluster: Cluster) -> dict:
    """Checks a run needs before it starts; returns the initial mapping."""
    report = validate_application(app)
    if not report.ok:
        raise InvalidApplication(report.violations)
    flows = check_label_flows(app)
    if flows:
        raise FlowViolationError(flows)
    if not any(n.online for n in cluster.nodes):
        raise NoNodesOnline()
    return map_nodes(app, cluster)


def _report(sim: Simulator, outcome: str, final: ConfigurationState) -> RunReport:
    log = sim.events
    complete = log.of_kind("PlanComplete")
    detail = ""
    if outcome == UNRECOVERABLE:
        spare = log.of_kind("Unrecoverable")
        if spare:
            detail = f"NoSpareNode{{{spare[-1]['node_kind']}}} for {spare[-1]['vnode']}"
        elif log.of_kind("AllNodesOffline"):
            detail = "all nodes offline"
        else:
            detail = "some components are not Active"
    return RunReport(
        outcome=outcome,
        actions=len(log.of_kind("ActionAck")) + len(log.of_kind("Bookkeeping")),
        failures=len(log.of_kind("Crash")),
        recoveries=len(log.of_kind("RecoveryComplete")),
        final_states={c: final.state_of(c).value for c in sim.app.by_id},
        end_time=sim.now,
        plan_complete_at=complete[0]["t"] if complete else None,
        detail=detail,
    )


def run(app: Application, cluster: Cluster, scenario: Scenario) -> SimResult:
    preflight(app, cluster)
    sim = Simulator(app, cluster, scenario)
    outcome = sim.run()
    final = sim.final_state()
    return SimResult(sim.events, final, outcome, _report(sim, outcome, final), sim.takeovers)


def all_active(config: ConfigurationState, app: Application) -> bool:
    return all(config.state_of(c) is ComponentState.ACTIVE for c in app.by_id)
