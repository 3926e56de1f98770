"""Crash detection, affected-subgraph isolation, and recovery planning."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from .errors import NoFeasibleNode, NoSpareNode, UnknownNode
from .model import Application, Cluster, NodeStatus
from .planner import DeploymentPlan, NodeMapping, diff_plans, map_nodes, map_nodes_partial
from .state import ConfigurationState

DEFAULT_PERIOD = 10
DEFAULT_MISSES = 3


@dataclass
class HeartbeatDetector:
    """Suspects a peer once ``now - last_heartbeat > misses * period`` (strict)."""

    peers: Iterable[str]
    period: int = DEFAULT_PERIOD
    misses: int = DEFAULT_MISSES
    start: int = 0
    last: dict = field(init=False)
    suspected: set = field(init=False, default_factory=set)

    def __post_init__(self):
        self.last = {p: self.start for p in sorted(self.peers)}

    def observe(self, peer: str, sent_at: int) -> None:
        if peer in self.last and sent_at > self.last[peer]:
            self.last[peer] = sent_at

    def detect(self, now: int) -> list[str]:
        """Peers that cross the silence threshold at ``now``; each is reported once."""
        limit = self.misses * self.period
        new = [p for p, t in self.last.items() if p not in self.suspected and now - t > limit]
        self.suspected.update(new)
        return new


def detect(detector: HeartbeatDetector, now: int) -> list[str]:
    return detector.detect(now)


@dataclass(frozen=True)
class AffectedSet:
    failed: frozenset = frozenset()
    impacted: frozenset = frozenset()

    def __or__(self, other: "AffectedSet") -> "AffectedSet":
        failed = self.failed | other.failed
        return AffectedSet(failed, (self.impacted | other.impacted) - failed)

    def __bool__(self) -> bool:
        return bool(self.failed or self.impacted)

    def to_dict(self) -> dict:
        return {"failed": sorted(self.failed), "impacted": sorted(self.impacted)}


def affected_set(app: Application, config: ConfigurationState, node: str) -> AffectedSet:
    """Components bound to ``node`` and the surviving clients that transitively depend on them.

    Subscribers of a failed publisher are not impacted: publish/subscribe
    imposes no deployment order.
    """
    if node not in config.node_status:
        raise UnknownNode(node)
    failed = {
        c
        for c in app.by_id
        if config.mapping.get(app.sigma[c]) == node or config.node_of(app, c) == node
    }
    return AffectedSet(frozenset(failed), frozenset(app.transitive_clients(failed)))


def _pinned(config: ConfigurationState, cluster: Cluster) -> dict:
    return {
        v: n
        for v, n in config.mapping.items()
        if config.node_status.get(n, NodeStatus.OFFLINE) is NodeStatus.ONLINE and n in cluster.by_id
    }


def recover(
    app: Application, cluster: Cluster, config: ConfigurationState, affected: AffectedSet
) -> tuple[DeploymentPlan, NodeMapping]:
    """Plan the reconfiguration that brings every component back to Active.

    Surviving bindings are pinned, so only virtual nodes of failed nodes move.
    Raises :class:`NoSpareNode` (carrying a best-effort plan that deactivates
    the blocked clients) when some virtual node has no kind-equal online home.
    """
    view = cluster.with_status(config.node_status)
    pinned = _pinned(config, view)
    try:
        mapping = map_nodes(app, view, pinned)
    except NoFeasibleNode as exc:
        partial, failures = map_nodes_partial(app, view, pinned)
        blocked_members = {c for c in app.by_id if app.sigma[c] in failures}
        blocked = blocked_members | app.transitive_clients(blocked_members)
        degraded = diff_plans(config, app, partial, hold=blocked)
        raise NoSpareNode(app.virtual_nodes[exc.vnode], exc.vnode, degraded, blocked) from exc
    return diff_plans(config, app, mapping), mapping
