"""Domain model for component applications and the clusters that host them.

An application is the tuple (components, dependencies, sigma, colloc): component
instances with typed ports, client->server dependencies, a virtual-node
assignment per component, and a collocation relation forcing components into
one process.  Everything here is an immutable value; the module-level functions
are pure.
"""
from __future__ import annotations

import enum
import heapq
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping

import networkx as nx

from .errors import CyclicDependency


class PortKind(str, enum.Enum):
    FACET = "Facet"
    RECEPTACLE = "Receptacle"
    PUBLISHER = "Publisher"
    SUBSCRIBER = "Subscriber"

    @property
    def is_topic(self) -> bool:
        return self in (PortKind.PUBLISHER, PortKind.SUBSCRIBER)


class Level(enum.IntEnum):
    """Sensitivity levels in increasing order."""

    CONFIDENTIAL = 0
    COMPETITION_SENSITIVE = 1
    MANAGEMENT_ONLY = 2

    @property
    def label_name(self) -> str:
        return _LEVEL_NAMES[self]

    @classmethod
    def from_name(cls, name: str) -> "Level":
        try:
            return _LEVELS_BY_NAME[name]
        except KeyError:
            raise ValueError(f"unknown security level {name!r}") from None


_LEVEL_NAMES = {
    Level.CONFIDENTIAL: "Confidential",
    Level.COMPETITION_SENSITIVE: "CompetitionSensitive",
    Level.MANAGEMENT_ONLY: "ManagementOnly",
}
_LEVELS_BY_NAME = {v: k for k, v in _LEVEL_NAMES.items()}


class NodeStatus(str, enum.Enum):
    ONLINE = "Online"
    OFFLINE = "Offline"


@dataclass(frozen=True, order=True)
class SecurityLabel:
    level: Level = Level.CONFIDENTIAL
    domain: str = "default"

    def dominates(self, other: "SecurityLabel") -> bool:
        """True if information labelled ``other`` may flow to a holder of ``self``."""
        return self.domain == other.domain and self.level >= other.level

    def __str__(self) -> str:
        return f"({self.level.label_name}, {self.domain})"


@dataclass(frozen=True)
class Port:
    name: str
    kind: PortKind
    contract: str  # interface name, or topic name for pub/sub ports


@dataclass(frozen=True)
class ComponentInstance:
    id: str
    type_name: str
    ports: tuple[Port, ...] = ()
    mem_demand: int = 0
    cpu_demand: int = 0
    hw_required: frozenset[str] = frozenset()
    label: SecurityLabel = SecurityLabel()

    def __post_init__(self):
        if self.mem_demand < 0 or self.cpu_demand < 0:
            raise ValueError(f"component {self.id}: negative resource demand")
        object.__setattr__(self, "ports", tuple(self.ports))
        object.__setattr__(self, "hw_required", frozenset(self.hw_required))

    def ports_of(self, kind: PortKind) -> list[Port]:
        return sorted((p for p in self.ports if p.kind is kind), key=lambda p: p.name)


@dataclass(frozen=True, order=True)
class Connection:
    """One connection to establish at deploy time.

    A dependency connection binds ``owner``'s receptacle to ``server``'s facet
    and is executed on the owner's node.  A topic connection (``server`` empty)
    registers one publisher or subscriber endpoint on its topic.
    """

    owner: str
    port: str
    contract: str
    server: str = ""
    server_port: str = ""

    @property
    def is_topic(self) -> bool:
        return not self.server

    def to_dict(self) -> dict:
        d = {"owner": self.owner, "port": self.port, "contract": self.contract}
        if self.server:
            d["server"] = self.server
            d["server_port"] = self.server_port
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Connection":
        return cls(d["owner"], d["port"], d["contract"], d.get("server", ""), d.get("server_port", ""))

    def __str__(self) -> str:
        if self.is_topic:
            return f"{self.owner}.{self.port}@{self.contract}"
        return f"{self.owner}.{self.port}->{self.server}.{self.server_port}"


@dataclass(frozen=True)
class Application:
    components: tuple[ComponentInstance, ...] = ()
    dependencies: tuple[tuple[str, str], ...] = ()  # (client, server)
    sigma: Mapping[str, str] = field(default_factory=dict)
    colloc: tuple[tuple[str, str], ...] = ()
    virtual_nodes: Mapping[str, str] = field(default_factory=dict)  # vnode -> kind

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        object.__setattr__(self, "dependencies", tuple(tuple(d) for d in self.dependencies))
        object.__setattr__(self, "colloc", tuple(tuple(p) for p in self.colloc))
        object.__setattr__(self, "sigma", dict(self.sigma))
        object.__setattr__(self, "virtual_nodes", dict(self.virtual_nodes))

    __hash__ = None

    @cached_property
    def by_id(self) -> dict[str, ComponentInstance]:
        return {c.id: c for c in self.components}

    @cached_property
    def ids(self) -> list[str]:
        return sorted(self.by_id)

    def component(self, cid: str) -> ComponentInstance:
        return self.by_id[cid]

    @cached_property
    def _servers(self) -> dict[str, tuple[str, ...]]:
        out = defaultdict(set)
        for client, server in self.dependencies:
            out[client].add(server)
        return {k: tuple(sorted(v)) for k, v in out.items()}

    @cached_property
    def _clients(self) -> dict[str, tuple[str, ...]]:
        out = defaultdict(set)
        for client, server in self.dependencies:
            out[server].add(client)
        return {k: tuple(sorted(v)) for k, v in out.items()}

    def servers_of(self, cid: str) -> tuple[str, ...]:
        return self._servers.get(cid, ())

    def clients_of(self, cid: str) -> tuple[str, ...]:
        return self._clients.get(cid, ())

    def transitive_clients(self, seeds: Iterable[str]) -> set[str]:
        """All components that reach any seed through dependency edges, seeds excluded."""
        seeds = set(seeds)
        seen: set[str] = set()
        stack = list(seeds)
        while stack:
            for client in self.clients_of(stack.pop()):
                if client not in seen and client not in seeds:
                    seen.add(client)
                    stack.append(client)
        return seen

    def members_of_vnode(self, vnode: str) -> list[str]:
        return sorted(c for c, v in self.sigma.items() if v == vnode and c in self.by_id)

    @cached_property
    def group_of(self) -> dict[str, str]:
        """Component id -> process-group id."""
        return {m: group_id(g) for g in process_groups(self) for m in g}

    @cached_property
    def groups(self) -> dict[str, tuple[str, ...]]:
        return {group_id(g): g for g in process_groups(self)}

    @cached_property
    def connections(self) -> tuple[Connection, ...]:
        """Every connection a full deployment establishes, in canonical order."""
        conns = []
        for client, server in sorted(set(self.dependencies)):
            match = _match_ports(self.by_id.get(client), self.by_id.get(server))
            if match is not None:
                rport, fport = match
                conns.append(Connection(client, rport.name, rport.contract, server, fport.name))
        publishers = defaultdict(set)
        subscribers = defaultdict(set)
        for c in self.components:
            for p in c.ports:
                if p.kind is PortKind.PUBLISHER:
                    publishers[p.contract].add(c.id)
                elif p.kind is PortKind.SUBSCRIBER:
                    subscribers[p.contract].add(c.id)
        for c in sorted(self.components, key=lambda c: c.id):
            for p in sorted(c.ports, key=lambda p: p.name):
                if not p.kind.is_topic:
                    continue
                peers = subscribers if p.kind is PortKind.PUBLISHER else publishers
                if peers[p.contract] - {c.id}:
                    conns.append(Connection(c.id, p.name, p.contract))
        return tuple(sorted(conns))

    def required_connections(self, cid: str) -> tuple[Connection, ...]:
        return self._owned.get(cid, ())

    @cached_property
    def _owned(self) -> dict[str, tuple[Connection, ...]]:
        out = defaultdict(list)
        for conn in self.connections:
            out[conn.owner].append(conn)
        return {k: tuple(v) for k, v in out.items()}

    def topic_flows(self) -> list[tuple[str, str, str]]:
        """(publisher, subscriber, topic) triples between distinct components."""
        pubs = defaultdict(set)
        subs = defaultdict(set)
        for c in self.components:
            for p in c.ports:
                if p.kind is PortKind.PUBLISHER:
                    pubs[p.contract].add(c.id)
                elif p.kind is PortKind.SUBSCRIBER:
                    subs[p.contract].add(c.id)
        return sorted(
            (pub, sub, topic)
            for topic in pubs
            for pub in pubs[topic]
            for sub in subs.get(topic, ())
            if pub != sub
        )


def _match_ports(client: ComponentInstance | None, server: ComponentInstance | None):
    if client is None or server is None:
        return None
    facets = server.ports_of(PortKind.FACET)
    for rport in client.ports_of(PortKind.RECEPTACLE):
        for fport in facets:
            if fport.contract == rport.contract:
                return rport, fport
    return None


@dataclass(frozen=True)
class PhysicalNode:
    id: str
    kind: str
    mem_capacity: int = 0
    cpu_capacity: int = 0
    hw_tags: frozenset[str] = frozenset()
    status: NodeStatus = NodeStatus.ONLINE

    def __post_init__(self):
        if self.mem_capacity < 0 or self.cpu_capacity < 0:
            raise ValueError(f"node {self.id}: negative capacity")
        object.__setattr__(self, "hw_tags", frozenset(self.hw_tags))

    @property
    def online(self) -> bool:
        return self.status is NodeStatus.ONLINE


@dataclass(frozen=True)
class Link:
    a: str
    b: str
    bandwidth: int = 0
    encrypted: bool = False


@dataclass(frozen=True)
class Cluster:
    nodes: tuple[PhysicalNode, ...] = ()
    links: tuple[Link, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(sorted(self.nodes, key=lambda n: n.id)))
        object.__setattr__(self, "links", tuple(self.links))
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate node id in cluster")
        known = set(ids)
        for link in self.links:
            if link.a not in known or link.b not in known:
                raise ValueError(f"link endpoint not in cluster: {link.a}-{link.b}")

    __hash__ = None

    @cached_property
    def by_id(self) -> dict[str, PhysicalNode]:
        return {n.id: n for n in self.nodes}

    def node(self, nid: str) -> PhysicalNode:
        return self.by_id[nid]

    @property
    def node_status(self) -> dict[str, NodeStatus]:
        return {n.id: n.status for n in self.nodes}

    def with_status(self, status: Mapping[str, NodeStatus]) -> "Cluster":
        nodes = [
            PhysicalNode(n.id, n.kind, n.mem_capacity, n.cpu_capacity, n.hw_tags, status.get(n.id, n.status))
            for n in self.nodes
        ]
        return Cluster(tuple(nodes), self.links)

    def usable_links(self) -> list[Link]:
        """Links whose endpoints are both online."""
        return [l for l in self.links if self.by_id[l.a].online and self.by_id[l.b].online]


# -- validation --------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    kind: str
    ids: tuple[str, ...]
    detail: str = ""

    def __str__(self) -> str:
        s = f"{self.kind}{{{','.join(self.ids)}}}"
        return f"{s} {self.detail}" if self.detail else s


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_application(app: Application) -> ValidationReport:
    """Check every structural invariant of ``app`` and report all violations."""
    out: list[Violation] = []

    seen: set[str] = set()
    for c in app.components:
        if c.id in seen:
            out.append(Violation("DuplicateId", (c.id,), "component id"))
        seen.add(c.id)
        names = [p.name for p in c.ports]
        for name in sorted({n for n in names if names.count(n) > 1}):
            out.append(Violation("DuplicateId", (c.id, name), "port name"))

    known = set(app.by_id)
    for client, server in app.dependencies:
        missing = [x for x in (client, server) if x not in known]
        if missing:
            out.append(Violation("DanglingReference", (client, server), "dependency"))
    for a, b in app.colloc:
        if a not in known or b not in known:
            out.append(Violation("DanglingReference", (a, b), "collocation"))
    for cid in sorted(known):
        if cid not in app.sigma:
            out.append(Violation("DanglingReference", (cid,), "no virtual node assigned"))
    for cid, vnode in sorted(app.sigma.items()):
        if cid not in known:
            out.append(Violation("DanglingReference", (cid,), "sigma names unknown component"))
        elif vnode not in app.virtual_nodes:
            out.append(Violation("DanglingReference", (cid, vnode), "undeclared virtual node"))

    for client, server in sorted(set(app.dependencies)):
        if client in known and server in known and client != server:
            if _match_ports(app.by_id[client], app.by_id[server]) is None:
                out.append(Violation("UnmatchedDependencyPorts", (client, server)))

    graph = nx.DiGraph()
    graph.add_edges_from((c, s) for c, s in app.dependencies if c in known and s in known)
    for scc in sorted((sorted(s) for s in nx.strongly_connected_components(graph))):
        if len(scc) > 1 or graph.has_edge(scc[0], scc[0]):
            out.append(Violation("CyclicDependency", tuple(scc)))

    for group in process_groups(app):
        vnodes = {app.sigma.get(m) for m in group}
        if len(vnodes) > 1:
            out.append(Violation("CollocationNodeMismatch", group))

    return ValidationReport(tuple(out))


def group_id(members: Iterable[str]) -> str:
    return "proc-" + min(members)


def process_groups(app: Application) -> list[tuple[str, ...]]:
    """Partition components into processes: connected components of the collocation graph."""
    parent = {cid: cid for cid in app.by_id}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in app.colloc:
        if a in parent and b in parent:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    groups = defaultdict(list)
    for cid in parent:
        groups[find(cid)].append(cid)
    return sorted(tuple(sorted(g)) for g in groups.values())


def activation_order(app: Application) -> list[str]:
    """Order components so every server precedes its clients; ties go to the smaller id."""
    indegree = {cid: 0 for cid in app.by_id}
    for client in indegree:
        indegree[client] = len([s for s in app.servers_of(client) if s in indegree])
    ready = [cid for cid, n in indegree.items() if n == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        cid = heapq.heappop(ready)
        order.append(cid)
        for client in app.clients_of(cid):
            if client in indegree:
                indegree[client] -= 1
                if indegree[client] == 0:
                    heapq.heappush(ready, client)
    if len(order) != len(indegree):
        raise CyclicDependency(set(indegree) - set(order))
    return order
