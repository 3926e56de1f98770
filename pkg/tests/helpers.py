"""Shared builders and log oracles for the test suite."""
from __future__ import annotations

import random
from pathlib import Path

from resdeploy.formats import load_application, load_cluster, load_scenario
from resdeploy.model import (
    Application,
    Cluster,
    ComponentInstance,
    Level,
    PhysicalNode,
    Port,
    PortKind,
    SecurityLabel,
)
from resdeploy.simnet import Scenario, run

ROOT = Path(__file__).resolve().parents[1]
SAMPLES = ROOT / "samples"
GOLDEN = Path(__file__).resolve().parent / "golden"

KINDS = ("x86", "arm")
FORWARD = {("Absent", "Instantiated"), ("Instantiated", "Connected"), ("Connected", "Active")}


def nav_app() -> Application:
    return load_application(SAMPLES / "nav_app.json")


def cluster3(spare: bool = True) -> Cluster:
    return load_cluster(SAMPLES / ("cluster3.json" if spare else "cluster3_nospare.json"))


def sample_scenario(name: str) -> Scenario:
    return load_scenario(SAMPLES / f"{name}.json")


def comp(cid, *ports, mem=10, cpu=1, hw=(), level=Level.CONFIDENTIAL, domain="d"):
    return ComponentInstance(cid, cid, tuple(ports), mem, cpu, frozenset(hw), SecurityLabel(level, domain))


def facet(name, contract):
    return Port(name, PortKind.FACET, contract)


def receptacle(name, contract):
    return Port(name, PortKind.RECEPTACLE, contract)


def pub(name, topic):
    return Port(name, PortKind.PUBLISHER, topic)


def sub(name, topic):
    return Port(name, PortKind.SUBSCRIBER, topic)


def chain_app(*ids, kind="x86") -> Application:
    """ids[0] -> ids[1] -> ... (each a client of the next), one vnode per component."""
    ports = {c: [] for c in ids}
    deps = []
    for client, server in zip(ids, ids[1:]):
        ports[server].append(facet("svc", f"I{server}"))
        ports[client].append(receptacle(f"use_{server}", f"I{server}"))
        deps.append((client, server))
    comps = [comp(c, *ports[c]) for c in ids]
    return Application(
        comps, deps, {c: f"v_{c}" for c in ids}, (), {f"v_{c}": kind for c in ids}
    )


def random_app(rng: random.Random, max_components: int = 20, kinds=KINDS) -> Application:
    """A valid application: acyclic D with matched ports, topics, α within vnodes."""
    n = rng.randint(1, max_components)
    ids = [f"c{i:02d}" for i in range(n)]
    order = ids[:]
    rng.shuffle(order)  # D edges only point from later to earlier in this order
    ports = {c: [] for c in ids}
    deps = set()
    p_edge = rng.choice((0.1, 0.2, 0.35))
    for j, client in enumerate(order):
        for server in order[:j]:
            if rng.random() < p_edge:
                deps.add((client, server))
    for server in sorted({s for _, s in deps}):
        ports[server].append(facet("svc", f"I{server}"))
    for client, server in sorted(deps):
        ports[client].append(receptacle(f"r_{server}", f"I{server}"))
    for t in range(rng.randint(0, 3)):
        topic = f"T{t}"
        for c in rng.sample(ids, rng.randint(0, min(3, n))):
            ports[c].append(pub(f"p_{topic}", topic))
        for c in rng.sample(ids, rng.randint(0, min(3, n))):
            ports[c].append(sub(f"s_{topic}", topic))
    nv = rng.randint(1, min(n, 5))
    vnodes = {f"v{i}": rng.choice(kinds) for i in range(nv)}
    vnames = sorted(vnodes)
    sigma = {}
    for i, c in enumerate(ids):
        sigma[c] = vnames[i] if i < nv else rng.choice(vnames)
    colloc = []
    for v in vnames:
        members = [c for c in ids if sigma[c] == v]
        for a, b in zip(members, members[1:]):
            if rng.random() < 0.3:
                colloc.append((a, b))
    label = SecurityLabel(rng.choice(list(Level)), "d")
    comps = [
        ComponentInstance(c, f"T{c}", tuple(ports[c]), rng.randint(1, 50), rng.randint(1, 10), frozenset(), label)
        for c in ids
    ]
    return Application(comps, tuple(sorted(deps)), sigma, tuple(colloc), vnodes)


def cluster_for(app: Application, spare: bool = True, rng: random.Random | None = None) -> Cluster:
    """One node per virtual node (roomy), plus one spare per kind when asked."""
    nodes = []
    need = {v: 0 for v in app.virtual_nodes}
    cpu = {v: 0 for v in app.virtual_nodes}
    for c in app.components:
        need[app.sigma[c.id]] += c.mem_demand
        cpu[app.sigma[c.id]] += c.cpu_demand
    cap_mem = max(need.values(), default=0) + 100
    cap_cpu = max(cpu.values(), default=0) + 10
    vnames = sorted(app.virtual_nodes)
    if rng is not None:
        rng.shuffle(vnames)
    for i, v in enumerate(vnames):
        nodes.append(PhysicalNode(f"n{i:02d}", app.virtual_nodes[v], cap_mem, cap_cpu))
    if spare:
        for j, kind in enumerate(sorted(set(app.virtual_nodes.values()))):
            nodes.append(PhysicalNode(f"s{j:02d}", kind, cap_mem, cap_cpu))
    return Cluster(tuple(nodes))


def transitions(log) -> list[dict]:
    """Node-level (ground-truth) component transitions, in log order."""
    return [e for e in log if e["kind"] == "Transition"]


def activation_violations(app: Application, log) -> list[tuple]:
    """Client activations that happen while a D-server is not Active (by ground truth)."""
    state = {c: "Absent" for c in app.by_id}
    bad = []
    for e in transitions(log):
        if e["to"] == "Active":
            for s in app.servers_of(e["component"]):
                if state[s] != "Active":
                    bad.append((e["t"], e["component"], s, state[s]))
        state[e["component"]] = e["to"]
    return bad


def final_activation_order_ok(app: Application, log) -> bool:
    """The last activation of each server precedes the last activation of its clients."""
    last = {}
    for e in transitions(log):
        if e["to"] == "Active":
            last[e["component"]] = e["seq"]
    return all(last.get(s, -1) < last.get(c, -1) for c, s in app.dependencies)


def isolation_breaches(app: Application, log) -> list[dict]:
    """Transitions of components outside the affected set during any recovery.

    A component Active when recovery is planned must not move at all;
    one still being deployed may only move forward.
    """
    state = {c: "Absent" for c in app.by_id}
    untouched: set[str] = set()
    frozen: set[str] = set()
    bad = []
    for e in log:
        k = e["kind"]
        if k == "RecoveryPlanned":
            affected = set(e["failed"]) | set(e["impacted"])
            untouched = {c for c in state if c not in affected}
            frozen = {c for c in untouched if state.get(c) == "Active"}
        elif k == "Transition":
            c = e["component"]
            if c in frozen or (c in untouched and (e["from"], e["to"]) not in FORWARD and e["to"] != "Failed"):
                bad.append(e)
            state[c] = e["to"]
        elif k in ("RecoveryComplete", "PlanAborted"):
            untouched, frozen = set(), set()
    return bad


def crash_candidates(app: Application, result) -> list[str]:
    """Physical nodes that host at least one virtual node in the run's mapping."""
    return sorted(set(result.final.mapping.values()))


def no_failure_run(app, cluster, seed=0, delay=(1, 3)):
    return run(app, cluster, Scenario(delay=delay, seed=seed))


def _phase_of(aid: str) -> tuple[str, int]:
    tag, phase, _ = aid.rsplit(".", 2)
    return tag, int(phase)


def barrier_violations(app: Application, log) -> list[dict]:
    """Dispatches sent before the lead held every ack they must wait for.

    Phase k+1 waits for all of phase k; an Activate waits for the Activate of
    each in-phase server, a Deactivate for each in-phase client.
    """
    acked: set[str] = set()
    issued: dict[str, dict] = {}  # aid -> action
    bad = []
    for e in log:
        k = e["kind"]
        if k == "Deliver" and e["msg"] == "Ack":
            acked.add(e["aid"])
        elif k == "Bookkeeping":
            issued[e["aid"]] = e["action"]
            acked.add(e["aid"])
        elif k == "Send" and e["msg"] == "Dispatch":
            aid, action = e["body"]["aid"], e["body"]["action"]
            tag, phase = _phase_of(aid)
            needed = [a for a in issued if _phase_of(a) == (tag, phase - 1)]
            same = {a: act for a, act in issued.items() if _phase_of(a) == (tag, phase)}
            if action["kind"] == "Activate":
                related = set(app.servers_of(action["subject"]))
            elif action["kind"] == "Deactivate":
                related = set(app.clients_of(action["subject"]))
            else:
                related = set()
            needed += [a for a, act in same.items() if act["kind"] == action["kind"] and str(act["subject"]) in related]
            if any(a not in acked for a in needed):
                bad.append(e)
            issued[aid] = action
    return bad
