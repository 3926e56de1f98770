"""JSON file formats for applications, clusters and scenarios."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping

from .errors import ParseError
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
)
from .simnet import Scenario


def _level(value) -> Level:
    if isinstance(value, bool):
        raise ValueError(f"bad security level {value!r}")
    if isinstance(value, int):
        return Level(value)
    return Level.from_name(value)


def _parse(fn, data, what: str):
    try:
        return fn(data)
    except ParseError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise ParseError(f"bad {what}: {exc!r}") from exc


def application_from_dict(data: Mapping[str, Any]) -> Application:
    def build(d):
        comps = []
        for c in d.get("components", []):
            label = c.get("label") or {}
            comps.append(
                ComponentInstance(
                    id=str(c["id"]),
                    type_name=str(c.get("type", c["id"])),
                    ports=tuple(
                        Port(str(p["name"]), PortKind(p["kind"]), str(p["contract"])) for p in c.get("ports", [])
                    ),
                    mem_demand=int(c.get("mem", 0)),
                    cpu_demand=int(c.get("cpu", 0)),
                    hw_required=frozenset(c.get("hw", [])),
                    label=SecurityLabel(_level(label.get("level", "Confidential")), str(label.get("domain", "default"))),
                )
            )
        deps = [(str(a), str(b)) for a, b in d.get("dependencies", [])]
        colloc = [(str(a), str(b)) for a, b in d.get("colloc", [])]
        return Application(
            components=tuple(comps),
            dependencies=tuple(deps),
            sigma={str(k): str(v) for k, v in d.get("sigma", {}).items()},
            colloc=tuple(colloc),
            virtual_nodes={str(k): str(v) for k, v in d.get("vnodes", {}).items()},
        )

    return _parse(build, data, "application")


def application_to_dict(app: Application) -> dict:
    return {
        "components": [
            {
                "id": c.id,
                "type": c.type_name,
                "mem": c.mem_demand,
                "cpu": c.cpu_demand,
                "hw": sorted(c.hw_required),
                "label": {"level": c.label.level.label_name, "domain": c.label.domain},
                "ports": [
                    {"name": p.name, "kind": p.kind.value, "contract": p.contract}
                    for p in sorted(c.ports, key=lambda p: (p.name, p.kind.value, p.contract))
                ],
            }
            for c in sorted(app.components, key=lambda c: c.id)
        ],
        "dependencies": sorted([list(d) for d in app.dependencies]),
        "colloc": sorted([list(p) for p in app.colloc]),
        "sigma": dict(sorted(app.sigma.items())),
        "vnodes": dict(sorted(app.virtual_nodes.items())),
    }


def cluster_from_dict(data: Mapping[str, Any]) -> Cluster:
    def build(d):
        nodes = [
            PhysicalNode(
                id=str(n["id"]),
                kind=str(n["kind"]),
                mem_capacity=int(n.get("mem", 0)),
                cpu_capacity=int(n.get("cpu", 0)),
                hw_tags=frozenset(n.get("hw", [])),
                status=NodeStatus(n.get("status", "Online")),
            )
            for n in d.get("nodes", [])
        ]
        links = []
        for link in d.get("links", []):
            a, b, bw, enc = (list(link) + [0, False])[:4]
            links.append(Link(str(a), str(b), int(bw), bool(enc)))
        return Cluster(tuple(nodes), tuple(links))

    return _parse(build, data, "cluster")


def cluster_to_dict(cluster: Cluster) -> dict:
    nodes = []
    for n in cluster.nodes:
        d = {"id": n.id, "kind": n.kind, "mem": n.mem_capacity, "cpu": n.cpu_capacity, "hw": sorted(n.hw_tags)}
        if not n.online:
            d["status"] = n.status.value
        nodes.append(d)
    links = sorted([[l.a, l.b, l.bandwidth, l.encrypted] for l in cluster.links])
    return {"nodes": nodes, "links": links}


def scenario_from_dict(data: Mapping[str, Any]) -> Scenario:
    def build(d):
        delay = d.get("delay", {"fixed": 1})
        if isinstance(delay, int):
            span = (delay, delay)
        elif "fixed" in delay:
            span = (int(delay["fixed"]),) * 2
        else:
            lo, hi = delay["range"]
            span = (int(lo), int(hi))
        return Scenario(
            crashes=tuple((str(n), int(t)) for n, t in d.get("crashes", [])),
            delay=span,
            seed=int(d.get("seed", 0)),
            horizon=int(d.get("horizon", 10_000)),
            heartbeat_period=int(d.get("heartbeat_period", 10)),
            misses=int(d.get("misses", 3)),
        )

    return _parse(build, data, "scenario")


def scenario_to_dict(scenario: Scenario) -> dict:
    return scenario.to_dict()


def read_json(path) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def load_application(path) -> Application:
    return application_from_dict(_object(read_json(path), path))


def load_cluster(path) -> Cluster:
    return cluster_from_dict(_object(read_json(path), path))


def load_scenario(path) -> Scenario:
    return scenario_from_dict(_object(read_json(path), path))


def _object(data, path):
    if not isinstance(data, dict):
        raise ParseError(f"{path}: top-level value must be an object")
    return data


def dumps(data) -> str:
    return json.dumps(data, indent=2, sort_keys=True) + "\n"
