"""Command-line front end: ``validate``, ``plan`` and ``run``."""
from __future__ import annotations

import argparse
import dataclasses
import sys

from .errors import CyclicDependency, FlowViolationError, InvalidApplication, NoFeasibleNode, NoNodesOnline, ParseError
from .formats import dumps, load_application, load_cluster, load_scenario
from .model import activation_order, validate_application
from .planner import check_label_flows, check_resources, map_nodes, synth_plan
from .simnet import CONVERGED, HORIZON_EXCEEDED, UNRECOVERABLE, run

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_PARSE = 2
EXIT_UNRECOVERABLE = 3
EXIT_HORIZON = 4

_EXIT_FOR = {CONVERGED: EXIT_OK, UNRECOVERABLE: EXIT_UNRECOVERABLE, HORIZON_EXCEEDED: EXIT_HORIZON}


def _emit(out, fmt: str, data: dict, text: str) -> None:
    out.write(dumps(data) if fmt == "json" else text.rstrip("\n") + "\n")


def cmd_validate(args, out=sys.stdout) -> int:
    app = load_application(args.app)
    report = validate_application(app)
    lines = [str(v) for v in report.violations]
    data = {"ok": report.ok, "violations": [{"kind": v.kind, "ids": list(v.ids), "detail": v.detail} for v in report.violations]}
    _emit(out, args.format, data, "\n".join(lines) if lines else "ok")
    return EXIT_OK if report.ok else EXIT_INVALID


def _failure(out, fmt: str, outcome: str, errors: list[str]) -> int:
    _emit(out, fmt, {"outcome": outcome, "errors": errors}, "\n".join([f"outcome: {outcome}", *errors]))
    return EXIT_INVALID


def cmd_plan(args, out=sys.stdout) -> int:
    app = load_application(args.app)
    cluster = load_cluster(args.cluster)
    report = validate_application(app)
    if not report.ok:
        return _failure(out, args.format, "ValidationFailed", [str(v) for v in report.violations])
    flows = check_label_flows(app)
    if flows:
        return _failure(out, args.format, "PlanInfeasible", [str(f) for f in flows])
    try:
        mapping = map_nodes(app, cluster)
    except NoFeasibleNode as exc:
        return _failure(out, args.format, "PlanInfeasible", [str(exc)])
    plan = synth_plan(app, mapping)
    resources = check_resources(app, mapping, cluster)
    data = {
        "mapping": dict(sorted(mapping.items())),
        "activation_order": activation_order(app),
        "plan": plan.to_dict(),
        "resources": resources.to_dict(),
    }
    lines = ["mapping:"]
    lines += [f"  {v} -> {n}" for v, n in sorted(mapping.items())]
    for i, phase in enumerate(plan.phases):
        lines.append(f"phase {i} {phase.kind.value}:")
        lines += [f"  {a}" for a in phase.actions]
    lines.append("utilization:")
    for nid, u in resources.utilization.items():
        lines.append(f"  {nid}: mem {_pct(u['mem'])} cpu {_pct(u['cpu'])}")
    _emit(out, args.format, data, "\n".join(lines))
    return EXIT_OK


def _pct(x) -> str:
    return "n/a" if x is None else f"{x:.0%}"


def cmd_run(args, out=sys.stdout) -> int:
    app = load_application(args.app)
    cluster = load_cluster(args.cluster)
    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario = dataclasses.replace(scenario, seed=args.seed)
    try:
        result = run(app, cluster, scenario)
    except (InvalidApplication, CyclicDependency) as exc:
        errors = [str(v) for v in getattr(exc, "violations", [exc])]
        return _failure(out, args.format, "ValidationFailed", errors)
    except FlowViolationError as exc:
        return _failure(out, args.format, "PlanInfeasible", [str(v) for v in exc.violations])
    except (NoFeasibleNode, NoNodesOnline) as exc:
        return _failure(out, args.format, "PlanInfeasible", [str(exc)])
    if args.out:
        result.log.write(args.out)
    report = result.report
    _emit(out, args.format, report.to_dict(), report.to_text())
    return _EXIT_FOR[result.outcome]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="resdeploy", description=__doc__)
    parser.add_argument("--format", choices=("json", "text"), default="text")
    # also accepted after the subcommand, without clobbering the top-level value
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--format", choices=("json", "text"), default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", parents=[common], help="check an application model")
    p.add_argument("app")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("plan", parents=[common], help="map and plan a deployment")
    p.add_argument("app")
    p.add_argument("cluster")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("run", parents=[common], help="simulate a deployment scenario")
    p.add_argument("app")
    p.add_argument("cluster")
    p.add_argument("scenario")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.add_argument("--out", default=None, help="write the JSON-lines event log here")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, out)
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
