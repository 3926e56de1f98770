"""The eight acceptance criteria, each at its stated scale and tolerance."""
import itertools
import json
import random
import subprocess
import sys
import time

from acceptance_log import criterion
from helpers import (
    GOLDEN,
    SAMPLES,
    activation_violations,
    barrier_violations,
    cluster3,
    cluster_for,
    comp,
    crash_candidates,
    facet,
    final_activation_order_ok,
    isolation_breaches,
    nav_app,
    pub,
    random_app,
    receptacle,
    sub,
    transitions,
)
from resdeploy.formats import application_to_dict, cluster_to_dict, dumps
from resdeploy.model import Application, Cluster, Level, SecurityLabel, activation_order
from resdeploy.planner import check_label_flows
from resdeploy.simnet import CONVERGED, UNRECOVERABLE, Scenario, run

HORIZON = 10_000
DELAY = (1, 3)


def test_1_ordering_theorem():
    with criterion(1, "ordering theorem, 500 no-failure runs") as out:
        start = time.perf_counter()
        for i in range(500):
            rng = random.Random(i)
            app = random_app(rng)
            result = run(app, cluster_for(app), Scenario(delay=DELAY, seed=i, horizon=HORIZON))
            assert result.outcome == CONVERGED, i
            assert not activation_violations(app, result.log), i
            assert not barrier_violations(app, result.log), i
        elapsed = time.perf_counter() - start
        assert elapsed < 60, f"took {elapsed:.1f}s"
        out.text = f"500/500 converged in order, {elapsed:.1f}s"


def dag_app(ids, edges):
    ports = {c: [] for c in ids}
    for client, server in edges:
        ports[client].append(receptacle(f"r_{server}", f"I{server}"))
    for server in sorted({s for _, s in edges}):
        ports[server].append(facet("svc", f"I{server}"))
    return Application([comp(c, *ports[c]) for c in ids], edges, {c: "v" for c in ids}, (), {"v": "x86"})


def topological_orders(ids, edges):
    """Oracle: filter all permutations by the server-before-client rule."""
    out = []
    for perm in itertools.permutations(sorted(ids)):
        pos = {c: i for i, c in enumerate(perm)}
        if all(pos[s] < pos[c] for c, s in edges):
            out.append(list(perm))
    return out


def all_dags(ids):
    pairs = list(itertools.combinations(ids, 2))
    for choice in itertools.product((None, 0, 1), repeat=len(pairs)):
        edges = [(a, b) if d == 0 else (b, a) for (a, b), d in zip(pairs, choice) if d is not None]
        if topological_orders(ids, edges):
            yield edges


def test_2_plan_oracle():
    with criterion(2, "activation order vs enumerated topological orders") as out:
        checked = 0
        # every dependency graph over four components, each id order
        for ids in (["a", "b", "c", "d"], ["d", "c", "b", "a"]):
            for edges in all_dags(ids):
                orders = topological_orders(ids, edges)
                got = activation_order(dag_app(ids, edges))
                assert got in orders and got == min(orders), edges
                checked += 1
        for seed in range(400):
            app = random_app(random.Random(seed), max_components=6)
            orders = topological_orders(list(app.by_id), list(app.dependencies))
            got = activation_order(app)
            assert got in orders and got == min(orders), seed
            checked += 1
        out.text = f"{checked} applications matched"


def test_3_resilience_sweep():
    with criterion(3, "resilience sweep, 200 crash runs") as out:
        mid = 0
        for i in range(200):
            rng = random.Random(10_000 + i)
            app = random_app(rng)
            cl = cluster_for(app, rng=rng)
            base = run(app, cl, Scenario(delay=DELAY, seed=i, horizon=HORIZON))
            node = rng.choice(crash_candidates(app, base))
            # uniform over twice the failure-free run, so roughly half land mid-deployment
            tc = rng.randint(0, 2 * base.report.end_time)
            mid += tc < base.report.plan_complete_at
            r = run(app, cl, Scenario(crashes=[(node, tc)], delay=DELAY, seed=i, horizon=HORIZON))
            assert r.outcome == CONVERGED, (i, r.outcome)
            assert r.report.end_time <= HORIZON
            assert len(r.log.of_kind("RecoveryComplete")) == 1, i
            assert not isolation_breaches(app, r.log), i
            assert final_activation_order_ok(app, r.log), i
        assert mid > 0
        out.text = f"200/200 converged with one recovery, {mid} crashed mid-deployment"


def reachable_clients(app, seeds):
    out = set(seeds)
    while True:
        more = {c for c, s in app.dependencies if s in out} - out
        if not more:
            return out - set(seeds)
        out |= more


def test_4_unrecoverable():
    with criterion(4, "unrecoverable determinism, 50 seeds") as out:
        impacted_total = 0
        for seed in range(50):
            rng = random.Random(30_000 + seed)
            base_app = random_app(rng)
            # give one virtual node a kind that has no spare
            lonely = rng.choice(sorted(base_app.virtual_nodes))
            vnodes = dict(base_app.virtual_nodes, **{lonely: "gpu"})
            app = Application(base_app.components, base_app.dependencies, base_app.sigma, base_app.colloc, vnodes)
            full = cluster_for(app, rng=rng)
            cl = Cluster(tuple(n for n in full.nodes if not (n.kind == "gpu" and n.id.startswith("s"))))
            base = run(app, cl, Scenario(delay=DELAY, seed=seed))
            assert base.outcome == CONVERGED
            victim = base.final.mapping[lonely]
            tc = base.report.plan_complete_at + rng.randint(1, 100)
            r = run(app, cl, Scenario(crashes=[(victim, tc)], delay=DELAY, seed=seed))
            again = run(app, cl, Scenario(crashes=[(victim, tc)], delay=DELAY, seed=seed))
            assert r.log.to_jsonl() == again.log.to_jsonl()
            assert r.outcome == UNRECOVERABLE, seed
            failed = {c for c in app.by_id if app.sigma[c] == lonely}
            impacted = reachable_clients(app, failed)
            impacted_total += len(impacted)
            final = {c: r.final.state_of(c).value for c in app.by_id}
            assert all(final[c] == "Failed" for c in failed), seed
            assert all(final[c] == "Deactivated" for c in impacted), (seed, final)
            rest = set(app.by_id) - failed - impacted
            assert all(final[c] == "Active" for c in rest), seed
            assert not [t for t in transitions(r.log) if t["component"] in rest and t["t"] >= tc], seed
        assert impacted_total > 0
        out.text = f"50/50 Unrecoverable, {impacted_total} impacted components ended Deactivated"


def test_5_leader_takeover():
    with criterion(5, "leader takeover losslessness, 50 seeds x 20 crashes") as out:
        takeovers = 0
        for seed in range(50):
            rng = random.Random(20_000 + seed)
            app = random_app(rng)
            cl = cluster_for(app, rng=rng)
            base = run(app, cl, Scenario(delay=DELAY, seed=seed))
            leader = base.log.entries[0]["leader"]
            for _ in range(20):
                tc = rng.randint(0, 2 * base.report.end_time)
                r = run(app, cl, Scenario(crashes=[(leader, tc)], delay=DELAY, seed=seed))
                assert r.takeovers, (seed, tc)
                assert all(tk.lossless for tk in r.takeovers), (seed, tc)
                assert r.log.of_kind("PlanComplete") and r.outcome == CONVERGED, (seed, tc)
                takeovers += len(r.takeovers)
        out.text = f"1000 leader crashes, {takeovers} takeovers, all replicas exact"


LABELS = [SecurityLabel(level, domain) for level in Level for domain in ("A", "B")]


def flow_app(pair, by_dependency=False):
    s_label, r_label = pair
    if by_dependency:
        s = comp("s", receptacle("r", "I"), level=s_label.level, domain=s_label.domain)
        r = comp("r", facet("f", "I"), level=r_label.level, domain=r_label.domain)
        deps = [("s", "r")]
    else:
        s = comp("s", pub("out", "T"), level=s_label.level, domain=s_label.domain)
        r = comp("r", sub("in", "T"), level=r_label.level, domain=r_label.domain)
        deps = []
    return Application([s, r], deps, {"s": "v", "r": "v"}, (), {"v": "x86"})


def allowed(src, dst):
    """Independent domination oracle on the level ranking."""
    rank = {"Confidential": 0, "CompetitionSensitive": 1, "ManagementOnly": 2}
    return src.domain == dst.domain and rank[dst.level.label_name] >= rank[src.level.label_name]


def test_6_mls_audit():
    with criterion(6, "MLS audit over all label pairs") as out:
        pairs = 0
        for a, b in itertools.product(LABELS, repeat=2):
            flags = check_label_flows(flow_app((a, b)))
            assert bool(flags) == (not allowed(a, b)), (a, b)
            # a dependency carries data both ways
            flags = check_label_flows(flow_app((a, b), by_dependency=True))
            assert bool(flags) == (not (allowed(a, b) and allowed(b, a))), (a, b)
            pairs += 1
        conf_a = SecurityLabel(Level.CONFIDENTIAL, "A")
        cs_a = SecurityLabel(Level.COMPETITION_SENSITIVE, "A")
        cs_b = SecurityLabel(Level.COMPETITION_SENSITIVE, "B")
        assert not check_label_flows(flow_app((conf_a, cs_a)))
        assert not check_label_flows(flow_app((cs_a, cs_a)))
        (v,) = check_label_flows(flow_app((cs_b, cs_a)))
        assert v.via == "topic:T" and v.sender_label == cs_b
        assert check_label_flows(flow_app((cs_a, cs_b)))
        out.text = f"{pairs} pairs match the oracle, mission A/B example reproduced"


def cli_log(tmp_path, name, app_file, cluster_file, scenario_file):
    path = tmp_path / name
    subprocess.run(
        [sys.executable, "-m", "resdeploy", "run", app_file, cluster_file, scenario_file, "--out", str(path)],
        check=False,
        capture_output=True,
    )
    return path.read_bytes()


def test_7_determinism(tmp_path):
    with criterion(7, "byte-identical logs across runs and processes") as out:
        cases = [(SAMPLES / "nav_app.json", SAMPLES / "cluster3.json", SAMPLES / "crash_gps.json")]
        rng = random.Random(77)
        for k in range(3):
            app = random_app(rng)
            cl = cluster_for(app, rng=rng)
            node = rng.choice([n.id for n in cl.nodes])
            files = []
            for kind, data in (
                ("app", application_to_dict(app)),
                ("cluster", cluster_to_dict(cl)),
                ("scenario", {"crashes": [[node, rng.randint(0, 150)]], "delay": {"range": [1, 5]}, "seed": k}),
            ):
                p = tmp_path / f"{kind}{k}.json"
                p.write_text(dumps(data))
                files.append(p)
            cases.append(tuple(files))
        from resdeploy.formats import load_application, load_cluster, load_scenario

        for i, (a, c, s) in enumerate(cases):
            logs = {
                run(load_application(a), load_cluster(c), load_scenario(s)).log.to_jsonl().encode() for _ in range(3)
            }
            assert len(logs) == 1, i
            procs = {cli_log(tmp_path, f"p{i}_{j}.jsonl", str(a), str(c), str(s)) for j in range(2)}
            assert procs == logs, i
        out.text = f"{len(cases)} scenarios, 3 in-process runs and 2 processes each"


def test_8_golden_scenario(tmp_path):
    with criterion(8, "golden Sensor/GPS/NAVDisplay crash log") as out:
        result = run(nav_app(), cluster3(), Scenario(crashes=[("n2", 500)], delay=(1, 3), seed=7))
        golden = (GOLDEN / "nav_crash_gps.jsonl").read_text()
        assert result.log.to_jsonl() == golden
        log = [json.loads(line) for line in golden.splitlines()]
        (planned,) = [e for e in log if e["kind"] == "RecoveryPlanned"]
        assert planned["failed"] == ["GPS"] and planned["impacted"] == ["NAVDisplay"]
        sensor = [(e["from"], e["to"]) for e in transitions(log) if e["component"] == "Sensor"]
        assert sensor[-1] == ("Connected", "Active")
        assert all(to != "Active" for _, to in sensor[:-1]) and sensor.count(("Connected", "Active")) == 1
        assert result.outcome == CONVERGED
        assert result.final.node_of(nav_app(), "GPS") == "n3"
        out.text = "log matches, affected set {GPS failed, NAVDisplay impacted}, Sensor stayed Active"
