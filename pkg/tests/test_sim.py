import json

import pytest

from rail.canon import canonical_json
from rail.errors import InvalidScenario
from rail.sim import ScenarioRun, run_scenario, validate_scenario

SEC = 1_000_000


def two_node_scenario(**overrides):
    scenario = {
        "seed": 7,
        "duration_us": 6 * SEC,
        "topology": [
            {"node": "n1", "roles": ["ingest", "query"]},
            {"node": "n2", "roles": ["ingest", "query"]},
            {"node": "n3", "roles": ["mgmt"]},
        ],
        "net": {"latency_us": 500},
        "replication": {"mode": "sync"},
        "providers": [
            {
                "id": "cam1", "type": "camera", "rate_hz": 10, "drop_prob": 0.0,
                "observations": [
                    {"kind": "marker.QR", "ext_id": "bar",
                     "pose": {"t": [0.1, 0.2, 0.3], "q": [1.0, 0.0, 0.0, 0.0]},
                     "sigma": 0.01, "res": 0.001},
                ],
            },
        ],
        "consumers": [
            {
                "id": "c1", "interval_us": 500_000,
                "queries": [
                    {"id": 1, "op": "get_transform", "src": "cam1", "dst": "prov:marker.QR:bar"},
                ],
            },
        ],
        "faults": [],
    }
    scenario.update(overrides)
    return scenario


class TestValidation:
    def test_empty_scenario_runs(self):
        report = run_scenario({"seed": 1, "duration_us": 1000, "topology": [
            {"node": "n1", "roles": ["ingest", "query", "mgmt"]}]})
        assert report["providers"] == {}
        assert report["consumers"] == {}
        assert report["promotions"] == []

    def test_invalid_scenarios_rejected(self):
        with pytest.raises(InvalidScenario):
            validate_scenario([])
        with pytest.raises(InvalidScenario):
            validate_scenario({"topology": []})
        with pytest.raises(InvalidScenario):
            validate_scenario({"topology": [{"node": "a"}, {"node": "a"}]})
        with pytest.raises(InvalidScenario):
            validate_scenario({"faults": [{"kind": "meteor", "time_us": 0, "target": "x"}]})
        with pytest.raises(InvalidScenario):
            validate_scenario({"providers": [{"id": "p", "rate_hz": 0}]})


class TestBasicFlow:
    def test_provider_traffic_applies(self):
        run = ScenarioRun(two_node_scenario())
        report = run.run()
        stats = report["providers"]["cam1"]
        # First ~1s has no announcements heard yet; everything after applies.
        assert stats["sent"] > 30
        assert stats["edges_applied"] >= 1
        assert stats["edges_applied"] + stats["edges_superseded"] == len(run.providers[0].delivered_log)
        # Master and slave mirror byte-identically.
        assert report["stores"]["n1"] == report["stores"]["n2"]

    def test_consumer_queries_succeed(self):
        report = run_scenario(two_node_scenario())
        stats = report["consumers"]["c1"]
        assert stats["queries_ok"] > 0
        assert stats["lookup_failures"] <= 2  # before the first broadcast

    def test_zero_loss_matches_direct_apply_oracle(self):
        run = ScenarioRun(two_node_scenario())
        run.run()
        from rail.core import RailCore

        oracle = RailCore(node_id="oracle")
        from rail.canon import canonical_bytes

        for message in run.providers[0].delivered_log:
            oracle.ingest.handle_datagram(canonical_bytes(message))
        assert oracle.graph.digest() == run.nodes["n1"].core.graph.digest()
        assert oracle.objects.digest() == run.nodes["n1"].core.objects.digest()

    def test_lossy_ingest_matches_delivered_subset_oracle(self):
        scenario = two_node_scenario(net={"latency_us": 500, "dup_prob": 0.2})
        scenario["providers"][0]["drop_prob"] = 0.3
        run = ScenarioRun(scenario)
        report = run.run()
        stats = report["providers"]["cam1"]
        assert stats["send_dropped"] > 0

        # Oracle: expected edge per key is the (time_us, seq)-max delivered one.
        best = {}
        for message in run.providers[0].delivered_log:
            for obs in message["observations"]:
                key = ("cam1", f"prov:{obs['kind']}:{obs['ext_id']}", "cam1")
                stamp = (message["time_us"], message["seq"])
                if key not in best or stamp > best[key][0]:
                    best[key] = (stamp, obs)
        edges = {o.key: o for o in run.nodes["n1"].core.graph.snapshot_edges()}
        assert set(edges) == set(best)
        for key, (stamp, obs) in best.items():
            assert edges[key].time_us == stamp[0]


class TestDeterminism:
    def test_same_seed_byte_identical_reports(self):
        scenario = two_node_scenario(net={"latency_us": 500, "dup_prob": 0.15})
        scenario["providers"][0]["drop_prob"] = 0.25
        scenario["faults"] = [{"time_us": 3 * SEC, "kind": "kill_module", "target": "node:n1"}]
        a = canonical_json(run_scenario(scenario))
        b = canonical_json(run_scenario(scenario))
        assert a == b

    def test_different_seed_differs(self):
        scenario_a = two_node_scenario(seed=1, net={"latency_us": 500, "dup_prob": 0.0})
        scenario_b = two_node_scenario(seed=2, net={"latency_us": 500, "dup_prob": 0.0})
        scenario_a["providers"][0]["drop_prob"] = 0.5
        scenario_b["providers"][0]["drop_prob"] = 0.5
        a = run_scenario(scenario_a)["providers"]["cam1"]["send_dropped"]
        b = run_scenario(scenario_b)["providers"]["cam1"]["send_dropped"]
        assert a != b  # loss pattern is seed-driven


class TestFailover:
    def test_master_kill_promotes_and_resumes(self):
        scenario = two_node_scenario(duration_us=10 * SEC)
        scenario["faults"] = [{"time_us": 4 * SEC, "kind": "kill_module", "target": "node:n1"}]
        run = ScenarioRun(scenario)
        report = run.run()

        promotions = [p for p in report["promotions"] if p["role"] == "ingest"]
        assert len(promotions) == 1
        record = promotions[0]
        assert record["epoch"] == 2
        assert record["to_node"] == "n2"
        assert record["lost_acked_commits"] == {"graph": 0, "objects": 0}

        # Every acknowledged write exists post-promotion.
        promoted = run.nodes["n2"].core
        graph_seqs = {e.seq for e in promoted.graph.changes(cursor=0, raw=True).poll()}
        for event in run.ledger.events["graph"]:
            assert event.seq in graph_seqs

        # Providers resumed against the new master with zero protocol action.
        post = run.nodes["n2"].core.ingest.reports_by_provider["cam1"]
        assert post.edges_applied + post.edges_superseded > 0

        # Consumers re-resolved within one broadcast interval of the promotion.
        switches = report["consumers"]["c1"]["endpoint_switches"]
        assert len(switches) == 2
        promo_time = record["time_us"]
        assert switches[-1]["time_us"] - promo_time <= 1 * SEC + 100_000

    def test_handler_kill_reassigns_without_provider_action(self):
        scenario = two_node_scenario(duration_us=8 * SEC)
        scenario["faults"] = [{"time_us": 3 * SEC, "kind": "kill_module", "target": "handler:cam1"}]
        report = run_scenario(scenario)
        stats = report["providers"]["cam1"]
        assert stats["edges_applied"] + stats["edges_superseded"] >= 50
        reassigns = [a for a in report["decision_log"] if a["action"] == "reassign_providers"]
        assert len(reassigns) >= 1

    def test_partition_and_heal(self):
        scenario = two_node_scenario(duration_us=8 * SEC)
        scenario["faults"] = [
            {"time_us": 2 * SEC, "kind": "partition", "target": "node:n3"},
            {"time_us": 4 * SEC, "kind": "restore_link", "target": "node:n3"},
        ]
        report = run_scenario(scenario)
        # Nothing failed: heartbeats resumed before the failure threshold
        # tripped only if partition was shorter than 3 intervals; here it was
        # longer, so modules were declared failed and remediation ran.
        assert isinstance(report["decision_log"], list)

    def test_sync_mode_gates_acknowledgements(self):
        scenario = two_node_scenario(duration_us=6 * SEC)
        run = ScenarioRun(scenario)
        report = run.run()
        master = run.nodes["n1"].core
        assert master.graph.published_head == master.graph.head
        assert run.nodes["n2"].core.graph.head == master.graph.head
