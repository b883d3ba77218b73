import json
import time

import pytest

from rail.canon import canonical_json
from rail.cli import (
    RailServer,
    main_mapctl,
    main_query,
    main_sim,
)
from rail.config import RailConfig


def wait_until(predicate, timeout=5.0, step=0.01):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(step)
    return False


class TestMapctl:
    def test_author_validate_export_cycle(self, tmp_path, capsys):
        snapshot = str(tmp_path / "map.json")
        assert main_mapctl(["add-object", snapshot, "cam1",
                            "--attr", "sensor.type=\"camera\""]) == 0
        assert main_mapctl(["add-object", snapshot, "rack1",
                            "--attr", "marker.QR.id=\"bar\"", "--attr", "height=2.5",
                            "--geometry", '{"variant":"box","half_extents":[0.6,0.4,1.0]}']) == 0
        assert main_mapctl(["add-edge", snapshot, "world", "cam1",
                            "--pose", '{"t":[1,2,3],"q":[1,0,0,0]}', "--sigma", "0.001"]) == 0
        assert main_mapctl(["validate", snapshot]) == 0
        assert "objects=2 edges=1 blobs=0" in capsys.readouterr().out

        out = str(tmp_path / "canonical.json")
        assert main_mapctl(["export", snapshot, out]) == 0
        data = json.loads((tmp_path / "canonical.json").read_text())
        assert [o["id"] for o in data["objects"]] == ["cam1", "rack1"]

    def test_idempotent_reexport(self, tmp_path):
        snapshot = str(tmp_path / "map.json")
        main_mapctl(["add-object", snapshot, "a", "--attr", "x=1"])
        out1, out2 = str(tmp_path / "c1.json"), str(tmp_path / "c2.json")
        main_mapctl(["export", snapshot, out1])
        main_mapctl(["export", out1, out2])
        assert (tmp_path / "c1.json").read_bytes() == (tmp_path / "c2.json").read_bytes()

    def test_malformed_snapshot_fails_operationally(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main_mapctl(["validate", str(bad)]) == 1

    def test_usage_error_exit_code(self):
        with pytest.raises(SystemExit) as err:
            main_mapctl([])
        assert err.value.code == 2


class TestSimCli:
    def test_run_scenario_to_file(self, tmp_path, capsys):
        scenario = {
            "seed": 5,
            "duration_us": 2_000_000,
            "topology": [{"node": "n1", "roles": ["ingest", "query", "mgmt"]}],
            "providers": [{"id": "cam", "type": "camera", "rate_hz": 5,
                           "observations": [{"kind": "marker.QR", "ext_id": "m",
                                             "pose": {"t": [0, 0, 0], "q": [1, 0, 0, 0]},
                                             "sigma": 0.01, "res": 0.001}]}],
        }
        path = tmp_path / "scenario.json"
        path.write_text(json.dumps(scenario))
        out = tmp_path / "report.json"
        assert main_sim(["run", str(path), "--out", str(out)]) == 0
        report = json.loads(out.read_text())
        assert report["providers"]["cam"]["edges_applied"] >= 1

    def test_seed_override_changes_nothing_without_randomness(self, tmp_path):
        scenario = {"seed": 1, "duration_us": 1000,
                    "topology": [{"node": "n1", "roles": ["ingest", "query", "mgmt"]}]}
        path = tmp_path / "s.json"
        path.write_text(json.dumps(scenario))
        assert main_sim(["run", str(path), "--seed", "99"]) == 0

    def test_invalid_scenario_exit_1(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"topology": []}))
        assert main_sim(["run", str(path)]) == 1


class TestServerEndToEnd:
    def test_full_stack_over_sockets(self, tmp_path, capsys):
        config = RailConfig()
        config.ports.ingest = 0
        config.ports.query = 0
        config.ports.replication = 0
        config.discovery.target_host = "127.0.0.1"
        config.ports.discovery = 0
        server = RailServer(config, ["ingest", "query"], "n1", host="127.0.0.1")
        server.discovery.stop()  # not under test here; avoids port juggling
        server.ingest_server.start()
        server.query_server.start()
        try:
            snapshot = str(tmp_path / "map.json")
            main_mapctl(["add-object", snapshot, "rack1", "--attr", "marker.QR.id=\"bar\""])
            main_mapctl(["add-edge", snapshot, "world", "cam-7"])
            assert main_mapctl(["import", snapshot, "--server", server.ingest_server.addr]) == 0
            assert wait_until(lambda: server.core.objects.has_object("rack1"))
            assert wait_until(lambda: server.core.graph.edge_count() == 1)

            qr = canonical_json({
                "v": 1, "provider": {"id": "cam-7", "type": "camera"}, "seq": 1,
                "time_us": int(time.time() * 1e6),
                "observations": [{"item": "detection", "kind": "marker.QR", "ext_id": "bar",
                                  "pose": {"t": [0.5, 0, 0], "q": [1, 0, 0, 0]},
                                  "sigma": 0.01, "res": 0.001}],
            }).encode()
            import socket

            sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            sock.sendto(qr, ("127.0.0.1", server.ingest_server.port))
            assert wait_until(lambda: server.core.graph.edge_count() == 2)

            capsys.readouterr()
            code = main_query(["get_transform", "--server", server.query_server.addr,
                               "--src", "world", "--dst", "rack1"])
            assert code == 0
            response = json.loads(capsys.readouterr().out.strip().splitlines()[0])
            assert response["ok"] is True
            assert response["result"]["hops"] == 2
        finally:
            server.stop()
