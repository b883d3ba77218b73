import json
import random

import pytest

from rail.canon import canonical_bytes
from rail.config import RailConfig
from rail.datastores import AttributePredicate, ObjectStore
from rail.errors import (
    AmbiguousExternalId,
    InvalidTransform,
    MalformedMessage,
    RailError,
    UnsupportedVersion,
)
from rail.graph_store import GraphStore
from rail.ingest import ApplyReport, IdLookupCache, IngestPlane, marker_attribute_path
from rail.wire import (
    AttributeUpsert,
    Detection,
    ProviderMessage,
    decode_provider_message,
    encode_provider_message,
)

QR_MESSAGE = {
    "v": 1,
    "provider": {"id": "foo", "type": "camera"},
    "seq": 12,
    "time_us": 1700000000000000,
    "observations": [
        {
            "item": "detection",
            "kind": "marker.QR",
            "ext_id": "bar",
            "pose": {"t": [0.1, 0.2, 0.3], "q": [1.0, 0.0, 0.0, 0.0]},
            "sigma": 0.01,
            "res": 0.001,
        }
    ],
}


def qr_bytes() -> bytes:
    return json.dumps(QR_MESSAGE).encode()


def make_plane(workers=4, policy="create_provisional"):
    config = RailConfig()
    config.ingest.workers = workers
    config.ingest.unknown_marker_policy = policy
    graph, objects = GraphStore(), ObjectStore()
    return IngestPlane(graph, objects, config=config), graph, objects


class TestDecode:
    def test_qr_example_round_trip(self):
        message = decode_provider_message(qr_bytes())
        assert message.provider_id == "foo"
        assert message.provider_type == "camera"
        assert message.seq == 12
        item = message.observations[0]
        assert isinstance(item, Detection)
        assert (item.kind, item.ext_id) == ("marker.QR", "bar")
        assert item.pose.t == (0.1, 0.2, 0.3)
        # encode(decode(m)) is the canonical form of m
        assert encode_provider_message(message) == canonical_bytes(QR_MESSAGE)

    def test_empty_datagram(self):
        with pytest.raises(MalformedMessage):
            decode_provider_message(b"")

    def test_unsupported_version(self):
        bad = dict(QR_MESSAGE, v=2)
        with pytest.raises(UnsupportedVersion):
            decode_provider_message(json.dumps(bad).encode())

    def test_matrix_pose_accepted(self):
        msg = json.loads(json.dumps(QR_MESSAGE))
        obs = msg["observations"][0]
        del obs["pose"]
        obs["tf_mat"] = [1, 0, 0, 0.1, 0, 1, 0, 0.2, 0, 0, 1, 0.3, 0, 0, 0, 1]
        decoded = decode_provider_message(json.dumps(msg).encode())
        assert decoded.observations[0].pose.t == (0.1, 0.2, 0.3)

    def test_non_rigid_matrix_rejected(self):
        msg = json.loads(json.dumps(QR_MESSAGE))
        obs = msg["observations"][0]
        del obs["pose"]
        obs["tf_mat"] = [2, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1]
        with pytest.raises(InvalidTransform):
            decode_provider_message(json.dumps(msg).encode())
        obs["tf_mat"] = [-1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1]
        with pytest.raises(InvalidTransform):
            decode_provider_message(json.dumps(msg).encode())

    def test_too_many_observations(self):
        msg = json.loads(json.dumps(QR_MESSAGE))
        msg["observations"] = msg["observations"] * 65
        with pytest.raises(MalformedMessage):
            decode_provider_message(json.dumps(msg).encode())

    def test_oversized_datagram(self):
        msg = json.loads(json.dumps(QR_MESSAGE))
        msg["observations"][0]["ext_id"] = "x" * (61 * 1024)
        with pytest.raises(MalformedMessage):
            decode_provider_message(json.dumps(msg).encode())

    def test_attribute_upsert_forms(self):
        msg = {
            "v": 1, "provider": {"id": "tool", "type": "ctl"}, "seq": 1, "time_us": 5,
            "observations": [
                {"item": "attribute_upsert", "object": "rack1",
                 "mutations": [["zone", "set", "A"], ["old", "delete"]]},
                {"item": "attribute_upsert", "object": {"kind": "marker.QR", "ext_id": "bar"},
                 "mutations": [["seen", "set", True]]},
            ],
        }
        decoded = decode_provider_message(json.dumps(msg).encode())
        first, second = decoded.observations
        assert first.object_id == "rack1"
        assert first.mutations == (("zone", "set", "A"), ("old", "delete", None))
        assert (second.kind, second.ext_id) == ("marker.QR", "bar")

    @pytest.mark.parametrize("mutilate", [
        lambda m: m.pop("provider"),
        lambda m: m["provider"].pop("id"),
        lambda m: m.update(seq="12"),
        lambda m: m.update(observations="nope"),
        lambda m: m["observations"][0].pop("pose"),
        lambda m: m["observations"][0].update(sigma=-1),
        lambda m: m["observations"][0].update(res=0),
        lambda m: m["observations"][0].update(item="mystery"),
        lambda m: m["observations"][0].update(pose={"t": [1, 2], "q": [1, 0, 0, 0]}),
        lambda m: m["observations"][0].update(sigma=float("nan")),
    ])
    def test_structurally_broken_messages(self, mutilate):
        msg = json.loads(json.dumps(QR_MESSAGE))
        mutilate(msg)
        with pytest.raises(RailError):
            decode_provider_message(json.dumps(msg).encode())

    def test_fuzz_never_crashes(self):
        rng = random.Random(123)
        base = json.dumps(QR_MESSAGE)
        outcomes = {"ok": 0, "rejected": 0}
        for i in range(20_000):
            if i % 3 == 0:
                data = rng.randbytes(rng.randint(0, 200))
            elif i % 3 == 1:
                cut = rng.randint(0, len(base))
                data = base[:cut].encode()
            else:
                chars = list(base)
                for _ in range(rng.randint(1, 8)):
                    chars[rng.randrange(len(chars))] = chr(rng.randint(0, 255))
                data = "".join(chars).encode()
            try:
                decode_provider_message(data)
                outcomes["ok"] += 1
            except RailError:
                outcomes["rejected"] += 1
        assert sum(outcomes.values()) == 20_000


class TestMarkerPath:
    def test_mapping(self):
        assert marker_attribute_path("marker.QR") == "marker.QR.id"
        assert marker_attribute_path("QR") == "marker.QR.id"
        assert marker_attribute_path("marker.aruco.v2") == "marker.v2.id"


class TestIdLookupCache:
    def test_hit_after_single_query(self):
        store = ObjectStore()
        store.upsert_object("rack1", [("marker.QR.id", "set", "bar")])
        cache = IdLookupCache(store)
        assert cache.resolve("marker.QR", "bar") == "rack1"
        assert cache.resolve("marker.QR", "bar") == "rack1"
        assert cache.store_queries == 1

    def test_unknown_creates_provisional(self):
        store = ObjectStore()
        cache = IdLookupCache(store)
        object_id = cache.resolve("marker.QR", "new-tag")
        doc = store.get_object(object_id)
        assert doc.provisional is True
        assert doc.attributes["marker"]["QR"]["id"] == "new-tag"
        assert doc.attributes["rail"]["provisional_source"] == "marker.QR:new-tag"
        # Our own creation event must not evict the fresh entry.
        assert cache.resolve("marker.QR", "new-tag") == object_id
        assert cache.store_queries == 1

    def test_drop_policy(self):
        store = ObjectStore()
        cache = IdLookupCache(store, unknown_policy="drop")
        with pytest.raises(RailError):
            cache.resolve("marker.QR", "nobody")
        assert store.count() == 0

    def test_ambiguous(self):
        store = ObjectStore()
        store.upsert_object("a", [("marker.QR.id", "set", "dup")])
        store.upsert_object("b", [("marker.QR.id", "set", "dup")])
        with pytest.raises(AmbiguousExternalId):
            IdLookupCache(store).resolve("marker.QR", "dup")

    def test_feed_invalidation_on_change(self):
        store = ObjectStore()
        store.upsert_object("rack1", [("marker.QR.id", "set", "bar")])
        cache = IdLookupCache(store)
        cache.resolve("marker.QR", "bar")
        store.upsert_object("rack1", [("marker.QR.id", "set", "other")])
        store.upsert_object("rack2", [("marker.QR.id", "set", "bar")])
        assert cache.resolve("marker.QR", "bar") == "rack2"
        assert cache.store_queries == 2
        assert cache.invalidations >= 1

    def test_unrelated_changes_do_not_invalidate(self):
        store = ObjectStore()
        store.upsert_object("rack1", [("marker.QR.id", "set", "bar")])
        cache = IdLookupCache(store)
        cache.resolve("marker.QR", "bar")
        for i in range(20):
            store.upsert_object("rack1", [("load", "set", i)])
            store.upsert_object(f"other{i}", [("zone", "set", "Z")])
        assert cache.resolve("marker.QR", "bar") == "rack1"
        assert cache.store_queries == 1

    def test_delete_invalidates(self):
        store = ObjectStore()
        store.upsert_object("rack1", [("marker.QR.id", "set", "bar")])
        cache = IdLookupCache(store)
        cache.resolve("marker.QR", "bar")
        store.delete_object("rack1")
        fresh = cache.resolve("marker.QR", "bar")
        assert fresh.startswith("prov:")
        assert cache.store_queries == 2

    def test_economy_against_uncached_oracle(self):
        rng = random.Random(31)
        store = ObjectStore()
        keys = [f"tag{i}" for i in range(10)]
        for i, key in enumerate(keys):
            store.upsert_object(f"obj{i}", [("marker.QR.id", "set", key)])
        cache = IdLookupCache(store)
        invalidations = 0
        for step in range(1000):
            if step % 100 == 50:
                # Move a marker to a new object: touches the indexed path.
                victim = rng.choice(keys)
                owner = store.find_objects(AttributePredicate.eq("marker.QR.id", victim))[0]
                store.upsert_object(owner.id, [("marker.QR.id", "set", f"{victim}-retired-{step}")])
                store.upsert_object(f"new{step}", [("marker.QR.id", "set", victim)])
                invalidations += 1
            key = rng.choice(keys)
            got = cache.resolve("marker.QR", key)
            oracle = store.find_objects(AttributePredicate.eq("marker.QR.id", key))
            assert len(oracle) == 1 and oracle[0].id == got
        unique_keys = len(keys)
        assert cache.store_queries <= unique_keys + invalidations + len(keys)


class TestAssignment:
    def test_stable_assignment(self):
        plane, _, _ = make_plane()
        h1 = plane.assign_handler("foo")
        h2 = plane.assign_handler("foo")
        assert h1 is h2

    def test_balanced_spread(self):
        plane, _, _ = make_plane(workers=4)
        for i in range(100):
            plane.assign_handler(f"prov{i:03d}")
        loads = plane.worker_loads()
        assert sum(loads.values()) == 100
        assert all(abs(n - 25) <= 10 for n in loads.values())

    def test_dead_handler_triggers_reassignment(self):
        plane, graph, _ = make_plane()
        first = plane.assign_handler("foo")
        assert plane.handle_datagram(qr_bytes()).edges_applied == 1
        first.kill()
        report = plane.handle_datagram(qr_bytes())
        assert report is not None  # same datagram format, no session re-setup
        second = plane.assign_handler("foo")
        assert second is not first

    def test_no_workers_available(self):
        plane, _, _ = make_plane(workers=2)
        plane.kill_worker(0)
        plane.kill_worker(1)
        assert plane.handle_datagram(qr_bytes()) is None
        assert plane.counters["NoWorkersAvailable"] == 1


class TestApply:
    def test_qr_message_against_prepared_store(self):
        plane, graph, objects = make_plane()
        objects.upsert_object("foo", [("sensor.type", "set", "camera")])
        objects.upsert_object("bar-rack", [("marker.QR.id", "set", "bar")])
        report = plane.handle_datagram(qr_bytes())
        assert report.edges_applied == 1
        edge = graph.snapshot_edges()[0]
        assert (edge.parent, edge.child, edge.provider) == ("foo", "bar-rack", "foo")
        assert edge.pose.t == (0.1, 0.2, 0.3)

    def test_sensor_auto_registration(self):
        plane, _, objects = make_plane()
        plane.handle_datagram(qr_bytes())
        doc = objects.get_object("foo")
        assert doc.attributes["sensor"]["type"] == "camera"

    def test_duplicate_datagram_superseded(self):
        plane, _, _ = make_plane()
        first = plane.handle_datagram(qr_bytes())
        second = plane.handle_datagram(qr_bytes())
        assert first.edges_applied == 1
        assert second.edges_superseded == 1
        assert second.edges_applied == 0

    def test_bad_item_isolated(self):
        plane, graph, objects = make_plane()
        objects.upsert_object("a1", [("marker.QR.id", "set", "amb")])
        objects.upsert_object("a2", [("marker.QR.id", "set", "amb")])
        msg = {
            "v": 1, "provider": {"id": "cam", "type": "camera"}, "seq": 1, "time_us": 10,
            "observations": [
                {"item": "detection", "kind": "marker.QR", "ext_id": "ok1",
                 "pose": {"t": [0, 0, 0], "q": [1, 0, 0, 0]}, "sigma": 0.01, "res": 0.001},
                {"item": "detection", "kind": "marker.QR", "ext_id": "amb",
                 "pose": {"t": [0, 0, 0], "q": [1, 0, 0, 0]}, "sigma": 0.01, "res": 0.001},
                {"item": "detection", "kind": "marker.QR", "ext_id": "ok2",
                 "pose": {"t": [1, 0, 0], "q": [1, 0, 0, 0]}, "sigma": 0.01, "res": 0.001},
            ],
        }
        report = plane.handle_datagram(json.dumps(msg).encode())
        assert report.edges_applied == 2
        assert report.items_dropped == 1
        handler = plane.assign_handler("cam")
        assert handler.fault_counters["AmbiguousExternalId"] == 1

    def test_direct_object_detection_for_calibration(self):
        plane, graph, objects = make_plane()
        msg = {
            "v": 1, "provider": {"id": "world", "type": "calibration"}, "seq": 1, "time_us": 10,
            "observations": [
                {"item": "detection", "object": "cam1",
                 "pose": {"t": [1, 2, 3], "q": [1, 0, 0, 0]}, "sigma": 0.001, "res": 0.0005},
            ],
        }
        report = plane.handle_datagram(json.dumps(msg).encode())
        assert report.edges_applied == 1
        edge = graph.snapshot_edges()[0]
        assert (edge.parent, edge.child) == ("world", "cam1")
        assert objects.has_object("cam1")

    def test_lossy_replay_determinism(self):
        rng = random.Random(8)
        messages = []
        for seq in range(60):
            messages.append({
                "v": 1, "provider": {"id": "cam", "type": "camera"}, "seq": seq,
                "time_us": 1000 + seq,
                "observations": [
                    {"item": "detection", "kind": "marker.QR", "ext_id": f"m{seq % 5}",
                     "pose": {"t": [seq * 0.1, 0, 0], "q": [1, 0, 0, 0]},
                     "sigma": 0.01, "res": 0.001},
                ],
            })
        delivered = [m for m in messages if rng.random() > 0.4]
        delivered_shuffled = delivered + rng.sample(delivered, len(delivered) // 3)
        rng.shuffle(delivered_shuffled)

        plane, graph, _ = make_plane()
        for m in delivered_shuffled:
            plane.handle_datagram(json.dumps(m).encode())

        # Oracle: (time_us, seq)-maximal delivered message per edge key.
        best = {}
        for m in delivered:
            key = ("cam", f"prov:marker.QR:m{m['seq'] % 5}", "cam")
            stamp = (m["time_us"], m["seq"])
            if key not in best or stamp > best[key][0]:
                best[key] = (stamp, m)
        edges = {o.key: o for o in graph.snapshot_edges()}
        assert set(edges) == set(best)
        for key, (stamp, m) in best.items():
            assert edges[key].time_us == stamp[0]
            assert edges[key].pose.t[0] == pytest.approx(m["observations"][0]["pose"]["t"][0])
