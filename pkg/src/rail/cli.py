"""Operator command line tools.

rail-server  — run one node (ingest, query, discovery, optional replication)
rail-mapctl  — author, validate and load map snapshot files
rail-query   — one-shot or following consumer queries against a server
rail-sim     — run a deterministic scenario and print its report

Exit codes: 0 ok, 1 operational error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .canon import canonical_json
from .config import RailConfig, load_config
from .core import RailCore
from .errors import RailError
from .geometry import GeometryPrimitive, Pose6D
from .snapshot import (
    export_snapshot,
    import_snapshot,
    read_snapshot,
    write_snapshot,
)
from .wire import (
    AttributeUpsert,
    Detection,
    ProviderMessage,
    encode_provider_message,
)

OK, OPERATIONAL_ERROR, USAGE_ERROR = 0, 1, 2


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return OPERATIONAL_ERROR


# --- rail-server ---

class RailServer:
    """One live node: core plus its socket services."""

    def __init__(self, config: RailConfig, roles: list[str], node_id: str,
                 host: str = "0.0.0.0", slave_of: str | None = None):
        from . import netserver

        self.config = config
        self.node_id = node_id
        self.roles = roles
        self.core = RailCore(config=config, node_id=node_id, active=slave_of is None)
        self.ingest_server = netserver.IngestServer(self.core, host, config.ports.ingest)
        self.query_server = netserver.QueryServer(self.core, host, config.ports.query)
        self.replication_server = None
        self.replication_client = None
        if slave_of is None:
            self.replication_server = netserver.ReplicationServer(
                self.core, mode=config.replication.mode, host=host, port=config.ports.replication
            )
        else:
            self.replication_client = netserver.ReplicationClient(self.core, slave_of)
        self.discovery = netserver.DiscoveryService(
            config, self._announcements, bind_host=config.discovery.bind_host
        )

    def _announcements(self):
        from .wire import Announcement

        if not self.core.active:
            return []
        out = []
        for role in self.roles:
            addr = {
                "ingest": self.ingest_server.addr,
                "query": self.query_server.addr,
                "mgmt": self.query_server.addr,
            }[role]
            out.append(Announcement(role=role, addr=addr,
                                    epoch=self.core.epochs.get(role, 1), node=self.node_id))
        return out

    def start(self) -> "RailServer":
        self.ingest_server.start()
        self.query_server.start()
        if self.replication_server:
            self.replication_server.start()
        if self.replication_client:
            self.replication_client.start()
        self.discovery.start()
        return self

    def stop(self) -> None:
        for service in (self.discovery, self.replication_client, self.replication_server,
                        self.query_server, self.ingest_server):
            if service is not None:
                service.stop()


def main_server(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="rail-server", description="Run one rail node.")
    parser.add_argument("--config", help="JSON config file (defaults run as-is)")
    parser.add_argument("--roles", default="ingest,query,mgmt", help="comma-separated roles")
    parser.add_argument("--node-id", default="n1")
    parser.add_argument("--host", default="0.0.0.0")
    parser.add_argument("--slave-of", help="master replication address host:port (run as mirror)")
    parser.add_argument("--snapshot", help="map snapshot to load at startup")
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config)
        roles = [r.strip() for r in args.roles.split(",") if r.strip()]
        server = RailServer(config, roles, args.node_id, host=args.host, slave_of=args.slave_of)
        if args.snapshot:
            counts = import_snapshot(read_snapshot(args.snapshot),
                                     server.core.objects, server.core.graph, server.core.blobs)
            print(f"loaded snapshot: {counts.objects} objects, {counts.edges} edges, "
                  f"{counts.blobs} blobs", file=sys.stderr)
        server.start()
        print(f"rail-server {args.node_id} up: ingest={server.ingest_server.addr} "
              f"query={server.query_server.addr} discovery_port={server.discovery.port}",
              file=sys.stderr)
        try:
            while True:
                time.sleep(3600)
        except KeyboardInterrupt:
            server.stop()
        return OK
    except RailError as exc:
        return _fail(f"{exc.code}: {exc.message}")
    except OSError as exc:
        return _fail(str(exc))


# --- rail-mapctl ---

def _empty_snapshot() -> dict:
    return {"format": "rail-snapshot", "v": 1, "objects": [], "edges": [], "blobs": []}


def _load_or_create(path: str) -> dict:
    if Path(path).exists():
        return read_snapshot(path)
    return _empty_snapshot()


def _parse_attr(raw: str) -> tuple[str, object]:
    path, _, value = raw.partition("=")
    if not path or not value:
        raise ValueError(f"attribute must be path=value, got {raw!r}")
    try:
        return path, json.loads(value)
    except json.JSONDecodeError:
        return path, value


def _set_nested(tree: dict, dotted: str, value) -> None:
    node = tree
    parts = dotted.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def _send_snapshot_over_wire(snapshot: dict, server_addr: str) -> tuple[int, int, int]:
    import socket

    host, _, port = server_addr.rpartition(":")
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    now_us = int(time.time() * 1e6)
    seq = 0
    sent_objects = 0
    for entry in snapshot.get("objects", []):
        mutations = []
        stack = [("", entry.get("attributes", {}))]
        while stack:
            prefix, node = stack.pop()
            for key in sorted(node):
                path = f"{prefix}.{key}" if prefix else key
                if isinstance(node[key], dict):
                    stack.append((path, node[key]))
                else:
                    mutations.append((path, "set", node[key]))
        seq += 1
        message = ProviderMessage(
            provider_id="rail-mapctl", provider_type="toolctl", seq=seq, time_us=now_us,
            observations=(AttributeUpsert(mutations=tuple(mutations), object_id=entry["id"]),),
        )
        sock.sendto(encode_provider_message(message), (host, int(port)))
        sent_objects += 1
    sent_edges = 0
    for entry in snapshot.get("edges", []):
        seq += 1
        # A calibration edge rides the ordinary provider protocol: the parent
        # frame acts as the observing provider.
        message = ProviderMessage(
            provider_id=entry["parent"], provider_type="calibration",
            seq=int(entry.get("seq", seq)), time_us=int(entry.get("time_us", now_us)),
            observations=(Detection(
                pose=Pose6D.from_json(entry["pose"]), sigma=float(entry["sigma"]),
                resolution=float(entry["resolution"]), object_id=entry["child"],
            ),),
        )
        sock.sendto(encode_provider_message(message), (host, int(port)))
        sent_edges += 1
    skipped_blobs = len(snapshot.get("blobs", []))
    return sent_objects, sent_edges, skipped_blobs


def main_mapctl(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="rail-mapctl", description="Map snapshot tooling.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_validate = sub.add_parser("validate", help="parse a snapshot and print its counts")
    p_validate.add_argument("snapshot")

    p_import = sub.add_parser("import", help="load a snapshot (into a server with --server)")
    p_import.add_argument("snapshot")
    p_import.add_argument("--server", help="ingest address host:port; omitted = dry-run load")

    p_export = sub.add_parser("export", help="canonicalize a snapshot file (import + re-export)")
    p_export.add_argument("snapshot")
    p_export.add_argument("out")

    p_obj = sub.add_parser("add-object", help="add or update an object in a snapshot file")
    p_obj.add_argument("snapshot")
    p_obj.add_argument("object_id")
    p_obj.add_argument("--attr", action="append", default=[], help="path=value (value as JSON)")
    p_obj.add_argument("--geometry", help='JSON, e.g. {"variant":"sphere","radius":0.5}')

    p_edge = sub.add_parser("add-edge", help="add or update a calibration edge in a snapshot file")
    p_edge.add_argument("snapshot")
    p_edge.add_argument("parent")
    p_edge.add_argument("child")
    p_edge.add_argument("--pose", default='{"t":[0,0,0],"q":[1,0,0,0]}')
    p_edge.add_argument("--sigma", type=float, default=0.001)
    p_edge.add_argument("--res", type=float, default=0.001)
    p_edge.add_argument("--provider", default="calibration")

    args = parser.parse_args(argv)
    try:
        if args.command == "validate":
            data = read_snapshot(args.snapshot)
            counts = import_snapshot(data, *_fresh_stores())
            print(f"objects={counts.objects} edges={counts.edges} blobs={counts.blobs}")
            return OK

        if args.command == "import":
            data = read_snapshot(args.snapshot)
            if args.server:
                objects, edges, blobs = _send_snapshot_over_wire(data, args.server)
                print(f"sent objects={objects} edges={edges}")
                if blobs:
                    print(f"warning: {blobs} blobs skipped (no wire path; load via --snapshot "
                          f"at server start)", file=sys.stderr)
            else:
                counts = import_snapshot(data, *_fresh_stores())
                print(f"objects={counts.objects} edges={counts.edges} blobs={counts.blobs}")
            return OK

        if args.command == "export":
            objects, graph, blobs = _fresh_stores()
            import_snapshot(read_snapshot(args.snapshot), objects, graph, blobs)
            write_snapshot(args.out, export_snapshot(objects, graph, blobs))
            print(args.out)
            return OK

        if args.command == "add-object":
            data = _load_or_create(args.snapshot)
            doc = next((o for o in data["objects"] if o["id"] == args.object_id), None)
            if doc is None:
                doc = {"id": args.object_id, "attributes": {}, "geometry": None,
                       "blobs": {}, "rev": 1, "provisional": False}
                data["objects"].append(doc)
            for raw in args.attr:
                path, value = _parse_attr(raw)
                _set_nested(doc.setdefault("attributes", {}), path, value)
            if args.geometry:
                doc["geometry"] = GeometryPrimitive.from_json(json.loads(args.geometry)).to_json()
            data["objects"].sort(key=lambda o: o["id"])
            write_snapshot(args.snapshot, data)
            return OK

        if args.command == "add-edge":
            data = _load_or_create(args.snapshot)
            key = (args.parent, args.child, args.provider)
            data["edges"] = [e for e in data["edges"]
                             if (e["parent"], e["child"], e["provider"]) != key]
            data["edges"].append({
                "parent": args.parent, "child": args.child, "provider": args.provider,
                "pose": Pose6D.from_json(json.loads(args.pose)).to_json(),
                "sigma": args.sigma, "resolution": args.res,
                "time_us": int(time.time() * 1e6), "seq": 0,
            })
            data["edges"].sort(key=lambda e: (e["parent"], e["child"], e["provider"]))
            write_snapshot(args.snapshot, data)
            return OK
    except (RailError, ValueError, OSError, json.JSONDecodeError) as exc:
        return _fail(str(exc))
    return USAGE_ERROR


def _fresh_stores():
    from .datastores import BlobStore, ObjectStore
    from .graph_store import GraphStore

    return ObjectStore(), GraphStore(), BlobStore()


# --- rail-query ---

def main_query(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="rail-query", description="Consumer queries.")
    parser.add_argument("op", choices=["get_object", "find_objects", "get_transform",
                                       "range_query", "get_blob"])
    parser.add_argument("--server", required=True, help="query address host:port")
    parser.add_argument("--object")
    parser.add_argument("--src")
    parser.add_argument("--dst")
    parser.add_argument("--frame")
    parser.add_argument("--center", help="x,y,z")
    parser.add_argument("--radius", type=float)
    parser.add_argument("--hash")
    parser.add_argument("--predicate", help="JSON clause list")
    parser.add_argument("--constraints", help="JSON constraints object")
    parser.add_argument("--follow", action="store_true")
    args = parser.parse_args(argv)

    request: dict = {"op": args.op, "follow": args.follow}
    for name in ("object", "src", "dst", "frame", "hash"):
        value = getattr(args, name)
        if value is not None:
            request[name] = value
    if args.center:
        request["center"] = [float(v) for v in args.center.split(",")]
    if args.radius is not None:
        request["radius"] = args.radius
    if args.predicate:
        request["predicate"] = json.loads(args.predicate)
    if args.constraints:
        request["constraints"] = json.loads(args.constraints)

    from .netserver import QueryClient

    try:
        client = QueryClient(args.server)
        response = client.request(**{k: v for k, v in request.items() if k != "op"}, op=args.op)
        print(canonical_json(response))
        if not response.get("ok"):
            return OPERATIONAL_ERROR
        if args.follow:
            try:
                while True:
                    frame = client.next_frame(timeout=None)
                    if frame is None:
                        break
                    print(canonical_json(frame))
            except KeyboardInterrupt:
                pass
        client.close()
        return OK
    except (OSError, RailError) as exc:
        return _fail(str(exc))


# --- rail-sim ---

def main_sim(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="rail-sim", description="Deterministic scenario runner.")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute a scenario file")
    p_run.add_argument("scenario")
    p_run.add_argument("--seed", type=int, help="override the scenario seed")
    p_run.add_argument("--out", help="write the report here instead of stdout")
    args = parser.parse_args(argv)

    from .sim import run_scenario

    try:
        scenario = json.loads(Path(args.scenario).read_text(encoding="utf-8"))
        if args.seed is not None:
            scenario["seed"] = args.seed
        report = run_scenario(scenario)
        text = canonical_json(report)
        if args.out:
            Path(args.out).write_text(text + "\n", encoding="utf-8")
        else:
            print(text)
        return OK
    except (RailError, OSError, json.JSONDecodeError) as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main_sim())
