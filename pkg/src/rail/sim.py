"""Deterministic simulation harness: virtual clock, in-memory network,
simulated providers/consumers, fault injection.

Every module of the system runs in one process over a single-threaded event
queue; all randomness comes from per-entity generators derived from the
scenario seed, so a scenario run twice produces byte-identical reports.

Scenario file shape (canonical JSON):

    {"seed": 42, "duration_us": 5000000,
     "topology": [{"node": "n1", "roles": ["ingest", "query", "mgmt"]},
                  {"node": "n2", "roles": ["ingest", "query"]}],
     "net": {"latency_us": 500, "dup_prob": 0.0},
     "replication": {"mode": "sync"},
     "map": {"objects": [...], "edges": [...]},
     "providers": [{"id": "cam1", "type": "camera", "rate_hz": 20,
                    "drop_prob": 0.3,
                    "observations": [{"kind": "marker.QR", "ext_id": "bar",
                                      "pose": {"t": [0,0,0], "q": [1,0,0,0]},
                                      "sigma": 0.01, "res": 0.001}]}],
     "consumers": [{"id": "c1", "interval_us": 500000, "follow": false,
                    "queries": [{"op": "get_transform", "src": "cam1",
                                 "dst": "prov:marker.QR:bar"}]}],
     "faults": [{"time_us": 2000000, "kind": "kill_module", "target": "node:n1"}]}

The first node listing a role is its initial master; a second node listing
the same role mirrors it and is the promotion target.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from .canon import canonical_json
from .changefeed import ChangeEvent
from .config import RailConfig
from .control import DiscoveryTable, ManagementEngine, ReplicationLink
from .core import RailCore
from .errors import InvalidScenario, NoEndpointKnown, RailError
from .snapshot import import_snapshot
from .wire import (
    Announcement,
    Detection,
    Heartbeat,
    ProviderMessage,
    encode_provider_message,
)

ROLES = ("ingest", "query", "mgmt")


def derived_rng(seed: int, name: str) -> random.Random:
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


class Simulator:
    """Virtual clock over a (time, tiebreak) ordered event queue."""

    def __init__(self):
        self.now_us = 0
        self._queue: list = []
        self._counter = 0

    def clock(self) -> int:
        return self.now_us

    def at(self, time_us: int, callback: Callable[[], None]) -> None:
        self._counter += 1
        heapq.heappush(self._queue, (max(time_us, self.now_us), self._counter, callback))

    def after(self, delay_us: int, callback: Callable[[], None]) -> None:
        self.at(self.now_us + delay_us, callback)

    def every(self, interval_us: int, callback: Callable[[], None], start_us: int = 0) -> None:
        def tick():
            callback()
            self.at(self.now_us + interval_us, tick)

        self.at(start_us, tick)

    def run_until(self, end_us: int) -> None:
        while self._queue and self._queue[0][0] <= end_us:
            time_us, _, callback = heapq.heappop(self._queue)
            self.now_us = time_us
            callback()
        self.now_us = end_us


class SimNetwork:
    """Seeded in-memory datagram network with loss, duplication, partitions."""

    def __init__(self, sim: Simulator, rng: random.Random, latency_us: int = 500, dup_prob: float = 0.0):
        self._sim = sim
        self._rng = rng
        self.latency_us = latency_us
        self.dup_prob = dup_prob
        self._endpoints: dict[str, Callable[[bytes], None]] = {}
        self._partitioned: set[str] = set()
        self._blocked_links: set[tuple[str, str]] = set()
        self.counters = {"sent": 0, "dropped": 0, "delivered": 0, "duplicated": 0}
        self.latency_histogram: dict[int, int] = {}

    @staticmethod
    def node_of(addr: str) -> str:
        return addr.split("/", 1)[0]

    def register(self, addr: str, handler: Callable[[bytes], None]) -> None:
        self._endpoints[addr] = handler

    def unregister_node(self, node: str) -> None:
        for addr in [a for a in self._endpoints if self.node_of(a) == node]:
            del self._endpoints[addr]

    def partition(self, node: str) -> None:
        self._partitioned.add(node)

    def heal(self, node: str) -> None:
        self._partitioned.discard(node)

    def block_link(self, a: str, b: str) -> None:
        self._blocked_links.add((a, b))
        self._blocked_links.add((b, a))

    def restore_link(self, a: str, b: str) -> None:
        self._blocked_links.discard((a, b))
        self._blocked_links.discard((b, a))

    def _link_open(self, src: str, dst: str) -> bool:
        src_node, dst_node = self.node_of(src), self.node_of(dst)
        if src_node in self._partitioned or dst_node in self._partitioned:
            return False
        return (src_node, dst_node) not in self._blocked_links

    def send(
        self,
        src: str,
        dst: str,
        data: bytes,
        drop_prob: float = 0.0,
        on_delivered: Optional[Callable[[], None]] = None,
    ) -> bool:
        """Schedule datagram delivery; returns False if dropped at send time.

        ``on_delivered`` fires once when the datagram first reaches a live
        endpoint (duplicated deliveries do not re-fire it).
        """
        self.counters["sent"] += 1
        if not self._link_open(src, dst) or (drop_prob > 0.0 and self._rng.random() < drop_prob):
            self.counters["dropped"] += 1
            return False
        deliveries = 1
        if self.dup_prob > 0.0 and self._rng.random() < self.dup_prob:
            deliveries = 2
            self.counters["duplicated"] += 1
        state = {"notified": False}

        def deliver():
            handler = self._endpoints.get(dst)
            if handler is not None:
                self.counters["delivered"] += 1
                bucket = self.latency_us
                self.latency_histogram[bucket] = self.latency_histogram.get(bucket, 0) + 1
                if on_delivered is not None and not state["notified"]:
                    state["notified"] = True
                    on_delivered()
                handler(data)

        for _ in range(deliveries):
            self._sim.after(self.latency_us, deliver)
        return True

    def broadcast(self, src: str, suffix: str, data: bytes) -> None:
        """Deliver to every endpoint whose address ends with the suffix."""
        for addr in sorted(self._endpoints):
            if addr.endswith(suffix) and addr != src:
                if self._link_open(src, addr):
                    self.send(src, addr, data)


# --- scenario schema ---

def validate_scenario(data: dict) -> dict:
    if not isinstance(data, dict):
        raise InvalidScenario("scenario must be an object")
    out = {
        "seed": data.get("seed", 0),
        "duration_us": data.get("duration_us", 1_000_000),
        "topology": data.get("topology", [{"node": "n1", "roles": ["ingest", "query", "mgmt"]}]),
        "net": data.get("net", {}),
        "replication": data.get("replication", {}),
        "map": data.get("map"),
        "providers": data.get("providers", []),
        "consumers": data.get("consumers", []),
        "faults": data.get("faults", []),
    }
    if not isinstance(out["seed"], int):
        raise InvalidScenario("'seed' must be an integer")
    if not isinstance(out["duration_us"], int) or out["duration_us"] < 0:
        raise InvalidScenario("'duration_us' must be an integer >= 0")
    if not isinstance(out["topology"], list) or not out["topology"]:
        raise InvalidScenario("'topology' must be a non-empty list")
    seen_nodes = set()
    for entry in out["topology"]:
        node = entry.get("node")
        if not node or node in seen_nodes:
            raise InvalidScenario(f"bad or duplicate topology node {node!r}")
        seen_nodes.add(node)
        for role in entry.get("roles", []):
            if role not in ROLES:
                raise InvalidScenario(f"unknown role {role!r} on node {node!r}")
    for provider in out["providers"]:
        if not provider.get("id"):
            raise InvalidScenario("provider without id")
        if not isinstance(provider.get("rate_hz", 1), (int, float)) or provider.get("rate_hz", 1) <= 0:
            raise InvalidScenario(f"provider {provider['id']!r} rate_hz must be > 0")
        for obs in provider.get("observations", []):
            if "object" not in obs and ("kind" not in obs or "ext_id" not in obs):
                raise InvalidScenario(f"provider {provider['id']!r} observation needs kind/ext_id or object")
    for fault in out["faults"]:
        if fault.get("kind") not in ("kill_module", "drop_link", "restore_link", "partition"):
            raise InvalidScenario(f"unknown fault kind {fault.get('kind')!r}")
        if "time_us" not in fault or "target" not in fault:
            raise InvalidScenario("fault needs time_us and target")
    return out


# --- simulated actors ---

class SimNode:
    def __init__(self, node_id: str, roles: list[str], core: RailCore, network: SimNetwork):
        self.node_id = node_id
        self.roles = list(roles)
        self.core = core
        self.network = network
        self.alive = True
        self.role_epochs = {role: 1 for role in roles}
        self.mastered: set[str] = set()

    # Pseudo host:port addresses keep the announcement codec's wire rules.
    @property
    def ingest_addr(self) -> str:
        return f"{self.node_id}/ingest:47400"

    @property
    def query_addr(self) -> str:
        return f"{self.node_id}/query:47410"

    def register_endpoints(self) -> None:
        self.network.register(self.ingest_addr, self._on_ingest_datagram)
        self.network.register(f"{self.node_id}/discovery", lambda data: None)

    def _on_ingest_datagram(self, data: bytes) -> None:
        if self.alive:
            self.core.handle_provider_datagram(data)

    def announcements(self) -> list[Announcement]:
        return [
            Announcement(
                role=role,
                addr=self.ingest_addr if role == "ingest" else self.query_addr,
                epoch=self.role_epochs[role],
                node=self.node_id,
            )
            for role in sorted(self.mastered)
        ]


@dataclass
class ProviderStats:
    sent: int = 0
    send_dropped: int = 0
    lookup_failures: int = 0


class SimProvider:
    """Sensor stand-in: pushes one message per tick, datagram-only, no state."""

    def __init__(self, spec: dict, network: SimNetwork, sim: Simulator, seed: int):
        self.provider_id = spec["id"]
        self.provider_type = spec.get("type", "sensor")
        self.rate_hz = spec.get("rate_hz", 10)
        self.drop_prob = float(spec.get("drop_prob", 0.0))
        self.observations = spec.get("observations", [])
        self.network = network
        self.sim = sim
        self.discovery = DiscoveryTable()
        self.addr = f"ext-prov-{self.provider_id}/discovery"
        self.seq = 0
        self.stats = ProviderStats()
        self.delivered_log: list[dict] = []
        network.register(self.addr, self._on_discovery)

    def _on_discovery(self, data: bytes) -> None:
        from .wire import decode_announcement
        from .errors import MalformedAnnouncement

        try:
            self.discovery.observe(decode_announcement(data), self.sim.now_us)
        except MalformedAnnouncement:
            pass

    def tick(self) -> None:
        try:
            addr = self.discovery.lookup("ingest", self.sim.now_us)
        except NoEndpointKnown:
            self.stats.lookup_failures += 1
            return
        self.seq += 1
        items = []
        for obs in self.observations:
            from .geometry import Pose6D

            items.append(Detection(
                pose=Pose6D.from_json(obs["pose"]),
                sigma=float(obs["sigma"]),
                resolution=float(obs["res"]),
                kind=obs.get("kind", ""),
                ext_id=obs.get("ext_id", ""),
                object_id=obs.get("object", ""),
            ))
        message = ProviderMessage(
            provider_id=self.provider_id,
            provider_type=self.provider_type,
            seq=self.seq,
            time_us=self.sim.now_us,
            observations=tuple(items),
        )
        payload = encode_provider_message(message)
        self.stats.sent += 1
        message_json = message.to_json()
        accepted = self.network.send(
            self.addr, addr, payload, drop_prob=self.drop_prob,
            on_delivered=lambda: self.delivered_log.append(message_json),
        )
        if not accepted:
            self.stats.send_dropped += 1


@dataclass
class ConsumerStats:
    queries_ok: int = 0
    queries_err: int = 0
    deltas: int = 0
    missed: int = 0
    reconnects: int = 0
    lookup_failures: int = 0
    endpoint_switches: list = field(default_factory=list)


class SimConsumer:
    """LBS stand-in: resolves the query master by max epoch and queries it."""

    def __init__(self, spec: dict, runner: "ScenarioRun"):
        self.consumer_id = spec["id"]
        self.queries = spec.get("queries", [])
        self.interval_us = int(spec.get("interval_us", 500_000))
        self.runner = runner
        self.discovery = DiscoveryTable()
        self.addr = f"ext-cons-{self.consumer_id}/discovery"
        self.stats = ConsumerStats()
        self.delta_log: list[dict] = []
        self._current_addr: Optional[str] = None
        self._subscriptions: list = []
        runner.network.register(self.addr, self._on_discovery)

    def _on_discovery(self, data: bytes) -> None:
        from .wire import decode_announcement
        from .errors import MalformedAnnouncement

        try:
            self.discovery.observe(decode_announcement(data), self.runner.sim.now_us)
        except MalformedAnnouncement:
            pass

    def _resolve_node(self) -> Optional[SimNode]:
        try:
            addr = self.discovery.lookup("query", self.runner.sim.now_us)
        except NoEndpointKnown:
            self.stats.lookup_failures += 1
            return None
        node = self.runner.node_by_query_addr.get(addr)
        if node is None or not node.alive:
            return None
        if addr != self._current_addr:
            if self._current_addr is not None:
                self.stats.reconnects += 1
                self._drop_subscriptions()
            self._current_addr = addr
            self.stats.endpoint_switches.append({"time_us": self.runner.sim.now_us, "addr": addr})
        return node

    def _drop_subscriptions(self) -> None:
        for subscription in self._subscriptions:
            subscription.close()
        self._subscriptions = []

    def tick(self) -> None:
        node = self._resolve_node()
        if node is None:
            return
        if not self._subscriptions:
            for query in self.queries:
                if query.get("follow"):
                    try:
                        response, subscription = node.core.query.open_subscription(query)
                        self._subscriptions.append(subscription)
                        self.stats.queries_ok += 1
                    except RailError:
                        self.stats.queries_err += 1
        for query in self.queries:
            if query.get("follow"):
                continue
            response = node.core.query.execute(query)
            if response.get("ok"):
                self.stats.queries_ok += 1
            else:
                self.stats.queries_err += 1
        dead = []
        for subscription in self._subscriptions:
            frames = subscription.pump()
            for frame in frames:
                if frame.get("error"):
                    self.stats.missed += 1
                    dead.append(subscription)
                else:
                    self.stats.deltas += 1
                    self.delta_log.append(frame)
        for subscription in dead:
            subscription.close()
            self._subscriptions.remove(subscription)


class AckLedger:
    """Records every event published to external feeds (the acked set)."""

    def __init__(self):
        self.events: dict[str, list[ChangeEvent]] = {"graph": [], "objects": []}
        self._graph_feed = None
        self._object_feed = None

    def attach(self, core: RailCore) -> None:
        self.drain()
        graph_cursor = len(self.events["graph"])
        object_cursor = len(self.events["objects"])
        self._graph_feed = core.graph.changes(cursor=graph_cursor)
        self._object_feed = core.objects.changes(cursor=object_cursor)

    def drain(self) -> None:
        if self._graph_feed is not None:
            self.events["graph"].extend(self._graph_feed.poll())
            self.events["objects"].extend(self._object_feed.poll())


# --- the runner ---

class ScenarioRun:
    """One simulated execution of a scenario."""

    def __init__(self, scenario: dict, config: Optional[RailConfig] = None):
        self.scenario = validate_scenario(scenario)
        self.config = config or RailConfig()
        seed = self.scenario["seed"]
        self.sim = Simulator()
        net_spec = self.scenario["net"]
        self.network = SimNetwork(
            self.sim,
            derived_rng(seed, "net"),
            latency_us=int(net_spec.get("latency_us", 500)),
            dup_prob=float(net_spec.get("dup_prob", 0.0)),
        )
        self.nodes: dict[str, SimNode] = {}
        self.node_by_query_addr: dict[str, SimNode] = {}
        self.providers: list[SimProvider] = []
        self.consumers: list[SimConsumer] = []
        self.links: list[ReplicationLink] = []
        self.mgmt = ManagementEngine(self.config)
        self.mgmt_node: Optional[SimNode] = None
        self.ledger = AckLedger()
        self.applied_per_second: dict[int, int] = {}
        self._build()

    # --- construction ---

    def _build(self) -> None:
        scenario = self.scenario
        mode = scenario["replication"].get("mode", self.config.replication.mode)

        for entry in scenario["topology"]:
            node_id = entry["node"]
            core = RailCore(config=self.config, clock=self.sim.clock, node_id=node_id)
            node = SimNode(node_id, entry.get("roles", []), core, self.network)
            node.register_endpoints()
            self.nodes[node_id] = node
            self.node_by_query_addr[node.query_addr] = node

        masters: dict[str, SimNode] = {}
        slaves: dict[str, SimNode] = {}
        for role in ROLES:
            holders = [n for n in self.nodes.values() if role in n.roles]
            if holders:
                masters[role] = holders[0]
                holders[0].mastered.add(role)
                if len(holders) > 1:
                    slaves[role] = holders[1]
        for role in ("ingest", "query"):
            if role in masters:
                slave = slaves.get(role)
                if slave is not None and slave is not masters[role]:
                    slave.core.active = False

        # One replication link per master/slave core pair.
        linked: dict[tuple[str, str], ReplicationLink] = {}
        for role, master in masters.items():
            slave = slaves.get(role)
            link = None
            if slave is not None and slave is not master:
                pair = (master.node_id, slave.node_id)
                if pair not in linked:
                    linked[pair] = ReplicationLink(master.core, slave.core, mode=mode)
                    master.core.graph.log.on_commit(self._schedule_pump(linked[pair]))
                    master.core.objects.log.on_commit(self._schedule_pump(linked[pair]))
                link = linked[pair]
            addr = master.ingest_addr if role == "ingest" else master.query_addr
            self.mgmt.register_role(
                role,
                master={"node": master.node_id, "addr": addr, "module_id": f"{role}@{master.node_id}"},
                slave=None if slave is None else {
                    "node": slave.node_id,
                    "addr": slave.ingest_addr if role == "ingest" else slave.query_addr,
                    "module_id": f"{role}@{slave.node_id}",
                },
                link=link,
            )
        self.links = list(linked.values())
        self.mgmt.on_promote = self._on_promote

        if "mgmt" in masters:
            self.mgmt_node = masters["mgmt"]

        self._master_by_role = masters
        if "ingest" in masters:
            self.ledger.attach(masters["ingest"].core)

        if scenario["map"]:
            snapshot = dict(scenario["map"])
            snapshot.setdefault("format", "rail-snapshot")
            snapshot.setdefault("v", 1)
            master = masters.get("ingest") or next(iter(self.nodes.values()))
            import_snapshot(snapshot, master.core.objects, master.core.graph, master.core.blobs)
            for link in self.links:
                link.pump()

        seed = scenario["seed"]
        for spec in scenario["providers"]:
            self.providers.append(SimProvider(spec, self.network, self.sim, seed))
        for spec in scenario["consumers"]:
            self.consumers.append(SimConsumer(spec, self))

        # Module registration + heartbeats into the management engine.
        now = 0
        for node in self.nodes.values():
            for role in node.roles:
                self.mgmt.monitor.register(f"{role}@{node.node_id}", role, node.node_id, now)

        self._schedule_everything()

    def _schedule_pump(self, link: ReplicationLink) -> Callable[[ChangeEvent], None]:
        def on_commit(_event: ChangeEvent) -> None:
            self.sim.after(self.network.latency_us, lambda: self._pump_link(link))

        return on_commit

    def _pump_link(self, link: ReplicationLink) -> None:
        if link.master.graph.head >= 0 and self.nodes[link.master.node_id].alive:
            link.pump()
            self.ledger.drain()

    def _schedule_everything(self) -> None:
        announce_interval = self.config.discovery.announce_interval_us
        hb_interval = self.config.heartbeat.interval_us

        for node in self.nodes.values():
            self.sim.every(announce_interval, self._announcer(node), start_us=0)
            self.sim.every(hb_interval, self._heartbeater(node), start_us=hb_interval // 2)
        self.sim.every(hb_interval, self._mgmt_sweep, start_us=hb_interval)

        for i, provider in enumerate(self.providers):
            period = int(1_000_000 / provider.rate_hz)
            self.sim.every(period, provider.tick, start_us=period + i)
        for i, consumer in enumerate(self.consumers):
            self.sim.every(consumer.interval_us, consumer.tick, start_us=consumer.interval_us + i)

        for fault in sorted(self.scenario["faults"], key=lambda f: (f["time_us"], f["target"])):
            self.sim.at(fault["time_us"], self._fault_executor(fault))

        self.sim.every(1_000_000, self.ledger.drain, start_us=999_999)

    def _announcer(self, node: SimNode) -> Callable[[], None]:
        def announce() -> None:
            if not node.alive:
                return
            for announcement in node.announcements():
                from .wire import encode_announcement

                self.network.broadcast(f"{node.node_id}/discovery", "/discovery",
                                       encode_announcement(announcement))
        return announce

    def _heartbeater(self, node: SimNode) -> Callable[[], None]:
        def beat() -> None:
            if not node.alive or self.mgmt_node is None or not self.mgmt_node.alive:
                return
            now = self.sim.now_us
            for role in node.roles:
                self._deliver_heartbeat(Heartbeat(
                    module_id=f"{role}@{node.node_id}", node=node.node_id, role=role,
                    time_us=now, load={"providers": len(node.core.ingest.handlers())},
                ))
            for provider_id, handler in sorted(node.core.ingest.handlers().items()):
                if handler.alive:
                    self._deliver_heartbeat(Heartbeat(
                        module_id=f"{handler.handler_id}@{node.node_id}", node=node.node_id,
                        role="handler", time_us=now, load={"providers": [provider_id]},
                    ))
        return beat

    def _deliver_heartbeat(self, heartbeat: Heartbeat) -> None:
        # Heartbeats ride the sim network to the management node.
        def handle() -> None:
            if self.mgmt_node is None or not self.mgmt_node.alive:
                return
            try:
                self.mgmt.monitor.process_heartbeat(heartbeat.module_id, heartbeat.time_us, heartbeat.load)
            except RailError:
                self.mgmt.monitor.register(
                    heartbeat.module_id, heartbeat.role, heartbeat.node, heartbeat.time_us
                )

        if self.mgmt_node is not None and self.network._link_open(
            f"{heartbeat.node}/discovery", f"{self.mgmt_node.node_id}/discovery"
        ):
            self.sim.after(self.network.latency_us, handle)

    def _mgmt_sweep(self) -> None:
        if self.mgmt_node is None or not self.mgmt_node.alive:
            return
        actions = self.mgmt.detect_failures(self.sim.now_us)
        for action in actions:
            if action["action"] == "reassign_providers":
                module = action["module"]
                handler_id, _, node_id = module.rpartition("@")
                node = self.nodes.get(node_id)
                if node is not None:
                    node.core.ingest.invalidate_handler(handler_id)

    def _on_promote(self, role: str, announcement: Announcement, record: dict) -> None:
        new_master = self.nodes[announcement.node]
        new_master.role_epochs[role] = announcement.epoch
        new_master.mastered.add(role)
        new_master.core.promote({role: announcement.epoch})
        old = self._master_by_role.get(role)
        if old is not None and old is not new_master:
            old.mastered.discard(role)
        self._master_by_role[role] = new_master
        if role == "ingest":
            self.ledger.attach(new_master.core)
        # The promoted master announces immediately, not at the next tick.
        self._announcer(new_master)()

    def _fault_executor(self, fault: dict) -> Callable[[], None]:
        kind, target = fault["kind"], fault["target"]

        def execute() -> None:
            if kind == "kill_module":
                self._kill_target(target)
            elif kind == "partition":
                self.network.partition(target.split(":", 1)[-1])
            elif kind == "drop_link":
                a, _, b = target.partition("|")
                self.network.block_link(a, b)
            elif kind == "restore_link":
                if "|" in target:
                    a, _, b = target.partition("|")
                    self.network.restore_link(a, b)
                else:
                    self.network.heal(target.split(":", 1)[-1])

        return execute

    def _kill_target(self, target: str) -> None:
        kind, _, name = target.partition(":")
        if kind == "node":
            node = self.nodes.get(name)
            if node is None or not node.alive:
                return
            self.ledger.drain()
            node.alive = False
            node.core.active = False
            self.network.unregister_node(name)
        elif kind == "handler":
            for node in self.nodes.values():
                node.core.ingest.kill_handler_of(name)
        elif kind == "worker":
            node_id, _, idx = name.partition("/")
            node = self.nodes.get(node_id)
            if node is not None:
                node.core.ingest.kill_worker(int(idx))

    # --- execution & report ---

    def run(self) -> dict:
        duration = self.scenario["duration_us"]
        self.sim.run_until(duration)
        self.ledger.drain()
        return self._build_report()

    def _provider_apply_totals(self) -> dict:
        totals: dict[str, dict] = {}
        for provider in self.providers:
            merged = {"edges_applied": 0, "edges_superseded": 0, "objects_touched": 0, "items_dropped": 0}
            for node in self.nodes.values():
                report = node.core.ingest.reports_by_provider.get(provider.provider_id)
                if report:
                    for key, value in report.to_json().items():
                        merged[key] += value
            totals[provider.provider_id] = {
                "sent": provider.stats.sent,
                "send_dropped": provider.stats.send_dropped,
                "lookup_failures": provider.stats.lookup_failures,
                **merged,
            }
        return totals

    def _build_report(self) -> dict:
        consumers = {}
        for consumer in self.consumers:
            consumers[consumer.consumer_id] = {
                "queries_ok": consumer.stats.queries_ok,
                "queries_err": consumer.stats.queries_err,
                "deltas": consumer.stats.deltas,
                "missed": consumer.stats.missed,
                "reconnects": consumer.stats.reconnects,
                "lookup_failures": consumer.stats.lookup_failures,
                "endpoint_switches": consumer.stats.endpoint_switches,
            }
        return {
            "scenario": {"seed": self.scenario["seed"], "duration_us": self.scenario["duration_us"]},
            "providers": self._provider_apply_totals(),
            "consumers": consumers,
            "promotions": self.mgmt.promotions,
            "decision_log": self.mgmt.decision_log,
            "stores": {
                node_id: node.core.digests() for node_id, node in sorted(self.nodes.items())
            },
            "net": dict(self.network.counters),
            "timing": {
                "delivery_latency_us": {
                    str(k): v for k, v in sorted(self.network.latency_histogram.items())
                },
            },
            "end_time_us": self.sim.now_us,
        }


def run_scenario(scenario: dict, config: Optional[RailConfig] = None) -> dict:
    """Execute a scenario to completion; returns the canonical report."""
    return ScenarioRun(scenario, config=config).run()


def report_digest(report: dict) -> str:
    return hashlib.sha256(canonical_json(report).encode()).hexdigest()
