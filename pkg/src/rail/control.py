"""Control plane: discovery, health monitoring, replication, failover.

The management engine watches module heartbeats, derives remediation actions
deterministically from the health table (reassign a dead handler's providers,
tear down a dead query instance's connection, promote the slave of a dead
singleton master), and logs every decision as line-delimited JSON.

Master election is epoch-ordered: every promotion bumps the role's epoch, the
new master broadcasts immediately, and consumers always follow the highest
epoch they have heard.  Stores fence out writes stamped with an older epoch
so a not-actually-dead master cannot commit after promotion.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

from .canon import canonical_json
from .config import RailConfig
from .errors import NoEndpointKnown, NoSlaveAvailable, UnknownModule
from .wire import Announcement

ALIVE = "alive"
SUSPECT = "suspect"
FAILED = "failed"


# --- consumer/provider side discovery ---

class DiscoveryTable:
    """Endpoint table fed by announcement datagrams; max epoch wins per role."""

    def __init__(self, config: Optional[RailConfig] = None):
        config = config or RailConfig()
        self._interval_us = config.discovery.announce_interval_us
        self._stale_after_us = config.discovery.stale_intervals * self._interval_us
        self._lock = threading.Lock()
        self._entries: dict[str, tuple[Announcement, int]] = {}

    def observe(self, announcement: Announcement, now_us: int) -> None:
        with self._lock:
            current = self._entries.get(announcement.role)
            if current is None or announcement.epoch >= current[0].epoch:
                self._entries[announcement.role] = (announcement, now_us)

    def lookup(self, role: str, now_us: int) -> str:
        """Address of the highest-epoch live announcement for a role."""
        with self._lock:
            entry = self._entries.get(role)
            if entry is None:
                raise NoEndpointKnown(f"no announcement seen for role {role!r}")
            announcement, seen_us = entry
            if now_us - seen_us > self._stale_after_us:
                raise NoEndpointKnown(
                    f"announcement for role {role!r} is stale "
                    f"({(now_us - seen_us) / 1e6:.1f}s old)"
                )
            return announcement.addr

    def epoch(self, role: str) -> Optional[int]:
        with self._lock:
            entry = self._entries.get(role)
            return entry[0].epoch if entry else None


# --- module health ---

@dataclass
class ModuleHealth:
    module_id: str
    role: str
    node: str
    last_heartbeat_us: int
    state: str = ALIVE
    load: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "module": self.module_id,
            "role": self.role,
            "node": self.node,
            "last_heartbeat_us": self.last_heartbeat_us,
            "state": self.state,
            "load": self.load,
        }


class HealthMonitor:
    """Tracks module liveness from heartbeats against fixed thresholds.

    A module is suspect after more than ``suspect_misses`` intervals of
    silence and failed after ``failed_misses``; a failed module never comes
    back under the same id (a respawn registers a new one).
    """

    def __init__(self, config: Optional[RailConfig] = None):
        config = config or RailConfig()
        self._interval_us = config.heartbeat.interval_us
        self._suspect_us = config.heartbeat.suspect_misses * self._interval_us
        self._failed_us = config.heartbeat.failed_misses * self._interval_us
        self._lock = threading.Lock()
        self._modules: dict[str, ModuleHealth] = {}

    def register(self, module_id: str, role: str, node: str, now_us: int) -> ModuleHealth:
        with self._lock:
            health = ModuleHealth(module_id=module_id, role=role, node=node, last_heartbeat_us=now_us)
            self._modules[module_id] = health
            return health

    def unregister(self, module_id: str) -> None:
        with self._lock:
            self._modules.pop(module_id, None)

    def process_heartbeat(self, module_id: str, now_us: int, load: Optional[dict] = None) -> ModuleHealth:
        with self._lock:
            health = self._modules.get(module_id)
            if health is None:
                raise UnknownModule(f"module {module_id!r} not registered")
            if health.state != FAILED:
                health.last_heartbeat_us = max(health.last_heartbeat_us, now_us)
                if load is not None:
                    health.load = load
                health.state = self._compute_state(health, now_us)
            return health

    def _compute_state(self, health: ModuleHealth, now_us: int) -> str:
        if health.state == FAILED:
            return FAILED  # terminal; a respawn gets a new module id
        silence = now_us - health.last_heartbeat_us
        if silence > self._failed_us:
            return FAILED
        if silence > self._suspect_us:
            return SUSPECT
        return ALIVE

    def sweep(self, now_us: int) -> dict[str, ModuleHealth]:
        """Recompute all states; returns the full health table."""
        with self._lock:
            for health in self._modules.values():
                health.state = self._compute_state(health, now_us)
            return {k: self._modules[k] for k in sorted(self._modules)}

    def state_of(self, module_id: str, now_us: int) -> str:
        with self._lock:
            health = self._modules.get(module_id)
            if health is None:
                raise UnknownModule(f"module {module_id!r} not registered")
            return self._compute_state(health, now_us)


# --- replication ---

class ReplicationLink:
    """Mirrors a master core's stores into a slave core via their change feeds.

    In sync mode the master's feeds are gated: a committed write becomes
    visible to external subscribers only after this link has applied it to
    the slave, so nothing ever acknowledged can be lost by promotion.  In
    async mode events publish immediately and the slave trails by ``lag()``.
    """

    def __init__(self, master_core, slave_core, mode: str = "sync"):
        if mode not in ("sync", "async"):
            raise ValueError(f"unknown replication mode {mode!r}")
        self.master = master_core
        self.slave = slave_core
        self.mode = mode
        self.paused = False
        self._graph_feed = master_core.graph.changes(cursor=slave_core.graph.head, raw=True)
        self._object_feed = master_core.objects.changes(cursor=slave_core.objects.head, raw=True)
        if mode == "sync":
            master_core.graph.log.set_gated(True)
            master_core.objects.log.set_gated(True)
        master_core.blobs.on_put(self._mirror_blob)

    def _mirror_blob(self, content: bytes, media_type: str) -> None:
        if not self.paused:
            self.slave.blobs.put(content, media_type)

    def pump(self) -> tuple[int, int]:
        """Apply pending master commits to the slave; returns counts."""
        if self.paused:
            return (0, 0)
        applied_graph = 0
        for event in self._graph_feed.poll():
            self.slave.graph.apply_replicated(event)
            if self.mode == "sync":
                self.master.graph.log.advance_published(event.seq)
            applied_graph += 1
        applied_objects = 0
        for event in self._object_feed.poll():
            self.slave.objects.apply_replicated(event)
            if self.mode == "sync":
                self.master.objects.log.advance_published(event.seq)
            applied_objects += 1
        return (applied_graph, applied_objects)

    def pause(self) -> None:
        """Stop applying (lag injection / partition simulation)."""
        self.paused = True

    def resume(self) -> None:
        self.paused = False

    def detach(self) -> None:
        """Permanently stop mirroring and release any publish gate.

        Used when the slave is lost: the master degrades to unreplicated
        operation instead of stalling its external feeds.
        """
        self.paused = True
        if self.mode == "sync":
            self.master.graph.log.set_gated(False)
            self.master.objects.log.set_gated(False)

    def lag(self) -> dict:
        return {
            "graph": self.master.graph.head - self.slave.graph.head,
            "objects": self.master.objects.head - self.slave.objects.head,
        }

    def replicated_prefix(self) -> dict:
        return {"graph": self.slave.graph.head, "objects": self.slave.objects.head}


# --- management engine ---

@dataclass
class RoleEntry:
    master: Optional[dict] = None   # {"node", "addr", "module_id"}
    slave: Optional[dict] = None
    epoch: int = 1
    link: Optional[ReplicationLink] = None


class ManagementEngine:
    """Single decision loop over health events and timers.

    All emitted actions are asynchronous commands to other modules, delivered
    through callbacks registered by the hosting process (or the simulation
    harness).  Identical health tables yield identical action logs.
    """

    def __init__(
        self,
        config: Optional[RailConfig] = None,
        decision_sink: Optional[Callable[[str], None]] = None,
    ):
        self.config = config or RailConfig()
        self.monitor = HealthMonitor(self.config)
        self.roles: dict[str, RoleEntry] = {}
        self.decision_log: list[dict] = []
        self.promotions: list[dict] = []
        self._decision_sink = decision_sink
        self._reported_failed: set[str] = set()
        # Remediation callbacks, registered by the hosting node/harness.
        self.on_reassign: Optional[Callable[[str, list], None]] = None
        self.on_teardown: Optional[Callable[[str], None]] = None
        self.on_promote: Optional[Callable[[str, Announcement, dict], None]] = None

    # --- role registry ---

    def register_role(
        self,
        role: str,
        master: dict,
        slave: Optional[dict] = None,
        link: Optional[ReplicationLink] = None,
        epoch: int = 1,
    ) -> None:
        self.roles[role] = RoleEntry(master=master, slave=slave, epoch=epoch, link=link)

    def current_epoch(self, role: str) -> int:
        return self.roles[role].epoch

    def announcements(self) -> list[Announcement]:
        """Current master announcements for all roles (broadcast payloads)."""
        out = []
        for role in sorted(self.roles):
            entry = self.roles[role]
            if entry.master is not None:
                out.append(Announcement(role=role, addr=entry.master["addr"],
                                        epoch=entry.epoch, node=entry.master["node"]))
        return out

    # --- decisions ---

    def _log(self, record: dict) -> None:
        self.decision_log.append(record)
        if self._decision_sink:
            self._decision_sink(canonical_json(record))

    def detect_failures(self, now_us: int) -> list[dict]:
        """Sweep health, emit one remediation action per newly failed module."""
        table = self.monitor.sweep(now_us)
        actions = []
        for module_id in sorted(table):
            health = table[module_id]
            if health.state != FAILED or module_id in self._reported_failed:
                continue
            self._reported_failed.add(module_id)
            actions.extend(self._remediate(health, now_us))
        return actions

    def _remediate(self, health: ModuleHealth, now_us: int) -> list[dict]:
        actions = []
        if health.role == "handler":
            providers = sorted(health.load.get("providers", []))
            action = {"time_us": now_us, "action": "reassign_providers",
                      "module": health.module_id, "node": health.node, "providers": providers}
            actions.append(action)
            self._log(action)
            if self.on_reassign:
                self.on_reassign(health.module_id, providers)
        elif health.role == "query_instance":
            action = {"time_us": now_us, "action": "teardown_connection",
                      "module": health.module_id, "node": health.node}
            actions.append(action)
            self._log(action)
            if self.on_teardown:
                self.on_teardown(health.module_id)
        elif health.role in self.roles:
            entry = self.roles[health.role]
            if entry.master and entry.master.get("module_id") == health.module_id:
                try:
                    announcement, record = self.promote_slave(health.role, now_us)
                    actions.append({"time_us": now_us, "action": "promote", "role": health.role,
                                    "epoch": announcement.epoch, "node": announcement.node})
                except NoSlaveAvailable:
                    action = {"time_us": now_us, "action": "role_unavailable",
                              "role": health.role, "module": health.module_id}
                    entry.master = None
                    actions.append(action)
                    self._log(action)
            elif entry.slave and entry.slave.get("module_id") == health.module_id:
                action = {"time_us": now_us, "action": "slave_lost",
                          "role": health.role, "module": health.module_id}
                entry.slave = None
                if entry.link is not None:
                    entry.link.detach()
                    entry.link = None
                actions.append(action)
                self._log(action)
        else:
            action = {"time_us": now_us, "action": "respawn",
                      "module": health.module_id, "node": health.node}
            actions.append(action)
            self._log(action)
        return actions

    def promote_slave(self, role: str, now_us: int) -> tuple[Announcement, dict]:
        """Make the role's slave the master at its replicated prefix.

        The new epoch fences the promoted stores against writes from the old
        master identity; in async mode the commits beyond the replicated
        prefix are lost and reported in the promotion record.
        """
        entry = self.roles.get(role)
        if entry is None or entry.slave is None:
            raise NoSlaveAvailable(f"no live slave for role {role!r}")
        slave_module = entry.slave.get("module_id")
        if slave_module:
            try:
                if self.monitor.state_of(slave_module, now_us) == FAILED:
                    raise NoSlaveAvailable(f"slave {slave_module!r} for role {role!r} is failed")
            except UnknownModule:
                pass  # unmonitored slaves are assumed promotable
        link = entry.link
        replicated = link.replicated_prefix() if link else {"graph": None, "objects": None}
        lost = link.lag() if link else {"graph": 0, "objects": 0}
        if link and link.mode == "sync":
            # Gated publishing: nothing beyond the replicated prefix was ever
            # acknowledged, so nothing acknowledged is lost.
            acked_loss = {
                "graph": max(0, link.master.graph.published_head - link.slave.graph.head),
                "objects": max(0, link.master.objects.published_head - link.slave.objects.head),
            }
        else:
            acked_loss = lost
        entry.epoch += 1
        old_master = entry.master
        entry.master = entry.slave
        entry.slave = None
        announcement = Announcement(role=role, addr=entry.master["addr"],
                                    epoch=entry.epoch, node=entry.master["node"])
        record = {
            "time_us": now_us,
            "action": "promotion",
            "role": role,
            "epoch": entry.epoch,
            "from_node": old_master["node"] if old_master else None,
            "to_node": entry.master["node"],
            "replicated": replicated,
            "lost_commits": lost,
            "lost_acked_commits": acked_loss,
            "mode": link.mode if link else None,
        }
        self.promotions.append(record)
        self._log(record)
        if self.on_promote:
            self.on_promote(role, announcement, record)
        return announcement, record
