"""Ingest plane: entry-point routing, per-provider handlers, ID-lookup cache.

Providers push self-contained datagrams; there is no session, no ack and no
retransmission.  The entry point routes each datagram to a stable per-provider
handler (created on first sight on the least-loaded worker).  Handlers relay
detections into the spatial graph and attribute upserts into the object
store, resolving external marker ids to internal object ids through a cache
that the object change feed keeps honest.

A malformed datagram, an unknown worker, or a bad item never raises out of
``handle_datagram``: faults are counted and the rest of the traffic keeps
flowing.
"""

from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Optional

from .config import RailConfig
from .datastores import AttributePredicate, BlobStore, ObjectStore, get_path
from .errors import (
    AmbiguousExternalId,
    NoWorkersAvailable,
    NotFound,
    RailError,
)
from .graph_store import GraphStore, TransformObservation
from .wire import AttributeUpsert, Detection, ProviderMessage, decode_provider_message

PROVISIONAL_SOURCE_PATH = "rail.provisional_source"


def marker_attribute_path(kind: str) -> str:
    """Attribute path holding the external id for a marker kind.

    ``marker.QR`` (and plain ``QR``) map to ``marker.QR.id``.
    """
    tail = kind.rsplit(".", 1)[-1]
    return f"marker.{tail}.id"


@dataclass
class ApplyReport:
    edges_applied: int = 0
    edges_superseded: int = 0
    objects_touched: int = 0
    items_dropped: int = 0

    def merge(self, other: "ApplyReport") -> None:
        self.edges_applied += other.edges_applied
        self.edges_superseded += other.edges_superseded
        self.objects_touched += other.objects_touched
        self.items_dropped += other.items_dropped

    def to_json(self) -> dict:
        return {
            "edges_applied": self.edges_applied,
            "edges_superseded": self.edges_superseded,
            "objects_touched": self.objects_touched,
            "items_dropped": self.items_dropped,
        }


class IdLookupCache:
    """Maps (kind, ext_id) to internal object ids, invalidated by the feed.

    A miss issues exactly one store query; between two invalidations of a key
    no further queries happen for it.  Unknown ids either create a
    provisional object (default) or drop the observation, per policy.
    """

    def __init__(
        self,
        object_store: ObjectStore,
        max_entries: int = 4096,
        unknown_policy: str = "create_provisional",
    ):
        self._store = object_store
        self._entries: OrderedDict[tuple[str, str], str] = OrderedDict()
        self._max_entries = max_entries
        self._policy = unknown_policy
        self._feed = object_store.changes(cursor=object_store.published_head)
        self.store_queries = 0
        self.invalidations = 0

    def pump(self) -> None:
        """Apply pending change-feed events to the cache."""
        for event in self._feed.poll():
            self._apply_event(event)

    def _apply_event(self, event) -> None:
        payload = event.payload
        doc = payload.get("doc", {})
        doc_id = payload.get("id")
        if event.kind == "object_delete":
            for key in list(self._entries):
                path = marker_attribute_path(key[0])
                found, value = get_path(doc.get("attributes", {}), path)
                if self._entries[key] == doc_id or (found and value == key[1]):
                    del self._entries[key]
                    self.invalidations += 1
            return
        changed = set(payload.get("changed_paths", ()))
        for key in list(self._entries):
            path = marker_attribute_path(key[0])
            if path not in changed:
                continue
            found, value = get_path(doc.get("attributes", {}), path)
            cached_id = self._entries[key]
            if cached_id == doc_id:
                # The entry's own object mutated: keep only if it still
                # carries the external id.
                evict = not (found and value == key[1])
            else:
                # Another object mutated: relevant only if it now claims the
                # external id (new or ambiguous owner).
                evict = found and value == key[1]
            if evict:
                del self._entries[key]
                self.invalidations += 1

    def resolve(self, kind: str, ext_id: str) -> str:
        """Internal object id for an external marker id."""
        return self.resolve_ex(kind, ext_id)[0]

    def resolve_ex(self, kind: str, ext_id: str) -> tuple[str, bool]:
        """As resolve(), also reporting whether a provisional object was created."""
        self.pump()
        key = (kind, ext_id)
        cached = self._entries.get(key)
        if cached is not None:
            self._entries.move_to_end(key)
            return cached, False
        path = marker_attribute_path(kind)
        self.store_queries += 1
        matches = self._store.find_objects(AttributePredicate.eq(path, ext_id))
        if len(matches) > 1:
            raise AmbiguousExternalId(
                f"{len(matches)} objects share {path}={ext_id!r}: "
                + ", ".join(d.id for d in matches[:4])
            )
        created = False
        if matches:
            object_id = matches[0].id
        elif self._policy == "create_provisional":
            object_id = f"prov:{kind}:{ext_id}"
            self._store.upsert_object(
                object_id,
                [(path, "set", ext_id), (PROVISIONAL_SOURCE_PATH, "set", f"{kind}:{ext_id}")],
                provisional=True,
            )
            created = True
            # Swallow our own creation event; it only confirms the mapping.
            self.pump()
        else:
            raise NotFound(f"no object registered for {path}={ext_id!r}")
        self._entries[key] = object_id
        self._entries.move_to_end(key)
        while len(self._entries) > self._max_entries:
            self._entries.popitem(last=False)
        return object_id, created


class DataProviderHandler:
    """Per-provider worker: applies one provider's messages sequentially."""

    def __init__(
        self,
        provider_id: str,
        worker: int,
        graph_store: GraphStore,
        object_store: ObjectStore,
        cache: IdLookupCache,
        epoch: Callable[[], Optional[int]] = lambda: None,
        instance: int = 1,
    ):
        self.handler_id = f"handler:{provider_id}#{instance}"
        self.provider_id = provider_id
        self.worker = worker
        self.alive = True
        self.cache = cache
        self._graph = graph_store
        self._objects = object_store
        self._epoch = epoch
        self._sensor_registered = False
        self._lock = threading.Lock()
        self.fault_counters: dict[str, int] = {}

    def kill(self) -> None:
        self.alive = False

    def _count_fault(self, code: str) -> None:
        self.fault_counters[code] = self.fault_counters.get(code, 0) + 1

    def _ensure_sensor_object(self, provider_type: str, touched: set) -> None:
        if self._sensor_registered:
            return
        if not self._objects.has_object(self.provider_id):
            self._objects.upsert_object(
                self.provider_id,
                [("sensor.type", "set", provider_type)],
                epoch=self._epoch(),
            )
            touched.add(self.provider_id)
        self._sensor_registered = True

    def _resolve_target(self, item, touched: set) -> str:
        if item.object_id:
            if not self._objects.has_object(item.object_id):
                self._objects.upsert_object(item.object_id, epoch=self._epoch())
                touched.add(item.object_id)
            return item.object_id
        object_id, created = self.cache.resolve_ex(item.kind, item.ext_id)
        if created:
            touched.add(object_id)
        return object_id

    def apply(self, message: ProviderMessage) -> ApplyReport:
        """Relay one message into the stores; item faults are isolated."""
        report = ApplyReport()
        touched: set[str] = set()
        with self._lock:
            self._ensure_sensor_object(message.provider_type, touched)
            for item in message.observations:
                try:
                    if isinstance(item, Detection):
                        child = self._resolve_target(item, touched)
                        result = self._graph.upsert_edge(
                            TransformObservation(
                                parent=self.provider_id,
                                child=child,
                                provider=self.provider_id,
                                pose=item.pose,
                                sigma=item.sigma,
                                resolution=item.resolution,
                                time_us=message.time_us,
                                seq=message.seq,
                            ),
                            epoch=self._epoch(),
                        )
                        if result.value == "applied":
                            report.edges_applied += 1
                        else:
                            report.edges_superseded += 1
                    elif isinstance(item, AttributeUpsert):
                        object_id = self._resolve_target(item, touched)
                        self._objects.upsert_object(object_id, item.mutations, epoch=self._epoch())
                        touched.add(object_id)
                except RailError as exc:
                    report.items_dropped += 1
                    self._count_fault(exc.code)
        report.objects_touched = len(touched)
        return report


class IngestPlane:
    """Entry point: decodes datagrams, routes providers to stable handlers.

    Handler placement follows the per-worker load report (least providers,
    lowest worker id on ties).  Reassignment happens only when a handler or
    its worker has died; the provider never notices because the protocol
    carries no session state.
    """

    def __init__(
        self,
        graph_store: GraphStore,
        object_store: ObjectStore,
        blob_store: Optional[BlobStore] = None,
        config: Optional[RailConfig] = None,
        epoch: Callable[[], Optional[int]] = lambda: None,
        load_report: Optional[Callable[[], dict[int, int]]] = None,
    ):
        config = config or RailConfig()
        self._graph = graph_store
        self._objects = object_store
        self._config = config
        self._epoch = epoch
        self._load_report = load_report
        self._lock = threading.RLock()
        self._handlers: dict[str, DataProviderHandler] = {}
        self._workers_alive: dict[int, bool] = {i: True for i in range(config.ingest.workers)}
        self._handler_instances = 0
        self.counters: dict[str, int] = {}
        self.reports_by_provider: dict[str, ApplyReport] = {}

    def _count(self, code: str) -> None:
        self.counters[code] = self.counters.get(code, 0) + 1

    # --- worker liveness (driven by control plane / fault injection) ---

    def kill_worker(self, worker: int) -> list[str]:
        """Mark a worker dead; its handlers die with it. Returns provider ids."""
        with self._lock:
            self._workers_alive[worker] = False
            victims = [p for p, h in self._handlers.items() if h.worker == worker]
            for provider_id in victims:
                self._handlers[provider_id].kill()
            return victims

    def revive_worker(self, worker: int) -> None:
        with self._lock:
            self._workers_alive[worker] = True

    def kill_handler_of(self, provider_id: str) -> None:
        with self._lock:
            handler = self._handlers.get(provider_id)
            if handler:
                handler.kill()

    def invalidate_handler(self, handler_id: str) -> list[str]:
        """Control-plane remediation: drop a dead handler's routing entries."""
        with self._lock:
            victims = [p for p, h in self._handlers.items() if h.handler_id == handler_id]
            for provider_id in victims:
                self._handlers[provider_id].kill()
                del self._handlers[provider_id]
            return victims

    def worker_loads(self) -> dict[int, int]:
        with self._lock:
            loads = {w: 0 for w, alive in self._workers_alive.items() if alive}
            for handler in self._handlers.values():
                if handler.alive and handler.worker in loads:
                    loads[handler.worker] += 1
            return loads

    def handlers(self) -> dict[str, DataProviderHandler]:
        with self._lock:
            return dict(self._handlers)

    # --- routing ---

    def assign_handler(self, provider_id: str) -> DataProviderHandler:
        """Stable provider-to-handler assignment; allocates on first sight."""
        with self._lock:
            handler = self._handlers.get(provider_id)
            if handler is not None and handler.alive and self._workers_alive.get(handler.worker):
                return handler
            if handler is not None:
                del self._handlers[provider_id]
            loads = self._load_report() if self._load_report else self.worker_loads()
            loads = {w: n for w, n in loads.items() if self._workers_alive.get(w)}
            if not loads:
                raise NoWorkersAvailable("all ingest workers are down")
            worker = min(loads, key=lambda w: (loads[w], w))
            self._handler_instances += 1
            handler = DataProviderHandler(
                provider_id,
                worker,
                self._graph,
                self._objects,
                IdLookupCache(
                    self._objects,
                    max_entries=self._config.cache.max_entries,
                    unknown_policy=self._config.ingest.unknown_marker_policy,
                ),
                epoch=self._epoch,
                instance=self._handler_instances,
            )
            self._handlers[provider_id] = handler
            return handler

    # --- datagram entry point ---

    def handle_datagram(self, data: bytes) -> Optional[ApplyReport]:
        """Decode, route and apply one datagram. Never raises."""
        try:
            message = decode_provider_message(data)
        except RailError as exc:
            self._count(exc.code)
            return None
        try:
            handler = self.assign_handler(message.provider_id)
        except NoWorkersAvailable as exc:
            self._count(exc.code)
            return None
        report = handler.apply(message)
        with self._lock:
            total = self.reports_by_provider.setdefault(message.provider_id, ApplyReport())
            total.merge(report)
        return report
