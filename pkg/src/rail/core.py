"""One node's worth of rail: the three stores plus ingest and query planes.

A core can serve as master (its planes accept writes and queries) or as a
mirroring slave.  Promotion raises the role epochs and fences the stores so
any write still stamped with the old master's epoch bounces.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional

from .config import RailConfig
from .datastores import BlobStore, ObjectStore
from .graph_store import GraphStore
from .ingest import IngestPlane
from .query import QueryEngine


class RailCore:
    def __init__(
        self,
        config: Optional[RailConfig] = None,
        clock: Optional[Callable[[], int]] = None,
        node_id: str = "n1",
        active: bool = True,
    ):
        self.config = config or RailConfig()
        self.node_id = node_id
        self.active = active
        self._lock = threading.Lock()
        self.graph = GraphStore(clock=clock)
        self.objects = ObjectStore(index_patterns=self.config.store.index_paths)
        self.blobs = BlobStore(max_bytes=self.config.store.blob_limit_bytes)
        self.epochs: dict[str, int] = {"ingest": 1, "query": 1, "mgmt": 1}
        self.ingest = IngestPlane(
            self.graph,
            self.objects,
            self.blobs,
            config=self.config,
            epoch=lambda: self.epochs["ingest"],
        )
        self.query = QueryEngine(self.graph, self.objects, self.blobs, config=self.config)

    def digests(self) -> dict:
        return {
            "graph": self.graph.digest(),
            "objects": self.objects.digest(),
            "blobs": self.blobs.digest(),
        }

    def handle_provider_datagram(self, data: bytes):
        """Ingest entry point; inactive (slave/demoted) cores drop traffic."""
        if not self.active:
            self.ingest.counters["not_master"] = self.ingest.counters.get("not_master", 0) + 1
            return None
        return self.ingest.handle_datagram(data)

    def promote(self, role_epochs: dict[str, int]) -> None:
        """Become master at the given role epochs; fence out older writers."""
        with self._lock:
            self.active = True
            for role, epoch in role_epochs.items():
                self.epochs[role] = epoch
            fence = max(role_epochs.values(), default=self.epochs["ingest"])
            self.graph.set_fence_epoch(fence)
            self.objects.set_fence_epoch(fence)
            # A fresh master publishes everything it has; a new sync link
            # re-gates from here on.
            self.graph.log.set_gated(False)
            self.objects.log.set_gated(False)

    def demote(self, observed_epoch: int) -> None:
        """Stop serving after seeing a higher-epoch master announcement."""
        with self._lock:
            self.active = False
            self.graph.set_fence_epoch(observed_epoch)
            self.objects.set_fence_epoch(observed_epoch)
