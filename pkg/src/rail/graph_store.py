"""Spatial graph store: frames connected by weighted transform observations.

A dynamic directed multigraph.  Nodes are coordinate frames of modelled
entities; edges are timestamped relative 6D transforms carrying a scalar
positional uncertainty (sigma, meters, root-sum-square along a path) and a
resolution (meters, a path is as coarse as its coarsest edge).  At most one
live edge exists per (parent, child, provider); newer observations replace
older ones (last-write-wins on (time_us, seq)), which makes ingest tolerant
of duplicated and reordered datagrams.

``best_path`` returns the optimal transform between two frames, minimizing
lexicographically: accumulated sigma, then path resolution, then hop count,
then the edge-key sequence (a deterministic tie-break).  Edges are traversable
in both directions; inverse traversal inverts the pose and keeps sigma and
resolution.
"""

from __future__ import annotations

import heapq
import math
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, NamedTuple, Optional

from . import geometry
from .canon import canonical_bytes, sha256_hex
from .changefeed import ChangeEvent, CommitLog, Feed
from .errors import FencedWrite, InvalidObservation, NoPath
from .geometry import Pose6D

MAX_FRAME_ID_BYTES = 128


def validate_frame_id(frame_id: str, what: str = "frame id") -> str:
    if not isinstance(frame_id, str) or not frame_id:
        raise InvalidObservation(f"{what} must be a non-empty string")
    if len(frame_id.encode("utf-8")) > MAX_FRAME_ID_BYTES:
        raise InvalidObservation(f"{what} exceeds {MAX_FRAME_ID_BYTES} bytes")
    if any(ch.isspace() for ch in frame_id):
        raise InvalidObservation(f"{what} must not contain whitespace")
    return frame_id


class EdgeKey(NamedTuple):
    parent: str
    child: str
    provider: str


class EdgeUpdateResult(Enum):
    APPLIED = "applied"
    SUPERSEDED = "superseded"


@dataclass(frozen=True)
class TransformObservation:
    """One directed, weighted, timestamped edge sample.

    ``pose`` expresses the child frame in the parent frame.  ``sigma`` is the
    1-standard-deviation positional uncertainty in meters (>= 0);
    ``resolution`` the smallest distinguishable displacement in meters (> 0,
    larger = coarser).  ``seq`` is the sending provider's monotone counter,
    used with ``time_us`` for last-write-wins ordering.
    """

    parent: str
    child: str
    provider: str
    pose: Pose6D
    sigma: float
    resolution: float
    time_us: int
    seq: int = 0

    def validate(self) -> "TransformObservation":
        validate_frame_id(self.parent, "parent frame")
        validate_frame_id(self.child, "child frame")
        if not self.provider:
            raise InvalidObservation("provider must be non-empty")
        if self.parent == self.child:
            raise InvalidObservation("parent and child frames must differ")
        if not (self.sigma >= 0.0) or not math.isfinite(self.sigma):
            raise InvalidObservation(f"sigma must be finite and >= 0, got {self.sigma!r}")
        if not (self.resolution > 0.0) or not math.isfinite(self.resolution):
            raise InvalidObservation(f"resolution must be finite and > 0, got {self.resolution!r}")
        return self

    @property
    def key(self) -> EdgeKey:
        return EdgeKey(self.parent, self.child, self.provider)

    def to_json(self) -> dict:
        return {
            "parent": self.parent,
            "child": self.child,
            "provider": self.provider,
            "pose": self.pose.to_json(),
            "sigma": self.sigma,
            "resolution": self.resolution,
            "time_us": self.time_us,
            "seq": self.seq,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TransformObservation":
        return cls(
            parent=obj["parent"],
            child=obj["child"],
            provider=obj["provider"],
            pose=Pose6D.from_json(obj["pose"]),
            sigma=float(obj["sigma"]),
            resolution=float(obj["resolution"]),
            time_us=int(obj["time_us"]),
            seq=int(obj.get("seq", 0)),
        )


@dataclass(frozen=True)
class PathConstraints:
    """Query-side filters over edge weights; all present values must be > 0."""

    max_sigma: Optional[float] = None
    max_resolution: Optional[float] = None
    max_age_us: Optional[int] = None
    max_hops: Optional[int] = None

    def __post_init__(self):
        for name in ("max_sigma", "max_resolution", "max_age_us", "max_hops"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ValueError(f"{name} must be > 0, got {value!r}")

    @classmethod
    def from_json(cls, obj: Optional[dict]) -> "PathConstraints":
        obj = obj or {}
        return cls(
            max_sigma=obj.get("max_sigma"),
            max_resolution=obj.get("max_resolution"),
            max_age_us=obj.get("max_age_us"),
            max_hops=obj.get("max_hops"),
        )


@dataclass(frozen=True)
class PathResult:
    """Optimal transform between two frames plus its aggregate weights.

    ``pose`` maps coordinates of the destination frame into the source frame
    and equals the ordered composition of the reported edge poses (inverted
    where direction is ``inverse``), so callers can recheck it independently.
    """

    pose: Pose6D
    sigma: float
    resolution: float
    hops: int
    edges: tuple[tuple[EdgeKey, str], ...]
    oldest_time_us: Optional[int]

    def to_json(self) -> dict:
        return {
            "pose": self.pose.to_json(),
            "sigma": self.sigma,
            "resolution": self.resolution,
            "hops": self.hops,
            "edges": [
                {"parent": k.parent, "child": k.child, "provider": k.provider, "direction": d}
                for k, d in self.edges
            ],
            "oldest_time_us": self.oldest_time_us,
        }


def _now_us() -> int:
    return int(time.time() * 1e6)


class GraphStore:
    """Thread-safe spatial graph with a change feed.

    Writes are serialized through one commit log; reads see a consistent
    snapshot no older than the last completed commit; feed delivery order
    equals commit order.
    """

    def __init__(self, clock: Optional[Callable[[], int]] = None):
        self._lock = threading.RLock()
        self._log = CommitLog("graph", lock=self._lock)
        self._clock = clock or _now_us
        self._frames: set[str] = set()
        self._edges: dict[EdgeKey, TransformObservation] = {}
        self._fence_epoch = 0

    # --- plumbing ---

    @property
    def log(self) -> CommitLog:
        return self._log

    @property
    def head(self) -> int:
        return self._log.head

    @property
    def published_head(self) -> int:
        return self._log.published_head

    def changes(self, cursor: int = 0, raw: bool = False) -> Feed:
        """Ordered stream of committed graph mutations with seq > cursor."""
        return Feed(self._log, cursor=cursor, raw=raw)

    def set_fence_epoch(self, epoch: int) -> None:
        with self._lock:
            if epoch > self._fence_epoch:
                self._fence_epoch = epoch

    def _check_fence(self, epoch: Optional[int]) -> None:
        if epoch is not None and epoch < self._fence_epoch:
            raise FencedWrite(f"write epoch {epoch} < fence epoch {self._fence_epoch}")

    # --- mutations ---

    def upsert_edge(self, obs: TransformObservation, epoch: Optional[int] = None) -> EdgeUpdateResult:
        """Apply an observation unless an equal-or-newer one already holds the edge.

        Frames are created implicitly on first reference.  Returns
        ``SUPERSEDED`` (state unchanged) when the live edge is newer by
        (time_us, seq), which makes delivery idempotent under at-least-once,
        reordering transports.
        """
        obs.validate()
        with self._lock:
            self._check_fence(epoch)
            live = self._edges.get(obs.key)
            if live is not None and (obs.time_us, obs.seq) <= (live.time_us, live.seq):
                return EdgeUpdateResult.SUPERSEDED
            self._frames.add(obs.parent)
            self._frames.add(obs.child)
            self._edges[obs.key] = obs
            self._log.append("edge_upsert", obs.to_json())
            return EdgeUpdateResult.APPLIED

    def remove_provider(self, provider: str, epoch: Optional[int] = None) -> int:
        """Remove every edge owned by ``provider``; returns the count removed."""
        with self._lock:
            self._check_fence(epoch)
            doomed = sorted(k for k in self._edges if k.provider == provider)
            for key in doomed:
                obs = self._edges.pop(key)
                self._log.append(
                    "edge_remove",
                    {
                        "parent": key.parent,
                        "child": key.child,
                        "provider": key.provider,
                        "removed_time_us": obs.time_us,
                    },
                )
            return len(doomed)

    def apply_replicated(self, event: ChangeEvent) -> None:
        """Apply a mirrored event verbatim, preserving the master's seq."""
        with self._lock:
            if event.kind == "edge_upsert":
                obs = TransformObservation.from_json(event.payload)
                self._frames.add(obs.parent)
                self._frames.add(obs.child)
                self._edges[obs.key] = obs
            elif event.kind == "edge_remove":
                key = EdgeKey(event.payload["parent"], event.payload["child"], event.payload["provider"])
                self._edges.pop(key, None)
            else:
                raise ValueError(f"unknown graph event kind {event.kind!r}")
            self._log.append_external(event)

    # --- reads ---

    def frames(self) -> set[str]:
        with self._lock:
            return set(self._frames)

    def has_frame(self, frame_id: str) -> bool:
        with self._lock:
            return frame_id in self._frames

    def edge_count(self) -> int:
        with self._lock:
            return len(self._edges)

    def snapshot_edges(self) -> list[TransformObservation]:
        """All live edges, sorted by edge key."""
        with self._lock:
            return [self._edges[k] for k in sorted(self._edges)]

    def digest(self) -> str:
        """Content hash of the live graph state (edges sorted by key)."""
        return sha256_hex(canonical_bytes([o.to_json() for o in self.snapshot_edges()]))

    # --- path search ---

    def best_path(
        self,
        src: str,
        dst: str,
        constraints: Optional[PathConstraints] = None,
        now_us: Optional[int] = None,
    ) -> PathResult:
        """Optimal simple path from src to dst under the given constraints.

        Cost order is lexicographic: accumulated sigma (root-sum-square),
        path resolution (max over edges), hop count, then edge-key sequence.
        Raises :class:`NoPath` with reason ``unknown_frame``, ``disconnected``
        or ``constraint_filtered``.
        """
        c = constraints or PathConstraints()
        with self._lock:
            if src not in self._frames or dst not in self._frames:
                raise NoPath("unknown_frame", f"unknown frame {src!r}" if src not in self._frames else f"unknown frame {dst!r}")
            edges = dict(self._edges)
        if src == dst:
            return PathResult(
                pose=Pose6D.identity(), sigma=0.0, resolution=0.0, hops=0,
                edges=(), oldest_time_us=None,
            )

        now = self._clock() if now_us is None else now_us
        usable: dict[EdgeKey, TransformObservation] = {}
        for key, obs in edges.items():
            if c.max_age_us is not None and now - obs.time_us > c.max_age_us:
                continue
            if c.max_resolution is not None and obs.resolution > c.max_resolution:
                continue
            usable[key] = obs

        adjacency: dict[str, list[tuple[EdgeKey, str, str]]] = {}
        for key in sorted(usable):
            adjacency.setdefault(key.parent, []).append((key, key.child, "forward"))
            adjacency.setdefault(key.child, []).append((key, key.parent, "inverse"))

        result = self._search(src, dst, usable, adjacency, c)
        if result is not None:
            return result

        if self._reachable_unfiltered(src, dst, edges):
            raise NoPath("constraint_filtered", f"all paths {src!r}->{dst!r} violate constraints")
        raise NoPath("disconnected", f"no path {src!r}->{dst!r}")

    def _search(
        self,
        src: str,
        dst: str,
        usable: dict[EdgeKey, TransformObservation],
        adjacency: dict[str, list[tuple[EdgeKey, str, str]]],
        c: PathConstraints,
    ) -> Optional[PathResult]:
        # Multi-label best-first search.  A label is one walk from src; the
        # heap pops labels in the exact lexicographic cost order, and every
        # extension strictly increases the cost tuple (hops always grow), so
        # the first label popped at dst is the optimum.  Plain one-label
        # Dijkstra is not exact here: the resolution component aggregates as
        # max, which can erase a strict advantage and let a path that was
        # dominated at an intermediate node win later on hop count.
        #
        # The key sequence uniquely identifies a walk from a fixed src (the
        # current node determines traversal direction), so heap entries never
        # compare beyond it.
        start = (0.0, 0.0, 0, (), src, Pose6D.identity(), None)
        heap = [start]
        labels: dict[str, list[tuple[float, float, int, tuple]]] = {src: [(0.0, 0.0, 0, ())]}

        while heap:
            sigma2, rho, hops, keyseq, node, pose, oldest = heapq.heappop(heap)
            if node == dst:
                return PathResult(
                    pose=pose,
                    sigma=math.sqrt(sigma2),
                    resolution=rho,
                    hops=hops,
                    edges=tuple(zip(keyseq, self._directions(src, keyseq))),
                    oldest_time_us=oldest,
                )
            if c.max_hops is not None and hops >= c.max_hops:
                continue
            for key, neighbor, direction in adjacency.get(node, ()):
                obs = usable[key]
                nsigma2 = sigma2 + obs.sigma * obs.sigma
                if c.max_sigma is not None and math.sqrt(nsigma2) > c.max_sigma:
                    continue
                nrho = max(rho, obs.resolution)
                nlabel = (nsigma2, nrho, hops + 1, keyseq + (key,))
                existing = labels.setdefault(neighbor, [])
                if any(self._dominates(ex, nlabel) for ex in existing):
                    continue
                existing.append(nlabel)
                step = obs.pose if direction == "forward" else geometry.invert(obs.pose)
                npose = geometry.compose(pose, step)
                noldest = obs.time_us if oldest is None else min(oldest, obs.time_us)
                heapq.heappush(heap, (*nlabel, neighbor, npose, noldest))
        return None

    @staticmethod
    def _dominates(ex: tuple, new: tuple) -> bool:
        # ex renders new redundant only if every extension of new is at least
        # matched by the same extension of ex under the lexicographic order.
        # With equal hop counts the key sequences (equal length) decide; with
        # fewer hops the hop component decides before sequences are compared.
        if ex[0] > new[0] or ex[1] > new[1]:
            return False
        if ex[2] < new[2]:
            return True
        if ex[2] == new[2]:
            return ex[3] <= new[3]
        return False

    @staticmethod
    def _directions(src: str, keyseq: tuple[EdgeKey, ...]) -> list[str]:
        directions = []
        node = src
        for key in keyseq:
            if node == key.parent:
                directions.append("forward")
                node = key.child
            else:
                directions.append("inverse")
                node = key.parent
        return directions

    @staticmethod
    def _reachable_unfiltered(src: str, dst: str, edges: dict[EdgeKey, TransformObservation]) -> bool:
        neighbors: dict[str, set[str]] = {}
        for key in edges:
            neighbors.setdefault(key.parent, set()).add(key.child)
            neighbors.setdefault(key.child, set()).add(key.parent)
        seen = {src}
        stack = [src]
        while stack:
            node = stack.pop()
            if node == dst:
                return True
            for nxt in neighbors.get(node, ()):
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return False
