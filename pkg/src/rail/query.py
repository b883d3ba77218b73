"""Query plane: request execution, spatial range queries, subscriptions.

Each query is served by a fresh, isolated evaluation (mirroring one serving
context per consumer session); a subscription keeps its context alive and
re-evaluates the query after every relevant store commit, emitting
entered/left/changed deltas in commit order, exactly once per stream.

Requests and responses are plain dicts matching the framed wire protocol:

    {"id": 7, "op": "get_transform", "src": "A", "dst": "C",
     "constraints": {"max_hops": 4}, "follow": false}
    {"id": 7, "ok": true, "result": {...}, "as_of": {"graph": 123, "objects": 456}}
    {"id": 7, "ok": false, "error": "NoPath", "reason": "constraint_filtered"}
    {"sub": 7, "seq": {"graph": 124}, "delta": "changed", "payload": {...}}
"""

from __future__ import annotations

import base64
import math
import threading
from typing import Optional

from .canon import canonical_json
from .config import RailConfig
from .datastores import AttributePredicate, BlobStore, ObjectStore
from .errors import MalformedQuery, NoPath, NotFound, RailError, UnknownFrame
from .geometry import GeometryPrimitive, intersects_sphere
from .graph_store import GraphStore, PathConstraints

FOLLOWABLE_OPS = ("get_object", "find_objects", "get_transform", "range_query")
ALL_OPS = FOLLOWABLE_OPS + ("get_blob",)


def _distance(a, b) -> float:
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


class QueryEngine:
    """Splits queries across the three stores and aggregates the answers."""

    def __init__(
        self,
        graph_store: GraphStore,
        object_store: ObjectStore,
        blob_store: Optional[BlobStore] = None,
        config: Optional[RailConfig] = None,
    ):
        self._graph = graph_store
        self._objects = object_store
        self._blobs = blob_store
        self._config = config or RailConfig()
        self._sub_lock = threading.Lock()
        self._next_sub = 0

    # --- request entry points ---

    def execute(self, request: dict) -> dict:
        """Run one request/response query; returns the response frame."""
        request_id = request.get("id")
        try:
            op = self._validated_op(request)
            as_of = {"graph": self._graph.published_head, "objects": self._objects.published_head}
            result = self._dispatch(op, request)
            return {"id": request_id, "ok": True, "result": result, "as_of": as_of}
        except RailError as exc:
            return self._error_frame(request_id, exc)

    def open_subscription(self, request: dict) -> tuple[dict, "Subscription"]:
        """Initial result plus a live subscription for a follow query."""
        request_id = request.get("id")
        op = self._validated_op(request)
        if op not in FOLLOWABLE_OPS or not request.get("follow"):
            raise MalformedQuery(f"op {op!r} is not followable or follow flag missing")
        with self._sub_lock:
            self._next_sub += 1
            sub_id = request_id if request_id is not None else self._next_sub
        as_of = {"graph": self._graph.published_head, "objects": self._objects.published_head}
        try:
            result = self._dispatch(op, request)
            response = {"id": request_id, "ok": True, "result": result, "as_of": as_of}
        except (NoPath, NotFound) as exc:
            # A subscription may legitimately start on an empty answer (no
            # path yet, object not created yet) and fill in later.
            result = None
            response = self._error_frame(request_id, exc)
            response["as_of"] = as_of
        subscription = Subscription(self, sub_id, op, request, result, as_of)
        return response, subscription

    def _error_frame(self, request_id, exc: RailError) -> dict:
        reason = getattr(exc, "reason", None) or exc.message
        return {"id": request_id, "ok": False, "error": exc.code, "reason": reason}

    def _validated_op(self, request: dict) -> str:
        if not isinstance(request, dict):
            raise MalformedQuery("request must be an object")
        op = request.get("op")
        if op not in ALL_OPS:
            raise MalformedQuery(f"unknown op {op!r}")
        if request.get("follow") and op not in FOLLOWABLE_OPS:
            raise MalformedQuery(f"op {op!r} cannot be followed")
        return op

    # --- dispatch ---

    def _dispatch(self, op: str, request: dict) -> dict:
        try:
            if op == "get_object":
                return {"object": self._objects.get_object(self._str_param(request, "object")).to_json()}
            if op == "find_objects":
                predicate = self._predicate(request)
                return {"objects": [d.to_json() for d in self._objects.find_objects(predicate)]}
            if op == "get_transform":
                result = self._graph.best_path(
                    self._str_param(request, "src"),
                    self._str_param(request, "dst"),
                    PathConstraints.from_json(request.get("constraints")),
                )
                return result.to_json()
            if op == "range_query":
                return self.range_query(
                    frame=self._str_param(request, "frame"),
                    center=self._center(request),
                    radius=self._radius(request),
                    predicate=self._predicate(request),
                    constraints=PathConstraints.from_json(request.get("constraints")),
                )
            if op == "get_blob":
                if self._blobs is None:
                    raise MalformedQuery("blob store not available")
                content = self._blobs.get(self._str_param(request, "hash"))
                ref = self._blobs.ref(self._str_param(request, "hash"))
                return {
                    "hash": ref.hash,
                    "size": ref.size,
                    "media_type": ref.media_type,
                    "data_b64": base64.b64encode(content).decode("ascii"),
                }
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedQuery(str(exc))
        raise MalformedQuery(f"unknown op {op!r}")

    @staticmethod
    def _str_param(request: dict, name: str) -> str:
        value = request.get(name)
        if not isinstance(value, str) or not value:
            raise MalformedQuery(f"parameter {name!r} must be a non-empty string")
        return value

    @staticmethod
    def _center(request: dict):
        center = request.get("center", [0.0, 0.0, 0.0])
        if not isinstance(center, (list, tuple)) or len(center) != 3:
            raise MalformedQuery("'center' must be 3 numbers")
        return tuple(float(v) for v in center)

    @staticmethod
    def _radius(request: dict) -> float:
        radius = request.get("radius")
        if not isinstance(radius, (int, float)) or isinstance(radius, bool) or radius < 0:
            raise MalformedQuery("'radius' must be a number >= 0")
        return float(radius)

    @staticmethod
    def _predicate(request: dict) -> AttributePredicate:
        try:
            return AttributePredicate.from_json(request.get("predicate"))
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedQuery(f"bad predicate: {exc}")

    # --- range queries ---

    def range_query(
        self,
        frame: str,
        center,
        radius: float,
        predicate: AttributePredicate,
        constraints: Optional[PathConstraints] = None,
    ) -> dict:
        """Objects matching the predicate whose geometry intersects the ball.

        Each candidate's pose is resolved through the graph from ``frame``;
        unreachable candidates are counted, not errors.  Results sort by
        distance from the object's frame origin to the ball center, ties by
        id.
        """
        if not self._graph.has_frame(frame):
            raise UnknownFrame(f"frame {frame!r} has no graph presence")
        matches = []
        excluded_unreachable = 0
        for doc in self._objects.find_objects(predicate):
            try:
                path = self._graph.best_path(frame, doc.id, constraints)
            except NoPath:
                excluded_unreachable += 1
                continue
            primitive = doc.geometry or GeometryPrimitive.point()
            if intersects_sphere(primitive, path.pose, center, radius):
                matches.append({
                    "id": doc.id,
                    "pose": path.pose.to_json(),
                    "distance": _distance(path.pose.t, center),
                })
        matches.sort(key=lambda row: (row["distance"], row["id"]))
        return {"matches": matches, "excluded_unreachable": excluded_unreachable}

    # --- state snapshots for subscriptions ---

    def keyed_result(self, op: str, request: dict) -> dict[str, dict]:
        """Current query answer as a key -> row map for delta diffing."""
        try:
            result = self._dispatch(op, request)
        except (NoPath, NotFound):
            return {}
        if op == "get_object":
            doc = result["object"]
            return {doc["id"]: doc}
        if op == "find_objects":
            return {doc["id"]: doc for doc in result["objects"]}
        if op == "get_transform":
            return {"transform": result}
        if op == "range_query":
            return {row["id"]: row for row in result["matches"]}
        raise MalformedQuery(f"op {op!r} has no keyed form")


class Subscription:
    """Live continuation of a follow query.

    ``pump()`` drains newly committed store events, re-evaluates the query
    once per relevant event and returns the resulting delta frames.  If the
    consumer lags more than the configured buffer of events, the stream ends
    with an explicit overflow frame and must be re-opened.
    """

    def __init__(self, engine: QueryEngine, sub_id, op: str, request: dict, initial, as_of: dict):
        self._engine = engine
        self.sub_id = sub_id
        self.op = op
        self.request = request
        self.closed = False
        self._buffer_limit = engine._config.query.subscription_buffer
        self._graph_feed = engine._graph.changes(cursor=as_of["graph"])
        self._object_feed = engine._objects.changes(cursor=as_of["objects"])
        self._state = self._keyed(initial)
        self.last_delivered = dict(as_of)

    def _keyed(self, result) -> dict:
        if result is None:
            return {}
        if self.op == "get_object":
            return {result["object"]["id"]: result["object"]}
        if self.op == "find_objects":
            return {doc["id"]: doc for doc in result["objects"]}
        if self.op == "get_transform":
            return {"transform": result}
        if self.op == "range_query":
            return {row["id"]: row for row in result["matches"]}
        return {}

    def _relevant(self, event) -> bool:
        if self.op in ("get_object", "find_objects"):
            return event.store == "objects"
        if self.op == "get_transform":
            return event.store == "graph"
        return True  # range_query depends on both stores

    def pump(self) -> list[dict]:
        """Process pending commits; returns delta frames in commit order."""
        if self.closed:
            return []
        backlog = (
            self._engine._graph.published_head - self._graph_feed.cursor
            + self._engine._objects.published_head - self._object_feed.cursor
        )
        if backlog > self._buffer_limit:
            self.closed = True
            return [{"sub": self.sub_id, "error": "SubscriptionOverflow",
                     "pending": backlog, "limit": self._buffer_limit}]
        frames = []
        for event in self._merged_events():
            self.last_delivered[event.store] = event.seq
            if not self._relevant(event):
                continue
            frames.extend(self._diff_after(event))
        return frames

    def _merged_events(self):
        # Events from both stores, each already in commit order; interleave
        # deterministically (graph first per pump round).
        yield from self._graph_feed.poll()
        yield from self._object_feed.poll()

    def _diff_after(self, event) -> list[dict]:
        try:
            fresh = self._engine.keyed_result(self.op, self.request)
        except RailError:
            fresh = {}
        frames = []
        seq = {event.store: event.seq}
        old = self._state
        for key in old:
            if key not in fresh:
                frames.append({"sub": self.sub_id, "seq": seq, "delta": "left",
                               "payload": {"key": key}})
        for key, row in fresh.items():
            if key not in old:
                frames.append({"sub": self.sub_id, "seq": seq, "delta": "entered",
                               "payload": row})
            elif canonical_json(row) != canonical_json(old[key]):
                frames.append({"sub": self.sub_id, "seq": seq, "delta": "changed",
                               "payload": row})
        self._state = fresh
        return frames

    def close(self) -> None:
        self.closed = True
        self._graph_feed.close()
        self._object_feed.close()

    def wait_for_event(self, timeout: Optional[float] = None) -> bool:
        """Block until either store commits past our cursors (server mode)."""
        import time as _time

        deadline = None if timeout is None else _time.monotonic() + timeout
        while not self.closed:
            if (self._engine._graph.published_head > self._graph_feed.cursor
                    or self._engine._objects.published_head > self._object_feed.cursor):
                return True
            slice_end = 0.02 if deadline is None else min(0.02, deadline - _time.monotonic())
            if slice_end <= 0:
                return False
            self._engine._graph.log.wait_for(self._graph_feed.cursor, timeout=slice_end)
        return False
