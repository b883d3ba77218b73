"""Object document store and content-addressed blob store.

Objects are identity-bearing containers of arbitrary attributes (nested maps
addressed by dotted paths), an optional geometry primitive, and references to
large binaries held separately in the blob store.  The store does not
interpret attribute values; it only stores, indexes and matches them.

Objects and spatial frames share one id namespace: every object owns exactly
one frame, so "where is object X" is always answerable by the graph without
an extra mapping table.  Deleting a document never touches the graph.
"""

from __future__ import annotations

import copy
import hashlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .canon import canonical_bytes, sha256_hex
from .changefeed import ChangeEvent, CommitLog, Feed
from .errors import (
    CorruptContent,
    FencedWrite,
    InvalidPath,
    NotFound,
    TooLarge,
    TypeClash,
)
from .geometry import GeometryPrimitive
from .graph_store import validate_frame_id

DEFAULT_INDEX_PATTERNS = ("marker.*.id",)
DEFAULT_BLOB_LIMIT = 256 * 1024 * 1024

Mutation = tuple[str, str, object]  # (path, "set"|"delete", value)


# --- dotted attribute paths ---

def split_path(path: str) -> list[str]:
    if not isinstance(path, str) or not path:
        raise InvalidPath("attribute path must be a non-empty string")
    segments = path.split(".")
    if any(not seg for seg in segments):
        raise InvalidPath(f"attribute path {path!r} has an empty segment")
    return segments


def get_path(tree: dict, path: str):
    """Returns (found, value) without raising on missing segments."""
    node = tree
    for seg in split_path(path):
        if not isinstance(node, dict) or seg not in node:
            return False, None
        node = node[seg]
    return True, node


def set_path(tree: dict, path: str, value) -> None:
    segments = split_path(path)
    node = tree
    for seg in segments[:-1]:
        nxt = node.get(seg)
        if nxt is None:
            nxt = {}
            node[seg] = nxt
        elif not isinstance(nxt, dict):
            raise TypeClash(f"cannot set {path!r}: {seg!r} holds a non-map value")
        node = nxt
    node[segments[-1]] = value


def delete_path(tree: dict, path: str) -> bool:
    segments = split_path(path)
    node = tree
    for seg in segments[:-1]:
        node = node.get(seg)
        if not isinstance(node, dict):
            return False
    return node.pop(segments[-1], _MISSING) is not _MISSING


_MISSING = object()


def walk_paths(tree: dict, prefix: str = "") -> Iterable[tuple[str, object]]:
    """Yield every (dotted path, leaf value) in the attribute tree."""
    for key, value in tree.items():
        path = f"{prefix}.{key}" if prefix else key
        if isinstance(value, dict):
            yield from walk_paths(value, path)
        else:
            yield path, value


def pattern_matches(pattern: str, path: str) -> bool:
    """'*' in a pattern matches exactly one path segment."""
    pseg = pattern.split(".")
    seg = path.split(".")
    return len(pseg) == len(seg) and all(p == "*" or p == s for p, s in zip(pseg, seg))


# --- predicates ---

_NUMERIC_OPS = {"lt", "le", "gt", "ge"}
_OPS = {"eq", "exists"} | _NUMERIC_OPS


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


@dataclass(frozen=True)
class Clause:
    path: str
    op: str
    value: object = None

    def __post_init__(self):
        split_path(self.path)
        if self.op not in _OPS:
            raise ValueError(f"unknown predicate op {self.op!r}")
        if self.op in _NUMERIC_OPS and not _is_number(self.value):
            raise ValueError(f"op {self.op!r} needs a numeric value")

    def matches(self, attributes: dict) -> bool:
        found, value = get_path(attributes, self.path)
        if self.op == "exists":
            return found
        if not found:
            return False
        if self.op == "eq":
            return value == self.value
        if not _is_number(value):
            return False
        if self.op == "lt":
            return value < self.value
        if self.op == "le":
            return value <= self.value
        if self.op == "gt":
            return value > self.value
        return value >= self.value


@dataclass(frozen=True)
class AttributePredicate:
    """Conjunction of clauses; empty matches everything."""

    clauses: tuple[Clause, ...] = ()

    @classmethod
    def of(cls, *clauses: Clause) -> "AttributePredicate":
        return cls(clauses=tuple(clauses))

    @classmethod
    def eq(cls, path: str, value) -> "AttributePredicate":
        return cls.of(Clause(path, "eq", value))

    def matches(self, attributes: dict) -> bool:
        return all(c.matches(attributes) for c in self.clauses)

    def to_json(self) -> list:
        return [{"path": c.path, "op": c.op, **({} if c.op == "exists" else {"value": c.value})} for c in self.clauses]

    @classmethod
    def from_json(cls, obj) -> "AttributePredicate":
        if obj is None:
            return cls()
        if not isinstance(obj, list):
            raise ValueError("predicate must be a list of clauses")
        return cls(clauses=tuple(Clause(c["path"], c["op"], c.get("value")) for c in obj))


# --- documents ---

@dataclass
class ObjectDocument:
    """Identity-bearing container of arbitrary attributes."""

    id: str
    attributes: dict = field(default_factory=dict)
    geometry: Optional[GeometryPrimitive] = None
    blobs: dict = field(default_factory=dict)  # role -> BlobRef
    rev: int = 0
    provisional: bool = False

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "attributes": self.attributes,
            "geometry": self.geometry.to_json() if self.geometry else None,
            "blobs": {role: ref.to_json() for role, ref in sorted(self.blobs.items())},
            "rev": self.rev,
            "provisional": self.provisional,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ObjectDocument":
        return cls(
            id=obj["id"],
            attributes=obj.get("attributes", {}),
            geometry=GeometryPrimitive.from_json(obj["geometry"]) if obj.get("geometry") else None,
            blobs={role: BlobRef.from_json(r) for role, r in obj.get("blobs", {}).items()},
            rev=int(obj.get("rev", 0)),
            provisional=bool(obj.get("provisional", False)),
        )


@dataclass(frozen=True)
class BlobRef:
    hash: str
    size: int
    media_type: str

    def to_json(self) -> dict:
        return {"hash": self.hash, "size": self.size, "media_type": self.media_type}

    @classmethod
    def from_json(cls, obj: dict) -> "BlobRef":
        return cls(hash=obj["hash"], size=int(obj["size"]), media_type=obj.get("media_type", ""))


class ObjectStore:
    """Thread-safe document store with change feed and equality index.

    The equality index covers attribute paths matching the configured
    patterns (default: marker id paths, the hot lookup for ingest).  Writes
    serialize through one commit log; reads return deep-copied snapshots.
    """

    def __init__(self, index_patterns: Iterable[str] = DEFAULT_INDEX_PATTERNS):
        self._lock = threading.RLock()
        self._log = CommitLog("objects", lock=self._lock)
        self._docs: dict[str, ObjectDocument] = {}
        self._index_patterns = tuple(index_patterns)
        self._index: dict[tuple[str, object], set[str]] = {}
        self._indexed_entries: dict[str, set[tuple[str, object]]] = {}
        self._fence_epoch = 0
        self.stats = {"find_objects_calls": 0, "index_served": 0}

    @property
    def log(self) -> CommitLog:
        return self._log

    @property
    def head(self) -> int:
        return self._log.head

    @property
    def published_head(self) -> int:
        return self._log.published_head

    def set_fence_epoch(self, epoch: int) -> None:
        with self._lock:
            if epoch > self._fence_epoch:
                self._fence_epoch = epoch

    def _check_fence(self, epoch: Optional[int]) -> None:
        if epoch is not None and epoch < self._fence_epoch:
            raise FencedWrite(f"write epoch {epoch} < fence epoch {self._fence_epoch}")

    # --- mutations ---

    def upsert_object(
        self,
        object_id: str,
        mutations: Iterable[Mutation] = (),
        geometry: Optional[GeometryPrimitive] = None,
        blobs: Optional[dict] = None,
        provisional: Optional[bool] = None,
        epoch: Optional[int] = None,
    ) -> int:
        """Create or mutate a document; returns the new revision.

        Mutations apply in order against a scratch copy, so a failing
        mutation (InvalidPath, TypeClash) leaves the document untouched and
        does not bump the revision.
        """
        validate_frame_id(object_id, "object id")
        mutations = list(mutations)
        with self._lock:
            self._check_fence(epoch)
            doc = self._docs.get(object_id)
            if doc is None:
                doc = ObjectDocument(id=object_id)
                created = True
            else:
                created = False
            attributes = copy.deepcopy(doc.attributes)
            changed_paths = []
            for path, op, *rest in mutations:
                value = rest[0] if rest else None
                if op == "set":
                    set_path(attributes, path, copy.deepcopy(value))
                elif op == "delete":
                    delete_path(attributes, path)
                else:
                    raise InvalidPath(f"unknown mutation op {op!r}")
                changed_paths.append(path)
            doc.attributes = attributes
            if geometry is not None:
                doc.geometry = geometry
            if blobs:
                doc.blobs.update(blobs)
            if provisional is not None:
                doc.provisional = provisional
            doc.rev += 1
            if created:
                self._docs[object_id] = doc
            self._reindex(doc)
            self._log.append(
                "object_upsert",
                {
                    "id": object_id,
                    "rev": doc.rev,
                    "provisional": doc.provisional,
                    "changed_paths": changed_paths,
                    "doc": copy.deepcopy(doc.to_json()),
                },
            )
            return doc.rev

    def restore_document(self, doc_json: dict, epoch: Optional[int] = None) -> bool:
        """Replace a document wholesale (snapshot import).

        No-op (returns False) when the stored content already equals the
        incoming one, so re-importing a snapshot leaves digests unchanged.
        Revisions are adopted from the snapshot when they do not regress the
        local history.
        """
        incoming = ObjectDocument.from_json(copy.deepcopy(doc_json))
        validate_frame_id(incoming.id, "object id")
        with self._lock:
            self._check_fence(epoch)
            existing = self._docs.get(incoming.id)
            if existing is not None and (
                existing.attributes == incoming.attributes
                and existing.geometry == incoming.geometry
                and existing.blobs == incoming.blobs
                and existing.provisional == incoming.provisional
            ):
                return False
            floor = 1 if existing is None else existing.rev + 1
            incoming.rev = max(floor, incoming.rev)
            changed = {path for path, _ in walk_paths(incoming.attributes)}
            if existing is not None:
                changed.update(path for path, _ in walk_paths(existing.attributes))
            self._docs[incoming.id] = incoming
            self._reindex(incoming)
            self._log.append(
                "object_upsert",
                {
                    "id": incoming.id,
                    "rev": incoming.rev,
                    "provisional": incoming.provisional,
                    "changed_paths": sorted(changed),
                    "doc": copy.deepcopy(incoming.to_json()),
                },
            )
            return True

    def delete_object(self, object_id: str, epoch: Optional[int] = None) -> int:
        """Remove a document; returns the removed revision. Graph edges stay."""
        with self._lock:
            self._check_fence(epoch)
            doc = self._docs.pop(object_id, None)
            if doc is None:
                raise NotFound(f"object {object_id!r} not found")
            self._drop_index_entries(object_id)
            self._log.append(
                "object_delete",
                {"id": object_id, "rev": doc.rev, "doc": copy.deepcopy(doc.to_json())},
            )
            return doc.rev

    def apply_replicated(self, event: ChangeEvent) -> None:
        """Apply a mirrored event verbatim, preserving the master's seq and revs."""
        with self._lock:
            if event.kind == "object_upsert":
                doc = ObjectDocument.from_json(copy.deepcopy(event.payload["doc"]))
                self._docs[doc.id] = doc
                self._reindex(doc)
            elif event.kind == "object_delete":
                self._docs.pop(event.payload["id"], None)
                self._drop_index_entries(event.payload["id"])
            else:
                raise ValueError(f"unknown object event kind {event.kind!r}")
            self._log.append_external(event)

    # --- reads ---

    def get_object(self, object_id: str) -> ObjectDocument:
        with self._lock:
            doc = self._docs.get(object_id)
            if doc is None:
                raise NotFound(f"object {object_id!r} not found")
            return copy.deepcopy(doc)

    def has_object(self, object_id: str) -> bool:
        with self._lock:
            return object_id in self._docs

    def find_objects(self, predicate: Optional[AttributePredicate] = None) -> list[ObjectDocument]:
        """Documents satisfying every clause, ascending id order."""
        predicate = predicate or AttributePredicate()
        with self._lock:
            self.stats["find_objects_calls"] += 1
            candidates = self._candidate_ids(predicate)
            out = []
            for object_id in sorted(candidates):
                doc = self._docs[object_id]
                if predicate.matches(doc.attributes):
                    out.append(copy.deepcopy(doc))
            return out

    def count(self) -> int:
        with self._lock:
            return len(self._docs)

    def changes(
        self,
        cursor: int = 0,
        predicate: Optional[AttributePredicate] = None,
        raw: bool = False,
    ) -> Feed:
        """Change feed; with a predicate, only events whose post-state matches
        (deletes pass if the pre-state matched)."""
        event_filter = None
        if predicate is not None:
            def event_filter(event: ChangeEvent) -> bool:
                return predicate.matches(event.payload["doc"].get("attributes", {}))
        return Feed(self._log, cursor=cursor, predicate=event_filter, raw=raw)

    def snapshot_documents(self) -> list[ObjectDocument]:
        with self._lock:
            return [copy.deepcopy(self._docs[k]) for k in sorted(self._docs)]

    def digest(self) -> str:
        return sha256_hex(canonical_bytes([d.to_json() for d in self.snapshot_documents()]))

    # --- index ---

    def _candidate_ids(self, predicate: AttributePredicate):
        for clause in predicate.clauses:
            if clause.op != "eq" or not self._scalar(clause.value):
                continue
            if any(pattern_matches(p, clause.path) for p in self._index_patterns):
                self.stats["index_served"] += 1
                return set(self._index.get((clause.path, clause.value), ()))
        return self._docs.keys()

    @staticmethod
    def _scalar(value) -> bool:
        return isinstance(value, (str, int, float, bool)) or value is None

    def _reindex(self, doc: ObjectDocument) -> None:
        fresh = {
            (path, value)
            for path, value in walk_paths(doc.attributes)
            if self._scalar(value) and any(pattern_matches(p, path) for p in self._index_patterns)
        }
        old = self._indexed_entries.get(doc.id, set())
        for entry in old - fresh:
            bucket = self._index.get(entry)
            if bucket is not None:
                bucket.discard(doc.id)
                if not bucket:
                    del self._index[entry]
        for entry in fresh - old:
            self._index.setdefault(entry, set()).add(doc.id)
        if fresh:
            self._indexed_entries[doc.id] = fresh
        else:
            self._indexed_entries.pop(doc.id, None)

    def _drop_index_entries(self, object_id: str) -> None:
        for entry in self._indexed_entries.pop(object_id, ()):
            bucket = self._index.get(entry)
            if bucket is not None:
                bucket.discard(object_id)
                if not bucket:
                    del self._index[entry]


class BlobStore:
    """Content-addressed store for large binaries (SHA-256, deduplicating)."""

    def __init__(self, max_bytes: int = DEFAULT_BLOB_LIMIT):
        self._lock = threading.RLock()
        self._blobs: dict[str, tuple[bytes, str]] = {}
        self._max_bytes = max_bytes
        self._put_hooks: list[Callable[[bytes, str], None]] = []

    def on_put(self, hook: Callable[[bytes, str], None]) -> None:
        with self._lock:
            self._put_hooks.append(hook)

    def put(self, content: bytes, media_type: str = "application/octet-stream") -> BlobRef:
        """Store content; identical bytes yield the identical ref."""
        if not isinstance(content, (bytes, bytearray)):
            raise TypeError("blob content must be bytes")
        content = bytes(content)
        if len(content) > self._max_bytes:
            raise TooLarge(f"blob of {len(content)} bytes exceeds limit {self._max_bytes}")
        digest = hashlib.sha256(content).hexdigest()
        with self._lock:
            if digest not in self._blobs:
                self._blobs[digest] = (content, media_type)
            stored_type = self._blobs[digest][1]
            hooks = list(self._put_hooks)
        for hook in hooks:
            hook(content, media_type)
        return BlobRef(hash=digest, size=len(content), media_type=stored_type)

    def get(self, ref) -> bytes:
        """Fetch by BlobRef or hex digest; verifies content integrity."""
        digest = ref.hash if isinstance(ref, BlobRef) else ref
        with self._lock:
            entry = self._blobs.get(digest)
        if entry is None:
            raise NotFound(f"blob {digest!r} not found")
        content = entry[0]
        if hashlib.sha256(content).hexdigest() != digest:
            raise CorruptContent(f"blob {digest!r} failed digest verification")
        return content

    def ref(self, digest: str) -> BlobRef:
        with self._lock:
            entry = self._blobs.get(digest)
        if entry is None:
            raise NotFound(f"blob {digest!r} not found")
        return BlobRef(hash=digest, size=len(entry[0]), media_type=entry[1])

    def refs(self) -> list[BlobRef]:
        with self._lock:
            return [
                BlobRef(hash=h, size=len(c), media_type=m)
                for h, (c, m) in sorted(self._blobs.items())
            ]

    def count(self) -> int:
        with self._lock:
            return len(self._blobs)

    def digest(self) -> str:
        with self._lock:
            manifest = [
                {"hash": h, "size": len(c), "media_type": m}
                for h, (c, m) in sorted(self._blobs.items())
            ]
        return sha256_hex(canonical_bytes(manifest))
