"""Map snapshot files: all documents, calibration edges and blobs in one
canonical JSON file (sorted keys), importable idempotently.

Snapshots are an operator exchange format for map authoring, not a live
persistence layer; the system's state of record stays in memory.
"""

from __future__ import annotations

import base64
import binascii
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .canon import canonical_json
from .datastores import BlobStore, ObjectStore
from .errors import MalformedSnapshot
from .graph_store import GraphStore, TransformObservation

SNAPSHOT_FORMAT = "rail-snapshot"
SNAPSHOT_VERSION = 1


@dataclass
class ImportCounts:
    objects: int = 0
    edges: int = 0
    blobs: int = 0

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.objects, self.edges, self.blobs)


def export_snapshot(
    object_store: Optional[ObjectStore] = None,
    graph_store: Optional[GraphStore] = None,
    blob_store: Optional[BlobStore] = None,
) -> dict:
    objects = [d.to_json() for d in object_store.snapshot_documents()] if object_store else []
    edges = [o.to_json() for o in graph_store.snapshot_edges()] if graph_store else []
    blobs = []
    if blob_store:
        for ref in blob_store.refs():
            blobs.append(
                {
                    "hash": ref.hash,
                    "size": ref.size,
                    "media_type": ref.media_type,
                    "data_b64": base64.b64encode(blob_store.get(ref)).decode("ascii"),
                }
            )
    return {
        "format": SNAPSHOT_FORMAT,
        "v": SNAPSHOT_VERSION,
        "objects": objects,
        "edges": edges,
        "blobs": blobs,
    }


def write_snapshot(path, snapshot: dict) -> None:
    Path(path).write_text(canonical_json(snapshot) + "\n", encoding="utf-8")


def read_snapshot(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise MalformedSnapshot(f"cannot read snapshot: {exc}")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedSnapshot(f"snapshot is not valid JSON at line {exc.lineno}, column {exc.colno}")
    validate_snapshot(data)
    return data


def validate_snapshot(data) -> None:
    if not isinstance(data, dict):
        raise MalformedSnapshot("snapshot root must be an object")
    if data.get("format") != SNAPSHOT_FORMAT:
        raise MalformedSnapshot(f"field 'format' must be {SNAPSHOT_FORMAT!r}, got {data.get('format')!r}")
    if data.get("v") != SNAPSHOT_VERSION:
        raise MalformedSnapshot(f"field 'v' must be {SNAPSHOT_VERSION}, got {data.get('v')!r}")
    for section in ("objects", "edges", "blobs"):
        if not isinstance(data.get(section, []), list):
            raise MalformedSnapshot(f"field {section!r} must be a list")


def import_snapshot(
    data: dict,
    object_store: Optional[ObjectStore] = None,
    graph_store: Optional[GraphStore] = None,
    blob_store: Optional[BlobStore] = None,
) -> ImportCounts:
    """Load a snapshot into the stores.

    Idempotent: importing twice yields the same end state as once (objects
    replace by id with their snapshot attributes, edges upsert by key, blobs
    deduplicate by content).  Revisions still advance on re-import; content
    does not change.
    """
    validate_snapshot(data)
    counts = ImportCounts()
    for i, entry in enumerate(data.get("blobs", [])):
        if blob_store is None:
            break
        try:
            content = base64.b64decode(entry["data_b64"], validate=True)
        except (KeyError, binascii.Error, TypeError) as exc:
            raise MalformedSnapshot(f"blobs[{i}]: bad or missing data_b64 ({exc})")
        ref = blob_store.put(content, entry.get("media_type", "application/octet-stream"))
        if "hash" in entry and entry["hash"] != ref.hash:
            raise MalformedSnapshot(f"blobs[{i}]: content hashes to {ref.hash}, manifest says {entry['hash']}")
        counts.blobs += 1
    for i, entry in enumerate(data.get("objects", [])):
        if object_store is None:
            break
        try:
            object_store.restore_document(entry)
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedSnapshot(f"objects[{i}]: {exc}")
        counts.objects += 1
    for i, entry in enumerate(data.get("edges", [])):
        if graph_store is None:
            break
        try:
            obs = TransformObservation.from_json(entry)
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedSnapshot(f"edges[{i}]: {exc}")
        graph_store.upsert_edge(obs)
        counts.edges += 1
    return counts
