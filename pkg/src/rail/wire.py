"""Wire formats: provider datagrams, discovery announcements, framed streams.

All encodings are canonical JSON (UTF-8, sorted keys).  Provider messages fit
in a single UDP datagram; the same payload is accepted newline-delimited over
TCP for larger attribute upserts.  The consumer protocol frames each JSON
message with a 4-byte big-endian length prefix.

Decoders are total: any input yields either a parsed value or a typed error,
never an unhandled exception.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Optional, Union

from .canon import canonical_bytes
from .errors import (
    InvalidTransform,
    MalformedAnnouncement,
    MalformedMessage,
    UnsupportedVersion,
)
from .geometry import Pose6D

WIRE_VERSION = 1
MAX_OBSERVATIONS_PER_MESSAGE = 64
MAX_PROVIDER_DATAGRAM_BYTES = 60 * 1024
FRAME_HEADER = struct.Struct(">I")
DEFAULT_MAX_FRAME_BYTES = 16 * 1024 * 1024

ANNOUNCE_ROLES = ("ingest", "query", "mgmt")


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise MalformedMessage(message)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


@dataclass(frozen=True)
class Detection:
    """A sensed external entity: marker kind + external id (or a direct
    object id for calibration-style providers) plus the observed pose."""

    pose: Pose6D
    sigma: float
    resolution: float
    kind: str = ""
    ext_id: str = ""
    object_id: str = ""  # set instead of (kind, ext_id) for direct addressing

    def to_json(self) -> dict:
        out = {"item": "detection", "pose": self.pose.to_json(),
               "sigma": self.sigma, "res": self.resolution}
        if self.object_id:
            out["object"] = self.object_id
        else:
            out["kind"] = self.kind
            out["ext_id"] = self.ext_id
        return out


@dataclass(frozen=True)
class AttributeUpsert:
    mutations: tuple  # of (path, op, value)
    object_id: str = ""
    kind: str = ""
    ext_id: str = ""

    def to_json(self) -> dict:
        out = {"item": "attribute_upsert",
               "mutations": [[p, op] if op == "delete" else [p, op, v] for p, op, v in self.mutations]}
        if self.object_id:
            out["object"] = self.object_id
        else:
            out["object"] = {"kind": self.kind, "ext_id": self.ext_id}
        return out


ObservationItem = Union[Detection, AttributeUpsert]


@dataclass(frozen=True)
class ProviderMessage:
    provider_id: str
    provider_type: str
    seq: int
    time_us: int
    observations: tuple = ()
    v: int = WIRE_VERSION

    def to_json(self) -> dict:
        return {
            "v": self.v,
            "provider": {"id": self.provider_id, "type": self.provider_type},
            "seq": self.seq,
            "time_us": self.time_us,
            "observations": [item.to_json() for item in self.observations],
        }


def encode_provider_message(message: ProviderMessage) -> bytes:
    return canonical_bytes(message.to_json())


def _decode_pose(item: dict) -> Pose6D:
    has_pose = "pose" in item
    has_mat = "tf_mat" in item
    _require(has_pose != has_mat, "observation needs exactly one of 'pose' or 'tf_mat'")
    if has_mat:
        mat = item["tf_mat"]
        _require(isinstance(mat, list) and len(mat) == 16 and all(_is_num(v) for v in mat),
                 "'tf_mat' must be 16 numbers, row-major")
        try:
            return Pose6D.from_matrix(mat)
        except ValueError as exc:
            raise InvalidTransform(str(exc))
    pose = item["pose"]
    _require(isinstance(pose, dict), "'pose' must be an object")
    t = pose.get("t")
    q = pose.get("q")
    _require(isinstance(t, list) and len(t) == 3 and all(_is_num(v) for v in t),
             "'pose.t' must be 3 numbers")
    _require(isinstance(q, list) and len(q) == 4 and all(_is_num(v) for v in q),
             "'pose.q' must be 4 numbers")
    try:
        return Pose6D(t=tuple(t), q=tuple(q))
    except ValueError as exc:
        raise InvalidTransform(str(exc))


def _decode_mutations(raw) -> tuple:
    _require(isinstance(raw, list), "'mutations' must be a list")
    out = []
    for m in raw:
        _require(isinstance(m, list) and len(m) in (2, 3), "mutation must be [path, op, value?]")
        path, op = m[0], m[1]
        _require(isinstance(path, str) and bool(path), "mutation path must be a non-empty string")
        _require(op in ("set", "delete"), f"mutation op must be set|delete, got {op!r}")
        _require(op == "set" or len(m) == 2, "delete mutation takes no value")
        out.append((path, op, m[2] if len(m) == 3 else None))
    return tuple(out)


def _decode_addressing(item: dict) -> tuple[str, str, str]:
    """Returns (object_id, kind, ext_id); exactly one addressing mode set."""
    obj = item.get("object")
    if obj is not None:
        if isinstance(obj, str):
            _require(bool(obj), "'object' must be non-empty")
            return obj, "", ""
        _require(isinstance(obj, dict), "'object' must be a string or {kind, ext_id}")
        kind, ext_id = obj.get("kind"), obj.get("ext_id")
        _require(isinstance(kind, str) and bool(kind), "'object.kind' must be a non-empty string")
        _require(isinstance(ext_id, str) and bool(ext_id), "'object.ext_id' must be a non-empty string")
        return "", kind, ext_id
    kind, ext_id = item.get("kind"), item.get("ext_id")
    _require(isinstance(kind, str) and bool(kind), "'kind' must be a non-empty string")
    _require(isinstance(ext_id, str) and bool(ext_id), "'ext_id' must be a non-empty string")
    return "", kind, ext_id


def decode_provider_message(data: bytes) -> ProviderMessage:
    """Parse one provider datagram.

    Raises MalformedMessage, UnsupportedVersion or InvalidTransform; callers
    drop the datagram and bump a counter, they never crash.
    """
    _require(isinstance(data, (bytes, bytearray)) and len(data) > 0, "empty datagram")
    _require(len(data) <= MAX_PROVIDER_DATAGRAM_BYTES,
             f"datagram of {len(data)} bytes exceeds {MAX_PROVIDER_DATAGRAM_BYTES}")
    try:
        root = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedMessage(f"not valid JSON: {exc}")
    _require(isinstance(root, dict), "datagram root must be an object")
    version = root.get("v")
    _require(version is not None, "missing 'v'")
    if version != WIRE_VERSION:
        raise UnsupportedVersion(f"unsupported protocol version {version!r}")
    provider = root.get("provider")
    _require(isinstance(provider, dict), "'provider' must be an object")
    provider_id = provider.get("id")
    provider_type = provider.get("type", "")
    _require(isinstance(provider_id, str) and bool(provider_id), "'provider.id' must be a non-empty string")
    _require(not any(ch.isspace() for ch in provider_id), "'provider.id' must not contain whitespace")
    _require(isinstance(provider_type, str), "'provider.type' must be a string")
    seq = root.get("seq")
    time_us = root.get("time_us")
    _require(isinstance(seq, int) and not isinstance(seq, bool) and seq >= 0, "'seq' must be an int >= 0")
    _require(isinstance(time_us, int) and not isinstance(time_us, bool) and time_us >= 0,
             "'time_us' must be an int >= 0")
    raw_items = root.get("observations")
    _require(isinstance(raw_items, list), "'observations' must be a list")
    _require(len(raw_items) <= MAX_OBSERVATIONS_PER_MESSAGE,
             f"more than {MAX_OBSERVATIONS_PER_MESSAGE} observations")

    observations: list[ObservationItem] = []
    for item in raw_items:
        _require(isinstance(item, dict), "observation must be an object")
        item_kind = item.get("item")
        if item_kind == "detection":
            object_id, kind, ext_id = _decode_addressing(item)
            sigma = item.get("sigma")
            res = item.get("res")
            _require(_is_num(sigma) and sigma >= 0, "'sigma' must be a number >= 0")
            _require(_is_num(res) and res > 0, "'res' must be a number > 0")
            observations.append(Detection(
                pose=_decode_pose(item), sigma=float(sigma), resolution=float(res),
                kind=kind, ext_id=ext_id, object_id=object_id,
            ))
        elif item_kind == "attribute_upsert":
            _require("object" in item, "attribute_upsert needs 'object'")
            object_id, kind, ext_id = _decode_addressing(item)
            observations.append(AttributeUpsert(
                mutations=_decode_mutations(item.get("mutations")),
                object_id=object_id, kind=kind, ext_id=ext_id,
            ))
        else:
            raise MalformedMessage(f"unknown observation item {item_kind!r}")

    return ProviderMessage(
        provider_id=provider_id, provider_type=provider_type,
        seq=seq, time_us=time_us, observations=tuple(observations),
    )


# --- discovery announcements ---

@dataclass(frozen=True)
class Announcement:
    role: str
    addr: str
    epoch: int
    node: str
    v: int = WIRE_VERSION

    def to_json(self) -> dict:
        return {"v": self.v, "role": self.role, "addr": self.addr,
                "epoch": self.epoch, "node": self.node}


def encode_announcement(announcement: Announcement) -> bytes:
    return canonical_bytes(announcement.to_json())


def decode_announcement(data: bytes) -> Announcement:
    try:
        root = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedAnnouncement(f"not valid JSON: {exc}")
    if not isinstance(root, dict):
        raise MalformedAnnouncement("announcement must be an object")
    if root.get("v") != WIRE_VERSION:
        raise MalformedAnnouncement(f"unsupported announcement version {root.get('v')!r}")
    role = root.get("role")
    addr = root.get("addr")
    epoch = root.get("epoch")
    node = root.get("node")
    if role not in ANNOUNCE_ROLES:
        raise MalformedAnnouncement(f"unknown role {role!r}")
    if not isinstance(addr, str) or ":" not in addr:
        raise MalformedAnnouncement("'addr' must be host:port")
    if not isinstance(epoch, int) or isinstance(epoch, bool) or epoch < 0:
        raise MalformedAnnouncement("'epoch' must be an int >= 0")
    if not isinstance(node, str) or not node:
        raise MalformedAnnouncement("'node' must be a non-empty string")
    return Announcement(role=role, addr=addr, epoch=epoch, node=node)


# --- heartbeats (share the discovery socket) ---

@dataclass(frozen=True)
class Heartbeat:
    module_id: str
    node: str
    role: str
    time_us: int
    load: dict = field(default_factory=dict)
    v: int = WIRE_VERSION

    def to_json(self) -> dict:
        return {"v": self.v, "hb": self.module_id, "node": self.node,
                "role": self.role, "time_us": self.time_us, "load": self.load}


def encode_heartbeat(heartbeat: Heartbeat) -> bytes:
    return canonical_bytes(heartbeat.to_json())


def decode_heartbeat(data: bytes) -> Heartbeat:
    try:
        root = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedAnnouncement(f"not valid JSON: {exc}")
    if not isinstance(root, dict) or root.get("v") != WIRE_VERSION:
        raise MalformedAnnouncement("bad heartbeat")
    module_id = root.get("hb")
    if not isinstance(module_id, str) or not module_id:
        raise MalformedAnnouncement("'hb' must be a non-empty module id")
    time_us = root.get("time_us")
    if not isinstance(time_us, int) or isinstance(time_us, bool):
        raise MalformedAnnouncement("'time_us' must be an int")
    load = root.get("load", {})
    if not isinstance(load, dict):
        raise MalformedAnnouncement("'load' must be an object")
    return Heartbeat(module_id=module_id, node=str(root.get("node", "")),
                     role=str(root.get("role", "")), time_us=time_us, load=load)


def is_heartbeat(data: bytes) -> bool:
    return b'"hb"' in data[:64]


# --- framed streams (consumer protocol) ---

def encode_frame(obj: dict) -> bytes:
    payload = canonical_bytes(obj)
    return FRAME_HEADER.pack(len(payload)) + payload


class FrameBuffer:
    """Incremental decoder for length-prefixed JSON frames."""

    def __init__(self, max_frame_bytes: int = DEFAULT_MAX_FRAME_BYTES):
        self._buf = bytearray()
        self._max = max_frame_bytes

    def feed(self, data: bytes) -> list[dict]:
        """Append bytes; return every complete frame decoded so far."""
        self._buf.extend(data)
        frames = []
        while True:
            if len(self._buf) < FRAME_HEADER.size:
                return frames
            (length,) = FRAME_HEADER.unpack(bytes(self._buf[:FRAME_HEADER.size]))
            if length > self._max:
                raise MalformedMessage(f"frame of {length} bytes exceeds limit {self._max}")
            if len(self._buf) < FRAME_HEADER.size + length:
                return frames
            payload = bytes(self._buf[FRAME_HEADER.size:FRAME_HEADER.size + length])
            del self._buf[:FRAME_HEADER.size + length]
            try:
                frames.append(json.loads(payload.decode("utf-8")))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise MalformedMessage(f"frame payload is not valid JSON: {exc}")


def read_frame_from_socket(sock, max_frame_bytes: int = DEFAULT_MAX_FRAME_BYTES) -> Optional[dict]:
    """Blocking read of one frame; None on clean EOF."""
    header = _read_exactly(sock, FRAME_HEADER.size)
    if header is None:
        return None
    (length,) = FRAME_HEADER.unpack(header)
    if length > max_frame_bytes:
        raise MalformedMessage(f"frame of {length} bytes exceeds limit {max_frame_bytes}")
    payload = _read_exactly(sock, length)
    if payload is None:
        return None
    try:
        return json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedMessage(f"frame payload is not valid JSON: {exc}")


def _read_exactly(sock, n: int) -> Optional[bytes]:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf
