"""Socket servers for live deployment: ingest, query, discovery, replication.

Ingest listens for UDP datagrams and, on the same port number, accepts
newline-delimited messages over TCP for payloads too large for one datagram.
The consumer protocol runs over TCP with 4-byte big-endian length-prefixed
canonical JSON frames; every connection is served by its own thread so one
misbehaving session can only take down itself.  Discovery announcements and
module heartbeats share one UDP port.

The deterministic harness never touches this module; it drives the same
planes through an in-memory network instead.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from typing import Callable, Iterable, Optional

from .config import RailConfig
from .control import DiscoveryTable
from .core import RailCore
from .errors import MalformedAnnouncement, MalformedMessage, RailError
from .wire import (
    Announcement,
    decode_announcement,
    decode_heartbeat,
    encode_announcement,
    encode_frame,
    encode_heartbeat,
    is_heartbeat,
    read_frame_from_socket,
)

logger = logging.getLogger(__name__)

_MAX_DATAGRAM = 64 * 1024


def _now_us() -> int:
    return int(time.time() * 1e6)


def _split_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host, int(port)


class IngestServer:
    """UDP (primary) plus newline-delimited TCP fallback on one port number."""

    def __init__(self, core: RailCore, host: str = "127.0.0.1", port: int = 0):
        self.core = core
        self._udp = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._tcp = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._tcp.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        if port == 0:
            # Find a port number free for both transports.
            for _ in range(32):
                self._udp.bind((host, 0))
                candidate = self._udp.getsockname()[1]
                try:
                    self._tcp.bind((host, candidate))
                    break
                except OSError:
                    self._udp.close()
                    self._udp = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            else:
                raise OSError("could not find a shared UDP/TCP port")
        else:
            self._udp.bind((host, port))
            self._tcp.bind((host, port))
        self.host, self.port = self._udp.getsockname()[:2]
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    @property
    def addr(self) -> str:
        return f"{self.host}:{self.port}"

    def start(self) -> "IngestServer":
        self._tcp.listen(16)
        self._threads = [
            threading.Thread(target=self._udp_loop, daemon=True, name="rail-ingest-udp"),
            threading.Thread(target=self._tcp_loop, daemon=True, name="rail-ingest-tcp"),
        ]
        for t in self._threads:
            t.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        for sock in (self._udp, self._tcp):
            try:
                sock.close()
            except OSError:
                pass

    def _udp_loop(self) -> None:
        while not self._stop.is_set():
            try:
                data, _ = self._udp.recvfrom(_MAX_DATAGRAM)
            except OSError:
                return
            self.core.handle_provider_datagram(data)

    def _tcp_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._tcp.accept()
            except OSError:
                return
            threading.Thread(target=self._tcp_conn, args=(conn,), daemon=True).start()

    def _tcp_conn(self, conn: socket.socket) -> None:
        buf = b""
        try:
            while not self._stop.is_set():
                chunk = conn.recv(65536)
                if not chunk:
                    break
                buf += chunk
                while b"\n" in buf:
                    line, buf = buf.split(b"\n", 1)
                    if line.strip():
                        self.core.handle_provider_datagram(line)
        except OSError:
            pass
        finally:
            conn.close()


class QueryServer:
    """Framed request/response and subscription streams, one thread per session."""

    def __init__(self, core: RailCore, host: str = "127.0.0.1", port: int = 0):
        self.core = core
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self.host, self.port = self._sock.getsockname()[:2]
        self._stop = threading.Event()

    @property
    def addr(self) -> str:
        return f"{self.host}:{self.port}"

    def start(self) -> "QueryServer":
        self._sock.listen(64)
        threading.Thread(target=self._accept_loop, daemon=True, name="rail-query-accept").start()
        return self

    def stop(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, peer = self._sock.accept()
            except OSError:
                return
            threading.Thread(
                target=self._serve_session, args=(conn,), daemon=True,
                name=f"rail-query-{peer[1]}",
            ).start()

    def _serve_session(self, conn: socket.socket) -> None:
        # One independent serving context per session: a crash below ends
        # this connection only.
        write_lock = threading.Lock()
        subscriptions = []
        try:
            while not self._stop.is_set():
                try:
                    request = read_frame_from_socket(conn, self.core.config.query.max_frame_bytes)
                except MalformedMessage as exc:
                    with write_lock:
                        conn.sendall(encode_frame({"ok": False, "error": exc.code, "reason": exc.message}))
                    break
                if request is None:
                    break
                if request.get("follow"):
                    try:
                        response, subscription = self.core.query.open_subscription(request)
                    except RailError as exc:
                        response, subscription = (
                            {"id": request.get("id"), "ok": False, "error": exc.code,
                             "reason": getattr(exc, "reason", None) or exc.message},
                            None,
                        )
                    with write_lock:
                        conn.sendall(encode_frame(response))
                    if subscription is not None:
                        subscriptions.append(subscription)
                        threading.Thread(
                            target=self._pump_loop, args=(conn, write_lock, subscription),
                            daemon=True,
                        ).start()
                else:
                    response = self.core.query.execute(request)
                    with write_lock:
                        conn.sendall(encode_frame(response))
        except OSError:
            pass
        except Exception:
            logger.exception("query session crashed; connection dropped")
        finally:
            for subscription in subscriptions:
                subscription.close()
            conn.close()

    def _pump_loop(self, conn: socket.socket, write_lock: threading.Lock, subscription) -> None:
        try:
            while not self._stop.is_set() and not subscription.closed:
                frames = subscription.pump()
                if frames:
                    with write_lock:
                        for frame in frames:
                            conn.sendall(encode_frame(frame))
                else:
                    subscription.wait_for_event(timeout=0.2)
        except OSError:
            subscription.close()


class QueryClient:
    """Minimal consumer-side client for the framed protocol."""

    def __init__(self, addr: str, timeout: float = 5.0):
        host, port = _split_addr(addr)
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._next_id = 0

    def request(self, op: str, **params) -> dict:
        self._next_id += 1
        frame = {"id": self._next_id, "op": op, **params}
        self._sock.sendall(encode_frame(frame))
        response = read_frame_from_socket(self._sock)
        if response is None:
            raise ConnectionError("server closed the connection")
        return response

    def next_frame(self, timeout: Optional[float] = None) -> Optional[dict]:
        if timeout is not None:
            self._sock.settimeout(timeout)
        try:
            return read_frame_from_socket(self._sock)
        except socket.timeout:
            return None

    def close(self) -> None:
        self._sock.close()


class DiscoveryService:
    """Periodic announcement broadcaster plus listener on one UDP socket."""

    def __init__(
        self,
        config: RailConfig,
        announcements: Callable[[], Iterable[Announcement]],
        table: Optional[DiscoveryTable] = None,
        heartbeat_sink: Optional[Callable] = None,
        bind_host: str = "0.0.0.0",
        port: Optional[int] = None,
    ):
        self.config = config
        self.table = table or DiscoveryTable(config)
        self._announcements = announcements
        self._heartbeat_sink = heartbeat_sink
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_BROADCAST, 1)
        self._sock.bind((bind_host, self.config.ports.discovery if port is None else port))
        self.port = self._sock.getsockname()[1]
        self._stop = threading.Event()

    def start(self) -> "DiscoveryService":
        threading.Thread(target=self._recv_loop, daemon=True, name="rail-discovery-recv").start()
        threading.Thread(target=self._announce_loop, daemon=True, name="rail-discovery-send").start()
        return self

    def stop(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass

    def send_heartbeat(self, heartbeat) -> None:
        target = (self.config.discovery.target_host, self.port)
        try:
            self._sock.sendto(encode_heartbeat(heartbeat), target)
        except OSError:
            pass

    def _announce_loop(self) -> None:
        interval = self.config.discovery.announce_interval_us / 1e6
        target = (self.config.discovery.target_host, self.port)
        while not self._stop.wait(interval):
            for announcement in self._announcements():
                try:
                    self._sock.sendto(encode_announcement(announcement), target)
                except OSError:
                    return

    def _recv_loop(self) -> None:
        while not self._stop.is_set():
            try:
                data, _ = self._sock.recvfrom(_MAX_DATAGRAM)
            except OSError:
                return
            now = _now_us()
            if is_heartbeat(data):
                if self._heartbeat_sink:
                    try:
                        self._heartbeat_sink(decode_heartbeat(data), now)
                    except MalformedAnnouncement:
                        pass
                continue
            try:
                self.table.observe(decode_announcement(data), now)
            except MalformedAnnouncement:
                pass


class ReplicationServer:
    """Master side of live replication: streams raw feed events, takes acks."""

    def __init__(self, core: RailCore, mode: str = "sync", host: str = "127.0.0.1", port: int = 0):
        self.core = core
        self.mode = mode
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self.host, self.port = self._sock.getsockname()[:2]
        self._stop = threading.Event()
        if mode == "sync":
            core.graph.log.set_gated(True)
            core.objects.log.set_gated(True)

    @property
    def addr(self) -> str:
        return f"{self.host}:{self.port}"

    def start(self) -> "ReplicationServer":
        self._sock.listen(4)
        threading.Thread(target=self._accept_loop, daemon=True, name="rail-repl-accept").start()
        return self

    def stop(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            threading.Thread(target=self._serve, args=(conn,), daemon=True).start()

    def _serve(self, conn: socket.socket) -> None:
        closed = threading.Event()

        def ack_loop() -> None:
            try:
                while not self._stop.is_set():
                    ack = read_frame_from_socket(conn)
                    if ack is None:
                        return
                    applied = ack.get("applied")
                    if applied and self.mode == "sync":
                        self.core.graph.log.advance_published(int(applied.get("graph", 0)))
                        self.core.objects.log.advance_published(int(applied.get("objects", 0)))
            except (OSError, MalformedMessage):
                pass
            finally:
                closed.set()

        try:
            hello = read_frame_from_socket(conn)
            if not hello or "subscribe" not in hello:
                conn.close()
                return
            cursors = hello["subscribe"]
            graph_feed = self.core.graph.changes(cursor=int(cursors.get("graph", 0)), raw=True)
            object_feed = self.core.objects.changes(cursor=int(cursors.get("objects", 0)), raw=True)
            threading.Thread(target=ack_loop, daemon=True).start()
            while not self._stop.is_set() and not closed.is_set():
                events = graph_feed.poll() + object_feed.poll()
                for event in events:
                    conn.sendall(encode_frame({"event": event.to_json()}))
                if not events:
                    self.core.graph.log.wait_for(graph_feed.cursor, timeout=0.05, raw=True)
        except (OSError, MalformedMessage):
            pass
        finally:
            conn.close()


class ReplicationClient:
    """Slave side: applies the master's stream and acknowledges."""

    def __init__(self, slave_core: RailCore, master_addr: str):
        self.core = slave_core
        host, port = _split_addr(master_addr)
        self._sock = socket.create_connection((host, port), timeout=5.0)
        self._stop = threading.Event()

    def start(self) -> "ReplicationClient":
        self._sock.sendall(encode_frame({
            "subscribe": {"graph": self.core.graph.head, "objects": self.core.objects.head}
        }))
        threading.Thread(target=self._loop, daemon=True, name="rail-repl-client").start()
        return self

    def stop(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass

    def _loop(self) -> None:
        from .changefeed import ChangeEvent

        try:
            while not self._stop.is_set():
                frame = read_frame_from_socket(self._sock)
                if frame is None:
                    return
                if "event" not in frame:
                    continue
                event = ChangeEvent.from_json(frame["event"])
                if event.store == "graph":
                    self.core.graph.apply_replicated(event)
                else:
                    self.core.objects.apply_replicated(event)
                self._sock.sendall(encode_frame({
                    "applied": {"graph": self.core.graph.head, "objects": self.core.objects.head}
                }))
        except (OSError, MalformedMessage):
            return


def lookup_query_endpoint(table: DiscoveryTable, now_us: Optional[int] = None) -> str:
    """Consumer-side: address of the current query master (highest epoch)."""
    return table.lookup("query", _now_us() if now_us is None else now_us)
