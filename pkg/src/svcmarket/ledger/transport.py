"""Length-prefixed canonical-JSON messaging over TCP.

Wire format: a 4-byte big-endian length followed by that many bytes of
canonical JSON. Every connection carries strictly alternating
request/response pairs, so a client can reuse one socket per peer.
"""

from __future__ import annotations

import json
import socket
import struct
import threading

from ..canonical import canonical_json

MAX_MESSAGE_BYTES = 32 * 1024 * 1024

_LEN = struct.Struct(">I")


class TransportError(Exception):
    pass


def send_message(sock: socket.socket, message: dict) -> None:
    data = canonical_json(message)
    if len(data) > MAX_MESSAGE_BYTES:
        raise TransportError(f"message of {len(data)} bytes exceeds limit")
    sock.sendall(_LEN.pack(len(data)) + data)


def recv_message(sock: socket.socket) -> dict:
    header = _recv_exact(sock, _LEN.size)
    (length,) = _LEN.unpack(header)
    if length > MAX_MESSAGE_BYTES:
        raise TransportError(f"declared length {length} exceeds limit")
    data = _recv_exact(sock, length)
    try:
        message = json.loads(data)
    except ValueError as exc:
        raise TransportError(f"malformed message: {exc}") from exc
    if not isinstance(message, dict):
        raise TransportError("message must be a JSON object")
    return message


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            raise TransportError("connection closed mid-message")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


class RpcClient:
    """One lazily connected, mutex-guarded request/response socket."""

    def __init__(self, host: str, port: int, timeout_s: float = 2.0):
        self.host = host
        self.port = port
        self.timeout_s = timeout_s
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()

    def call(self, message: dict, timeout_s: float | None = None) -> dict:
        with self._lock:
            try:
                return self._call_locked(message, timeout_s or self.timeout_s)
            except (OSError, TransportError):
                self._drop()
                # one reconnect attempt; the peer may simply have restarted
                try:
                    return self._call_locked(message, timeout_s or self.timeout_s)
                except (OSError, TransportError) as exc:
                    self._drop()
                    raise TransportError(f"{self.host}:{self.port}: {exc}") from exc

    def _call_locked(self, message: dict, timeout_s: float) -> dict:
        if self._sock is None:
            self._sock = socket.create_connection((self.host, self.port), timeout=timeout_s)
            self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock.settimeout(timeout_s)
        send_message(self._sock, message)
        return recv_message(self._sock)

    def _drop(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None

    def close(self) -> None:
        with self._lock:
            self._drop()


class RpcServer:
    """Threaded TCP server dispatching each message to a handler."""

    def __init__(self, host: str, port: int, handler):
        """handler(message: dict) -> dict; exceptions become error replies."""
        self.handler = handler
        self._listener = socket.create_server((host, port), reuse_port=False)
        self._listener.settimeout(0.2)
        self.host, self.port = self._listener.getsockname()[:2]
        self._running = threading.Event()
        self._threads: list[threading.Thread] = []
        self._accept_thread: threading.Thread | None = None

    def start(self) -> None:
        self._running.set()
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name=f"rpc-accept-{self.port}", daemon=True
        )
        self._accept_thread.start()

    def _accept_loop(self) -> None:
        while self._running.is_set():
            try:
                conn, _addr = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            thread = threading.Thread(
                target=self._serve_conn, args=(conn,), name=f"rpc-conn-{self.port}", daemon=True
            )
            thread.start()
            self._threads.append(thread)

    def _serve_conn(self, conn: socket.socket) -> None:
        with conn:
            conn.settimeout(30.0)
            while self._running.is_set():
                try:
                    message = recv_message(conn)
                except (TransportError, OSError):
                    return
                try:
                    reply = self.handler(message)
                except Exception as exc:  # noqa: BLE001 - fault isolation per message
                    reply = {"ok": False, "error": {"code": "INTERNAL", "message": str(exc)}}
                try:
                    send_message(conn, reply)
                except (TransportError, OSError):
                    return

    def stop(self) -> None:
        self._running.clear()
        try:
            self._listener.close()
        except OSError:
            pass
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=1.0)
