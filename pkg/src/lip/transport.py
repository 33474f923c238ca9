"""Message delivery: in-memory loopback, framed stream sockets, and the TCP service."""

from __future__ import annotations

import asyncio
import logging
import queue
import socket
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Optional

from .canonical import canonical_bytes, parse_document
from .errors import FrameError, LipError, MalformedDocument
from .protocol import PROTOCOL_VERSION, Envelope, FrameDecoder, decode_envelope, encode_envelope, encode_frame
from .security import KeyPair, SessionToken
from .semantics import Capability

log = logging.getLogger(__name__)


class TransportKind(str, Enum):
    LOOPBACK = "loopback"
    SOCKET = "socket"


class TransportFailure(LipError):
    code = "transport_failure"


# -- links: one direction of reliable, ordered byte delivery -------------------


class LoopbackLink:
    """In-memory link. Frames still go through encode and decode."""

    def __init__(self):
        self._inbox: queue.SimpleQueue[bytes] = queue.SimpleQueue()

    def send(self, body: bytes) -> None:
        frame = encode_frame(body)
        decoder = FrameDecoder()
        for msg in decoder.feed(frame):
            self._inbox.put(msg)
        decoder.close()

    def recv(self, timeout: float = 5.0) -> bytes:
        try:
            return self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TransportFailure("loopback link empty") from None

    def close(self) -> None:
        pass


class SocketLink:
    """Framed link over a connected stream socket pair.

    A reader thread pumps complete frames into an inbox as soon as they
    arrive; a truncated stream surfaces as FrameError on ``recv``.
    """

    def __init__(self):
        self._tx, self._rx = socket.socketpair()
        self._inbox: queue.SimpleQueue[Any] = queue.SimpleQueue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    def _pump(self) -> None:
        decoder = FrameDecoder()
        try:
            while True:
                chunk = self._rx.recv(65536)
                if not chunk:
                    decoder.close()
                    break
                for msg in decoder.feed(chunk):
                    self._inbox.put(msg)
        except FrameError as exc:
            self._inbox.put(exc)
        except OSError:
            pass
        finally:
            self._inbox.put(None)

    def send(self, body: bytes) -> None:
        self._tx.sendall(encode_frame(body))

    def send_raw(self, data: bytes) -> None:
        self._tx.sendall(data)

    def recv(self, timeout: float = 5.0) -> bytes:
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise TransportFailure("no frame within timeout") from None
        if isinstance(item, FrameError):
            raise item
        if item is None:
            raise TransportFailure("link closed")
        return item

    def shutdown_write(self) -> None:
        self._tx.shutdown(socket.SHUT_WR)

    def close(self) -> None:
        for s in (self._tx, self._rx):
            try:
                s.close()
            except OSError:
                pass


def make_link(kind: TransportKind | str):
    return SocketLink() if TransportKind(kind) is TransportKind.SOCKET else LoopbackLink()


@dataclass
class TransportBinding:
    kind: TransportKind
    address: str = ""
    connected: set[str] = field(default_factory=set)


# -- control frames --------------------------------------------------------------


def is_envelope_doc(doc: Any) -> bool:
    return isinstance(doc, dict) and doc.get("protocol_version") == PROTOCOL_VERSION


def control(op: str, **fields: Any) -> bytes:
    return canonical_bytes({"op": op, **fields})


def error_doc(exc: LipError) -> dict:
    return {"op": "error", "code": exc.code, "message": str(exc)}


@dataclass
class Connection:
    """Server-side state for one authenticated agent connection."""

    agent_id: Optional[str] = None
    token: Optional[SessionToken] = None
    send: Optional[Callable[[bytes], None]] = None


class CoordinatorEndpoint:
    """Frame handler shared by every transport serving a coordinator."""

    def __init__(self, coordinator):
        self.coordinator = coordinator
        self.connections: dict[str, Connection] = {}

    def handle_control(self, conn: Connection, doc: dict) -> dict:
        c = self.coordinator
        op = doc.get("op")
        try:
            if op == "enroll":
                identity = c.enroll(bytes.fromhex(doc["public_key"]), doc.get("metadata") or {})
                return {"op": "enrolled", "agent_id": identity.agent_id}
            if op == "challenge":
                challenge = c.issue_challenge(doc["agent_id"])
                return {"op": "challenge", **challenge.to_doc()}
            if op == "respond":
                token = c.authenticate(doc["challenge_id"], bytes.fromhex(doc["signature"]))
                conn.agent_id, conn.token = token.agent_id, token
                self.connections[token.agent_id] = conn
                return {"op": "authenticated", "agent_id": token.agent_id, "expires_at": token.expires_at}
            if op == "register":
                if conn.token is None:
                    raise TransportFailure("register before authentication")
                cap = Capability.from_doc(doc["capability"], owner=conn.agent_id)
                return {"op": "registered", "capability_id": c.register_capability(conn.token.token, cap)}
            raise MalformedDocument(f"unknown control op {op!r}")
        except LipError as exc:
            return error_doc(exc)
        except (KeyError, ValueError, TypeError) as exc:
            return error_doc(MalformedDocument(f"bad {op} frame: {exc}"))

    def handle_frame(self, conn: Connection, body: bytes) -> list[tuple[str, bytes]]:
        """Process one inbound frame; return (recipient agent id, frame body) pairs.

        The empty recipient addresses the sending connection itself.
        """
        try:
            doc = parse_document(body)
        except LipError as exc:
            return [("", canonical_bytes(error_doc(exc)))]
        if not is_envelope_doc(doc):
            if not isinstance(doc, dict):
                return [("", canonical_bytes(error_doc(MalformedDocument("frame must be an object"))))]
            return [("", canonical_bytes(self.handle_control(conn, doc)))]
        if conn.token is None:
            return [("", canonical_bytes(error_doc(TransportFailure("envelope before authentication"))))]
        try:
            env = decode_envelope(body)
        except LipError as exc:
            return [("", canonical_bytes(error_doc(exc)))]
        fx = self.coordinator.submit(env, conn.token.token)
        return [(recipient, encode_envelope(out)) for recipient, out in fx.outbound]

    def deliver(self, outbound) -> None:
        """Send coordinator-originated envelopes (deadline sweeps) to their recipients."""
        self.route([(recipient, encode_envelope(env)) for recipient, env in outbound], None)

    def route(self, replies: list[tuple[str, bytes]], origin: Optional[Connection]) -> None:
        for recipient, body in replies:
            if origin is not None and recipient in ("", origin.agent_id):
                target = origin
            else:
                target = self.connections.get(recipient)
            if target is None or target.send is None:
                log.warning("no connection for %s; dropping frame", recipient[:12])
                continue
            target.send(body)


# -- TCP service -----------------------------------------------------------------


async def serve_tcp(endpoint: CoordinatorEndpoint, host: str, port: int, on_ready: Optional[Callable[[str], None]] = None):
    async def handle(reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        conn = Connection(send=lambda body: writer.write(encode_frame(body)))
        decoder = FrameDecoder()
        try:
            while True:
                chunk = await reader.read(65536)
                if not chunk:
                    decoder.close()
                    break
                for body in decoder.feed(chunk):
                    endpoint.route(endpoint.handle_frame(conn, body), conn)
                await writer.drain()
        except FrameError as exc:
            log.warning("resetting connection: %s", exc)
        except ConnectionError:
            pass
        finally:
            if conn.agent_id and endpoint.connections.get(conn.agent_id) is conn:
                del endpoint.connections[conn.agent_id]
            writer.close()

    server = await asyncio.start_server(handle, host, port)
    bound = server.sockets[0].getsockname()
    address = f"{bound[0]}:{bound[1]}"
    if on_ready:
        on_ready(address)
    return server


class TcpClient:
    """Blocking client: enroll, authenticate, then exchange envelopes."""

    def __init__(self, host: str, port: int, keypair: KeyPair, metadata: Optional[dict] = None, timeout: float = 5.0):
        self.keypair = keypair
        self.metadata = metadata or {}
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self._decoder = FrameDecoder()
        self._pending: list[bytes] = []
        self.agent_id: Optional[str] = None

    def send(self, body: bytes) -> None:
        self.sock.sendall(encode_frame(body))

    def recv(self) -> bytes:
        while not self._pending:
            chunk = self.sock.recv(65536)
            if not chunk:
                self._decoder.close()
                raise TransportFailure("connection closed by coordinator")
            self._pending.extend(self._decoder.feed(chunk))
        return self._pending.pop(0)

    def request(self, op: str, **fields: Any) -> dict:
        self.send(control(op, **fields))
        doc = parse_document(self.recv())
        if doc.get("op") == "error":
            raise TransportFailure(f"{doc.get('code')}: {doc.get('message')}")
        return doc

    def connect(self) -> str:
        enrolled = self.request("enroll", public_key=self.keypair.public_key.hex(), metadata=self.metadata)
        challenge = self.request("challenge", agent_id=enrolled["agent_id"])
        signature = self.keypair.sign(bytes.fromhex(challenge["nonce"]))
        done = self.request("respond", challenge_id=challenge["challenge_id"], signature=signature.hex())
        self.agent_id = done["agent_id"]
        return self.agent_id

    def register(self, capability: Capability) -> str:
        return self.request("register", capability=capability.to_doc())["capability_id"]

    def send_envelope(self, env: Envelope) -> None:
        self.send(encode_envelope(env))

    def recv_envelope(self) -> Envelope:
        return decode_envelope(self.recv())

    def close(self) -> None:
        self.sock.close()
