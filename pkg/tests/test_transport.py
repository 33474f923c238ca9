import asyncio
import hashlib
import threading

import pytest

from lip.canonical import canonical_bytes, parse_document
from lip.errors import FrameError
from lip.protocol import (
    AcceptPayload,
    Constraint,
    Envelope,
    MessageType,
    OfferPayload,
    encode_envelope,
)
from lip.security import KeyPair, sign_envelope
from lip.semantics import Capability
from lip.transport import (
    Connection,
    CoordinatorEndpoint,
    LoopbackLink,
    SocketLink,
    TcpClient,
    TransportFailure,
    make_link,
    serve_tcp,
)

from conftest import haul_intent

M = MessageType


@pytest.mark.parametrize("kind", ["loopback", "socket"])
def test_links_deliver_frames_in_order(kind):
    link = make_link(kind)
    try:
        bodies = [b"", b"x", bytes(range(256)) * 40]
        for b in bodies:
            link.send(b)
        assert [link.recv(timeout=2) for _ in bodies] == bodies
        with pytest.raises(TransportFailure):
            link.recv(timeout=0.05)
    finally:
        link.close()


def test_socket_link_truncated_frame():
    link = SocketLink()
    try:
        link.send_raw(b"\x00\x00\x00\x10abc")
        link.shutdown_write()
        with pytest.raises(FrameError):
            link.recv(timeout=2)
    finally:
        link.close()


def test_loopback_is_a_loopback():
    assert isinstance(make_link("loopback"), LoopbackLink)
    with pytest.raises(ValueError):
        make_link("carrier-pigeon")


# -- endpoint, driven frame by frame -------------------------------------------------


def handshake(endpoint, conn, keypair, metadata=None):
    reply = lambda doc: parse_document(endpoint.handle_frame(conn, canonical_bytes(doc))[0][1])
    enrolled = reply({"op": "enroll", "public_key": keypair.public_key.hex(), "metadata": metadata or {"verified": True}})
    challenge = reply({"op": "challenge", "agent_id": enrolled["agent_id"]})
    sig = keypair.sign(bytes.fromhex(challenge["nonce"]))
    return reply({"op": "respond", "challenge_id": challenge["challenge_id"], "signature": sig.hex()})


def test_endpoint_rejects_garbage_and_unauthenticated(coordinator):
    endpoint = CoordinatorEndpoint(coordinator)
    conn = Connection()
    ((to, body),) = endpoint.handle_frame(conn, b"{not json")
    assert to == "" and parse_document(body)["op"] == "error"
    ((_, body),) = endpoint.handle_frame(conn, canonical_bytes([1, 2]))
    assert parse_document(body)["code"] == "malformed_document"
    ((_, body),) = endpoint.handle_frame(conn, canonical_bytes({"op": "teleport"}))
    assert parse_document(body)["op"] == "error"
    kp = KeyPair.derive("tests", "anon")
    env = sign_envelope(Envelope("m1", "ix", kp.agent_id, M.INTENT, haul_intent(), coordinator.clock()), kp.seed)
    ((_, body),) = endpoint.handle_frame(conn, encode_envelope(env))
    assert parse_document(body)["code"] == "transport_failure"
    ((_, body),) = endpoint.handle_frame(conn, canonical_bytes({"op": "register", "capability": {}}))
    assert parse_document(body)["code"] == "transport_failure"


def test_endpoint_wrong_key_response_fails(coordinator):
    endpoint = CoordinatorEndpoint(coordinator)
    conn = Connection()
    kp, other = KeyPair.derive("tests", "a"), KeyPair.derive("tests", "b")
    reply = lambda doc: parse_document(endpoint.handle_frame(conn, canonical_bytes(doc))[0][1])
    reply({"op": "enroll", "public_key": kp.public_key.hex(), "metadata": {}})
    challenge = reply({"op": "challenge", "agent_id": kp.agent_id})
    bad = reply({"op": "respond", "challenge_id": challenge["challenge_id"], "signature": other.sign(bytes.fromhex(challenge["nonce"])).hex()})
    assert bad["op"] == "error"
    # the failed attempt used the challenge up
    good = reply({"op": "respond", "challenge_id": challenge["challenge_id"], "signature": kp.sign(bytes.fromhex(challenge["nonce"])).hex()})
    assert good["op"] == "error"
    assert conn.token is None
    assert handshake(endpoint, conn, kp)["op"] == "authenticated"


# -- live TCP service ---------------------------------------------------------------


@pytest.fixture
def tcp_service(coordinator):
    endpoint = CoordinatorEndpoint(coordinator)
    loop = asyncio.new_event_loop()
    ready = threading.Event()
    holder = {}

    def run():
        asyncio.set_event_loop(loop)

        def on_ready(addr):
            holder["addr"] = addr
            ready.set()

        holder["server"] = loop.run_until_complete(serve_tcp(endpoint, "127.0.0.1", 0, on_ready))
        loop.run_forever()
        # drain connection handlers so none are destroyed while pending
        pending = asyncio.all_tasks(loop)
        for task in pending:
            task.cancel()
        loop.run_until_complete(asyncio.gather(*pending, return_exceptions=True))
        loop.close()

    t = threading.Thread(target=run, daemon=True)
    t.start()
    assert ready.wait(5)
    host, port = holder["addr"].rsplit(":", 1)
    yield host, int(port)
    holder["server"].close()
    loop.call_soon_threadsafe(loop.stop)
    t.join(5)


def signed(kp, n, ix, mtype, payload, now):
    mid = hashlib.sha256(f"{kp.agent_id}|{n}".encode()).hexdigest()[:16]
    return sign_envelope(Envelope(mid, ix, kp.agent_id, mtype, payload, now), kp.seed)


def test_tcp_round_trip_to_stabilization(tcp_service, coordinator):
    host, port = tcp_service
    shipper_kp, rail_kp = KeyPair.derive("tests", "tcp-shipper"), KeyPair.derive("tests", "tcp-rail")
    shipper = TcpClient(host, port, shipper_kp, {"verified": True})
    rail = TcpClient(host, port, rail_kp, {"verified": True})
    try:
        assert shipper.connect() == shipper_kp.agent_id
        rail.connect()
        cap = Capability("rail-haul", rail_kp.agent_id, "haul container within radius of port", frozenset({"logistics"}), frozenset({"logistics.haul"}), frozenset({"radius_km"}))
        assert rail.register(cap) == "rail-haul"
        now = coordinator.clock()
        intent = haul_intent(constraints=(Constraint("radius_km", "<=", 200),), priority_order=("radius_km",))
        shipper.send_envelope(signed(shipper_kp, 1, "tcp-1", M.INTENT, intent, now))
        solicit = rail.recv_envelope()
        assert solicit.message_type is M.INTENT and solicit.payload.candidates == ("rail-haul",)
        rail.send_envelope(signed(rail_kp, 1, "tcp-1", M.OFFER, OfferPayload("rail-haul", frozenset({"radius_km"}), False, {}, now + 60_000), now))
        request = rail.recv_envelope()
        assert request.message_type is M.ACCEPT
        rail.send_envelope(signed(rail_kp, 2, "tcp-1", M.ACCEPT, AcceptPayload(request.payload.plan_id, ("rail-haul",)), now))
        notice = shipper.recv_envelope()
        assert notice.message_type is M.ACCEPT and notice.payload.plan_id == request.payload.plan_id
        assert coordinator.context("tcp-1").state.value == "Stabilized"
    finally:
        shipper.close()
        rail.close()


def test_tcp_wrong_key_is_refused(tcp_service):
    host, port = tcp_service
    kp, impostor = KeyPair.derive("tests", "tcp-owner"), KeyPair.derive("tests", "tcp-impostor")
    client = TcpClient(host, port, impostor)
    try:
        client.request("enroll", public_key=kp.public_key.hex(), metadata={})
        challenge = client.request("challenge", agent_id=kp.agent_id)
        with pytest.raises(TransportFailure):
            client.request("respond", challenge_id=challenge["challenge_id"], signature=impostor.sign(bytes.fromhex(challenge["nonce"])).hex())
        # the session is still unauthenticated
        env = signed(impostor, 1, "tcp-x", M.INTENT, haul_intent(), 0)
        client.send_envelope(env)
        assert parse_document(client.recv())["code"] == "transport_failure"
    finally:
        client.close()
