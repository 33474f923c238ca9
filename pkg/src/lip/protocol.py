"""Wire format, performative payloads and the interaction lifecycle.

Envelopes travel as canonical JSON. On stream transports each envelope is
wrapped in a frame: a 4-byte big-endian length followed by the document.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterator, Mapping, Optional, Union

from .canonical import canonical_bytes, parse_document
from .errors import (
    FrameError,
    IllegalTransition,
    MalformedDocument,
    PayloadMismatch,
    UnknownMessageType,
    UnsupportedVersion,
)

PROTOCOL_VERSION = "lip/0.1"
MAX_FRAME = 16 * 1024 * 1024


class MessageType(str, Enum):
    INTENT = "intent"
    OFFER = "offer"
    ACCEPT = "accept"
    REJECT = "reject"
    EXECUTE = "execute"
    COMPLETE = "complete"
    DISSOLVE = "dissolve"


BINDING_TYPES = frozenset({MessageType.ACCEPT, MessageType.EXECUTE, MessageType.COMPLETE})


class InteractionState(str, Enum):
    PROPOSED = "Proposed"
    NEGOTIATING = "Negotiating"
    STABILIZED = "Stabilized"
    EXECUTING = "Executing"
    COMPLETED = "Completed"
    RENEGOTIATING = "Renegotiating"
    DISSOLVED = "Dissolved"


class Role(str, Enum):
    INITIATOR = "initiator"
    RESPONDER = "responder"
    COORDINATOR = "coordinator"


class FailureSignal(str, Enum):
    CAPABILITY_UNAVAILABLE = "capability_unavailable"
    CONSTRAINT_UNSATISFIED = "constraint_unsatisfied"
    SCOPE_INSUFFICIENT = "scope_insufficient"
    EXECUTION_ERROR = "execution_error"


COMPARATORS = frozenset({"=", "!=", "<", "<=", ">", ">=", "in", "present"})


# -- schema helpers ------------------------------------------------------------


def _fields(doc: Any, what: str, required: set[str], optional: set[str] = frozenset()) -> dict:
    if not isinstance(doc, dict):
        raise PayloadMismatch(f"{what} must be an object")
    missing = required - doc.keys()
    if missing:
        raise PayloadMismatch(f"{what} missing fields: {', '.join(sorted(missing))}")
    extra = doc.keys() - required - optional
    if extra:
        raise PayloadMismatch(f"{what} has unknown fields: {', '.join(sorted(extra))}")
    return doc


def _str(v: Any, what: str, *, nonempty: bool = False) -> str:
    if not isinstance(v, str) or (nonempty and not v):
        raise PayloadMismatch(f"{what} must be a {'non-empty ' if nonempty else ''}string")
    return v


def _int(v: Any, what: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int) or v < 0:
        raise PayloadMismatch(f"{what} must be a non-negative integer")
    return v


def _num01(v: Any, what: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not 0.0 <= v <= 1.0:
        raise PayloadMismatch(f"{what} must be a number in [0, 1]")
    return float(v)


def _bool(v: Any, what: str) -> bool:
    if not isinstance(v, bool):
        raise PayloadMismatch(f"{what} must be a boolean")
    return v


def _obj(v: Any, what: str) -> dict:
    if not isinstance(v, dict):
        raise PayloadMismatch(f"{what} must be an object")
    return v


def _strs(v: Any, what: str) -> tuple[str, ...]:
    if not isinstance(v, list) or not all(isinstance(x, str) for x in v):
        raise PayloadMismatch(f"{what} must be a list of strings")
    return tuple(v)


def _put(doc: dict, key: str, value: Any) -> None:
    if value is not None:
        doc[key] = value


# -- payloads ------------------------------------------------------------------


@dataclass(frozen=True)
class Constraint:
    key: str
    comparator: str
    value: Any = None

    def __post_init__(self):
        if not isinstance(self.key, str) or not self.key:
            raise PayloadMismatch("constraint key must be a non-empty string")
        if self.comparator not in COMPARATORS:
            raise PayloadMismatch(f"unknown comparator {self.comparator!r}")

    def to_doc(self) -> dict:
        return {"key": self.key, "op": self.comparator, "value": self.value}

    @classmethod
    def from_doc(cls, doc: Any) -> "Constraint":
        d = _fields(doc, "constraint", {"key", "op", "value"})
        return cls(_str(d["key"], "constraint.key", nonempty=True), _str(d["op"], "constraint.op"), d["value"])


@dataclass(frozen=True)
class ContextState:
    facts: Mapping[str, Any] = field(default_factory=dict)
    snapshot_time: int = 0

    def to_doc(self) -> dict:
        return {"facts": dict(self.facts), "snapshot_time": self.snapshot_time}

    @classmethod
    def from_doc(cls, doc: Any) -> "ContextState":
        d = _fields(doc, "context", {"facts", "snapshot_time"})
        return cls(_obj(d["facts"], "context.facts"), _int(d["snapshot_time"], "context.snapshot_time"))

    def public(self) -> "ContextState":
        """Copy without facts whose key carries the ``private:`` prefix."""
        return ContextState({k: v for k, v in self.facts.items() if not k.startswith("private:")}, self.snapshot_time)


@dataclass(frozen=True)
class IntentPayload:
    goal_text: str
    constraints: tuple[Constraint, ...] = ()
    context: ContextState = field(default_factory=ContextState)
    deadline: Optional[int] = None
    priority_order: tuple[str, ...] = ()
    claims: tuple[str, ...] = ()
    tags: tuple[str, ...] = ()
    # set only on coordinator solicitations
    round: Optional[int] = None
    candidates: tuple[str, ...] = ()

    def __post_init__(self):
        if not isinstance(self.goal_text, str) or not self.goal_text.strip():
            raise PayloadMismatch("goal_text must be non-empty")
        keys = [c.key for c in self.constraints]
        if len(keys) != len(set(keys)):
            raise PayloadMismatch("constraint keys must be unique")
        unknown = set(self.priority_order) - set(keys)
        if unknown:
            raise PayloadMismatch(f"priority_order names unknown keys: {', '.join(sorted(unknown))}")
        if len(self.priority_order) != len(set(self.priority_order)):
            raise PayloadMismatch("priority_order has duplicates")

    @property
    def keys(self) -> frozenset[str]:
        return frozenset(c.key for c in self.constraints)

    def constraint(self, key: str) -> Optional[Constraint]:
        for c in self.constraints:
            if c.key == key:
                return c
        return None

    def to_doc(self) -> dict:
        doc = {
            "goal_text": self.goal_text,
            "constraints": [c.to_doc() for c in self.constraints],
            "context": self.context.to_doc(),
            "priority_order": list(self.priority_order),
            "claims": list(self.claims),
            "tags": list(self.tags),
        }
        _put(doc, "deadline", self.deadline)
        _put(doc, "round", self.round)
        if self.candidates:
            doc["candidates"] = list(self.candidates)
        return doc

    @classmethod
    def from_doc(cls, doc: Any) -> "IntentPayload":
        d = _fields(
            doc,
            "intent",
            {"goal_text", "constraints", "context", "priority_order", "claims", "tags"},
            {"deadline", "round", "candidates"},
        )
        if not isinstance(d["constraints"], list):
            raise PayloadMismatch("intent.constraints must be a list")
        return cls(
            goal_text=_str(d["goal_text"], "intent.goal_text", nonempty=True),
            constraints=tuple(Constraint.from_doc(c) for c in d["constraints"]),
            context=ContextState.from_doc(d["context"]),
            deadline=None if d.get("deadline") is None else _int(d["deadline"], "intent.deadline"),
            priority_order=_strs(d["priority_order"], "intent.priority_order"),
            claims=_strs(d["claims"], "intent.claims"),
            tags=_strs(d["tags"], "intent.tags"),
            round=None if d.get("round") is None else _int(d["round"], "intent.round"),
            candidates=_strs(d.get("candidates", []), "intent.candidates"),
        )


@dataclass(frozen=True)
class OfferPayload:
    capability_id: str
    coverage: frozenset[str]
    partial: bool
    terms: Mapping[str, Any] = field(default_factory=dict)
    expiry: int = 0

    def __post_init__(self):
        object.__setattr__(self, "coverage", frozenset(self.coverage))

    def to_doc(self) -> dict:
        return {
            "capability_id": self.capability_id,
            "coverage": sorted(self.coverage),
            "partial": self.partial,
            "terms": dict(self.terms),
            "expiry": self.expiry,
        }

    @classmethod
    def from_doc(cls, doc: Any) -> "OfferPayload":
        d = _fields(doc, "offer", {"capability_id", "coverage", "partial", "terms", "expiry"})
        return cls(
            _str(d["capability_id"], "offer.capability_id", nonempty=True),
            frozenset(_strs(d["coverage"], "offer.coverage")),
            _bool(d["partial"], "offer.partial"),
            _obj(d["terms"], "offer.terms"),
            _int(d["expiry"], "offer.expiry"),
        )


@dataclass(frozen=True)
class AcceptPayload:
    plan_id: str
    capability_ids: tuple[str, ...] = ()
    plan: Optional[Mapping[str, Any]] = None

    def to_doc(self) -> dict:
        doc = {"plan_id": self.plan_id, "capability_ids": list(self.capability_ids)}
        _put(doc, "plan", None if self.plan is None else dict(self.plan))
        return doc

    @classmethod
    def from_doc(cls, doc: Any) -> "AcceptPayload":
        d = _fields(doc, "accept", {"plan_id", "capability_ids"}, {"plan"})
        plan = d.get("plan")
        return cls(
            _str(d["plan_id"], "accept.plan_id", nonempty=True),
            _strs(d["capability_ids"], "accept.capability_ids"),
            None if plan is None else _obj(plan, "accept.plan"),
        )


@dataclass(frozen=True)
class RejectPayload:
    target: str
    reason: str
    failure: Optional[FailureSignal] = None
    detail: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.failure is not None:
            object.__setattr__(self, "failure", FailureSignal(self.failure))

    def to_doc(self) -> dict:
        doc = {"target": self.target, "reason": self.reason, "detail": dict(self.detail)}
        _put(doc, "failure", None if self.failure is None else self.failure.value)
        return doc

    @classmethod
    def from_doc(cls, doc: Any) -> "RejectPayload":
        d = _fields(doc, "reject", {"target", "reason", "detail"}, {"failure"})
        failure = d.get("failure")
        if failure is not None:
            try:
                failure = FailureSignal(failure)
            except ValueError as exc:
                raise PayloadMismatch(f"unknown failure signal {failure!r}") from exc
        return cls(_str(d["target"], "reject.target"), _str(d["reason"], "reject.reason"), failure, _obj(d["detail"], "reject.detail"))


@dataclass(frozen=True)
class ExecutePayload:
    plan_id: str
    step: Optional[int] = None
    capability_id: Optional[str] = None
    arguments: Mapping[str, Any] = field(default_factory=dict)

    def to_doc(self) -> dict:
        doc = {"plan_id": self.plan_id, "arguments": dict(self.arguments)}
        _put(doc, "step", self.step)
        _put(doc, "capability_id", self.capability_id)
        return doc

    @classmethod
    def from_doc(cls, doc: Any) -> "ExecutePayload":
        d = _fields(doc, "execute", {"plan_id", "arguments"}, {"step", "capability_id"})
        return cls(
            _str(d["plan_id"], "execute.plan_id", nonempty=True),
            None if d.get("step") is None else _int(d["step"], "execute.step"),
            None if d.get("capability_id") is None else _str(d["capability_id"], "execute.capability_id"),
            _obj(d["arguments"], "execute.arguments"),
        )


@dataclass(frozen=True)
class CompletePayload:
    plan_id: str
    success: bool
    capability_id: Optional[str] = None
    latency_score: Optional[float] = None
    consistency_score: Optional[float] = None
    coherence_score: Optional[float] = None
    result: Mapping[str, Any] = field(default_factory=dict)

    def indicators(self) -> list[float]:
        """Available outcome indicators: success plus any supplied scores."""
        vals = [1.0 if self.success else 0.0]
        for v in (self.latency_score, self.consistency_score, self.coherence_score):
            if v is not None:
                vals.append(float(v))
        return vals

    def to_doc(self) -> dict:
        doc = {"plan_id": self.plan_id, "success": self.success, "result": dict(self.result)}
        _put(doc, "capability_id", self.capability_id)
        _put(doc, "latency_score", self.latency_score)
        _put(doc, "consistency_score", self.consistency_score)
        _put(doc, "coherence_score", self.coherence_score)
        return doc

    @classmethod
    def from_doc(cls, doc: Any) -> "CompletePayload":
        d = _fields(
            doc,
            "complete",
            {"plan_id", "success", "result"},
            {"capability_id", "latency_score", "consistency_score", "coherence_score"},
        )

        def opt(name):
            v = d.get(name)
            return None if v is None else _num01(v, f"complete.{name}")

        return cls(
            _str(d["plan_id"], "complete.plan_id", nonempty=True),
            _bool(d["success"], "complete.success"),
            None if d.get("capability_id") is None else _str(d["capability_id"], "complete.capability_id"),
            opt("latency_score"),
            opt("consistency_score"),
            opt("coherence_score"),
            _obj(d["result"], "complete.result"),
        )


@dataclass(frozen=True)
class DissolvePayload:
    reason: str = "Completed"

    def to_doc(self) -> dict:
        return {"reason": self.reason}

    @classmethod
    def from_doc(cls, doc: Any) -> "DissolvePayload":
        d = _fields(doc, "dissolve", {"reason"})
        return cls(_str(d["reason"], "dissolve.reason"))


Payload = Union[
    IntentPayload, OfferPayload, AcceptPayload, RejectPayload, ExecutePayload, CompletePayload, DissolvePayload
]

PAYLOAD_TYPES: dict[MessageType, type] = {
    MessageType.INTENT: IntentPayload,
    MessageType.OFFER: OfferPayload,
    MessageType.ACCEPT: AcceptPayload,
    MessageType.REJECT: RejectPayload,
    MessageType.EXECUTE: ExecutePayload,
    MessageType.COMPLETE: CompletePayload,
    MessageType.DISSOLVE: DissolvePayload,
}


# -- envelope ------------------------------------------------------------------


@dataclass(frozen=True)
class Envelope:
    message_id: str
    interaction_id: str
    sender: str
    message_type: MessageType
    payload: Payload
    timestamp: int
    signature: Optional[bytes] = None
    protocol_version: str = PROTOCOL_VERSION

    def __post_init__(self):
        object.__setattr__(self, "message_type", MessageType(self.message_type))
        expected = PAYLOAD_TYPES[self.message_type]
        if not isinstance(self.payload, expected):
            raise PayloadMismatch(
                f"{self.message_type.value} envelope carries {type(self.payload).__name__}, expected {expected.__name__}"
            )
        if isinstance(self.timestamp, bool) or not isinstance(self.timestamp, int) or self.timestamp < 0:
            raise PayloadMismatch("timestamp must be non-negative integer milliseconds")
        for name in ("message_id", "interaction_id", "sender"):
            if not isinstance(getattr(self, name), str) or not getattr(self, name):
                raise MalformedDocument(f"{name} must be a non-empty string")

    @property
    def binding(self) -> bool:
        return self.message_type in BINDING_TYPES

    def with_signature(self, signature: Optional[bytes]) -> "Envelope":
        return replace(self, signature=signature)

    def to_doc(self, *, include_signature: bool = True) -> dict:
        doc = {
            "protocol_version": self.protocol_version,
            "message_id": self.message_id,
            "interaction_id": self.interaction_id,
            "sender": self.sender,
            "message_type": self.message_type.value,
            "payload": self.payload.to_doc(),
            "timestamp": self.timestamp,
        }
        if include_signature and self.signature is not None:
            doc["signature"] = self.signature.hex()
        return doc


_ENVELOPE_REQUIRED = {"protocol_version", "message_id", "interaction_id", "sender", "message_type", "payload", "timestamp"}


def encode_envelope(envelope: Envelope) -> bytes:
    return canonical_bytes(envelope.to_doc())


def canonical_signing_bytes(envelope: Envelope) -> bytes:
    """Bytes covered by the signature: the canonical envelope minus its signature."""
    return canonical_bytes(envelope.to_doc(include_signature=False))


def envelope_from_doc(doc: Any) -> Envelope:
    if not isinstance(doc, dict):
        raise MalformedDocument("envelope must be a JSON object")
    missing = _ENVELOPE_REQUIRED - doc.keys()
    if missing:
        raise MalformedDocument(f"envelope missing fields: {', '.join(sorted(missing))}")
    extra = doc.keys() - _ENVELOPE_REQUIRED - {"signature"}
    if extra:
        raise MalformedDocument(f"envelope has unknown fields: {', '.join(sorted(extra))}")
    if doc["protocol_version"] != PROTOCOL_VERSION:
        raise UnsupportedVersion(f"unsupported protocol version {doc['protocol_version']!r}")
    try:
        mtype = MessageType(doc["message_type"])
    except ValueError as exc:
        raise UnknownMessageType(f"unknown message type {doc['message_type']!r}") from exc
    payload = PAYLOAD_TYPES[mtype].from_doc(doc["payload"])
    signature = doc.get("signature")
    if signature is not None:
        if not isinstance(signature, str):
            raise MalformedDocument("signature must be a hex string")
        try:
            signature = bytes.fromhex(signature)
        except ValueError as exc:
            raise MalformedDocument("signature is not valid hex") from exc
    for name in ("message_id", "interaction_id", "sender"):
        if not isinstance(doc[name], str) or not doc[name]:
            raise MalformedDocument(f"{name} must be a non-empty string")
    ts = doc["timestamp"]
    if isinstance(ts, bool) or not isinstance(ts, int) or ts < 0:
        raise MalformedDocument("timestamp must be non-negative integer milliseconds")
    return Envelope(
        message_id=doc["message_id"],
        interaction_id=doc["interaction_id"],
        sender=doc["sender"],
        message_type=mtype,
        payload=payload,
        timestamp=ts,
        signature=signature,
        protocol_version=doc["protocol_version"],
    )


def decode_envelope(raw: bytes) -> Envelope:
    """Parse one envelope. Raises a ProtocolError subclass; never returns partial values."""
    return envelope_from_doc(parse_document(raw))


# -- framing -------------------------------------------------------------------


def encode_frame(body: bytes) -> bytes:
    if len(body) > MAX_FRAME:
        raise FrameError(f"frame of {len(body)} bytes exceeds limit")
    return struct.pack(">I", len(body)) + body


class FrameDecoder:
    """Incremental splitter for length-prefixed frames."""

    def __init__(self, max_frame: int = MAX_FRAME):
        self._buf = bytearray()
        self._max = max_frame

    def feed(self, data: bytes) -> Iterator[bytes]:
        self._buf.extend(data)
        while len(self._buf) >= 4:
            (n,) = struct.unpack(">I", self._buf[:4])
            if n > self._max:
                raise FrameError(f"announced frame length {n} exceeds limit")
            if len(self._buf) < 4 + n:
                break
            body = bytes(self._buf[4 : 4 + n])
            del self._buf[: 4 + n]
            yield body

    @property
    def pending(self) -> int:
        return len(self._buf)

    def close(self) -> None:
        """Signal end of stream; leftover bytes mean a truncated frame."""
        if self._buf:
            n = len(self._buf)
            self._buf.clear()
            raise FrameError(f"stream ended inside a frame ({n} stray bytes)")


# -- lifecycle -----------------------------------------------------------------

S = InteractionState
M = MessageType
R = Role

_ANY_ROLE = (R.INITIATOR, R.RESPONDER, R.COORDINATOR)


def _build_table() -> dict[tuple[S, M, R], S]:
    t: dict[tuple[S, M, R], S] = {}

    def add(state, msg, roles, nxt):
        for role in roles:
            t[(state, msg, role)] = nxt

    add(S.PROPOSED, M.OFFER, [R.RESPONDER], S.NEGOTIATING)
    add(S.PROPOSED, M.REJECT, [R.INITIATOR, R.RESPONDER], S.PROPOSED)
    # solidification binds a core operation without any offer
    add(S.PROPOSED, M.ACCEPT, [R.COORDINATOR], S.STABILIZED)

    add(S.NEGOTIATING, M.OFFER, [R.RESPONDER], S.NEGOTIATING)
    add(S.NEGOTIATING, M.REJECT, [R.INITIATOR, R.RESPONDER], S.NEGOTIATING)
    add(S.NEGOTIATING, M.REJECT, [R.COORDINATOR], S.RENEGOTIATING)
    add(S.NEGOTIATING, M.ACCEPT, [R.RESPONDER, R.COORDINATOR], S.STABILIZED)

    add(S.STABILIZED, M.EXECUTE, [R.INITIATOR], S.EXECUTING)
    add(S.STABILIZED, M.REJECT, _ANY_ROLE, S.RENEGOTIATING)

    add(S.EXECUTING, M.COMPLETE, [R.RESPONDER, R.COORDINATOR], S.COMPLETED)
    add(S.EXECUTING, M.REJECT, _ANY_ROLE, S.RENEGOTIATING)

    add(S.RENEGOTIATING, M.OFFER, [R.RESPONDER], S.NEGOTIATING)
    add(S.RENEGOTIATING, M.REJECT, [R.INITIATOR, R.RESPONDER, R.COORDINATOR], S.RENEGOTIATING)

    for state in S:
        if state is not S.DISSOLVED:
            add(state, M.DISSOLVE, [R.INITIATOR, R.COORDINATOR], S.DISSOLVED)
    return t


TRANSITIONS: Mapping[tuple[S, M, R], S] = _build_table()


def transition(state: InteractionState, msg: MessageType, sender_role: Role) -> InteractionState:
    """Successor state for ``msg`` sent by ``sender_role`` in ``state``.

    Raises IllegalTransition for every cell outside the table.
    """
    state, msg, sender_role = S(state), M(msg), R(sender_role)
    try:
        return TRANSITIONS[(state, msg, sender_role)]
    except KeyError:
        raise IllegalTransition(state, msg, sender_role) from None


def is_legal(state: InteractionState, msg: MessageType, sender_role: Role) -> bool:
    return (S(state), M(msg), R(sender_role)) in TRANSITIONS


@dataclass
class InteractionContext:
    """The live interface: everything that must vanish at dissolution."""

    interaction_id: str
    initiator: str
    intent: IntentPayload
    t_start: int
    state: InteractionState = InteractionState.PROPOSED
    participants: set[str] = field(default_factory=set)
    offers: list[OfferPayload] = field(default_factory=list)
    plan: Any = None
    t_ack: Optional[int] = None
    entropy_trace: list[float] = field(default_factory=list)
    grants: list[str] = field(default_factory=list)
    message_times: list[int] = field(default_factory=list)
    seen_messages: set[str] = field(default_factory=set)

    def observe(self, envelope: Envelope) -> None:
        self.seen_messages.add(envelope.message_id)
        self.message_times.append(envelope.timestamp)

    def window_holds(self) -> bool:
        """Every recorded message falls inside [t_start, t_ack]."""
        for ts in self.message_times:
            if ts < self.t_start:
                return False
            if self.t_ack is not None and ts > self.t_ack:
                return False
        return True

    def clear_artifacts(self) -> dict[str, int]:
        counts = {"offers": len(self.offers), "plans": int(self.plan is not None), "grants": len(self.grants)}
        self.offers = []
        self.plan = None
        self.grants = []
        return counts
