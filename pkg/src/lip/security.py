"""Identity enrollment, challenge-response, envelope signatures and claim-based authorization.

Signatures are Ed25519 (deterministic) over the canonical signing bytes of an
envelope. An agent id is the lowercase hex SHA-256 of its raw public key.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import secrets
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

from .errors import (
    AuthorizationDenied,
    BadSignature,
    ChallengeExpired,
    FingerprintCollision,
    InvalidToken,
    MalformedKey,
    MissingRequiredSignature,
    Replay,
    SecurityError,
    SenderMismatch,
    UnknownAgent,
)
from .protocol import ContextState, Envelope, IntentPayload, canonical_signing_bytes

NONCE_BYTES = 32
DEFAULT_CHALLENGE_TTL = 30_000
DEFAULT_TOKEN_TTL = 3_600_000


# -- keys ----------------------------------------------------------------------


def fingerprint(public_key: bytes) -> str:
    return hashlib.sha256(public_key).hexdigest()


def _load_public(public_key: bytes) -> Ed25519PublicKey:
    if not isinstance(public_key, (bytes, bytearray)) or len(public_key) != 32:
        raise MalformedKey("public key must be 32 raw bytes")
    try:
        return Ed25519PublicKey.from_public_bytes(bytes(public_key))
    except ValueError as exc:
        raise MalformedKey(str(exc)) from exc


def _load_private(seed: bytes) -> Ed25519PrivateKey:
    if not isinstance(seed, (bytes, bytearray)) or len(seed) != 32:
        raise MalformedKey("private key seed must be 32 raw bytes")
    return Ed25519PrivateKey.from_private_bytes(bytes(seed))


def public_key_from_seed(seed: bytes) -> bytes:
    return _load_private(seed).public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)


def sign_bytes(seed: bytes, data: bytes) -> bytes:
    return _load_private(seed).sign(data)


def verify_bytes(public_key: bytes, signature: bytes, data: bytes) -> bool:
    try:
        _load_public(public_key).verify(bytes(signature), data)
    except InvalidSignature:
        return False
    return True


@dataclass(frozen=True)
class KeyPair:
    seed: bytes = field(repr=False)
    public_key: bytes

    @classmethod
    def from_seed(cls, seed: bytes) -> "KeyPair":
        return cls(bytes(seed), public_key_from_seed(seed))

    @classmethod
    def generate(cls) -> "KeyPair":
        return cls.from_seed(os.urandom(32))

    @classmethod
    def derive(cls, *parts: Any) -> "KeyPair":
        """Deterministic key from arbitrary labels (harness use only)."""
        return cls.from_seed(hashlib.sha256("\x1f".join(map(str, parts)).encode("utf-8")).digest())

    @property
    def agent_id(self) -> str:
        return fingerprint(self.public_key)

    def sign(self, data: bytes) -> bytes:
        return sign_bytes(self.seed, data)

    def to_doc(self) -> dict:
        return {"seed": self.seed.hex(), "public_key": self.public_key.hex(), "fingerprint": self.agent_id}

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(self.to_doc(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.chmod(path, 0o600)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "KeyPair":
        text = Path(path).read_text(encoding="utf-8").strip()
        try:
            seed_hex = json.loads(text)["seed"] if text.startswith("{") else text
            pair = cls.from_seed(bytes.fromhex(seed_hex))
        except (ValueError, KeyError) as exc:
            raise MalformedKey(f"{path}: not a key file ({exc})") from exc
        return pair


# -- identities ----------------------------------------------------------------


@dataclass(frozen=True)
class AgentIdentity:
    agent_id: str
    public_key: bytes
    enrolled_at: int
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def verify(self, signature: bytes, data: bytes) -> bool:
        return verify_bytes(self.public_key, signature, data)


class IdentityStore:
    def __init__(self):
        self._ids: dict[str, AgentIdentity] = {}
        self._lock = threading.Lock()

    def enroll(self, public_key: bytes, metadata: Optional[Mapping[str, Any]] = None, now: int = 0) -> AgentIdentity:
        _load_public(public_key)
        agent_id = fingerprint(bytes(public_key))
        with self._lock:
            existing = self._ids.get(agent_id)
            if existing is not None:
                if existing.public_key != bytes(public_key):
                    raise FingerprintCollision(f"fingerprint {agent_id} already bound to a different key")
                return existing
            identity = AgentIdentity(agent_id, bytes(public_key), now, dict(metadata or {}))
            self._ids[agent_id] = identity
            return identity

    def get(self, agent_id: str) -> AgentIdentity:
        try:
            return self._ids[agent_id]
        except KeyError:
            raise UnknownAgent(f"agent {agent_id} is not enrolled") from None

    def find(self, agent_id: str) -> Optional[AgentIdentity]:
        return self._ids.get(agent_id)

    def __contains__(self, agent_id: str) -> bool:
        return agent_id in self._ids

    def remove(self, agent_id: str) -> None:
        with self._lock:
            self._ids.pop(agent_id, None)

    def as_mapping(self) -> Mapping[str, AgentIdentity]:
        return dict(self._ids)


def enroll(store: IdentityStore, public_key: bytes, metadata: Optional[Mapping[str, Any]] = None, now: int = 0) -> AgentIdentity:
    return store.enroll(public_key, metadata, now)


# -- challenge-response --------------------------------------------------------


@dataclass(frozen=True)
class Challenge:
    challenge_id: str
    agent_id: str
    nonce: bytes
    issued_at: int
    ttl: int
    consumed: bool = False

    def to_doc(self) -> dict:
        return {
            "challenge_id": self.challenge_id,
            "agent_id": self.agent_id,
            "nonce": self.nonce.hex(),
            "issued_at": self.issued_at,
            "ttl": self.ttl,
        }


@dataclass(frozen=True)
class SessionToken:
    token: str
    agent_id: str
    issued_at: int
    expires_at: int
    interaction_id: Optional[str] = None


class Authenticator:
    """Issues single-use challenges and the session tokens they unlock."""

    def __init__(
        self,
        identities: IdentityStore,
        clock: Callable[[], int],
        challenge_ttl: int = DEFAULT_CHALLENGE_TTL,
        token_ttl: int = DEFAULT_TOKEN_TTL,
    ):
        self.identities = identities
        self.clock = clock
        self.challenge_ttl = challenge_ttl
        self.token_ttl = token_ttl
        self._challenges: dict[str, Challenge] = {}
        self._tokens: dict[str, SessionToken] = {}
        self._closed_interactions: set[str] = set()
        self._lock = threading.Lock()

    def issue_challenge(self, agent_id: str) -> Challenge:
        self.identities.get(agent_id)
        challenge = Challenge(
            challenge_id=secrets.token_hex(16),
            agent_id=agent_id,
            nonce=secrets.token_bytes(NONCE_BYTES),
            issued_at=self.clock(),
            ttl=self.challenge_ttl,
        )
        with self._lock:
            self._challenges[challenge.challenge_id] = challenge
        return challenge

    def verify_challenge_response(
        self, challenge: Challenge | str, signature: bytes, interaction_id: Optional[str] = None
    ) -> SessionToken:
        cid = challenge if isinstance(challenge, str) else challenge.challenge_id
        with self._lock:
            stored = self._challenges.get(cid)
            if stored is None:
                raise BadSignature(f"unknown challenge {cid}")
            if stored.consumed:
                raise Replay(f"challenge {cid} already used")
            now = self.clock()
            # consumed before checking the signature: a failed attempt burns the challenge
            self._challenges[cid] = replace(stored, consumed=True)
            if now > stored.issued_at + stored.ttl:
                raise ChallengeExpired(f"challenge {cid} expired")
            identity = self.identities.get(stored.agent_id)
            if not identity.verify(signature, stored.nonce):
                raise BadSignature(f"challenge {cid}: signature does not match agent {stored.agent_id}")
            token = SessionToken(secrets.token_urlsafe(24), stored.agent_id, now, now + self.token_ttl, interaction_id)
            self._tokens[token.token] = token
            return token

    def validate(self, token: str, agent_id: Optional[str] = None) -> SessionToken:
        session = self._tokens.get(token)
        if session is None:
            raise InvalidToken("unknown session token")
        if self.clock() > session.expires_at:
            raise InvalidToken("session token expired")
        if session.interaction_id is not None and session.interaction_id in self._closed_interactions:
            raise InvalidToken("session token bound to a dissolved interaction")
        if agent_id is not None and session.agent_id != agent_id:
            raise InvalidToken("session token belongs to a different agent")
        return session

    def close_interaction(self, interaction_id: str) -> int:
        with self._lock:
            self._closed_interactions.add(interaction_id)
            dead = [k for k, t in self._tokens.items() if t.interaction_id == interaction_id]
            for k in dead:
                del self._tokens[k]
            return len(dead)

    def drop_agent(self, agent_id: str) -> None:
        with self._lock:
            for k in [k for k, t in self._tokens.items() if t.agent_id == agent_id]:
                del self._tokens[k]


# -- envelope signatures -------------------------------------------------------


def sign_envelope(envelope: Envelope, private_key: bytes) -> Envelope:
    return envelope.with_signature(sign_bytes(private_key, canonical_signing_bytes(envelope)))


def verify_envelope(envelope: Envelope, identity: AgentIdentity) -> None:
    if envelope.sender != identity.agent_id or fingerprint(identity.public_key) != identity.agent_id:
        raise SenderMismatch(f"envelope sender {envelope.sender} is not {identity.agent_id}")
    if envelope.signature is None:
        if envelope.binding:
            raise MissingRequiredSignature(f"{envelope.message_type.value} must be signed")
        return
    if not identity.verify(envelope.signature, canonical_signing_bytes(envelope)):
        raise BadSignature(f"signature on {envelope.message_id} does not verify")


# -- claims and policy ---------------------------------------------------------

_SCOPE = re.compile(r"^[A-Za-z0-9_-]+(\.[A-Za-z0-9_-]+)*$")
_PATTERN = re.compile(r"^([A-Za-z0-9_-]+|\*)(\.([A-Za-z0-9_-]+|\*))*$")


@dataclass(frozen=True)
class Claim:
    scope: str
    claimant: str
    constraints: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.scope, str) or not _SCOPE.match(self.scope):
            raise SecurityError(f"malformed scope {self.scope!r}")


def scope_matches(pattern: str, scope: str) -> bool:
    p, s = pattern.split("."), scope.split(".")
    return len(p) == len(s) and all(a == "*" or a == b for a, b in zip(p, s))


_OPS = {
    "eq": lambda a, b: a == b,
    "ne": lambda a, b: a != b,
    "lt": lambda a, b: a < b,
    "le": lambda a, b: a <= b,
    "gt": lambda a, b: a > b,
    "ge": lambda a, b: a >= b,
    "in": lambda a, b: a in b,
}


@dataclass(frozen=True)
class Predicate:
    key: str
    op: str = "present"
    value: Any = None

    def __post_init__(self):
        if self.op not in _OPS and self.op not in ("present", "absent"):
            raise SecurityError(f"unknown predicate op {self.op!r}")

    def holds(self, present: bool, actual: Any) -> bool:
        if self.op == "present":
            return present
        if self.op == "absent":
            return not present
        if not present:
            return False
        try:
            return bool(_OPS[self.op](actual, self.value))
        except TypeError:
            return False

    def describe(self) -> str:
        return f"{self.key} {self.op}" + ("" if self.op in ("present", "absent") else f" {self.value!r}")

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "Predicate":
        return cls(doc["key"], doc.get("op", "present"), doc.get("value"))


@dataclass(frozen=True)
class PolicyRule:
    effect: str
    scope: str
    agents: Any = "*"
    intent: tuple[Predicate, ...] = ()
    context: tuple[Predicate, ...] = ()

    def __post_init__(self):
        if self.effect not in ("allow", "deny"):
            raise SecurityError(f"rule effect must be allow or deny, got {self.effect!r}")
        if not _PATTERN.match(self.scope):
            raise SecurityError(f"malformed scope pattern {self.scope!r}")

    def selects(self, agent_id: str, metadata: Mapping[str, Any]) -> bool:
        if self.agents == "*":
            return True
        if isinstance(self.agents, (list, tuple)):
            return agent_id in self.agents
        if isinstance(self.agents, Mapping):
            wanted = self.agents.get("metadata", {})
            return all(metadata.get(k) == v for k, v in wanted.items())
        return False

    def failed_condition(self, intent: IntentPayload, context: ContextState) -> Optional[str]:
        for pred in self.intent:
            c = intent.constraint(pred.key)
            if not pred.holds(c is not None, None if c is None else c.value):
                return f"intent predicate '{pred.describe()}' not met"
        for pred in self.context:
            if not pred.holds(pred.key in context.facts, context.facts.get(pred.key)):
                return f"context predicate '{pred.describe()}' not met"
        return None

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "PolicyRule":
        agents = doc.get("agents", "*")
        if isinstance(agents, list):
            agents = tuple(agents)
        return cls(
            doc["effect"],
            doc["scope"],
            agents,
            tuple(Predicate.from_doc(p) for p in doc.get("intent", [])),
            tuple(Predicate.from_doc(p) for p in doc.get("context", [])),
        )


@dataclass(frozen=True)
class Policy:
    """Ordered rules; the first rule whose scope, agent selector and predicates
    all match decides. No match means deny."""

    rules: tuple[PolicyRule, ...] = ()

    def decide(
        self, scope: str, agent_id: str, metadata: Mapping[str, Any], intent: IntentPayload, context: ContextState
    ) -> tuple[bool, str]:
        for i, rule in enumerate(self.rules):
            if not scope_matches(rule.scope, scope) or not rule.selects(agent_id, metadata):
                continue
            if rule.failed_condition(intent, context) is not None:
                continue
            return rule.effect == "allow", f"rule {i} ({rule.effect} {rule.scope})"
        near = [
            f"rule {i}: {rule.failed_condition(intent, context)}"
            for i, rule in enumerate(self.rules)
            if scope_matches(rule.scope, scope) and rule.selects(agent_id, metadata) and rule.effect == "allow"
        ]
        return False, "default deny" + (f" ({'; '.join(near)})" if near else "")

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "Policy":
        return cls(tuple(PolicyRule.from_doc(r) for r in doc.get("rules", [])))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Policy":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_doc(json.load(fh))


@dataclass(frozen=True)
class AuthorizationGrant:
    grant_id: str
    interaction_id: str
    agent_id: str
    scopes: frozenset[str]
    granted_at: int
    revoked: bool = False
    decisions: Mapping[str, str] = field(default_factory=dict, compare=False)

    def to_doc(self) -> dict:
        return {
            "grant_id": self.grant_id,
            "interaction_id": self.interaction_id,
            "agent_id": self.agent_id,
            "scopes": sorted(self.scopes),
            "granted_at": self.granted_at,
            "revoked": self.revoked,
        }


class GrantStore:
    def __init__(self):
        self._grants: dict[str, AuthorizationGrant] = {}
        self._counter: dict[str, int] = {}
        self._lock = threading.Lock()

    def next_id(self, interaction_id: str, agent_id: str) -> str:
        with self._lock:
            n = self._counter.get(interaction_id, 0)
            self._counter[interaction_id] = n + 1
        digest = hashlib.sha256(f"{interaction_id}|{agent_id}|{n}".encode()).hexdigest()
        return f"grant-{digest[:16]}"

    def add(self, grant: AuthorizationGrant) -> None:
        with self._lock:
            self._grants[grant.grant_id] = grant

    def get(self, grant_id: str) -> AuthorizationGrant:
        return self._grants[grant_id]

    def for_interaction(self, interaction_id: str) -> list[AuthorizationGrant]:
        return [g for g in self._grants.values() if g.interaction_id == interaction_id]

    def live(self) -> list[AuthorizationGrant]:
        return [g for g in self._grants.values() if not g.revoked]

    def revoke(self, grant_id: str) -> bool:
        with self._lock:
            g = self._grants.get(grant_id)
            if g is None or g.revoked:
                return False
            self._grants[grant_id] = replace(g, revoked=True)
            return True

    def revoke_interaction_grants(self, interaction_id: str) -> int:
        with self._lock:
            n = 0
            for gid, g in self._grants.items():
                if g.interaction_id == interaction_id and not g.revoked:
                    self._grants[gid] = replace(g, revoked=True)
                    n += 1
            return n

    def check(self, interaction_id: str, agent_id: str, scope: str) -> bool:
        return any(
            g.interaction_id == interaction_id and g.agent_id == agent_id and not g.revoked and scope in g.scopes
            for g in self._grants.values()
        )

    def has_live(self, interaction_id: str, agent_id: str) -> bool:
        return any(
            g.interaction_id == interaction_id and g.agent_id == agent_id and not g.revoked for g in self._grants.values()
        )


def evaluate_claims(
    claims: Sequence[Claim],
    intent: IntentPayload,
    context: ContextState,
    policy: Policy,
    *,
    interaction_id: str,
    metadata: Optional[Mapping[str, Any]] = None,
    grants: Optional[GrantStore] = None,
    now: int = 0,
) -> AuthorizationGrant:
    """Grant the claimed scopes the policy allows. Denies when none survive."""
    if not claims:
        raise AuthorizationDenied({"*": "no scopes claimed"})
    claimants = {c.claimant for c in claims}
    if len(claimants) != 1:
        raise SecurityError("claims in one evaluation must share a claimant")
    (agent_id,) = claimants
    allowed, reasons = set(), {}
    for claim in claims:
        ok, why = policy.decide(claim.scope, agent_id, metadata or {}, intent, context)
        reasons[claim.scope] = ("allow: " if ok else "deny: ") + why
        if ok:
            allowed.add(claim.scope)
    if not allowed:
        raise AuthorizationDenied(reasons)
    grant_id = grants.next_id(interaction_id, agent_id) if grants is not None else f"grant-{secrets.token_hex(8)}"
    grant = AuthorizationGrant(grant_id, interaction_id, agent_id, frozenset(allowed), now, decisions=reasons)
    if grants is not None:
        grants.add(grant)
    return grant


def revoke_interaction_grants(grants: GrantStore, interaction_id: str) -> int:
    return grants.revoke_interaction_grants(interaction_id)
