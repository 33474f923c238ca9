"""The coordinator: authn, authz, lifecycle, negotiation and dissolution for every interaction.

All inbound traffic enters through :meth:`Coordinator.submit`, which never
raises for protocol-level problems: errors come back as Reject envelopes
addressed to the sender, and the interaction is left untouched.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Optional

from .audit import AuditEvent, AuditLog, AuditRecord, replay_interaction, group_by_interaction
from .errors import (
    AuthorizationDenied,
    ConfigError,
    DuplicateCapability,
    DuplicateMessage,
    IllegalTransition,
    InvalidToken,
    LipError,
    NegotiationError,
    NoMapping,
    NoSurvivingCandidates,
    NothingToSimplify,
    NoViableCandidates,
    PayloadMismatch,
    ResidualCouplingViolation,
    SchemaViolation,
    ScopeCheckFailed,
    StabilizationRejected,
    StaleMessage,
    UnknownInteraction,
    Unresolvable,
)
from .negotiation import (
    DEFAULT_N_MAX,
    DEFAULT_RENEGOTIATION_CAP,
    DEFAULT_SIMPLIFY_MAX,
    DEFAULT_TAU,
    CompositionPlan,
    CoreOntology,
    FallbackMode,
    NegotiationSession,
    PlanStep,
    RenegotiationCapExceeded,
    SessionStatus,
    SolidInvocation,
    clarify_round,
    compose,
    fallback_simplify,
    fallback_solidify,
    open_session,
    renegotiate,
    stabilize,
    structure_distribution,
)
from .protocol import (
    AcceptPayload,
    CompletePayload,
    DissolvePayload,
    Envelope,
    ExecutePayload,
    FailureSignal,
    InteractionContext,
    InteractionState,
    IntentPayload,
    MessageType,
    OfferPayload,
    RejectPayload,
    Role,
    transition,
)
from .security import (
    AgentIdentity,
    Authenticator,
    AuthorizationGrant,
    Claim,
    GrantStore,
    IdentityStore,
    KeyPair,
    Policy,
    SessionToken,
    evaluate_claims,
    sign_envelope,
    verify_envelope,
)
from .semantics import (
    Adjudicator,
    AdjudicatorConfig,
    Capability,
    CandidateJudgment,
    HttpAdjudicator,
    LexicalAdjudicator,
    PriorStore,
    adjudicate,
    admit,
    apply_priors,
    normalize_judgments,
    outcome_signal,
)

log = logging.getLogger(__name__)

State = InteractionState


class DissolutionReason(str, Enum):
    COMPLETED = "Completed"
    ABANDONED = "Abandoned"
    FALLBACK_EXHAUSTED = "FallbackExhausted"
    DEADLINE = "Deadline"
    POLICY_REVOCATION = "PolicyRevocation"


@dataclass(frozen=True)
class CoordinatorConfig:
    bind: str = "127.0.0.1:7400"
    tau: float = DEFAULT_TAU
    n_max: int = DEFAULT_N_MAX
    admission_threshold: float = 0.35
    alpha: float = 0.7
    prior_smoothing: float = 0.2
    renegotiation_cap: int = DEFAULT_RENEGOTIATION_CAP
    simplify_max: int = DEFAULT_SIMPLIFY_MAX
    offer_ttl: int = 60_000
    policy_path: Optional[str] = None
    core_path: Optional[str] = None
    audit_dir: Optional[str] = None
    prior_path: Optional[str] = None
    coordinator_key: Optional[str] = None
    adjudicator: str = "lexical"
    adjudicator_url: Optional[str] = None

    @property
    def adjudicator_config(self) -> AdjudicatorConfig:
        return AdjudicatorConfig(self.admission_threshold, self.alpha, self.prior_smoothing)

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any], base: Optional[Path] = None) -> "CoordinatorConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        values = dict(doc)
        if base is not None:
            for key in ("policy_path", "core_path", "audit_dir", "prior_path", "coordinator_key"):
                if values.get(key) and not os.path.isabs(values[key]):
                    values[key] = str(base / values[key])
        cfg = cls(**values)
        cfg.adjudicator_config  # range checks
        if cfg.adjudicator not in ("lexical", "http"):
            raise ConfigError(f"unknown adjudicator {cfg.adjudicator!r}")
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike, env: Optional[Mapping[str, str]] = None) -> "CoordinatorConfig":
        env = os.environ if env is None else env
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if env.get("LIP_AUDIT_DIR"):
            doc["audit_dir"] = env["LIP_AUDIT_DIR"]
        try:
            return cls.from_doc(doc, base=path.parent)
        except (TypeError, LipError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc


@dataclass(frozen=True)
class DissolutionReport:
    interaction_id: str
    reason: DissolutionReason
    artifacts_cleared: Mapping[str, int]
    residual_coupling: int

    def to_doc(self) -> dict:
        return {
            "interaction_id": self.interaction_id,
            "reason": self.reason.value,
            "artifacts_cleared": dict(self.artifacts_cleared),
            "residual_coupling": self.residual_coupling,
        }


@dataclass
class Effects:
    """What one call did: messages to deliver, audit written, errors raised."""

    outbound: list[tuple[str, Envelope]] = field(default_factory=list)
    records: list[AuditRecord] = field(default_factory=list)
    error: Optional[LipError] = None
    reports: list[DissolutionReport] = field(default_factory=list)
    state: Optional[InteractionState] = None


class CapabilityRegistry:
    def __init__(self):
        self.entries: dict[str, list[Capability]] = {}
        self.updated_at: dict[str, int] = {}
        self._owner: dict[str, str] = {}
        self._lock = threading.Lock()

    def register(self, capability: Capability, now: int) -> str:
        with self._lock:
            if capability.capability_id in self._owner:
                raise DuplicateCapability(f"capability {capability.capability_id} already registered")
            self.entries.setdefault(capability.owner, []).append(capability)
            self._owner[capability.capability_id] = capability.owner
            self.updated_at[capability.owner] = now
            return capability.capability_id

    def remove_agent(self, agent_id: str) -> int:
        with self._lock:
            caps = self.entries.pop(agent_id, [])
            self.updated_at.pop(agent_id, None)
            for c in caps:
                self._owner.pop(c.capability_id, None)
            return len(caps)

    def all(self) -> list[Capability]:
        return [c for caps in self.entries.values() for c in caps]

    def get(self, capability_id: str) -> Optional[Capability]:
        owner = self._owner.get(capability_id)
        if owner is None:
            return None
        return next((c for c in self.entries[owner] if c.capability_id == capability_id), None)

    def owner_of(self, capability_id: str) -> Optional[str]:
        return self._owner.get(capability_id)


@dataclass
class _Live:
    """Coordinator-side runtime for one interaction (beyond the context itself)."""

    ctx: InteractionContext
    intent: IntentPayload
    judgments: list[CandidateJudgment] = field(default_factory=list)
    owners: dict[str, str] = field(default_factory=dict)
    session: Optional[NegotiationSession] = None
    solicited: set[str] = field(default_factory=set)
    round_offers: dict[str, OfferPayload] = field(default_factory=dict)
    round_declines: set[str] = field(default_factory=set)
    offers: dict[str, OfferPayload] = field(default_factory=dict)
    excluded: set[str] = field(default_factory=set)
    failed: set[str] = field(default_factory=set)
    accepts: dict[str, Envelope] = field(default_factory=dict)
    completes: dict[str, Envelope] = field(default_factory=dict)
    next_step: int = 0
    execute_env: Optional[Envelope] = None
    solid: Optional[SolidInvocation] = None
    simplifications: int = 0
    renegotiations: int = 0
    attempts: int = 0
    plans: int = 0
    out_seq: int = 0
    fallbacks: list[str] = field(default_factory=list)
    agent_grants: dict[str, str] = field(default_factory=dict)
    prior_updates: int = 0
    report: Optional[DissolutionReport] = None


def _sig(env: Envelope) -> dict:
    return {"message_id": env.message_id, "sender": env.sender, "signature": env.signature.hex() if env.signature else None}


class Coordinator:
    def __init__(
        self,
        config: Optional[CoordinatorConfig] = None,
        *,
        policy: Optional[Policy] = None,
        core: Optional[CoreOntology] = None,
        clock: Optional[Callable[[], int]] = None,
        audit: Optional[AuditLog] = None,
        priors: Optional[PriorStore] = None,
        keypair: Optional[KeyPair] = None,
        adjudicator: Optional[Adjudicator] = None,
    ):
        self.config = config or CoordinatorConfig()
        self.clock = clock or (lambda: int(time.time() * 1000))
        self.policy = policy if policy is not None else Policy()
        self.core = core if core is not None else CoreOntology()
        self.audit = audit if audit is not None else AuditLog(directory=self.config.audit_dir)
        self.priors = priors if priors is not None else PriorStore(self.config.prior_path)
        if adjudicator is None:
            if self.config.adjudicator == "http":
                if not self.config.adjudicator_url:
                    raise ConfigError("http adjudicator needs adjudicator_url")
                adjudicator = HttpAdjudicator(self.config.adjudicator_url)
            else:
                adjudicator = LexicalAdjudicator()
        self.adjudicator = adjudicator
        self.keypair = keypair or KeyPair.generate()
        self.identities = IdentityStore()
        self.auth = Authenticator(self.identities, self.clock)
        self.grants = GrantStore()
        self.registry = CapabilityRegistry()
        self.identity = self.identities.enroll(self.keypair.public_key, {"role": "coordinator"}, self.clock())
        self._live: dict[str, _Live] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._table_lock = threading.Lock()

    @property
    def agent_id(self) -> str:
        return self.keypair.agent_id

    # -- identity and registry ---------------------------------------------

    def enroll(self, public_key: bytes, metadata: Optional[Mapping[str, Any]] = None) -> AgentIdentity:
        return self.identities.enroll(public_key, metadata, self.clock())

    def issue_challenge(self, agent_id: str):
        return self.auth.issue_challenge(agent_id)

    def authenticate(self, challenge, signature: bytes) -> SessionToken:
        return self.auth.verify_challenge_response(challenge, signature)

    def register_capability(self, token: str, capability: Capability) -> str:
        session = self.auth.validate(token)
        if capability.owner != session.agent_id:
            capability = replace(capability, owner=session.agent_id)
        return self.registry.register(capability, self.clock())

    def depart(self, agent_id: str) -> int:
        self.auth.drop_agent(agent_id)
        return self.registry.remove_agent(agent_id)

    def reload_policy(self, policy: Policy) -> int:
        self.policy = policy
        return len(policy.rules)

    # -- views -------------------------------------------------------------

    def context(self, interaction_id: str) -> InteractionContext:
        try:
            return self._live[interaction_id].ctx
        except KeyError:
            raise UnknownInteraction(interaction_id) from None

    def runtime(self, interaction_id: str) -> _Live:
        try:
            return self._live[interaction_id]
        except KeyError:
            raise UnknownInteraction(interaction_id) from None

    def interactions(self) -> dict[str, InteractionContext]:
        return {ix: live.ctx for ix, live in self._live.items()}

    def audit_query(self, interaction_id: str) -> list[AuditRecord]:
        return self.audit.query(interaction_id)

    # -- plumbing ----------------------------------------------------------

    def _lock_for(self, interaction_id: str) -> threading.Lock:
        with self._table_lock:
            return self._locks.setdefault(interaction_id, threading.Lock())

    def _record(self, fx: Effects, live: _Live, event: AuditEvent, detail: dict) -> AuditRecord:
        detail = dict(detail)
        detail["state"] = live.ctx.state.value
        rec = self.audit.append(live.ctx.interaction_id, event, detail, self.clock())
        fx.records.append(rec)
        return rec

    def _emit(self, fx: Effects, live: _Live, recipient: str, mtype: MessageType, payload) -> Envelope:
        live.out_seq += 1
        ix = live.ctx.interaction_id
        mid = "c-" + hashlib.sha256(f"{ix}|{live.out_seq}".encode()).hexdigest()[:16]
        env = Envelope(mid, ix, self.agent_id, mtype, payload, self.clock())
        env = sign_envelope(env, self.keypair.seed)
        fx.outbound.append((recipient, env))
        return env

    def _reply_error(self, fx: Effects, envelope: Envelope, exc: LipError) -> None:
        fx.error = exc
        payload = RejectPayload(target=envelope.message_id, reason=exc.code, detail=exc.to_doc())
        env = Envelope(
            "c-err-" + hashlib.sha256(f"{envelope.interaction_id}|{envelope.message_id}|{exc.code}".encode()).hexdigest()[:16],
            envelope.interaction_id,
            self.agent_id,
            MessageType.REJECT,
            payload,
            self.clock(),
        )
        fx.outbound.append((envelope.sender, sign_envelope(env, self.keypair.seed)))

    def _role(self, live: _Live, agent_id: str) -> Role:
        if agent_id == live.ctx.initiator:
            return Role.INITIATOR
        if agent_id == self.agent_id:
            return Role.COORDINATOR
        return Role.RESPONDER

    def _set_state(self, live: _Live, state: InteractionState) -> None:
        live.ctx.state = state

    # -- submit ------------------------------------------------------------

    def submit(self, envelope: Envelope, token: str) -> Effects:
        """Process one inbound envelope from an authenticated agent."""
        fx = Effects()
        with self._lock_for(envelope.interaction_id):
            try:
                self.auth.validate(token, envelope.sender)
                verify_envelope(envelope, self.identities.get(envelope.sender))
                if envelope.message_type is MessageType.INTENT:
                    self._on_intent(fx, envelope)
                else:
                    live = self.runtime(envelope.interaction_id)
                    self._admit_message(live, envelope)
                    handler = {
                        MessageType.OFFER: self._on_offer,
                        MessageType.ACCEPT: self._on_accept,
                        MessageType.REJECT: self._on_reject,
                        MessageType.EXECUTE: self._on_execute,
                        MessageType.COMPLETE: self._on_complete,
                        MessageType.DISSOLVE: self._on_dissolve,
                    }[envelope.message_type]
                    handler(fx, live, envelope)
            except LipError as exc:
                log.debug("rejecting %s from %s: %s", envelope.message_id, envelope.sender[:8], exc)
                self._reply_error(fx, envelope, exc)
        live = self._live.get(envelope.interaction_id)
        fx.state = live.ctx.state if live else None
        return fx

    def _admit_message(self, live: _Live, envelope: Envelope) -> None:
        ctx = live.ctx
        if envelope.message_id in ctx.seen_messages:
            raise DuplicateMessage(f"message {envelope.message_id} already processed")
        if envelope.timestamp < ctx.t_start:
            raise StaleMessage(f"message {envelope.message_id} predates the interaction")
        # legality check up front; state changes are applied by the handlers
        transition(ctx.state, envelope.message_type, self._role(live, envelope.sender))

    # -- intent and negotiation --------------------------------------------

    def _on_intent(self, fx: Effects, env: Envelope) -> None:
        if env.interaction_id in self._live:
            raise IllegalTransition(self._live[env.interaction_id].ctx.state, MessageType.INTENT, Role.INITIATOR)
        intent: IntentPayload = env.payload
        ctx = InteractionContext(env.interaction_id, env.sender, intent, t_start=env.timestamp)
        ctx.observe(env)
        live = _Live(ctx, intent)
        self._live[env.interaction_id] = live
        self._record(
            fx,
            live,
            AuditEvent.INTENT_RECEIVED,
            {"initiator": env.sender, "message_id": env.message_id, "intent": intent.to_doc()},
        )
        identity = self.identities.get(env.sender)
        try:
            grant = evaluate_claims(
                [Claim(scope, env.sender) for scope in intent.claims],
                intent,
                intent.context,
                self.policy,
                interaction_id=env.interaction_id,
                metadata=identity.metadata,
                grants=self.grants,
                now=self.clock(),
            )
        except AuthorizationDenied as exc:
            self._record(fx, live, AuditEvent.POLICY_DECISION, {"agent": env.sender, "allowed": False, "reasons": exc.reasons})
            self._reply_error(fx, env, exc)
            self._dissolve(fx, live, DissolutionReason.POLICY_REVOCATION, notify_initiator=False)
            return
        self._note_grant(fx, live, env.sender, grant)
        self._start_attempt(fx, live)

    def _note_grant(self, fx: Effects, live: _Live, agent_id: str, grant) -> None:
        live.ctx.grants.append(grant.grant_id)
        live.agent_grants[agent_id] = grant.grant_id
        self._record(
            fx,
            live,
            AuditEvent.POLICY_DECISION,
            {
                "agent": agent_id,
                "allowed": True,
                "grant_id": grant.grant_id,
                "scopes": sorted(grant.scopes),
                "reasons": dict(sorted(grant.decisions.items())),
            },
        )

    def _start_attempt(self, fx: Effects, live: _Live) -> None:
        """Adjudicate the current intent and open a fresh negotiation session."""
        live.attempts += 1
        live.offers.clear()
        live.round_offers.clear()
        live.round_declines.clear()
        live.session = None
        intent = live.intent
        caps = [
            c
            for c in self.registry.all()
            if c.owner != live.ctx.initiator and c.capability_id not in live.failed
        ]
        judgments: list[CandidateJudgment] = []
        admitted: list[CandidateJudgment] = []
        if caps:
            raw = adjudicate(intent, intent.context, caps, self.adjudicator)
            judgments = apply_priors(raw, self.priors, self.config.alpha)
            admitted = admit(judgments, self.config.adjudicator_config)
        live.judgments = admitted
        live.owners = {c.capability_id: c.owner for c in caps}
        detail: dict[str, Any] = {
            "attempt": live.attempts,
            "intent_keys": sorted(intent.keys),
            "judgments": [j.to_doc() for j in judgments],
            "admitted": [j.capability_id for j in admitted],
            "threshold": self.config.admission_threshold,
            "alpha": self.config.alpha,
        }
        if admitted:
            try:
                live.session = open_session(live.ctx.interaction_id, normalize_judgments(admitted), self.config.tau, self.config.n_max)
            except NoViableCandidates:
                live.session = None
        if live.session is not None:
            detail["session"] = live.session.to_doc()
            live.ctx.entropy_trace.append(live.session.H0)
        self._record(fx, live, AuditEvent.ADJUDICATED, detail)
        if live.session is None:
            self._fallback(fx, live, "no admitted candidates")
            return
        self._solicit(fx, live, [j.capability_id for j in admitted])

    def _solicit(self, fx: Effects, live: _Live, cap_ids: Iterable[str]) -> None:
        cap_ids = sorted(set(cap_ids))
        live.solicited = set(cap_ids)
        live.round_offers = {}
        live.round_declines = set()
        by_owner: dict[str, list[str]] = {}
        for cid in cap_ids:
            by_owner.setdefault(live.owners[cid], []).append(cid)
        rnd = live.session.round + 1 if live.session else 1
        public = replace(live.intent, context=live.intent.context.public(), round=rnd)
        for owner in sorted(by_owner):
            self._emit(fx, live, owner, MessageType.INTENT, replace(public, candidates=tuple(by_owner[owner])))

    def _on_offer(self, fx: Effects, live: _Live, env: Envelope) -> None:
        offer: OfferPayload = env.payload
        cid = offer.capability_id
        if cid not in live.solicited:
            raise PayloadMismatch(f"offer for {cid} was not solicited in this round")
        if live.owners.get(cid) != env.sender:
            raise PayloadMismatch(f"{env.sender[:12]} does not own {cid}")
        keys = live.intent.keys
        relevant = offer.coverage & keys
        if keys and offer.partial != (relevant != keys):
            raise PayloadMismatch(f"offer for {cid}: partial flag disagrees with coverage")
        if offer.expiry < self.clock():
            raise PayloadMismatch(f"offer for {cid} already expired")
        ctx = live.ctx
        ctx.observe(env)
        self._set_state(live, transition(ctx.state, MessageType.OFFER, Role.RESPONDER))
        ctx.offers.append(offer)
        ctx.participants.add(env.sender)
        live.offers[cid] = offer
        live.round_offers[cid] = offer
        live.solicited.discard(cid)
        if not live.solicited:
            self._close_round(fx, live)

    def _close_round(self, fx: Effects, live: _Live) -> None:
        session = live.session
        offers = [live.round_offers[c] for c in sorted(live.round_offers)]
        detail: dict[str, Any] = {
            "attempt": live.attempts,
            "offers": sorted(live.round_offers),
            "declined": sorted(live.round_declines),
        }
        if session.status is SessionStatus.OPEN:
            try:
                dist = structure_distribution(live.intent, offers, live.judgments)
            except Unresolvable as exc:
                detail["unresolvable"] = sorted(exc.missing_keys)
                self._record(fx, live, AuditEvent.ROUND_COMPLETED, detail)
                self._fallback(fx, live, f"unresolvable: {', '.join(sorted(exc.missing_keys)) or 'no offers'}")
                return
            session = clarify_round(session, dist)
            live.session = session
            live.ctx.entropy_trace.append(session.entropy_trace[-1])
            detail.update(
                round=session.round,
                entropy=session.entropy_trace[-1],
                delta=session.last_delta,
                H_max=session.H_max,
                status=session.status.value,
                distribution=dist.to_doc(),
            )
            self._record(fx, live, AuditEvent.ROUND_COMPLETED, detail)
            if session.non_progress and session.non_progress[-1] == session.round:
                self._record(fx, live, AuditEvent.NON_PROGRESS, {"round": session.round, "delta": session.last_delta})
            if session.status is SessionStatus.CONVERGED:
                self._converged(fx, live)
            elif session.status is SessionStatus.FALLBACK_TRIGGERED:
                self._fallback(fx, live, "entropy budget not met within n_max rounds")
            else:
                self._solicit(fx, live, [c for c in sorted(live.round_offers)])
            return
        # single-candidate sessions converge on opening; the round only gathers offers
        detail.update(round=session.round, entropy=session.entropy_trace[-1], status=session.status.value)
        self._record(fx, live, AuditEvent.ROUND_COMPLETED, detail)
        if not offers:
            self._fallback(fx, live, "every candidate declined")
            return
        self._converged(fx, live)

    def _converged(self, fx: Effects, live: _Live) -> None:
        offers = [o for c, o in sorted(live.offers.items()) if c not in live.excluded]
        while True:
            try:
                live.plans += 1
                plan = compose(
                    live.intent,
                    offers,
                    live.judgments,
                    owners=live.owners,
                    plan_id=f"{live.ctx.interaction_id}:plan:{live.plans}",
                )
            except Unresolvable as exc:
                self._fallback(fx, live, f"unresolvable: {', '.join(sorted(exc.missing_keys)) or 'no offers'}")
                return
            denied = self._authorize_plan(fx, live, plan)
            if not denied:
                break
            live.excluded |= denied
            offers = [o for o in offers if o.capability_id not in denied]
        live.ctx.plan = plan
        live.accepts = {}
        self._record(fx, live, AuditEvent.PLAN_COMPOSED, {"plan": plan.to_doc(), "solid": False})
        for owner in sorted(plan.atomic_accept_set):
            mine = tuple(s.capability_id for s in plan.steps if s.owner == owner)
            self._emit(fx, live, owner, MessageType.ACCEPT, AcceptPayload(plan.plan_id, mine, plan.to_doc()))

    def _authorize_plan(self, fx: Effects, live: _Live, plan: CompositionPlan) -> set[str]:
        """Evaluate the step owners' scope claims; return capability ids that were denied."""
        ix = live.ctx.interaction_id
        for agent, gid in list(live.agent_grants.items()):
            if agent != live.ctx.initiator and agent not in plan.owners:
                self.grants.revoke(gid)
                del live.agent_grants[agent]
        denied: set[str] = set()
        for owner in sorted(plan.owners):
            scopes = sorted({s for step in plan.steps if step.owner == owner for s in self._scopes_of(step.capability_id)})
            gid = live.agent_grants.get(owner)
            if gid is not None:
                g = self.grants.get(gid)
                if not g.revoked and set(scopes) <= g.scopes:
                    continue
                self.grants.revoke(gid)
                del live.agent_grants[owner]
            if not scopes:
                denied |= {s.capability_id for s in plan.steps if s.owner == owner}
                self._record(fx, live, AuditEvent.POLICY_DECISION, {"agent": owner, "allowed": False, "reasons": {"*": "capability declares no scopes"}})
                continue
            identity = self.identities.get(owner)
            try:
                grant = evaluate_claims(
                    [Claim(s, owner) for s in scopes],
                    live.intent,
                    live.intent.context,
                    self.policy,
                    interaction_id=ix,
                    metadata=identity.metadata,
                    grants=self.grants,
                    now=self.clock(),
                )
            except AuthorizationDenied as exc:
                denied |= {s.capability_id for s in plan.steps if s.owner == owner}
                self._record(fx, live, AuditEvent.POLICY_DECISION, {"agent": owner, "allowed": False, "reasons": exc.reasons})
                continue
            self._note_grant(fx, live, owner, grant)
            if not set(scopes) <= grant.scopes:
                # a partially granted owner cannot run its steps
                denied |= {s.capability_id for s in plan.steps if s.owner == owner}
        return denied

    def _scopes_of(self, capability_id: str) -> frozenset[str]:
        cap = self.registry.get(capability_id)
        return cap.declared_scopes if cap else frozenset()

    def _on_accept(self, fx: Effects, live: _Live, env: Envelope) -> None:
        payload: AcceptPayload = env.payload
        plan: Optional[CompositionPlan] = live.ctx.plan
        if plan is None or payload.plan_id != plan.plan_id:
            raise PayloadMismatch(f"accept references unknown plan {payload.plan_id}")
        if env.sender not in plan.atomic_accept_set:
            raise PayloadMismatch("sender is not a party to the plan")
        live.ctx.observe(env)
        live.accepts[env.sender] = env
        try:
            result = stabilize(live.session, plan, list(live.accepts.values()), self.identities.as_mapping(), live.intent.keys)
        except StabilizationRejected:
            live.accepts.clear()
            raise
        if not result.stabilized:
            return
        self._set_state(live, transition(live.ctx.state, MessageType.ACCEPT, Role.RESPONDER))
        self._record(
            fx,
            live,
            AuditEvent.STABILIZED,
            {"plan_id": plan.plan_id, "accepts": {a: _sig(e) for a, e in sorted(live.accepts.items())}, "solid": False},
        )
        self._emit(fx, live, live.ctx.initiator, MessageType.ACCEPT, AcceptPayload(plan.plan_id, plan.capability_ids, plan.to_doc()))

    def _on_reject(self, fx: Effects, live: _Live, env: Envelope) -> None:
        payload: RejectPayload = env.payload
        ctx = live.ctx
        role = self._role(live, env.sender)
        target = payload.target
        plan: Optional[CompositionPlan] = ctx.plan
        in_plan = plan is not None and target in plan.capability_ids
        if role is Role.RESPONDER and live.owners.get(target) != env.sender:
            raise PayloadMismatch(f"{env.sender[:12]} cannot reject on behalf of {target}")
        if ctx.state in (State.STABILIZED, State.EXECUTING) and not in_plan:
            raise PayloadMismatch(f"{target} is not part of the active plan")
        ctx.observe(env)
        if ctx.state in (State.STABILIZED, State.EXECUTING):
            signal = payload.failure or FailureSignal.CAPABILITY_UNAVAILABLE
            self._failure(fx, live, signal, target, env.sender, role)
            return
        if ctx.state is State.NEGOTIATING and in_plan:
            # a plan party withdrew before stabilization: drop it and recompose
            live.excluded.add(target)
            live.accepts.clear()
            ctx.plan = None
            self._converged(fx, live)
            return
        self._set_state(live, transition(ctx.state, MessageType.REJECT, role))
        live.excluded.add(target)
        if target in live.solicited:
            live.solicited.discard(target)
            live.round_declines.add(target)
            if not live.solicited:
                self._close_round(fx, live)

    def _failure(self, fx: Effects, live: _Live, signal: FailureSignal, capability_id: str, agent: str, role: Role) -> None:
        ctx = live.ctx
        self._set_state(live, transition(ctx.state, MessageType.REJECT, role))
        if capability_id in (s.capability_id for s in (ctx.plan.steps if ctx.plan else ())):
            live.failed.add(capability_id)
        live.excluded.add(capability_id)
        try:
            session = renegotiate(live.session, signal, live.excluded, cap=self.config.renegotiation_cap)
        except (RenegotiationCapExceeded, NoSurvivingCandidates) as exc:
            session, exhausted = None, exc
        detail = {"signal": FailureSignal(signal).value, "capability_id": capability_id, "agent": agent, "role": role.value, "cycle": live.renegotiations + 1}
        if session is not None:
            detail["session"] = session.to_doc()
        self._record(fx, live, AuditEvent.FAILURE_SIGNAL, detail)
        self._emit(fx, live, ctx.initiator, MessageType.REJECT, RejectPayload(capability_id, "renegotiating", FailureSignal(signal)))
        ctx.plan = None
        live.accepts.clear()
        live.completes.clear()
        live.next_step = 0
        live.execute_env = None
        if session is None:
            self._record(fx, live, AuditEvent.FALLBACK_TRIGGERED, {"mode": None, "reason": str(exhausted), "exhausted": True})
            self._dissolve(fx, live, DissolutionReason.FALLBACK_EXHAUSTED)
            return
        live.renegotiations = session.cycles
        live.session = session
        live.ctx.entropy_trace.append(session.H0)
        live.offers = {c: o for c, o in live.offers.items() if c not in live.excluded}
        self._solicit(fx, live, session.live_candidates.ids)

    # -- fallbacks ---------------------------------------------------------

    def _fallback(self, fx: Effects, live: _Live, reason: str) -> None:
        if live.simplifications < self.config.simplify_max:
            try:
                simpler = fallback_simplify(live.intent)
            except NothingToSimplify:
                pass
            else:
                dropped = sorted(live.intent.keys - simpler.keys)
                live.simplifications += 1
                live.fallbacks.append(FallbackMode.RECURSIVE_SIMPLIFICATION.value)
                live.intent = simpler
                live.excluded = set(live.failed)
                self._record(
                    fx,
                    live,
                    AuditEvent.FALLBACK_TRIGGERED,
                    {"mode": FallbackMode.RECURSIVE_SIMPLIFICATION.value, "reason": reason, "dropped": dropped, "attempt": live.simplifications},
                )
                self._start_attempt(fx, live)
                return
        self._solidify(fx, live, reason)

    def _solidify(self, fx: Effects, live: _Live, reason: str) -> None:
        ctx = live.ctx
        mode = FallbackMode.SOLIDIFICATION.value
        if ctx.state not in (State.PROPOSED, State.NEGOTIATING):
            self._record(fx, live, AuditEvent.FALLBACK_TRIGGERED, {"mode": mode, "reason": reason, "error": f"cannot solidify from {ctx.state.value}", "exhausted": True})
            self._dissolve(fx, live, DissolutionReason.FALLBACK_EXHAUSTED)
            return
        try:
            invocation = fallback_solidify(ctx.intent, self.core)
        except (NoMapping, SchemaViolation) as exc:
            self._record(fx, live, AuditEvent.FALLBACK_TRIGGERED, {"mode": mode, "reason": reason, "error": exc.to_doc(), "exhausted": True})
            self._dissolve(fx, live, DissolutionReason.FALLBACK_EXHAUSTED)
            return
        live.fallbacks.append(mode)
        live.solid = invocation
        self._record(fx, live, AuditEvent.FALLBACK_TRIGGERED, {"mode": mode, "reason": reason, "invocation": invocation.to_doc()})
        live.plans += 1
        step = PlanStep(ctx.intent.keys, ctx.intent.goal_text, f"core:{invocation.operation}", self.agent_id, invocation.arguments)
        plan = CompositionPlan(f"{ctx.interaction_id}:plan:{live.plans}", (step,), ctx.intent.keys, frozenset())
        ctx.plan = plan
        # negotiated parties are released; only the initiator's grant remains
        for agent, gid in list(live.agent_grants.items()):
            if agent != ctx.initiator:
                self.grants.revoke(gid)
                del live.agent_grants[agent]
        self._record(fx, live, AuditEvent.PLAN_COMPOSED, {"plan": plan.to_doc(), "solid": True})
        self._set_state(live, transition(ctx.state, MessageType.ACCEPT, Role.COORDINATOR))
        self._record(fx, live, AuditEvent.STABILIZED, {"plan_id": plan.plan_id, "accepts": {}, "solid": True})
        self._emit(fx, live, ctx.initiator, MessageType.ACCEPT, AcceptPayload(plan.plan_id, plan.capability_ids, plan.to_doc()))

    # -- execution ---------------------------------------------------------

    def _on_execute(self, fx: Effects, live: _Live, env: Envelope) -> None:
        payload: ExecutePayload = env.payload
        ctx = live.ctx
        plan: Optional[CompositionPlan] = ctx.plan
        if plan is None or payload.plan_id != plan.plan_id:
            raise PayloadMismatch(f"execute references unknown plan {payload.plan_id}")
        self._scope_check(live, plan)
        ctx.observe(env)
        self._set_state(live, transition(ctx.state, MessageType.EXECUTE, Role.INITIATOR))
        live.execute_env = env
        live.completes = {}
        live.next_step = 0
        self._record(
            fx,
            live,
            AuditEvent.EXECUTION_STARTED,
            {"plan_id": plan.plan_id, "execute": _sig(env), "steps": [s.capability_id for s in plan.steps], "solid": live.solid is not None},
        )
        if live.solid is not None:
            self._finish(fx, live, plan, {"invocation": live.solid.to_doc()})
            return
        self._dispatch_next(fx, live, plan)

    def _scope_check(self, live: _Live, plan: CompositionPlan) -> None:
        ix = live.ctx.interaction_id
        if not self.grants.has_live(ix, live.ctx.initiator):
            raise ScopeCheckFailed("initiator holds no live grant for this interaction")
        for step in plan.steps:
            if step.owner == self.agent_id:
                continue
            for scope in self._scopes_of(step.capability_id):
                if not self.grants.check(ix, step.owner, scope):
                    raise ScopeCheckFailed(f"{step.capability_id}: scope {scope} not granted")

    def _dispatch_next(self, fx: Effects, live: _Live, plan: CompositionPlan) -> None:
        step = plan.steps[live.next_step]
        self._emit(
            fx,
            live,
            step.owner,
            MessageType.EXECUTE,
            ExecutePayload(plan.plan_id, live.next_step, step.capability_id, dict(step.terms)),
        )

    def _on_complete(self, fx: Effects, live: _Live, env: Envelope) -> None:
        payload: CompletePayload = env.payload
        ctx = live.ctx
        plan: Optional[CompositionPlan] = ctx.plan
        if plan is None or payload.plan_id != plan.plan_id:
            raise PayloadMismatch(f"complete references unknown plan {payload.plan_id}")
        step = plan.steps[live.next_step]
        if payload.capability_id != step.capability_id or env.sender != step.owner:
            raise PayloadMismatch(f"complete for {payload.capability_id} but step {live.next_step} is {step.capability_id}")
        ctx.observe(env)
        if not payload.success:
            self._failure(fx, live, FailureSignal.EXECUTION_ERROR, step.capability_id, env.sender, Role.RESPONDER)
            return
        live.completes[step.capability_id] = env
        live.next_step += 1
        if live.next_step < len(plan.steps):
            self._dispatch_next(fx, live, plan)
            return
        self._finish(fx, live, plan, {})

    def _finish(self, fx: Effects, live: _Live, plan: CompositionPlan, result: dict) -> None:
        ctx = live.ctx
        solid = live.solid is not None
        self._set_state(live, transition(ctx.state, MessageType.COMPLETE, Role.COORDINATOR if solid else Role.RESPONDER))
        ctx.t_ack = self.clock()
        priors = {}
        cfg = self.config.adjudicator_config
        for cid, cenv in sorted(live.completes.items()):
            outcome = outcome_signal(cenv.payload.indicators())
            priors[cid] = self.priors.update(cid, outcome, cfg, ctx.t_ack).rho
        for cid in sorted(live.failed - set(live.completes)):
            priors[cid] = self.priors.update(cid, 0.0, cfg, ctx.t_ack).rho
        live.prior_updates += len(priors)
        self._record(
            fx,
            live,
            AuditEvent.EXECUTION_COMPLETED,
            {
                "plan_id": plan.plan_id,
                "completes": {c: _sig(e) for c, e in sorted(live.completes.items())},
                "outcomes": {c: outcome_signal(e.payload.indicators()) for c, e in sorted(live.completes.items())},
                "priors": priors,
                "solid": solid,
                "result": result,
            },
        )
        self._emit(fx, live, ctx.initiator, MessageType.COMPLETE, CompletePayload(plan.plan_id, True, result=result))

    # -- dissolution -------------------------------------------------------

    def _on_dissolve(self, fx: Effects, live: _Live, env: Envelope) -> None:
        live.ctx.observe(env)
        reason = DissolutionReason.COMPLETED if live.ctx.state is State.COMPLETED else DissolutionReason.ABANDONED
        self._dissolve(fx, live, reason, notify_initiator=False)

    def dissolve(self, interaction_id: str, reason: DissolutionReason = DissolutionReason.ABANDONED) -> tuple[DissolutionReport, Effects]:
        """Coordinator-initiated dissolution. Idempotent on dissolved interactions."""
        fx = Effects()
        with self._lock_for(interaction_id):
            live = self.runtime(interaction_id)
            report = self._dissolve(fx, live, DissolutionReason(reason))
        fx.state = live.ctx.state
        return report, fx

    def _dissolve(self, fx: Effects, live: _Live, reason: DissolutionReason, notify_initiator: bool = True) -> DissolutionReport:
        ctx = live.ctx
        ix = ctx.interaction_id
        if ctx.state is State.DISSOLVED:
            return DissolutionReport(ix, reason, {"offers": 0, "plans": 0, "grants": 0, "session": 0}, 0)
        transition(ctx.state, MessageType.DISSOLVE, Role.COORDINATOR)
        counts = ctx.clear_artifacts()
        counts["session"] = int(live.session is not None)
        live.session = None
        live.offers.clear()
        live.round_offers.clear()
        live.solicited.clear()
        live.accepts.clear()
        live.completes.clear()
        live.agent_grants.clear()
        self.grants.revoke_interaction_grants(ix)
        self.auth.close_interaction(ix)
        self._set_state(live, State.DISSOLVED)
        if ctx.t_ack is None:
            ctx.t_ack = self.clock()
        residue = self._interaction_residue(live)
        report = DissolutionReport(ix, reason, counts, residue)
        live.report = report
        fx.reports.append(report)
        self._record(
            fx,
            live,
            AuditEvent.DISSOLVED,
            {
                **report.to_doc(),
                "grants": [{"grant_id": g.grant_id, "revoked": g.revoked} for g in sorted(self.grants.for_interaction(ix), key=lambda g: g.grant_id)],
            },
        )
        if residue != 0:
            raise ResidualCouplingViolation(f"{ix}: {residue} artifacts survived dissolution")
        recipients = set(ctx.participants)
        if notify_initiator:
            recipients.add(ctx.initiator)
        recipients.discard(self.agent_id)
        for agent in sorted(recipients):
            self._emit(fx, live, agent, MessageType.DISSOLVE, DissolvePayload(reason.value))
        return report

    def _interaction_residue(self, live: _Live) -> int:
        ctx = live.ctx
        n = 0 if ctx.state is State.DISSOLVED else 1
        n += sum(1 for g in self.grants.for_interaction(ctx.interaction_id) if not g.revoked)
        n += int(ctx.plan is not None) + len(ctx.offers) + len(ctx.grants)
        if ctx.state is State.DISSOLVED:
            n += int(live.session is not None) + len(live.accepts)
        return n

    def residual_coupling(self, a: str, b: str) -> int:
        """Live coordination artifacts shared by agents ``a`` and ``b``.

        Audit records and outcome priors are not counted.
        """
        total = 0
        for live in self._live.values():
            ctx = live.ctx
            involved = {ctx.initiator} | ctx.participants
            plan: Optional[CompositionPlan] = ctx.plan
            if plan is not None:
                involved |= plan.owners
            if a not in involved or b not in involved:
                continue
            if ctx.state is not State.DISSOLVED:
                total += 1
            total += sum(1 for g in self.grants.for_interaction(ctx.interaction_id) if not g.revoked and g.agent_id in (a, b))
            if plan is not None and {a, b} <= (plan.owners | {ctx.initiator}):
                total += 1
        return total

    def sweep_deadlines(self, now: Optional[int] = None) -> tuple[list[DissolutionReport], Effects]:
        now = self.clock() if now is None else now
        fx = Effects()
        reports = []
        for ix in sorted(self._live):
            live = self._live[ix]
            deadline = live.ctx.intent.deadline
            if live.ctx.state is State.DISSOLVED or deadline is None or deadline >= now:
                continue
            with self._lock_for(ix):
                reports.append(self._dissolve(fx, live, DissolutionReason.DEADLINE))
        return reports, fx

    # -- recovery ----------------------------------------------------------

    def recover(self, records: Iterable[AuditRecord]) -> list[DissolutionReport]:
        """Rebuild interactions left open in a previous run and dissolve them.

        Sessions, offers and signatures are not reconstructible from the
        audit, so a recovered interaction cannot resume; it is closed as
        Abandoned so its grants and bindings cannot outlive the crash.
        """
        reports = []
        for ix, recs in group_by_interaction(records).items():
            if ix in self._live or any(r.event is AuditEvent.DISSOLVED for r in recs):
                continue
            first = recs[0]
            if first.event is not AuditEvent.INTENT_RECEIVED:
                continue
            rep = replay_interaction(recs)
            intent = IntentPayload.from_doc(first.detail["intent"])
            ctx = InteractionContext(ix, first.detail["initiator"], intent, t_start=first.at)
            ctx.state = rep.final_state or State.PROPOSED
            live = _Live(ctx, intent)
            self._live[ix] = live
            # grants issued before the crash are rebuilt so dissolution revokes them
            for r in recs:
                gid = r.detail.get("grant_id") if r.event is AuditEvent.POLICY_DECISION else None
                if gid:
                    self.grants.add(AuthorizationGrant(gid, ix, r.detail["agent"], frozenset(r.detail.get("scopes", ())), r.at))
                    ctx.grants.append(gid)
                    live.agent_grants[r.detail["agent"]] = gid
            fx = Effects()
            reports.append(self._dissolve(fx, live, DissolutionReason.ABANDONED))
        return reports
