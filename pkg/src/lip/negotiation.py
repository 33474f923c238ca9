"""Entropy-budgeted negotiation sessions, plan composition and fallbacks."""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

from .canonical import canonical_bytes
from .errors import (
    LipError,
    NegotiationError,
    NoMapping,
    NoSurvivingCandidates,
    NothingToSimplify,
    RoundBudgetExhausted,
    SchemaViolation,
    SessionClosed,
    StabilizationRejected,
    Unresolvable,
)
from .protocol import AcceptPayload, Envelope, FailureSignal, IntentPayload, MessageType, OfferPayload
from .semantics import CandidateJudgment, SuitabilityDistribution, entropy, tokens

DEFAULT_TAU = 0.5
DEFAULT_N_MAX = 5
DEFAULT_RENEGOTIATION_CAP = 2
DEFAULT_SIMPLIFY_MAX = 2
MAX_ENUMERATED_OFFERS = 12


class SessionStatus(str, Enum):
    OPEN = "Open"
    CONVERGED = "Converged"
    FALLBACK_TRIGGERED = "FallbackTriggered"
    ABANDONED = "Abandoned"


class Convergence(str, Enum):
    CONVERGED = "Converged"
    CONTINUE = "Continue"
    TRIGGER_FALLBACK = "TriggerFallback"


class FallbackMode(str, Enum):
    RECURSIVE_SIMPLIFICATION = "RecursiveSimplification"
    SOLIDIFICATION = "Solidification"


FALLBACK_ORDER = (FallbackMode.RECURSIVE_SIMPLIFICATION, FallbackMode.SOLIDIFICATION)


class RenegotiationCapExceeded(NegotiationError):
    code = "renegotiation_cap_exceeded"


@dataclass(frozen=True)
class NegotiationSession:
    interaction_id: str
    H0: float
    tau: float
    n_max: int
    live_candidates: SuitabilityDistribution
    round: int = 0
    entropy_trace: tuple[float, ...] = ()
    status: SessionStatus = SessionStatus.OPEN
    non_progress: tuple[int, ...] = ()
    latest: Optional[SuitabilityDistribution] = None
    cycles: int = 0

    @property
    def H_max(self) -> float:
        return (1.0 - self.tau) * self.H0

    @property
    def last_delta(self) -> Optional[float]:
        if len(self.entropy_trace) < 2:
            return None
        return self.entropy_trace[-2] - self.entropy_trace[-1]

    def to_doc(self) -> dict:
        return {
            "H0": self.H0,
            "H_max": self.H_max,
            "tau": self.tau,
            "n_max": self.n_max,
            "round": self.round,
            "entropy_trace": list(self.entropy_trace),
            "status": self.status.value,
        }


def _check_params(tau: float, n_max: int) -> None:
    if not 0.0 < tau < 1.0:
        raise NegotiationError(f"tau must lie in (0, 1), got {tau}")
    if isinstance(n_max, bool) or not isinstance(n_max, int) or n_max < 1:
        raise NegotiationError(f"n_max must be an integer >= 1, got {n_max!r}")


def open_session(
    interaction_id: str, dist: SuitabilityDistribution, tau: float = DEFAULT_TAU, n_max: int = DEFAULT_N_MAX
) -> NegotiationSession:
    _check_params(tau, n_max)
    h0 = entropy(dist)
    session = NegotiationSession(interaction_id, h0, tau, n_max, dist, entropy_trace=(h0,), latest=dist)
    if h0 <= session.H_max:
        session = replace(session, status=SessionStatus.CONVERGED)
    return session


def check_convergence(session: NegotiationSession) -> Convergence:
    latest = session.entropy_trace[-1]
    if latest <= session.H_max:
        return Convergence.CONVERGED
    if session.round >= session.n_max and all(h > session.H_max for h in session.entropy_trace[1:]):
        return Convergence.TRIGGER_FALLBACK
    return Convergence.CONTINUE


_STATUS_FOR = {
    Convergence.CONVERGED: SessionStatus.CONVERGED,
    Convergence.CONTINUE: SessionStatus.OPEN,
    Convergence.TRIGGER_FALLBACK: SessionStatus.FALLBACK_TRIGGERED,
}


def clarify_round(session: NegotiationSession, revised: SuitabilityDistribution) -> NegotiationSession:
    """Record one clarification round. Rounds that fail to lower entropy are kept
    in ``non_progress`` but do not end the session."""
    if session.status is not SessionStatus.OPEN:
        raise SessionClosed(f"session {session.interaction_id} is {session.status.value}")
    if session.round >= session.n_max:
        raise RoundBudgetExhausted(f"session {session.interaction_id} used all {session.n_max} rounds")
    h = entropy(revised)
    rnd = session.round + 1
    stalled = session.entropy_trace[-1] - h <= 0
    nxt = replace(
        session,
        round=rnd,
        entropy_trace=session.entropy_trace + (h,),
        latest=revised,
        non_progress=session.non_progress + ((rnd,) if stalled else ()),
    )
    return replace(nxt, status=_STATUS_FOR[check_convergence(nxt)])


def renegotiate(
    session: NegotiationSession,
    failure: FailureSignal,
    withdrawn: Iterable[str],
    cap: Optional[int] = DEFAULT_RENEGOTIATION_CAP,
) -> NegotiationSession:
    """Drop withdrawn candidates and restart the round budget on the survivors.

    The interaction id is kept: the context survives the failure.
    """
    FailureSignal(failure)
    if cap is not None and session.cycles >= cap:
        raise RenegotiationCapExceeded(f"renegotiation cap of {cap} reached")
    drop = set(withdrawn)
    survivors = [(k, p) for k, p in session.live_candidates.entries if k not in drop]
    if not survivors or all(p <= 0 for _, p in survivors):
        raise NoSurvivingCandidates("no candidates survive renegotiation; dissolve")
    fresh = open_session(session.interaction_id, SuitabilityDistribution.from_weights(survivors), session.tau, session.n_max)
    return replace(fresh, cycles=session.cycles + 1)


# -- composition ---------------------------------------------------------------


@dataclass(frozen=True)
class PlanStep:
    sub_intention: frozenset[str]
    goal_fragment: str
    capability_id: str
    owner: str
    terms: Mapping[str, Any] = field(default_factory=dict)

    def to_doc(self) -> dict:
        return {
            "sub_intention": sorted(self.sub_intention),
            "goal_fragment": self.goal_fragment,
            "capability_id": self.capability_id,
            "owner": self.owner,
            "terms": dict(self.terms),
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "PlanStep":
        return cls(frozenset(doc["sub_intention"]), doc["goal_fragment"], doc["capability_id"], doc["owner"], dict(doc["terms"]))


@dataclass(frozen=True)
class CompositionPlan:
    plan_id: str
    steps: tuple[PlanStep, ...]
    coverage: frozenset[str]
    atomic_accept_set: frozenset[str]

    @property
    def capability_ids(self) -> tuple[str, ...]:
        return tuple(s.capability_id for s in self.steps)

    @property
    def owners(self) -> frozenset[str]:
        return frozenset(s.owner for s in self.steps)

    def to_doc(self) -> dict:
        return {
            "plan_id": self.plan_id,
            "steps": [s.to_doc() for s in self.steps],
            "coverage": sorted(self.coverage),
            "atomic_accept_set": sorted(self.atomic_accept_set),
        }

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "CompositionPlan":
        return cls(
            doc["plan_id"],
            tuple(PlanStep.from_doc(s) for s in doc["steps"]),
            frozenset(doc["coverage"]),
            frozenset(doc["atomic_accept_set"]),
        )


def _latest_offers(offers: Iterable[OfferPayload], scores: Mapping[str, float]) -> dict[str, OfferPayload]:
    """One offer per admitted capability; a later offer supersedes an earlier one."""
    out: dict[str, OfferPayload] = {}
    for offer in offers:
        if offer.capability_id in scores:
            out[offer.capability_id] = offer
    return out


def _plan_id(steps: Sequence[PlanStep]) -> str:
    digest = hashlib.sha256(canonical_bytes([s.to_doc() for s in steps])).hexdigest()
    return "plan-" + digest[:16]


def compose(
    intent: IntentPayload,
    offers: Sequence[OfferPayload],
    judgments: Sequence[CandidateJudgment],
    *,
    owners: Optional[Mapping[str, str]] = None,
    plan_id: Optional[str] = None,
) -> CompositionPlan:
    """Greedy weighted set cover over the intent's constraint keys.

    Each pick maximizes newly covered keys times effective score; ties go to
    the higher score, then the smaller capability id. Raises Unresolvable
    when the admitted offers cannot cover every key.
    """
    owners = owners or {}
    scores = {j.capability_id: j.effective for j in judgments}
    pool = _latest_offers(offers, scores)
    keys = intent.keys
    steps: list[PlanStep] = []

    if not keys:
        if not pool:
            raise Unresolvable(frozenset())
        best = min(pool.values(), key=lambda o: (-scores[o.capability_id], o.capability_id))
        steps.append(PlanStep(frozenset(), intent.goal_text, best.capability_id, owners.get(best.capability_id, ""), best.terms))
    else:
        remaining = set(keys)
        used: set[str] = set()
        while remaining:
            best_key, best = None, None
            for cid, offer in pool.items():
                if cid in used:
                    continue
                new = len(offer.coverage & remaining)
                if new == 0:
                    continue
                key = (-(new * scores[cid]), -scores[cid], cid)
                if best_key is None or key < best_key:
                    best_key, best = key, offer
            if best is None:
                raise Unresolvable(frozenset(remaining))
            newly = frozenset(best.coverage & remaining)
            used.add(best.capability_id)
            remaining -= newly
            steps.append(PlanStep(newly, intent.goal_text, best.capability_id, owners.get(best.capability_id, ""), best.terms))

    coverage = frozenset().union(*(s.sub_intention for s in steps)) if steps else frozenset()
    return CompositionPlan(
        plan_id=plan_id or _plan_id(steps),
        steps=tuple(steps),
        coverage=coverage,
        atomic_accept_set=frozenset(s.owner for s in steps if s.owner),
    )


def minimal_covers(keys: frozenset[str], offers: Mapping[str, frozenset[str]]) -> list[tuple[str, ...]]:
    """All irredundant covers of ``keys`` (removing any member breaks coverage)."""
    ids = sorted(offers)
    found = []
    for size in range(1, len(ids) + 1):
        for combo in itertools.combinations(ids, size):
            union = frozenset().union(*(offers[c] for c in combo)) & keys
            if union != keys:
                continue
            redundant = False
            for drop in combo:
                rest = frozenset().union(*(offers[c] for c in combo if c != drop)) & keys
                if rest == keys:
                    redundant = True
                    break
            if not redundant:
                found.append(combo)
    return found


def structure_distribution(
    intent: IntentPayload, offers: Sequence[OfferPayload], judgments: Sequence[CandidateJudgment]
) -> SuitabilityDistribution:
    """Probability over candidate message structures built from the received offers.

    Structures are the irredundant compositions of offers covering the intent;
    each is weighted by the mean effective score of its members. With no
    constraint keys every single offer is a structure. Raises Unresolvable
    when nothing covers the intent.
    """
    scores = {j.capability_id: j.effective for j in judgments}
    pool = _latest_offers(offers, scores)
    if len(pool) > MAX_ENUMERATED_OFFERS:
        keep = sorted(pool, key=lambda c: (-scores[c], c))[:MAX_ENUMERATED_OFFERS]
        pool = {c: pool[c] for c in keep}
    keys = intent.keys
    if not keys:
        combos = [(c,) for c in sorted(pool)]
    else:
        combos = minimal_covers(keys, {c: o.coverage & keys for c, o in pool.items()})
    if not combos:
        covered = frozenset().union(*(o.coverage for o in pool.values())) if pool else frozenset()
        raise Unresolvable(keys - covered)
    weights = [("+".join(c), math.fsum(scores[x] for x in c) / len(c)) for c in combos]
    if all(w <= 0 for _, w in weights):
        weights = [(k, 1.0) for k, _ in weights]
    return SuitabilityDistribution.from_weights(weights)


# -- stabilization -------------------------------------------------------------


@dataclass(frozen=True)
class StabilizationResult:
    stabilized: bool
    plan_id: str
    accepted_by: frozenset[str]
    missing: frozenset[str]


def stabilize(
    session: NegotiationSession,
    plan: CompositionPlan,
    accepts: Sequence[Envelope],
    identities: Mapping[str, Any],
    required_keys: Optional[frozenset[str]] = None,
) -> StabilizationResult:
    """Atomic agreement: every agent in the accept set must have a verified Accept.

    A single bad or unsigned Accept rejects the whole attempt.
    """
    from .security import verify_envelope

    if session.status is not SessionStatus.CONVERGED:
        raise NegotiationError(f"session {session.interaction_id} has not converged")
    if required_keys is not None and not required_keys <= plan.coverage:
        raise NegotiationError(f"plan {plan.plan_id} leaves keys uncovered")
    accepted: set[str] = set()
    for env in accepts:
        if env.message_type is not MessageType.ACCEPT:
            raise StabilizationRejected(f"{env.message_id} is not an accept")
        if not isinstance(env.payload, AcceptPayload) or env.payload.plan_id != plan.plan_id:
            continue
        if env.sender not in plan.atomic_accept_set:
            continue
        identity = identities.get(env.sender)
        if identity is None:
            raise StabilizationRejected(f"accept from unknown agent {env.sender}")
        try:
            verify_envelope(env, identity)
        except LipError as exc:
            raise StabilizationRejected(f"accept {env.message_id} from {env.sender}: {exc}") from exc
        accepted.add(env.sender)
    missing = frozenset(plan.atomic_accept_set - accepted)
    return StabilizationResult(not missing, plan.plan_id, frozenset(accepted), missing)


# -- fallbacks -----------------------------------------------------------------


def fallback_simplify(intent: IntentPayload) -> IntentPayload:
    """Drop the lowest-priority droppable constraint (last in priority_order)."""
    if not intent.priority_order:
        raise NothingToSimplify("no droppable constraint left; escalate to solidification")
    victim = intent.priority_order[-1]
    return replace(
        intent,
        constraints=tuple(c for c in intent.constraints if c.key != victim),
        priority_order=intent.priority_order[:-1],
        round=None,
        candidates=(),
    )


_TYPES = {
    "string": lambda v: isinstance(v, str),
    "number": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "integer": lambda v: isinstance(v, int) and not isinstance(v, bool),
    "boolean": lambda v: isinstance(v, bool),
    "object": lambda v: isinstance(v, dict),
    "array": lambda v: isinstance(v, list),
    "any": lambda v: True,
}


@dataclass(frozen=True)
class FieldSpec:
    type: str = "any"
    required: bool = False

    def __post_init__(self):
        if self.type not in _TYPES:
            raise NegotiationError(f"unknown field type {self.type!r}")


@dataclass(frozen=True)
class CoreOperation:
    name: str
    schema: Mapping[str, FieldSpec]

    def validate(self, arguments: Mapping[str, Any]) -> None:
        """Closed-schema check: unknown fields and failed rules both reject."""
        extra = set(arguments) - set(self.schema)
        invalid = {}
        for name, spec in self.schema.items():
            if name not in arguments:
                if spec.required:
                    invalid[name] = "required field missing"
            elif not _TYPES[spec.type](arguments[name]):
                invalid[name] = f"expected {spec.type}"
        if extra or invalid:
            raise SchemaViolation(extra, invalid)


@dataclass(frozen=True)
class MappingRule:
    match_tokens: frozenset[str]
    operation: str
    arguments: Mapping[str, Any]


@dataclass(frozen=True)
class CoreOntology:
    operations: Mapping[str, CoreOperation] = field(default_factory=dict)
    mapping_rules: tuple[MappingRule, ...] = ()

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any]) -> "CoreOntology":
        ops = {}
        for op in doc.get("operations", []):
            schema = {name: FieldSpec(**spec) for name, spec in op["schema"].items()}
            ops[op["name"]] = CoreOperation(op["name"], schema)
        rules = []
        for rule in doc.get("mapping_rules", []):
            if rule["operation"] not in ops:
                raise NegotiationError(f"mapping rule targets unknown operation {rule['operation']!r}")
            rules.append(MappingRule(frozenset(t.lower() for t in rule.get("match", [])), rule["operation"], dict(rule.get("arguments", {}))))
        return cls(ops, tuple(rules))

    @classmethod
    def load(cls, path: str | Path) -> "CoreOntology":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_doc(json.load(fh))


@dataclass(frozen=True)
class SolidInvocation:
    operation: str
    arguments: Mapping[str, Any]

    def to_doc(self) -> dict:
        return {"operation": self.operation, "arguments": dict(self.arguments)}


def _resolve(source: Any, intent: IntentPayload) -> tuple[bool, Any]:
    if isinstance(source, dict) and set(source) == {"value"}:
        return True, source["value"]
    if isinstance(source, str) and ":" in source:
        kind, _, key = source.partition(":")
        if kind == "context":
            facts = intent.context.facts
            return (key in facts), facts.get(key)
        if kind == "constraint":
            c = intent.constraint(key)
            return (c is not None), (c.value if c is not None else None)
        if kind == "goal" and key == "text":
            return True, intent.goal_text
    raise NegotiationError(f"unsupported argument source {source!r}")


def fallback_solidify(intent: IntentPayload, core: CoreOntology) -> SolidInvocation:
    """Map the intent onto a pre-agreed core operation and validate it strictly."""
    words = tokens(intent.goal_text, *intent.tags)
    for rule in core.mapping_rules:
        if rule.match_tokens <= words:
            args = {}
            for name, source in rule.arguments.items():
                present, value = _resolve(source, intent)
                if present:
                    args[name] = value
            core.operations[rule.operation].validate(args)
            return SolidInvocation(rule.operation, args)
    raise NoMapping(f"no core operation maps intent {intent.goal_text!r}")
