"""Exception hierarchy shared across the protocol layers."""

from __future__ import annotations


class LipError(Exception):
    """Base class for every protocol-level error."""

    code = "error"

    def to_doc(self) -> dict:
        return {"code": self.code, "message": str(self)}


# -- wire format ---------------------------------------------------------------


class ProtocolError(LipError):
    code = "protocol_error"


class MalformedDocument(ProtocolError):
    code = "malformed_document"


class UnknownMessageType(ProtocolError):
    code = "unknown_message_type"


class PayloadMismatch(ProtocolError):
    code = "payload_mismatch"


class UnsupportedVersion(ProtocolError):
    code = "unsupported_version"


class UnencodableValue(ProtocolError):
    code = "unencodable_value"


class FrameError(ProtocolError):
    code = "frame_error"


class IllegalTransition(ProtocolError):
    code = "illegal_transition"

    def __init__(self, state, message_type, role=None):
        self.state = state
        self.message_type = message_type
        self.role = role
        who = f" from {role.value}" if role is not None else ""
        super().__init__(f"{message_type.value} not permitted in state {state.value}{who}")

    def to_doc(self) -> dict:
        doc = super().to_doc()
        doc["state"] = self.state.value
        doc["message_type"] = self.message_type.value
        return doc


# -- semantics / negotiation ---------------------------------------------------


class SemanticsError(LipError):
    code = "semantics_error"


class NoViableCandidates(SemanticsError):
    code = "no_viable_candidates"


class UnnormalizedDistribution(SemanticsError):
    code = "unnormalized_distribution"


class NegotiationError(LipError):
    code = "negotiation_error"


class SessionClosed(NegotiationError):
    code = "session_closed"


class RoundBudgetExhausted(NegotiationError):
    code = "round_budget_exhausted"


class Unresolvable(NegotiationError):
    code = "unresolvable"

    def __init__(self, missing_keys):
        self.missing_keys = frozenset(missing_keys)
        super().__init__(f"no composition covers: {', '.join(sorted(self.missing_keys))}")

    def to_doc(self) -> dict:
        doc = super().to_doc()
        doc["missing_keys"] = sorted(self.missing_keys)
        return doc


class StabilizationRejected(NegotiationError):
    code = "stabilization_rejected"


class NothingToSimplify(NegotiationError):
    code = "nothing_to_simplify"


class NoMapping(NegotiationError):
    code = "no_mapping"


class SchemaViolation(NegotiationError):
    """Invocation carries fields outside the operation schema, or fails validation."""

    code = "schema_violation"

    def __init__(self, extra=(), invalid=None):
        self.extra = frozenset(extra)
        self.invalid = dict(invalid or {})
        parts = []
        if self.extra:
            parts.append("unexpected fields: " + ", ".join(sorted(self.extra)))
        if self.invalid:
            parts.append("; ".join(f"{k}: {v}" for k, v in sorted(self.invalid.items())))
        super().__init__(" | ".join(parts) or "schema violation")

    def to_doc(self) -> dict:
        doc = super().to_doc()
        doc["extra"] = sorted(self.extra)
        doc["invalid"] = dict(sorted(self.invalid.items()))
        return doc


class NoSurvivingCandidates(NegotiationError):
    """Renegotiation left nothing to negotiate over; the interaction should dissolve."""

    code = "no_surviving_candidates"


# -- security ------------------------------------------------------------------


class SecurityError(LipError):
    code = "security_error"


class MalformedKey(SecurityError):
    code = "malformed_key"


class FingerprintCollision(SecurityError):
    code = "fingerprint_collision"


class UnknownAgent(SecurityError):
    code = "unknown_agent"


class BadSignature(SecurityError):
    code = "bad_signature"


class ChallengeExpired(SecurityError):
    code = "challenge_expired"


class Replay(SecurityError):
    code = "replay"


class MissingRequiredSignature(SecurityError):
    code = "missing_required_signature"


class SenderMismatch(SecurityError):
    code = "sender_mismatch"


class InvalidToken(SecurityError):
    code = "invalid_token"


class AuthorizationDenied(SecurityError):
    code = "authorization_denied"

    def __init__(self, reasons):
        self.reasons = dict(reasons)
        super().__init__("; ".join(f"{k}: {v}" for k, v in sorted(self.reasons.items())) or "denied")

    def to_doc(self) -> dict:
        doc = super().to_doc()
        doc["reasons"] = dict(sorted(self.reasons.items()))
        return doc


class ScopeCheckFailed(SecurityError):
    code = "scope_check_failed"


# -- coordinator ---------------------------------------------------------------


class CoordinatorError(LipError):
    code = "coordinator_error"


class UnknownInteraction(CoordinatorError):
    code = "unknown_interaction"


class DuplicateCapability(CoordinatorError):
    code = "duplicate_capability"


class DuplicateMessage(CoordinatorError):
    code = "duplicate_message"


class StaleMessage(CoordinatorError):
    code = "stale_message"


class ResidualCouplingViolation(CoordinatorError):
    code = "residual_coupling_violation"


class ScenarioError(LipError):
    code = "scenario_error"


class ConfigError(LipError):
    code = "config_error"
