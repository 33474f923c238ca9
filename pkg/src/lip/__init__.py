"""Liquid Interface Protocol: ephemeral, negotiated coordination between autonomous agents."""

from .canonical import canonical_bytes, parse_document
from .coordinator import Coordinator, CoordinatorConfig, DissolutionReason, DissolutionReport
from .harness import Scenario, ScenarioResult, run_scenario
from .negotiation import CompositionPlan, NegotiationSession, compose, open_session, stabilize
from .protocol import PROTOCOL_VERSION, Envelope, InteractionState, MessageType, Role, transition
from .security import KeyPair, Policy
from .semantics import Capability, entropy

__version__ = "0.1.0"

__all__ = [
    "PROTOCOL_VERSION",
    "Capability",
    "CompositionPlan",
    "Coordinator",
    "CoordinatorConfig",
    "DissolutionReason",
    "DissolutionReport",
    "Envelope",
    "InteractionState",
    "KeyPair",
    "MessageType",
    "NegotiationSession",
    "Policy",
    "Role",
    "Scenario",
    "ScenarioResult",
    "canonical_bytes",
    "compose",
    "entropy",
    "open_session",
    "parse_document",
    "run_scenario",
    "stabilize",
    "transition",
]
