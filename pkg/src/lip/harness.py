"""Deterministic scripted multi-agent scenarios on a virtual clock."""

from __future__ import annotations

import hashlib
import heapq
import itertools
import json
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Optional

from .audit import AuditEvent, AuditLog, AuditRecord
from .coordinator import Coordinator, CoordinatorConfig, DissolutionReason
from .errors import LipError, ScenarioError
from .negotiation import CoreOntology
from .protocol import (
    AcceptPayload,
    CompletePayload,
    Constraint,
    ContextState,
    DissolvePayload,
    Envelope,
    ExecutePayload,
    FailureSignal,
    InteractionState,
    IntentPayload,
    MessageType,
    OfferPayload,
    RejectPayload,
    decode_envelope,
    encode_envelope,
)
from .security import KeyPair, Policy, sign_envelope
from .semantics import Capability, PriorStore
from .transport import TransportKind, make_link

SCENARIO_DIR = Path(__file__).parent / "scenarios"
BUNDLED = ("logistics", "deadlock", "solidify", "multi")
NETWORK_DELAY = 1
DEFAULT_AGENT_LATENCY = 1
DEFAULT_EXECUTE_LATENCY = 5
DEFAULT_OFFER_TTL = 60_000


def bundled_path(name: str) -> Path:
    return SCENARIO_DIR / f"{name}.lis"


# -- scenario document ------------------------------------------------------------


@dataclass(frozen=True)
class AgentSpec:
    name: str
    capabilities: tuple[dict, ...] = ()
    metadata: Mapping[str, Any] = field(default_factory=dict)
    behavior: Mapping[str, Any] = field(default_factory=dict)
    key_seed: Optional[str] = None


@dataclass(frozen=True)
class IntentSpec:
    at: int
    initiator: str
    interaction_id: str
    payload: IntentPayload


@dataclass(frozen=True)
class FaultSpec:
    at: int
    signal: FailureSignal
    target: str
    on: str = "now"


@dataclass
class Scenario:
    name: str
    seed: int
    agents: list[AgentSpec]
    intents: list[IntentSpec]
    faults: list[FaultSpec] = field(default_factory=list)
    expected: dict[str, dict] = field(default_factory=dict)
    policy: Policy = field(default_factory=Policy)
    core: CoreOntology = field(default_factory=CoreOntology)
    config: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_doc(cls, doc: Mapping[str, Any], base: Optional[Path] = None, name: str = "scenario") -> "Scenario":
        try:
            return cls._parse(doc, base, name)
        except ScenarioError:
            raise
        except (KeyError, TypeError, ValueError, OSError, LipError) as exc:
            raise ScenarioError(f"{name}: {type(exc).__name__}: {exc}") from exc

    @classmethod
    def _parse(cls, doc, base, name):
        if not isinstance(doc, dict):
            raise ScenarioError(f"{name}: scenario must be an object")
        unknown = set(doc) - {"seed", "agents", "intents", "faults", "expected", "policy", "core", "config", "description"}
        if unknown:
            raise ScenarioError(f"{name}: unknown keys {', '.join(sorted(unknown))}")
        agents = [
            AgentSpec(a["name"], tuple(a.get("capabilities", ())), a.get("metadata", {}), a.get("behavior", {}), a.get("key_seed"))
            for a in doc["agents"]
        ]
        names = [a.name for a in agents]
        if len(set(names)) != len(names):
            raise ScenarioError(f"{name}: duplicate agent names")
        intents = []
        for i in doc.get("intents", []):
            if i["initiator"] not in names:
                raise ScenarioError(f"{name}: intent {i['interaction_id']} names unknown initiator {i['initiator']}")
            payload = IntentPayload(
                goal_text=i["goal_text"],
                constraints=tuple(Constraint.from_doc(c) for c in i.get("constraints", [])),
                context=ContextState.from_doc(i.get("context", {"facts": {}, "snapshot_time": 0})),
                deadline=i.get("deadline"),
                priority_order=tuple(i.get("priority_order", ())),
                claims=tuple(i.get("claims", ())),
                tags=tuple(i.get("tags", ())),
            )
            intents.append(IntentSpec(int(i["at"]), i["initiator"], i["interaction_id"], payload))
        cap_ids = {c["capability_id"] for a in agents for c in a.capabilities}
        faults = []
        for f in doc.get("faults", []):
            if f["target"] not in cap_ids:
                raise ScenarioError(f"{name}: fault targets unknown capability {f['target']}")
            faults.append(FaultSpec(int(f["at"]), FailureSignal(f["signal"]), f["target"], f.get("on", "now")))
        return cls(
            name=name,
            seed=int(doc.get("seed", 0)),
            agents=agents,
            intents=intents,
            faults=faults,
            expected=dict(doc.get("expected", {})),
            policy=_load_part(doc.get("policy"), base, Policy),
            core=_load_part(doc.get("core"), base, CoreOntology),
            config=dict(doc.get("config", {})),
        )

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
        except ValueError as exc:
            raise ScenarioError(f"{path}: not a valid document: {exc}") from exc
        return cls.from_doc(doc, path.parent, path.stem)


def _load_part(ref, base, kind):
    if ref is None:
        return kind()
    if isinstance(ref, str):
        return kind.load((base or Path(".")) / ref)
    return kind.from_doc(ref)


# -- scheduler -----------------------------------------------------------------------


class VirtualClock:
    def __init__(self, start: int = 0):
        self.now = start

    def __call__(self) -> int:
        return self.now


class Scheduler:
    """Discrete events ordered by (time, interaction rank, per-interaction FIFO).

    The rank of each interaction comes from the interleave seed, so different
    seeds reorder unrelated interactions that act in the same tick while
    keeping each interaction's own event order fixed.
    """

    def __init__(self, clock: VirtualClock, interleave_seed: int):
        self.clock = clock
        self._rng = random.Random(interleave_seed)
        self._ranks: dict[str, float] = {}
        self._fifo: dict[str, int] = {}
        self._heap: list = []
        self._tiebreak = itertools.count()

    def rank(self, interaction_id: str) -> float:
        if interaction_id not in self._ranks:
            self._ranks[interaction_id] = self._rng.random()
        return self._ranks[interaction_id]

    def at(self, when: int, interaction_id: Optional[str], action: Callable[[], None]) -> None:
        if interaction_id is None:
            rank, fifo = -1.0, 0
        else:
            rank = self.rank(interaction_id)
            fifo = self._fifo.get(interaction_id, 0)
            self._fifo[interaction_id] = fifo + 1
        heapq.heappush(self._heap, (when, rank, fifo, next(self._tiebreak), action))

    def run(self, limit: int = 1_000_000) -> int:
        steps = 0
        while self._heap:
            when, _, _, _, action = heapq.heappop(self._heap)
            self.clock.now = max(self.clock.now, when)
            action()
            steps += 1
            if steps >= limit:
                raise ScenarioError(f"scenario did not settle within {limit} events")
        return steps


# -- scripted agents ---------------------------------------------------------------


class ScriptedAgent:
    """Declarative behavior: offer templates, accept or decline, succeed or fail."""

    def __init__(self, spec: AgentSpec, keypair: KeyPair, harness: "Harness"):
        self.spec = spec
        self.name = spec.name
        self.keypair = keypair
        self.harness = harness
        self.token: Optional[str] = None
        self.behavior = dict(spec.behavior)
        self.latency = int(self.behavior.get("latency", DEFAULT_AGENT_LATENCY))
        self.faulted: dict[str, FailureSignal] = {}
        self.armed: dict[str, FailureSignal] = {}
        self.active: dict[str, set[str]] = {}
        self._counters: dict[str, int] = {}
        self.received: list[Envelope] = []

    @property
    def agent_id(self) -> str:
        return self.keypair.agent_id

    def capability_ids(self) -> list[str]:
        return [c["capability_id"] for c in self.spec.capabilities]

    def envelope(self, interaction_id: str, mtype: MessageType, payload) -> Envelope:
        n = self._counters.get(interaction_id, 0) + 1
        self._counters[interaction_id] = n
        mid = hashlib.sha256(f"{self.name}|{interaction_id}|{n}".encode()).hexdigest()[:16]
        env = Envelope(f"{self.name}-{mid}", interaction_id, self.agent_id, mtype, payload, self.harness.clock())
        return sign_envelope(env, self.keypair.seed)

    def send_later(self, delay: int, interaction_id: str, build: Callable[[], Optional[Envelope]]) -> None:
        def fire():
            env = build()
            if env is not None:
                self.harness.send_to_coordinator(self, env)

        self.harness.scheduler.at(self.harness.clock() + delay, interaction_id, fire)

    def on_message(self, env: Envelope) -> None:
        self.received.append(env)
        handler = {
            MessageType.INTENT: self._on_solicit,
            MessageType.ACCEPT: self._on_accept,
            MessageType.EXECUTE: self._on_execute,
            MessageType.COMPLETE: self._on_complete,
        }.get(env.message_type)
        if handler is not None:
            handler(env)

    def _on_solicit(self, env: Envelope) -> None:
        intent: IntentPayload = env.payload
        ix = env.interaction_id
        declines = set(self.behavior.get("decline", ()))
        templates = self.behavior.get("offers", {})
        for cid in intent.candidates:
            if cid in declines or cid in self.faulted:
                payload = RejectPayload(cid, "decline")
                self.send_later(self.latency, ix, lambda p=payload: self.envelope(ix, MessageType.REJECT, p))
                continue
            spec = templates.get(cid, {})
            if "rounds" in spec:
                rounds = spec["rounds"]
                spec = rounds[min(max((intent.round or 1) - 1, 0), len(rounds) - 1)]
            coverage = spec.get("coverage")
            if coverage is None:
                cap = next(c for c in self.spec.capabilities if c["capability_id"] == cid)
                coverage = cap.get("constraint_domain", [])
            relevant = frozenset(coverage) & intent.keys
            payload = OfferPayload(
                capability_id=cid,
                coverage=relevant,
                partial=bool(intent.keys) and relevant != intent.keys,
                terms=spec.get("terms", {}),
                expiry=self.harness.clock() + int(spec.get("ttl", DEFAULT_OFFER_TTL)),
            )
            self.send_later(self.latency, ix, lambda p=payload: self.envelope(ix, MessageType.OFFER, p))

    def _on_accept(self, env: Envelope) -> None:
        payload: AcceptPayload = env.payload
        ix = env.interaction_id
        if self.harness.initiator_of(ix) == self.name:
            # stabilization notice: the initiator executes the plan
            execute = ExecutePayload(payload.plan_id)
            self.send_later(self.latency, ix, lambda: self.envelope(ix, MessageType.EXECUTE, execute))
            return
        mine = [c for c in payload.capability_ids if c in self.capability_ids()]
        refuse = set(self.behavior.get("refuse_accept", ())) | set(self.faulted)
        bad = [c for c in mine if c in refuse]
        if self.behavior.get("accept", True) is False or bad:
            reject = RejectPayload((bad or mine)[0], "decline accept")
            self.send_later(self.latency, ix, lambda: self.envelope(ix, MessageType.REJECT, reject))
            return
        self.active.setdefault(ix, set()).update(mine)
        accept = AcceptPayload(payload.plan_id, tuple(mine))
        self.send_later(self.latency, ix, lambda: self.envelope(ix, MessageType.ACCEPT, accept))

    def _on_execute(self, env: Envelope) -> None:
        payload: ExecutePayload = env.payload
        ix, cid = env.interaction_id, payload.capability_id
        rules = self.behavior.get("execute", {}).get(cid, {})
        delay = int(rules.get("latency", DEFAULT_EXECUTE_LATENCY))
        if cid in self.armed:
            self.faulted[cid] = self.armed.pop(cid)
        if cid in self.faulted:
            reject = RejectPayload(cid, "failure", self.faulted[cid])
            self.send_later(delay, ix, lambda: self.envelope(ix, MessageType.REJECT, reject))
            return
        complete = CompletePayload(
            payload.plan_id,
            bool(rules.get("succeed", True)),
            capability_id=cid,
            latency_score=rules.get("latency_score"),
            consistency_score=rules.get("consistency_score"),
            coherence_score=rules.get("coherence_score"),
            result=rules.get("result", {"capability_id": cid}),
        )

        def done():
            self.active.get(ix, set()).discard(cid)
            return self.envelope(ix, MessageType.COMPLETE, complete)

        self.send_later(delay, ix, done)

    def _on_complete(self, env: Envelope) -> None:
        ix = env.interaction_id
        if self.harness.initiator_of(ix) == self.name:
            self.send_later(self.latency, ix, lambda: self.envelope(ix, MessageType.DISSOLVE, DissolvePayload("Completed")))

    def inject(self, fault: FaultSpec) -> None:
        if fault.on == "execute":
            self.armed[fault.target] = fault.signal
            return
        self.faulted[fault.target] = fault.signal
        for ix in sorted(self.active):
            if fault.target in self.active[ix]:
                self.active[ix].discard(fault.target)
                reject = RejectPayload(fault.target, "failure", fault.signal)
                self.harness.send_to_coordinator(self, self.envelope(ix, MessageType.REJECT, reject))


# -- results -----------------------------------------------------------------------


@dataclass
class InteractionSummary:
    interaction_id: str
    final_state: str
    dissolution_reason: Optional[str]
    rounds: int
    entropy_trace: list[float]
    fallbacks: list[str]
    plan_steps: int
    completed: bool
    renegotiations: int
    solid_operation: Optional[str]

    @property
    def fallback(self) -> Optional[str]:
        return self.fallbacks[-1] if self.fallbacks else None

    def to_doc(self) -> dict:
        return {
            "interaction_id": self.interaction_id,
            "final_state": self.final_state,
            "dissolution_reason": self.dissolution_reason,
            "rounds": self.rounds,
            "entropy_trace": [round(h, 6) for h in self.entropy_trace],
            "fallback": self.fallback,
            "fallbacks": self.fallbacks,
            "plan_steps": self.plan_steps,
            "completed": self.completed,
            "renegotiations": self.renegotiations,
            "solid_operation": self.solid_operation,
        }


def summarize(interaction_id: str, records: list[AuditRecord]) -> InteractionSummary:
    trace: list[float] = []
    rounds = 0
    fallbacks: list[str] = []
    plan_steps = 0
    completed = False
    reason = None
    cycles = 0
    solid_op = None
    state = records[-1].detail.get("state", "?") if records else "?"
    for r in records:
        d = r.detail
        if r.event is AuditEvent.ADJUDICATED and "session" in d:
            trace.append(d["session"]["H0"])
        elif r.event is AuditEvent.ROUND_COMPLETED and "entropy" in d and "delta" in d:
            rounds += 1
            trace.append(d["entropy"])
        elif r.event is AuditEvent.FALLBACK_TRIGGERED and d.get("mode") and not d.get("exhausted"):
            fallbacks.append(d["mode"])
            if d.get("invocation"):
                solid_op = d["invocation"]["operation"]
        elif r.event is AuditEvent.PLAN_COMPOSED:
            plan_steps = len(d["plan"]["steps"])
        elif r.event is AuditEvent.EXECUTION_COMPLETED:
            completed = True
        elif r.event is AuditEvent.FAILURE_SIGNAL:
            # a failure past the cap or with no survivors carries no session
            if "session" in d:
                cycles = max(cycles, d.get("cycle", 0))
                trace.append(d["session"]["H0"])
        elif r.event is AuditEvent.DISSOLVED:
            reason = d.get("reason")
    return InteractionSummary(interaction_id, state, reason, rounds, trace, fallbacks, plan_steps, completed, cycles, solid_op)


@dataclass
class ScenarioResult:
    name: str
    seed: int
    transport: str
    interactions: dict[str, InteractionSummary]
    coupling: dict[tuple[str, str], int]
    records: list[AuditRecord]
    audit_path: Optional[str]
    wall_time: float
    failures: list[str] = field(default_factory=list)
    agent_ids: dict[str, str] = field(default_factory=dict)
    coordinator: Any = None

    @property
    def ok(self) -> bool:
        return not self.failures

    @property
    def coupling_zero(self) -> bool:
        return all(v == 0 for v in self.coupling.values())

    def interaction_bytes(self, interaction_id: str) -> list[bytes]:
        return [r.projection() for r in self.records if r.interaction_id == interaction_id]

    def to_doc(self) -> dict:
        return {
            "scenario": self.name,
            "seed": self.seed,
            "transport": self.transport,
            "interactions": {k: v.to_doc() for k, v in sorted(self.interactions.items())},
            "coupling_max": max(self.coupling.values(), default=0),
            "audit_path": self.audit_path,
            "wall_time": round(self.wall_time, 4),
            "failures": list(self.failures),
        }


# -- the harness ---------------------------------------------------------------------


class Harness:
    def __init__(self, scenario: Scenario, *, seed: Optional[int] = None, transport: str = "loopback", interleave: Optional[int] = None, audit_path=None):
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        self.transport = TransportKind(transport)
        self.clock = VirtualClock()
        self.scheduler = Scheduler(self.clock, self.seed if interleave is None else interleave)
        cfg = CoordinatorConfig(**scenario.config)
        if audit_path is not None:
            Path(audit_path).parent.mkdir(parents=True, exist_ok=True)
            Path(audit_path).write_bytes(b"")
        self.audit = AuditLog(path=audit_path)
        self.coordinator = Coordinator(
            cfg,
            policy=scenario.policy,
            core=scenario.core,
            clock=self.clock,
            audit=self.audit,
            priors=PriorStore(),
            keypair=KeyPair.derive(self.seed, "coordinator"),
        )
        self.agents: dict[str, ScriptedAgent] = {}
        self.by_id: dict[str, ScriptedAgent] = {}
        self._initiators = {i.interaction_id: i.initiator for i in scenario.intents}
        self._links: dict[str, tuple[Any, Any]] = {}

    def initiator_of(self, interaction_id: str) -> Optional[str]:
        return self._initiators.get(interaction_id)

    # transport: every envelope is framed, carried and decoded; processing is scheduled

    def _carry(self, link, env: Envelope) -> Envelope:
        link.send(encode_envelope(env))
        return decode_envelope(link.recv())

    def send_to_coordinator(self, agent: ScriptedAgent, env: Envelope) -> None:
        up, _ = self._links[agent.name]
        delivered = self._carry(up, env)
        self.scheduler.at(self.clock() + NETWORK_DELAY, env.interaction_id, lambda: self._deliver_up(agent, delivered))

    def _deliver_up(self, agent: ScriptedAgent, env: Envelope) -> None:
        fx = self.coordinator.submit(env, agent.token)
        for recipient, out in fx.outbound:
            target = self.by_id.get(recipient)
            if target is None:
                continue
            _, down = self._links[target.name]
            delivered = self._carry(down, out)
            self.scheduler.at(self.clock() + NETWORK_DELAY, out.interaction_id, lambda t=target, e=delivered: t.on_message(e))

    def connect(self, spec: AgentSpec) -> ScriptedAgent:
        keypair = KeyPair.derive(spec.key_seed) if spec.key_seed else KeyPair.derive(self.seed, spec.name)
        agent = ScriptedAgent(spec, keypair, self)
        c = self.coordinator
        c.enroll(keypair.public_key, dict(spec.metadata))
        challenge = c.issue_challenge(agent.agent_id)
        agent.token = c.authenticate(challenge, keypair.sign(challenge.nonce)).token
        for doc in spec.capabilities:
            c.register_capability(agent.token, Capability.from_doc(doc, owner=agent.agent_id))
        self._links[spec.name] = (make_link(self.transport), make_link(self.transport))
        self.agents[spec.name] = agent
        self.by_id[agent.agent_id] = agent
        return agent

    def run(self) -> ScenarioResult:
        started = time.perf_counter()
        try:
            for spec in self.scenario.agents:
                self.connect(spec)
            for intent in self.scenario.intents:
                agent = self.agents[intent.initiator]
                self.scheduler.at(
                    intent.at,
                    intent.interaction_id,
                    lambda a=agent, i=intent: self.send_to_coordinator(a, a.envelope(i.interaction_id, MessageType.INTENT, i.payload)),
                )
            for fault in self.scenario.faults:
                owner = next(a for a in self.scenario.agents if fault.target in {c["capability_id"] for c in a.capabilities})
                self.scheduler.at(fault.at, None, lambda f=fault, o=owner.name: self.agents[o].inject(f))
            self.scheduler.run()
            self.coordinator.sweep_deadlines(self.clock())
            for ix, ctx in sorted(self.coordinator.interactions().items()):
                if ctx.state is not InteractionState.DISSOLVED:
                    self.coordinator.dissolve(ix, DissolutionReason.ABANDONED)
        finally:
            for up, down in self._links.values():
                up.close()
                down.close()
        return self._result(time.perf_counter() - started)

    def _result(self, wall: float) -> ScenarioResult:
        records = self.audit.records
        by_ix: dict[str, list[AuditRecord]] = {}
        for r in records:
            by_ix.setdefault(r.interaction_id, []).append(r)
        summaries = {ix: summarize(ix, recs) for ix, recs in by_ix.items()}
        ids = sorted(a.agent_id for a in self.agents.values())
        coupling = {(a, b): self.coordinator.residual_coupling(a, b) for a, b in itertools.combinations(ids, 2)}
        result = ScenarioResult(
            name=self.scenario.name,
            seed=self.seed,
            transport=self.transport.value,
            interactions=summaries,
            coupling=coupling,
            records=records,
            audit_path=str(self.audit.path) if self.audit.path else None,
            wall_time=wall,
            agent_ids={n: a.agent_id for n, a in self.agents.items()},
            coordinator=self.coordinator,
        )
        result.failures = check_expected(self.scenario.expected, summaries)
        if not result.coupling_zero:
            result.failures.append("residual coupling is not zero for every agent pair")
        return result


_EXPECTED_FIELDS = ("final_state", "dissolution_reason", "plan_steps", "fallback", "completed", "fallbacks", "solid_operation", "renegotiations")


def check_expected(expected: Mapping[str, Mapping[str, Any]], summaries: Mapping[str, InteractionSummary]) -> list[str]:
    failures = []
    for ix, want in sorted(expected.items()):
        got = summaries.get(ix)
        if got is None:
            failures.append(f"{ix}: interaction never started")
            continue
        doc = got.to_doc()
        for key, value in sorted(want.items()):
            if key not in _EXPECTED_FIELDS:
                failures.append(f"{ix}: unknown expectation {key!r}")
            elif doc[key] != value:
                failures.append(f"{ix}: expected {key}={value!r}, got {doc[key]!r}")
    return failures


def run_scenario(scenario: Scenario | str | Path, *, seed: Optional[int] = None, transport: str = "loopback", interleave: Optional[int] = None, audit_path=None) -> ScenarioResult:
    if not isinstance(scenario, Scenario):
        scenario = Scenario.load(scenario)
    return Harness(scenario, seed=seed, transport=transport, interleave=interleave, audit_path=audit_path).run()


def inject_fault(scenario: Scenario, at: int, signal: FailureSignal | str, target: str, on: str = "now") -> FaultSpec:
    known = {c["capability_id"] for a in scenario.agents for c in a.capabilities}
    if target not in known:
        raise ScenarioError(f"unknown fault target {target}")
    fault = FaultSpec(int(at), FailureSignal(signal), target, on)
    scenario.faults.append(fault)
    return fault
