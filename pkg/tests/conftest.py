import hashlib
import json
import sys
from pathlib import Path

import pytest

from lip.coordinator import Coordinator, CoordinatorConfig
from lip.harness import SCENARIO_DIR, VirtualClock, bundled_path
from lip.negotiation import CoreOntology
from lip.protocol import Constraint, ContextState, Envelope, IntentPayload
from lip.security import KeyPair, Policy, sign_envelope
from lip.semantics import Capability

GOLDEN = {name: SCENARIO_DIR / f"{name}.audit.jsonl" for name in ("logistics", "deadlock", "solidify", "multi")}

ALLOW_VERIFIED = {
    "rules": [
        {"effect": "allow", "scope": "logistics.*", "agents": {"metadata": {"verified": True}}},
    ]
}


class Party:
    """An enrolled, authenticated agent talking straight to a coordinator."""

    def __init__(self, coordinator: Coordinator, name: str, metadata=None):
        self.name = name
        self.coordinator = coordinator
        self.keypair = KeyPair.derive("tests", name)
        coordinator.enroll(self.keypair.public_key, metadata if metadata is not None else {"verified": True})
        challenge = coordinator.issue_challenge(self.agent_id)
        self.token = coordinator.authenticate(challenge, self.keypair.sign(challenge.nonce)).token
        self._n = 0

    @property
    def agent_id(self) -> str:
        return self.keypair.agent_id

    def envelope(self, ix, mtype, payload, *, sign=True, timestamp=None) -> Envelope:
        self._n += 1
        mid = hashlib.sha256(f"{self.name}|{ix}|{self._n}".encode()).hexdigest()[:16]
        env = Envelope(mid, ix, self.agent_id, mtype, payload, self.coordinator.clock() if timestamp is None else timestamp)
        return sign_envelope(env, self.keypair.seed) if sign else env

    def send(self, ix, mtype, payload, **kw):
        return self.coordinator.submit(self.envelope(ix, mtype, payload, **kw), self.token)

    def register(self, capability_id, description, domain, scopes=("logistics.haul",), tags=("logistics",)):
        cap = Capability(capability_id, self.agent_id, description, frozenset(tags), frozenset(scopes), frozenset(domain))
        return self.coordinator.register_capability(self.token, cap)


def to(fx, agent_id):
    return [env for recipient, env in fx.outbound if recipient == agent_id]


@pytest.fixture
def clock():
    return VirtualClock(1_000)


@pytest.fixture
def coordinator(clock):
    return Coordinator(
        CoordinatorConfig(),
        policy=Policy.from_doc(ALLOW_VERIFIED),
        core=CoreOntology.load(SCENARIO_DIR / "core.json"),
        clock=clock,
        keypair=KeyPair.derive("tests", "coordinator"),
    )


def haul_intent(**kw) -> IntentPayload:
    base = dict(
        goal_text="haul container within radius of port",
        constraints=(Constraint("radius_km", "<=", 200), Constraint("customs", "=", "cleared")),
        context=ContextState({"closed_port": "Rotterdam"}, 0),
        priority_order=("radius_km", "customs"),
        claims=("logistics.request",),
        tags=("logistics",),
    )
    base.update(kw)
    return IntentPayload(**base)


def load_doc(name: str) -> dict:
    return json.loads(bundled_path(name).read_text())


def run_cli(*args, cwd=None):
    import subprocess

    return subprocess.run([sys.executable, "-m", "lip", *map(str, args)], capture_output=True, text=True, cwd=cwd, timeout=60)


ROOT = Path(__file__).resolve().parent.parent


# -- scenario builders for renegotiation ---------------------------------------------


def reneg_doc() -> dict:
    """Logistics with rail-haul failing at execution; only the truck can step in."""
    doc = load_doc("logistics")
    doc["agents"][3]["capabilities"][0].update(description="deliver container within radius by air", tags=["logistics"])
    doc["agents"][3]["behavior"] = {"decline": ["air-express"]}
    doc["agents"].append({
        "name": "backup-rail",
        "metadata": {"verified": True},
        "capabilities": [
            {"capability_id": "rail-backup", "description": "rail haul of container", "tags": ["logistics", "rail"],
             "declared_scopes": ["logistics.haul"], "constraint_domain": ["transport_mode"]},
            {"capability_id": "barge-feeder", "description": "deliver container by barge within radius of port", "tags": ["logistics"],
             "declared_scopes": ["logistics.haul"], "constraint_domain": ["radius_km"]},
        ],
        "behavior": {"decline": ["barge-feeder"]},
    })
    doc["faults"] = [{"at": 0, "signal": "capability_unavailable", "target": "rail-haul", "on": "execute"}]
    doc["expected"] = {}
    return doc


HAUL_INTENT_DOC = {
    "at": 1, "initiator": "shipper", "interaction_id": "haul-1", "goal_text": "haul container within radius of port",
    "constraints": [{"key": "radius_km", "op": "<=", "value": 200}, {"key": "customs", "op": "=", "value": "cleared"}],
    "claims": ["logistics.request"], "tags": ["logistics"],
}


def _carrier(i, domain, behavior=None):
    return {
        "name": f"carrier-{i}",
        "metadata": {"verified": True},
        "capabilities": [{"capability_id": f"cap-{i}", "description": "haul container within radius of port", "tags": ["logistics"],
                          "declared_scopes": ["logistics.haul"], "constraint_domain": domain}],
        "behavior": behavior or {},
    }


def exhaust_doc() -> dict:
    """One capability that fails when executed; nothing can replace it."""
    return {
        "seed": 5,
        "policy": "policy.json",
        "agents": [{"name": "shipper", "metadata": {"verified": True}, "capabilities": []}, _carrier(0, ["radius_km", "customs"])],
        "faults": [{"at": 0, "signal": "execution_error", "target": "cap-0", "on": "execute"}],
        "intents": [HAUL_INTENT_DOC],
    }


_DOMAINS = (["radius_km", "customs"], ["radius_km"], ["customs"])
_SIGNALS = ("capability_unavailable", "execution_error", "constraint_unsatisfied", "scope_insufficient")


def random_fault_doc(seed: int) -> dict:
    """Random carriers (full or partial cover), random execution faults, random cap."""
    import random

    rng = random.Random(seed)
    agents = [{"name": "shipper", "metadata": {"verified": True}, "capabilities": []}]
    faults = []
    for i in range(rng.randint(2, 7)):
        decline = {"decline": [f"cap-{i}"]} if rng.random() < 0.1 else None
        agents.append(_carrier(i, list(rng.choice(_DOMAINS)), decline))
        if rng.random() < 0.7:
            faults.append({"at": 0, "signal": rng.choice(_SIGNALS), "target": f"cap-{i}", "on": "execute"})
    return {
        "seed": seed,
        "policy": "policy.json",
        "agents": agents,
        "faults": faults,
        "config": {"tau": rng.choice([0.2, 0.25, 0.3]), "renegotiation_cap": rng.choice([1, 2, 3])},
        "intents": [HAUL_INTENT_DOC],
    }


def scenario_from(doc, name):
    from lip.harness import Scenario

    return Scenario.from_doc(doc, SCENARIO_DIR, name)


# -- acceptance reporting -----------------------------------------------------------


@pytest.fixture
def criterion(request, capsys):
    """Context manager that times one acceptance criterion and prints PASS or FAIL."""
    import contextlib
    import time

    lines = request.config.__dict__.setdefault("_lip_acceptance", [])

    @contextlib.contextmanager
    def run(number, title, limit=None):
        start = time.perf_counter()
        ok = False
        try:
            yield
            elapsed = time.perf_counter() - start
            assert limit is None or elapsed < limit, f"took {elapsed:.2f}s, limit {limit}s"
            ok = True
        finally:
            elapsed = time.perf_counter() - start
            line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {title} ({elapsed:.2f}s)"
            lines.append(line)
            with capsys.disabled():
                print("\n" + line)

    return run


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_lip_acceptance")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
