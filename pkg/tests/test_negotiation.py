import itertools
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lip.errors import (
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
from lip.negotiation import (
    FALLBACK_ORDER,
    CompositionPlan,
    Convergence,
    CoreOntology,
    FallbackMode,
    NegotiationSession,
    PlanStep,
    RenegotiationCapExceeded,
    SessionStatus,
    check_convergence,
    clarify_round,
    compose,
    fallback_simplify,
    fallback_solidify,
    minimal_covers,
    open_session,
    renegotiate,
    stabilize,
    structure_distribution,
)
from lip.protocol import AcceptPayload, Constraint, ContextState, Envelope, IntentPayload, MessageType, OfferPayload
from lip.security import IdentityStore, KeyPair, sign_envelope
from lip.semantics import CandidateJudgment, Rationale, SuitabilityDistribution

from conftest import SCENARIO_DIR

NO_WHY = Rationale(0.0, (), ())
UNIFORM4 = SuitabilityDistribution.uniform("abcd")
POINT = SuitabilityDistribution((("a", 1.0),))


def judgments(scores):
    return [CandidateJudgment(c, s, NO_WHY) for c, s in scores.items()]


def offer(cid, coverage, keys):
    cov = frozenset(coverage)
    return OfferPayload(cid, cov, cov & keys != keys)


def intent_with(keys, **kw):
    return IntentPayload("move goods", tuple(Constraint(k, "present") for k in keys), **kw)


# -- sessions ---------------------------------------------------------------------------


def test_open_session_examples():
    s = open_session("ix", POINT)
    assert (s.H0, s.status) == (0.0, SessionStatus.CONVERGED)
    s = open_session("ix", UNIFORM4, tau=0.5)
    assert s.H0 == pytest.approx(1.386294, abs=1e-6)
    assert s.H_max == pytest.approx(0.693147, abs=1e-6)
    assert (s.round, s.entropy_trace, s.status) == (0, (s.H0,), SessionStatus.OPEN)
    assert open_session("ix", SuitabilityDistribution.uniform("ab"), tau=0.9).H_max == pytest.approx(0.069315, abs=1e-6)


@pytest.mark.parametrize("tau,n_max", [(0.0, 5), (1.0, 5), (0.5, 0), (0.5, 2.5)])
def test_open_session_parameter_errors(tau, n_max):
    with pytest.raises(NegotiationError):
        open_session("ix", UNIFORM4, tau=tau, n_max=n_max)


@settings(max_examples=300)
@given(st.lists(st.floats(0.01, 1), min_size=1, max_size=10), st.floats(0.01, 0.99))
def test_threshold_is_fraction_of_initial_entropy(weights, tau):
    s = open_session("ix", SuitabilityDistribution.from_weights([(str(i), w) for i, w in enumerate(weights)]), tau)
    assert abs(s.H_max - (1 - tau) * s.H0) <= 1e-12


def test_fixture_trace():
    s = open_session("ix", UNIFORM4)
    s = clarify_round(s, SuitabilityDistribution((("a", 0.7), ("b", 0.2), ("c", 0.1))))
    assert s.status is SessionStatus.OPEN
    s = clarify_round(s, POINT)
    assert [round(h, 6) for h in s.entropy_trace] == [1.386294, 0.801819, 0.0]
    assert (s.round, s.status) == (2, SessionStatus.CONVERGED)
    assert len(s.entropy_trace) == s.round + 1


def test_non_progress_round_is_recorded_not_fatal():
    s = clarify_round(open_session("ix", UNIFORM4), UNIFORM4)
    assert s.last_delta == 0.0
    assert s.non_progress == (1,)
    assert s.status is SessionStatus.OPEN


def test_uniform_four_to_two_reduces_by_log_two():
    s = clarify_round(open_session("ix", UNIFORM4), SuitabilityDistribution.uniform("ab"))
    assert s.last_delta == pytest.approx(math.log(2), abs=1e-12)


def test_closed_or_exhausted_sessions_refuse_rounds():
    with pytest.raises(SessionClosed):
        clarify_round(open_session("ix", POINT), POINT)
    s = open_session("ix", UNIFORM4, n_max=1)
    s = clarify_round(s, UNIFORM4)
    assert s.status is SessionStatus.FALLBACK_TRIGGERED
    with pytest.raises(SessionClosed):
        clarify_round(s, UNIFORM4)
    with pytest.raises(RoundBudgetExhausted):
        clarify_round(NegotiationSession("ix", 1.0, 0.5, 1, UNIFORM4, round=1, entropy_trace=(1.0, 0.9)), UNIFORM4)


def test_convergence_examples():
    base = dict(interaction_id="ix", H0=1.0, tau=0.5, live_candidates=UNIFORM4)
    assert check_convergence(NegotiationSession(n_max=5, round=1, entropy_trace=(1.0, 0.5), **base)) is Convergence.CONVERGED
    assert check_convergence(NegotiationSession(n_max=3, round=3, entropy_trace=(1.0, 0.9, 0.8, 0.7), **base)) is Convergence.TRIGGER_FALLBACK
    assert check_convergence(NegotiationSession(n_max=5, round=1, entropy_trace=(1.0, 0.9), **base)) is Convergence.CONTINUE


def fallback_oracle(bits, n_max):
    """Fallback exactly when the budget is spent and every round stayed above the threshold."""
    return len(bits) == n_max and all(bits)


def test_trigger_fallback_matches_brute_force_over_all_patterns():
    h0, tau = 1.0, 0.5
    h_max = (1 - tau) * h0
    checked = 0
    for n_max in range(1, 7):
        for rounds in range(0, n_max + 1):
            for bits in itertools.product([False, True], repeat=rounds):
                # True: strictly above the threshold; False: exactly on it (boundary counts as converged)
                trace = (h0,) + tuple(0.8 if b else h_max for b in bits)
                s = NegotiationSession("ix", h0, tau, n_max, UNIFORM4, round=rounds, entropy_trace=trace)
                got = check_convergence(s)
                assert (got is Convergence.TRIGGER_FALLBACK) == fallback_oracle(bits, n_max), (n_max, bits)
                if bits and not bits[-1]:
                    assert got is Convergence.CONVERGED
                checked += 1
    assert checked == sum(2 ** (r + 1) - 1 for r in range(1, 7))


@settings(max_examples=200)
@given(st.integers(1, 6), st.lists(st.floats(0.05, 1.0), min_size=1, max_size=6))
def test_session_driven_by_rounds_obeys_fallback_rule(n_max, levels):
    s = open_session("ix", SuitabilityDistribution.uniform("abcd"), 0.5, n_max)
    for level in levels:
        if s.status is not SessionStatus.OPEN:
            break
        # a two-point distribution with entropy set by its skew
        s = clarify_round(s, SuitabilityDistribution.from_weights({"a": 1.0, "b": level}))
    post = s.entropy_trace[1:]
    if s.status is SessionStatus.FALLBACK_TRIGGERED:
        assert s.round == n_max and all(h > s.H_max for h in post)
    if s.status is SessionStatus.CONVERGED:
        assert post[-1] <= s.H_max


# -- composition ----------------------------------------------------------------------------


def test_single_total_offer_is_one_step_plan():
    keys = frozenset("ab")
    plan = compose(intent_with("ab"), [offer("x", "ab", keys)], judgments({"x": 0.8}), owners={"x": "agent-x"})
    assert plan.capability_ids == ("x",)
    assert plan.coverage == keys
    assert plan.atomic_accept_set == {"agent-x"}


def test_two_partials_compose_and_neither_alone_does():
    intent = intent_with("abc")
    keys = intent.keys
    left, right = offer("l", "ab", keys), offer("r", "c", keys)
    js = judgments({"l": 0.7, "r": 0.6})
    plan = compose(intent, [left, right], js, owners={"l": "A", "r": "B"})
    assert plan.capability_ids == ("l", "r")
    assert [sorted(s.sub_intention) for s in plan.steps] == [["a", "b"], ["c"]]
    assert plan.atomic_accept_set == {"A", "B"}
    for alone in (left, right):
        with pytest.raises(Unresolvable):
            compose(intent, [alone], js)


def test_uncoverable_key_is_reported():
    intent = intent_with("abcd")
    with pytest.raises(Unresolvable) as err:
        compose(intent, [offer("x", "ab", intent.keys), offer("y", "bc", intent.keys)], judgments({"x": 0.5, "y": 0.5}))
    assert err.value.missing_keys == {"d"}


def test_greedy_tie_breaks():
    intent = intent_with("ab")
    keys = intent.keys
    # equal gain times score: the higher score wins
    plan = compose(intent, [offer("p", "ab", keys), offer("q", "a", keys), offer("r", "b", keys)], judgments({"p": 0.4, "q": 0.8, "r": 0.8}))
    assert plan.capability_ids == ("q", "r")
    # identical offers: the smaller id wins
    plan = compose(intent, [offer("zz", "ab", keys), offer("aa", "ab", keys)], judgments({"zz": 0.5, "aa": 0.5}))
    assert plan.capability_ids == ("aa",)


def test_unadmitted_offers_are_ignored():
    intent = intent_with("ab")
    with pytest.raises(Unresolvable):
        compose(intent, [offer("ghost", "ab", intent.keys)], judgments({"other": 0.9}))


def test_no_key_intent_picks_best_offer():
    intent = IntentPayload("say hello")
    plan = compose(intent, [OfferPayload("a", frozenset(), False), OfferPayload("b", frozenset(), False)], judgments({"a": 0.2, "b": 0.9}))
    assert plan.capability_ids == ("b",)


def brute_force_cover_exists(keys, coverages):
    target = 0
    index = {k: i for i, k in enumerate(sorted(keys))}
    for k in keys:
        target |= 1 << index[k]
    masks = [sum(1 << index[k] for k in cov if k in index) for cov in coverages]
    for size in range(0, len(masks) + 1):
        for combo in itertools.combinations(masks, size):
            acc = 0
            for m in combo:
                acc |= m
            if acc == target:
                return True
    return False


KEY_UNIVERSE = "abcdefg"


@st.composite
def cover_problems(draw):
    keys = draw(st.sets(st.sampled_from(KEY_UNIVERSE), min_size=1, max_size=6))
    n = draw(st.integers(0, 12))
    coverages = [draw(st.sets(st.sampled_from(KEY_UNIVERSE), max_size=4)) for _ in range(n)]
    scores = [draw(st.floats(0.01, 1.0)) for _ in range(n)]
    return frozenset(keys), coverages, scores


@settings(max_examples=300, deadline=None)
@given(cover_problems())
def test_compose_feasibility_matches_brute_force(problem):
    keys, coverages, scores = problem
    intent = intent_with(sorted(keys))
    offers = [offer(f"c{i:02d}", cov, keys) for i, cov in enumerate(coverages)]
    js = judgments({f"c{i:02d}": s for i, s in enumerate(scores)})
    feasible = brute_force_cover_exists(keys, coverages)
    try:
        plan = compose(intent, offers, js)
    except Unresolvable as exc:
        assert not feasible
        assert exc.missing_keys
    else:
        assert feasible
        assert plan.coverage == keys
        assert set(plan.capability_ids) <= {o.capability_id for o in offers}
        assert len(set(plan.capability_ids)) == len(plan.steps)


def test_minimal_covers_are_irredundant():
    keys = frozenset("abc")
    covers = minimal_covers(keys, {"x": frozenset("abc"), "y": frozenset("ab"), "z": frozenset("c"), "w": frozenset("a")})
    assert sorted(covers) == [("x",), ("y", "z")]


def test_structure_distribution_collapses_to_single_cover():
    intent = intent_with("ab")
    keys = intent.keys
    js = judgments({"l": 0.6, "r": 0.8})
    dist = structure_distribution(intent, [offer("l", "a", keys), offer("r", "b", keys)], js)
    assert dist.as_dict() == {"l+r": 1.0}


def test_structure_distribution_over_alternatives():
    intent = intent_with("ab")
    keys = intent.keys
    js = judgments({"full": 0.9, "l": 0.3, "r": 0.3})
    dist = structure_distribution(intent, [offer("full", "ab", keys), offer("l", "a", keys), offer("r", "b", keys)], js)
    assert dist.as_dict() == pytest.approx({"full": 0.75, "l+r": 0.25})
    with pytest.raises(Unresolvable):
        structure_distribution(intent, [offer("l", "a", keys)], js)


# -- stabilization ----------------------------------------------------------------------------

KEYS = {name: KeyPair.derive("stabilize", name) for name in ("alpha", "beta", "gamma")}


@pytest.fixture
def identities():
    store = IdentityStore()
    for kp in KEYS.values():
        store.enroll(kp.public_key)
    return store.as_mapping()


def plan_for(*names):
    steps = tuple(PlanStep(frozenset({n}), "goal", f"cap-{n}", KEYS[n].agent_id) for n in names)
    return CompositionPlan("plan-1", steps, frozenset(names), frozenset(KEYS[n].agent_id for n in names))


def signed_accept(name, plan_id="plan-1", sign=True):
    kp = KEYS[name]
    env = Envelope(f"acc-{name}", "ix", kp.agent_id, MessageType.ACCEPT, AcceptPayload(plan_id, (f"cap-{name}",)), 10)
    return sign_envelope(env, kp.seed) if sign else env


def converged():
    return open_session("ix", POINT)


def test_all_accepts_stabilize(identities):
    plan = plan_for("alpha", "beta")
    r = stabilize(converged(), plan, [signed_accept("alpha"), signed_accept("beta")], identities, frozenset({"alpha", "beta"}))
    assert r.stabilized and not r.missing


def test_missing_accept_is_pending(identities):
    plan = plan_for("alpha", "beta")
    r = stabilize(converged(), plan, [signed_accept("alpha")], identities)
    assert not r.stabilized
    assert r.missing == {KEYS["beta"].agent_id}


def test_one_bad_signature_rejects_everything(identities):
    plan = plan_for("alpha", "beta")
    forged = signed_accept("beta").with_signature(KEYS["gamma"].sign(b"something else"))
    with pytest.raises(StabilizationRejected):
        stabilize(converged(), plan, [signed_accept("alpha"), forged], identities)
    with pytest.raises(StabilizationRejected):
        stabilize(converged(), plan, [signed_accept("alpha"), signed_accept("beta", sign=False)], identities)


def test_accepts_for_other_plans_do_not_count(identities):
    plan = plan_for("alpha")
    r = stabilize(converged(), plan, [signed_accept("alpha", plan_id="plan-other")], identities)
    assert not r.stabilized


def test_stabilize_needs_convergence_and_coverage(identities):
    plan = plan_for("alpha")
    with pytest.raises(NegotiationError):
        stabilize(open_session("ix", UNIFORM4), plan, [signed_accept("alpha")], identities)
    with pytest.raises(NegotiationError):
        stabilize(converged(), plan, [signed_accept("alpha")], identities, frozenset({"alpha", "zeta"}))


@settings(max_examples=60, deadline=None)
@given(st.sets(st.sampled_from(sorted(KEYS)), min_size=1, max_size=3))
def test_removing_any_accept_breaks_stabilization(names):
    store = IdentityStore()
    for kp in KEYS.values():
        store.enroll(kp.public_key)
    plan = plan_for(*sorted(names))
    accepts = [signed_accept(n) for n in sorted(names)]
    assert stabilize(converged(), plan, accepts, store.as_mapping()).stabilized
    for i in range(len(accepts)):
        assert not stabilize(converged(), plan, accepts[:i] + accepts[i + 1 :], store.as_mapping()).stabilized


# -- renegotiation ----------------------------------------------------------------------------


def test_withdrawing_one_of_three_leaves_log_two():
    s = open_session("ix", SuitabilityDistribution.uniform("abc"))
    r = renegotiate(s, "capability_unavailable", {"a"})
    assert r.H0 == pytest.approx(math.log(2), abs=1e-12)
    assert (r.interaction_id, r.round, r.cycles) == ("ix", 0, 1)
    assert r.live_candidates.ids == ("b", "c")


def test_withdrawing_everything_recommends_dissolution():
    with pytest.raises(NoSurvivingCandidates):
        renegotiate(open_session("ix", SuitabilityDistribution.uniform("ab")), "execution_error", {"a", "b"})


def test_renegotiation_cap():
    s = open_session("ix", SuitabilityDistribution.uniform("abcdef"))
    s = renegotiate(s, "capability_unavailable", {"a"}, cap=2)
    s = renegotiate(s, "constraint_unsatisfied", {"b"}, cap=2)
    assert s.cycles == 2
    with pytest.raises(RenegotiationCapExceeded):
        renegotiate(s, "capability_unavailable", {"c"}, cap=2)


def test_renegotiate_rejects_unknown_signal():
    with pytest.raises(ValueError):
        renegotiate(open_session("ix", UNIFORM4), "bored", {"a"})


# -- fallbacks -------------------------------------------------------------------------------


def test_fallback_order():
    assert FALLBACK_ORDER == (FallbackMode.RECURSIVE_SIMPLIFICATION, FallbackMode.SOLIDIFICATION)


def test_simplify_drops_lowest_priority():
    intent = IntentPayload("paint", (Constraint("cost", "<=", 100), Constraint("color", "=", "blue")), priority_order=("cost", "color"))
    simpler = fallback_simplify(intent)
    assert simpler.keys == {"cost"}
    assert simpler.goal_text == intent.goal_text
    assert simpler.keys < intent.keys


def test_simplify_runs_out():
    once = fallback_simplify(IntentPayload("paint", (Constraint("cost", "<=", 1),), priority_order=("cost",)))
    with pytest.raises(NothingToSimplify):
        fallback_simplify(once)


def test_simplified_intent_opens_a_fresh_session():
    intent = intent_with("ab", priority_order=("a", "b"))
    simpler = fallback_simplify(intent)
    keys = simpler.keys
    dist = structure_distribution(simpler, [offer("x", "a", keys)], judgments({"x": 0.5}))
    assert open_session("ix", dist).H0 == 0.0


@settings(max_examples=100)
@given(st.lists(st.sampled_from(KEY_UNIVERSE), unique=True, max_size=7), st.data())
def test_simplify_terminates_within_constraint_count(keys, data):
    droppable = data.draw(st.permutations(keys)).copy()[: data.draw(st.integers(0, len(keys)))]
    intent = intent_with(keys, priority_order=tuple(droppable))
    steps = 0
    while True:
        try:
            nxt = fallback_simplify(intent)
        except NothingToSimplify:
            break
        assert len(nxt.constraints) == len(intent.constraints) - 1
        intent = nxt
        steps += 1
    assert steps == len(droppable) <= len(keys)


CORE = CoreOntology.load(SCENARIO_DIR / "core.json")


def parcel_intent(**facts):
    return IntentPayload(
        "ship parcel",
        (Constraint("destination", "=", "Lyon"),),
        ContextState({"origin": "Paris", **facts}, 0),
    )


def test_solidify_emits_invocation():
    inv = fallback_solidify(parcel_intent(weight_kg=2.5), CORE)
    assert inv.to_doc() == {"operation": "ship_parcel", "arguments": {"origin": "Paris", "destination": "Lyon", "weight_kg": 2.5}}


def test_solidify_extra_field_is_named():
    doc = {
        "operations": [{"name": "ship_parcel", "schema": {"origin": {"type": "string", "required": True}, "destination": {"type": "string", "required": True}}}],
        "mapping_rules": [{"match": ["ship", "parcel"], "operation": "ship_parcel", "arguments": {"origin": "context:origin", "destination": "constraint:destination", "insurance": {"value": "full"}}}],
    }
    with pytest.raises(SchemaViolation) as err:
        fallback_solidify(parcel_intent(), CoreOntology.from_doc(doc))
    assert err.value.extra == {"insurance"}
    assert "insurance" in str(err.value)
    assert err.value.to_doc()["extra"] == ["insurance"]


def test_solidify_type_and_required_checks():
    with pytest.raises(SchemaViolation) as err:
        fallback_solidify(parcel_intent(weight_kg="heavy"), CORE)
    assert set(err.value.invalid) == {"weight_kg"}
    with pytest.raises(SchemaViolation) as err:
        fallback_solidify(IntentPayload("ship parcel"), CORE)
    assert set(err.value.invalid) == {"origin", "destination"}


def test_solidify_without_mapping():
    with pytest.raises(NoMapping):
        fallback_solidify(parcel_intent(), CoreOntology())
    with pytest.raises(NoMapping):
        fallback_solidify(IntentPayload("bake bread"), CORE)


def test_core_rejects_rules_for_unknown_operations():
    with pytest.raises(NegotiationError):
        CoreOntology.from_doc({"operations": [], "mapping_rules": [{"match": ["x"], "operation": "missing"}]})
