import functools
import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlma.config import LeaderConfig
from dlma.journal import Journal, JournaledRandom
from dlma.leader import (
    LeaderLoop,
    Proposal,
    ScoreCard,
    recompute_stats_from_scores,
    render_generation_report,
    select_top_k,
    should_halt,
    stats_from_events,
    survivor_sort_key,
)
from dlma.review import ReviewPanel
from dlma.synth import FixtureResponder, ScriptedWorld

from conftest import fixture_retriever, responder_gateway, scripted_gateway

PROBLEM = "How can token interactions in state space models be attributed?"


def make_loop(journal, gateway, cfg=None, seed=7):
    cfg = cfg or LeaderConfig(pool_size=2, survivors=2, max_generations=2)
    rng = JournaledRandom(seed, journal)
    return LeaderLoop(cfg, gateway, fixture_retriever(journal),
                      ReviewPanel(gateway), journal, rng)


def responder_loop(journal, cfg=None, world=None, seed=7):
    gw = responder_gateway(journal, FixtureResponder(world or ScriptedWorld()))
    return make_loop(journal, gw, cfg, seed)


# -- involve -----------------------------------------------------------------


def test_involve_replays_fixture_content(journal):
    gw = scripted_gateway(journal, [
        ("leader.involve.query", "QUERY: state space interpretability"),
        ("leader.involve.generate", "Title: Fixed Content\nMethod Plan: x"),
    ])
    loop = make_loop(journal, gw)
    p = loop.involve(PROBLEM)
    assert p.content == "Title: Fixed Content\nMethod Plan: x"
    assert p.lineage_op == "involve" and p.parents == ()


def test_involve_rejects_empty_problem(journal):
    loop = responder_loop(journal)
    with pytest.raises(ValueError):
        loop.involve("   ")


def test_generation_zero_uses_involve_only(journal):
    cfg = LeaderConfig(pool_size=10, survivors=10, max_generations=1)
    loop = responder_loop(journal, cfg)
    pool = loop.seed_pool(PROBLEM)
    assert pool.generation == 0
    assert len(pool.members) == 10
    assert all(p.lineage_op == "involve" for p in pool.members)
    assert all(p.generation_born == 0 for p in pool.members)


# -- improve -----------------------------------------------------------------


def test_improve_three_phase_replay(journal):
    parent = Proposal("p0001", "Title: Parent\nQuality-Signal: 1", 0, "involve")
    gw = scripted_gateway(journal, [
        ("leader.improve.reflect", "Weak evaluation."),
        ("leader.improve.query", "QUERY: evaluation protocols"),
        ("leader.improve.revise", "Title: Revised child proposal"),
    ])
    loop = make_loop(journal, gw)
    child = loop.improve(parent, 1)
    assert child.content == "Title: Revised child proposal"
    assert child.lineage_op == "improve" and child.parents == ("p0001",)
    improve_calls = [e.payload["tag"] for e in journal.events
                     if e.type == "provider.call"
                     and e.payload["tag"].startswith("leader.improve.")]
    assert improve_calls == ["leader.improve.reflect", "leader.improve.query",
                             "leader.improve.revise"]
    assert len(improve_calls) == 3


def test_improve_clone_dropped_as_duplicate(journal):
    # The revision comes back identical to the parent; the union dedups it.
    world = ScriptedWorld()
    responder = FixtureResponder(world)

    def cloning_responder(tag, messages):
        if tag == "leader.improve.revise":
            return dict(pool_contents)["p0001"]
        return responder(tag, messages)

    cfg = LeaderConfig(pool_size=1, survivors=1, max_generations=2,
                       op_probs={"involve": 0.0, "improve": 1.0,
                                 "integrate": 0.0, "unchanged": 0.0})
    gw = responder_gateway(journal, cloning_responder)
    loop = make_loop(journal, gw, cfg)
    pool = loop.seed_pool(PROBLEM)
    pool_contents = [(p.id, p.content) for p in pool.members]
    new_pool = loop.step_generation(pool, PROBLEM)
    assert [p.id for p in new_pool.members] == [pool.members[0].id]
    dups = [e for e in journal.events if e.type == "proposal.duplicate"]
    assert len(dups) == 1


# -- integrate ---------------------------------------------------------------


def test_integrate_two_offspring_ordered_lineage(journal):
    a = Proposal("p0001", "Title: A\nQuality-Signal: 1", 0, "involve")
    b = Proposal("p0002", "Title: B\nQuality-Signal: 2", 0, "involve")
    gw = scripted_gateway(journal, [
        ("leader.integrate.strengths", "A is simple; B is thorough."),
        ("leader.integrate.generate", "Title: A plus B"),
        ("leader.integrate.generate", "Title: B plus A"),
    ])
    loop = make_loop(journal, gw)
    c1, c2 = loop.integrate(a, b, 1)
    assert c1.content == "Title: A plus B" and c1.parents == ("p0001", "p0002")
    assert c2.content == "Title: B plus A" and c2.parents == ("p0002", "p0001")
    assert c1.lineage_op == c2.lineage_op == "integrate"


def test_integrate_identical_parents_rejected(journal):
    a = Proposal("p0001", "Title: A", 0, "involve")
    loop = make_loop(journal, scripted_gateway(journal, []))
    with pytest.raises(ValueError):
        loop.integrate(a, a, 1)


# -- selection ----------------------------------------------------------------


def card(rating, secondary=3, tertiary=3):
    return ScoreCard(Fraction(rating), Fraction(secondary), Fraction(tertiary))


def oracle_order(pairs):
    """Independent comparator chain, element by element."""
    def cmp(x, y):
        (px, cx), (py, cy) = x, y
        for attr in ("rating", "secondary", "tertiary"):
            a, b = getattr(cx, attr), getattr(cy, attr)
            if a != b:
                return -1 if a > b else 1
        if px.generation_born != py.generation_born:
            return -1 if px.generation_born > py.generation_born else 1
        if px.id != py.id:
            return -1 if px.id < py.id else 1
        return 0

    return sorted(pairs, key=functools.cmp_to_key(cmp))


def test_fourteen_distinct_ratings_top_10_sorted_prefix():
    rng = random.Random(42)
    ratings = [Fraction(k, 4) + 1 for k in range(14)]  # 14 distinct rationals
    pairs = [
        (Proposal(f"p{i:04d}", f"c{i}", 0, "involve"), card(r))
        for i, r in enumerate(ratings)
    ]
    rng.shuffle(pairs)
    survivors = select_top_k(pairs, 10)
    expected = [p for p, _ in oracle_order(pairs)[:10]]
    assert [p.id for p in survivors] == [p.id for p in expected]


def test_all_unchanged_survivors_are_k_best(journal):
    cfg = LeaderConfig(pool_size=3, survivors=2, max_generations=2,
                       op_probs={"involve": 0.0, "improve": 0.0,
                                 "integrate": 0.0, "unchanged": 1.0})
    world = ScriptedWorld(involve_quality=[1, 3, 2])
    loop = responder_loop(journal, cfg, world)
    pool = loop.seed_pool(PROBLEM)
    ratings = {p.id: loop._cards[(p.content_sha, "acl")].rating
               for p in pool.members}
    new_pool = loop.step_generation(pool, PROBLEM)
    expected = sorted(pool.members, key=lambda p: (-ratings[p.id], p.id))[:2]
    assert [p.id for p in new_pool.members] == [p.id for p in expected]
    applied = [e for e in journal.events if e.type == "operator.applied"]
    assert all(e.payload["op"] == "unchanged" for e in applied)


@st.composite
def candidate_pool(draw):
    n = draw(st.integers(1, 20))
    pairs = []
    for i in range(n):
        rating = Fraction(draw(st.integers(2, 10)), 2)
        secondary = Fraction(draw(st.integers(2, 10)), 2)
        tertiary = Fraction(draw(st.integers(2, 10)), 2)
        born = draw(st.integers(0, 4))
        pairs.append((Proposal(f"p{i:04d}", f"content-{i}", born, "involve"),
                      ScoreCard(rating, secondary, tertiary)))
    k = draw(st.integers(1, 25))
    return pairs, k


@settings(max_examples=200)
@given(candidate_pool())
def test_selection_matches_brute_force_oracle(data):
    pairs, k = data
    survivors = select_top_k(pairs, k)
    expected = [p for p, _ in oracle_order(pairs)[:min(k, len(pairs))]]
    assert [p.id for p in survivors] == [p.id for p in expected]


def test_pool_size_is_min_k_union(journal):
    cfg = LeaderConfig(pool_size=2, survivors=10, max_generations=2)
    loop = responder_loop(journal, cfg)
    pool = loop.seed_pool(PROBLEM)
    assert len(pool.members) == 2  # union smaller than K


# -- operator distribution ------------------------------------------------------


def test_operator_draw_frequencies(tmp_path):
    journal = Journal.create(tmp_path / "draws.jsonl")
    rng = JournaledRandom(20240809, journal)
    probs = {"involve": 0.10, "improve": 0.30, "integrate": 0.50,
             "unchanged": 0.10}
    counts = {op: 0 for op in probs}
    for i in range(10_000):
        counts[rng.categorical(f"draw.{i}", probs)] += 1
    journal.close()
    for op, p in probs.items():
        assert abs(counts[op] / 10_000 - p) <= 0.01, (op, counts)


# -- convergence and the full loop ------------------------------------------------


def test_halting_rule_exact_trace():
    maxes = [Fraction("3.6")]
    assert not should_halt(maxes, 0.05)
    maxes.append(Fraction("3.8"))
    assert not should_halt(maxes, 0.05)          # improvement 0.2
    maxes.append(Fraction("3.83"))
    assert should_halt(maxes, 0.05)              # improvement 0.03 < 0.05


def test_halting_not_checked_before_third_generation():
    assert not should_halt([Fraction(3), Fraction(3)], 10.0)


def test_run_exact_generation_cap(journal):
    # Strictly improving maxes: quality climbs 0 -> 4, one level per
    # generation, so improvement stays at 0.5 and the cap binds.
    cfg = LeaderConfig(pool_size=2, survivors=2, max_generations=5,
                       op_probs={"involve": 0.0, "improve": 1.0,
                                 "integrate": 0.0, "unchanged": 0.0})
    world = ScriptedWorld(involve_quality=[0])
    loop = responder_loop(journal, cfg, world)
    best, history = loop.run(PROBLEM)
    assert len(history) == 5
    maxes = [float(h.forms["acl"]["max"]) for h in history]
    assert maxes == [3.0, 3.5, 4.0, 4.5, 5.0]


def test_run_halts_on_convergence(journal):
    # Quality saturates at 4, so the max plateaus and the rule fires at the
    # third generation.
    cfg = LeaderConfig(pool_size=2, survivors=2, max_generations=5,
                       op_probs={"involve": 0.0, "improve": 1.0,
                                 "integrate": 0.0, "unchanged": 0.0})
    world = ScriptedWorld(involve_quality=[4])
    loop = responder_loop(journal, cfg, world)
    best, history = loop.run(PROBLEM)
    assert len(history) == 3
    assert journal.last("leader.converged") is not None


def test_singleton_pool_returns_member(journal):
    cfg = LeaderConfig(pool_size=1, survivors=1, max_generations=1)
    loop = responder_loop(journal, cfg)
    best, history = loop.run(PROBLEM)
    assert best.lineage_op == "involve"
    assert len(history) == 1


def test_elitism_max_never_decreases(journal):
    cfg = LeaderConfig(pool_size=3, survivors=3, max_generations=4)
    loop = responder_loop(journal, cfg, seed=11)
    _, history = loop.run(PROBLEM)
    maxes = [h.forms["acl"]["max"] for h in history]
    assert all(b >= a for a, b in zip(maxes, maxes[1:]))


def test_lineage_acyclic_and_parents_exist(journal):
    cfg = LeaderConfig(pool_size=3, survivors=3, max_generations=3)
    loop = responder_loop(journal, cfg, seed=3)
    loop.run(PROBLEM)
    created = {}
    for ev in journal.events:
        if ev.type != "proposal.created":
            continue
        pid = ev.payload["id"]
        for parent in ev.payload["parents"]:
            assert parent in created, f"{pid} born before parent {parent}"
            assert created[parent] < ev.payload["generation_born"]
        created[pid] = ev.payload["generation_born"]


def test_operator_failure_degrades_to_unchanged(journal):
    world = ScriptedWorld()
    base = FixtureResponder(world)

    def flaky(tag, messages):
        if tag == "leader.improve.reflect":
            return " "  # EmptyResponse -> meeting degraded
        return base(tag, messages)

    cfg = LeaderConfig(pool_size=2, survivors=2, max_generations=2,
                       op_probs={"involve": 0.0, "improve": 1.0,
                                 "integrate": 0.0, "unchanged": 0.0})
    gw = responder_gateway(journal, flaky)
    loop = make_loop(journal, gw, cfg)
    pool = loop.seed_pool(PROBLEM)
    new_pool = loop.step_generation(pool, PROBLEM)
    degraded = [e for e in journal.events if e.type == "operator.degraded"]
    assert len(degraded) == 2
    assert {p.id for p in new_pool.members} == {p.id for p in pool.members}


# -- reporting --------------------------------------------------------------------


def test_generation_report_single_member_min_equals_max(journal):
    cfg = LeaderConfig(pool_size=1, survivors=1, max_generations=1)
    loop = responder_loop(journal, cfg)
    loop.run(PROBLEM)
    stats = stats_from_events(journal.events)
    vals = stats[0].forms["acl"]
    assert vals["min"] == vals["mean"] == vals["max"]


def test_stats_recompute_matches_stored(journal):
    cfg = LeaderConfig(pool_size=3, survivors=3, max_generations=3)
    loop = responder_loop(journal, cfg, seed=5)
    loop.run(PROBLEM)
    stored = stats_from_events(journal.events)
    recomputed = recompute_stats_from_scores(journal.events)
    assert len(stored) == len(recomputed)
    for a, b in zip(stored, recomputed):
        assert a.generation == b.generation
        assert a.forms == b.forms


def test_report_renders_two_decimal_values():
    from dlma.leader import GenerationStats

    stats = [GenerationStats(0, {"acl": {
        "min": Fraction(3), "mean": Fraction(193, 50), "max": Fraction(4),
    }}, 25)]
    text, rows = render_generation_report(stats)
    line = text.splitlines()[2]
    assert "3.00" in line and "3.86" in line and "4.00" in line
    assert rows[0]["generation"] == 1
    assert rows[0]["acl"] == {"min": 3.0, "mean": 3.86, "max": 4.0}


def test_survivor_sort_key_total_order():
    a = (Proposal("p0001", "a", 1, "involve"), card(4, 4, 4))
    b = (Proposal("p0002", "b", 2, "involve"), card(4, 4, 4))
    # Same scores everywhere: younger generation first, then id.
    assert survivor_sort_key(*b) < survivor_sort_key(*a)
