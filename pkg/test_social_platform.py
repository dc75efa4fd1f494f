"""
Platform emulator, event log replay and follow-graph initialisation
"""

import math
from datetime import timedelta
from types import SimpleNamespace

import numpy as np
import pytest

from conftest import START, rules_backend
from src.scenario import builtin_storhampton_scenario
from src.social_platform import (
    EventKind,
    BlockedInteractionError,
    OversizeTootError,
    PlatformEmulator,
    PlatformError,
    UnknownTargetError,
    expected_pair_frequencies,
    graph_pair_stats,
    init_follow_graph,
    post_introductions,
    profile_bio,
    provision_accounts,
    read_event_log,
    replay_events,
    write_event_log,
)

ALICE, BOB, CAROL = "1", "2", "3"


# ========================================
# Accounts and statuses
# ========================================

def test_registration_is_idempotent(emulator):
    assert emulator.register_account("alice", "Alice", "") == ALICE
    assert emulator.lookup("@ALICE") == ALICE
    assert len(emulator.events()) == 3
    with pytest.raises(UnknownTargetError):
        emulator.lookup("dave")


def test_toot_limits(emulator):
    assert len(emulator.post_toot(ALICE, "x" * 500).text) == 500
    with pytest.raises(OversizeTootError):
        emulator.post_toot(ALICE, "x" * 501)
    with pytest.raises(PlatformError):
        emulator.post_toot(ALICE, "   ")
    with pytest.raises(UnknownTargetError):
        emulator.post_toot("99", "hello")


def test_simulated_timestamps(emulator):
    emulator.set_episode(3)
    toot = emulator.post_toot(ALICE, "lunch time")
    assert toot.created_at == START + timedelta(minutes=90)
    assert emulator.events()[-1].episode == 3


def test_ids_follow_event_sequence(emulator):
    toot = emulator.post_toot(BOB, "first toot")
    assert toot.id == "4"
    assert emulator.get_toot("4").author == BOB


def test_mentions_resolve_to_accounts(emulator):
    toot = emulator.post_toot(ALICE, "hi @bob and @Carol, not @nobody")
    assert toot.mentions == [BOB, CAROL]


def test_reply_and_unknown_parent(emulator):
    parent = emulator.post_toot(ALICE, "thoughts?")
    reply = emulator.reply(BOB, parent.id, "agreed")
    assert reply.in_reply_to == parent.id
    with pytest.raises(UnknownTargetError):
        emulator.reply(BOB, "999", "into the void")


def test_boost_resolves_and_dedupes(emulator):
    original = emulator.post_toot(ALICE, "boost me")
    boost = emulator.boost(BOB, original.id)
    assert boost.boost_of == original.id and boost.text == ""
    again = emulator.boost(CAROL, boost.id)
    assert again.boost_of == original.id
    events = len(emulator.events())
    assert emulator.boost(BOB, original.id).id == boost.id
    assert len(emulator.events()) == events


def test_favorite_is_idempotent(emulator):
    toot = emulator.post_toot(ALICE, "like me")
    emulator.favorite(BOB, toot.id)
    emulator.favorite(BOB, toot.id)
    emulator.favorite(CAROL, toot.id)
    assert emulator.favorites_of(toot.id) == 2
    assert sum(1 for e in emulator.events() if e.kind == EventKind.FAVORITE) == 2


def test_profile_update(emulator):
    emulator.update_profile(ALICE, "new bio", display_name="Alice A.")
    account = emulator.account(ALICE)
    assert (account.bio, account.display_name) == ("new bio", "Alice A.")
    with pytest.raises(OversizeTootError):
        emulator.update_profile(ALICE, "b" * 501)


# ========================================
# Relationships
# ========================================

def test_follow_rules(emulator):
    with pytest.raises(PlatformError):
        emulator.follow(ALICE, ALICE)
    emulator.follow(ALICE, BOB)
    emulator.follow(ALICE, BOB)
    assert emulator.following(ALICE) == {BOB}
    assert sum(1 for e in emulator.events() if e.kind == EventKind.FOLLOW) == 1
    emulator.unfollow(ALICE, BOB)
    emulator.unfollow(ALICE, BOB)
    assert emulator.following(ALICE) == set()
    assert sum(1 for e in emulator.events() if e.kind == EventKind.UNFOLLOW) == 1


def test_block_severs_and_forbids(emulator):
    emulator.follow(ALICE, BOB)
    emulator.follow(BOB, ALICE)
    toot = emulator.post_toot(ALICE, "my toot")
    emulator.block(ALICE, BOB)
    assert not emulator.follow_graph().has(ALICE, BOB)
    assert not emulator.follow_graph().has(BOB, ALICE)

    for action in (
        lambda: emulator.reply(BOB, toot.id, "hey"),
        lambda: emulator.favorite(BOB, toot.id),
        lambda: emulator.boost(BOB, toot.id),
        lambda: emulator.follow(BOB, ALICE),
        lambda: emulator.follow(ALICE, BOB),
    ):
        with pytest.raises(BlockedInteractionError):
            action()

    emulator.unblock(ALICE, BOB)
    emulator.follow(BOB, ALICE)
    assert emulator.following(BOB) == {ALICE}


def test_home_timeline(emulator):
    emulator.follow(ALICE, BOB)
    emulator.follow(ALICE, CAROL)
    emulator.set_episode(0)
    first = emulator.post_toot(BOB, "early")
    emulator.post_toot(ALICE, "own toot")
    emulator.set_episode(1)
    second = emulator.post_toot(CAROL, "later")
    third = emulator.post_toot(BOB, "latest")
    ids = [t.id for t in emulator.get_home_timeline(ALICE, limit=10)]
    assert ids == [third.id, second.id, first.id]
    assert [t.id for t in emulator.get_home_timeline(ALICE, limit=2)] == [third.id, second.id]


def test_timeline_hides_boosted_blocked_author(emulator):
    emulator.follow(ALICE, BOB)
    carol_toot = emulator.post_toot(CAROL, "from carol")
    boost = emulator.boost(BOB, carol_toot.id)
    assert [t.id for t in emulator.get_home_timeline(ALICE)] == [boost.id]
    emulator.block(ALICE, CAROL)
    assert emulator.get_home_timeline(ALICE) == []


def test_account_timeline_respects_blocks(emulator):
    emulator.post_toot(BOB, "one")
    emulator.post_toot(BOB, "two")
    assert [t.text for t in emulator.get_account_timeline(ALICE, BOB)] == ["two", "one"]
    emulator.block(BOB, ALICE)
    assert emulator.get_account_timeline(ALICE, BOB) == []


# ========================================
# Event log
# ========================================

def _busy(emulator):
    emulator.follow(ALICE, BOB)
    t = emulator.post_toot(BOB, "hello @alice")
    emulator.set_episode(1)
    emulator.reply(ALICE, t.id, "hi bob")
    emulator.boost(CAROL, t.id)
    emulator.favorite(ALICE, t.id)
    emulator.block(CAROL, ALICE)
    emulator.update_profile(BOB, "updated")
    emulator.unblock(CAROL, ALICE)
    return emulator


def test_replay_rebuilds_state(emulator):
    _busy(emulator)
    replayed = replay_events(emulator.events(), START, 30)
    assert replayed.state_fingerprint() == emulator.state_fingerprint()
    assert replayed.episode == 1


def test_event_log_file(emulator, tmp_path):
    _busy(emulator)
    path = tmp_path / "events.jsonl"
    write_event_log(emulator.events(), path)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0].startswith('{"seq":0,"episode":-1,"actor":"","kind":"register","payload":')
    assert read_event_log(path) == emulator.events()
    assert len(read_event_log(path, limit=4)) == 4


def test_apply_rejects_sequence_gaps(emulator):
    events = emulator.events()
    fresh = PlatformEmulator(START)
    fresh._apply(events[0])
    with pytest.raises(PlatformError):
        fresh._apply(events[2])


# ========================================
# Follow graph
# ========================================

def _ids(n):
    return [str(i + 1) for i in range(n)]


def test_graph_candidate_edges_and_no_self_loops():
    ids = _ids(20)
    graph = init_follow_graph(ids, ids[:2], 0.2, 0.15, np.random.default_rng(0))
    for candidate in ids[:2]:
        assert graph.followers(candidate) == set(ids) - {candidate}
    assert graph.has("1", "2") and graph.has("2", "1")
    assert all(s != d for s, d in graph.edges)


def test_graph_extremes():
    ids = _ids(8)
    full = init_follow_graph(ids, ids[:2], 1.0, 0.0, np.random.default_rng(0))
    assert graph_pair_stats(full, ids[2:])["reciprocal_fraction"] == 1.0
    empty = init_follow_graph(ids, ids[:2], 0.0, 0.0, np.random.default_rng(0))
    assert len(empty) == 2 * 7
    one_way = init_follow_graph(ids, ids[:2], 0.0, 1.0, np.random.default_rng(0), p2_mode="per_pair")
    stats = graph_pair_stats(one_way, ids[2:])
    assert stats["one_way_fraction"] == 1.0 and stats["directed_edges"] == 15


def test_graph_validation():
    with pytest.raises(ValueError):
        init_follow_graph(_ids(5), ["1"], 0.2, 0.15, np.random.default_rng(0))
    with pytest.raises(ValueError):
        init_follow_graph(_ids(5), ["1", "9"], 0.2, 0.15, np.random.default_rng(0))
    with pytest.raises(ValueError):
        init_follow_graph(_ids(5), ["1", "2"], 1.2, 0.15, np.random.default_rng(0))


def test_expected_frequencies():
    per_direction = expected_pair_frequencies(0.2, 0.15)
    assert per_direction["reciprocal"] == pytest.approx(0.218)
    assert per_direction["one_way"] == pytest.approx(0.204)
    assert 153 * per_direction["directed_per_pair"] == pytest.approx(97.92)
    per_pair = expected_pair_frequencies(0.2, 0.15, "per_pair")
    assert per_pair["reciprocal"] == pytest.approx(0.2)
    assert per_pair["one_way"] == pytest.approx(0.12)


@pytest.mark.parametrize("mode", ["per_direction", "per_pair"])
def test_graph_statistics_match_expectation(mode):
    """Monte-Carlo pair frequencies sit within 3 standard errors of the analytic values"""
    ids = _ids(20)
    others = ids[2:]
    seeds = 500
    reciprocal, one_way, directed = [], [], []
    for seed in range(seeds):
        graph = init_follow_graph(ids, ids[:2], 0.2, 0.15, np.random.default_rng(seed), mode)
        stats = graph_pair_stats(graph, others)
        reciprocal.append(stats["reciprocal_fraction"])
        one_way.append(stats["one_way_fraction"])
        directed.append(stats["directed_edges"])

    expected = expected_pair_frequencies(0.2, 0.15, mode)
    for values, target in (
        (reciprocal, expected["reciprocal"]),
        (one_way, expected["one_way"]),
        (directed, 153 * expected["directed_per_pair"]),
    ):
        se = np.std(values) / math.sqrt(seeds)
        assert abs(np.mean(values) - target) <= 3 * se


# ========================================
# Provisioning and introductions
# ========================================

def test_provisioning_binds_each_agent_once():
    config = builtin_storhampton_scenario("control", n=5)
    platform = PlatformEmulator(START)
    binding = provision_accounts(platform, config.agents)
    assert binding == provision_accounts(platform, config.agents)
    assert len(set(binding.values())) == 5
    bill = platform.account(binding["Bill Fredrickson"])
    assert bill.username == "bill_fredrickson"
    assert bill.display_name == "Bill Fredrickson"
    assert "Running for mayor" in bill.bio
    assert profile_bio(config.agents[3]) == config.agents[3].goal


def test_introductions():
    platform = PlatformEmulator(START)
    agents = [
        SimpleNamespace(name=name, account=platform.register_account(name.lower(), name), persona="p")
        for name in ("Ann", "Ben")
    ]
    llm = rules_backend([
        {"kind": "introduction", "agent": "Ann", "responses": ["   "]},
        {"kind": "introduction", "responses": ["Hi, I'm {agent_name}!" + "!" * 600]},
    ])
    platform.set_episode(5)
    toots = post_introductions(agents, llm, platform)
    assert toots[0].text == "Hello Storhampton, I'm Ann."
    assert len(toots[1].text) == 500
    assert all(t.created_at == START - timedelta(minutes=30) for t in toots)
    assert all(req.phase == "introductions" for req, _ in llm.transcript())
