"""
Memory store: append-only ordering and deterministic retrieval
"""

import math
import re
from datetime import datetime, timedelta

import pytest

from src.memory import MemoryRecord, MemoryStore, token_overlap, tokenize

T0 = datetime(2024, 11, 4, 7, 0)


def _store(*items):
    store = MemoryStore()
    for offset_hours, text in items:
        store.append(MemoryRecord(timestamp=T0 + timedelta(hours=offset_hours), text=text))
    return store


def test_append_only_ordering():
    store = _store((0, "first"), (1, "second"))
    with pytest.raises(ValueError):
        store.append(MemoryRecord(timestamp=T0, text="too early"))
    assert [r.text for r in store] == ["first", "second"]
    assert len(store) == 2


def test_record_validation():
    with pytest.raises(ValueError):
        MemoryRecord(timestamp=T0, text="   ")
    with pytest.raises(ValueError):
        MemoryRecord(timestamp=T0, text="x", tags=frozenset({"gossip"}))


def test_relevance_wins():
    store = _store((0, "Bill posted about the mayoral election"), (0, "sunny day at the river"))
    top = store.retrieve("election Bill", k=1)
    assert top[0].text.startswith("Bill posted")


def test_recency_breaks_equal_relevance():
    store = _store((0, "apples"), (48, "pears"))
    assert [r.text for r in store.retrieve("election", k=2)] == ["pears", "apples"]


def test_ties_prefer_later_insertion():
    store = _store((0, "apples"), (0, "pears"))
    assert [r.text for r in store.retrieve("election", k=2)] == ["pears", "apples"]


def test_retrieve_is_deterministic():
    store = _store(*[(i, f"note {i} about town politics") for i in range(30)])
    first = store.retrieve("politics note", k=8)
    assert first == store.retrieve("politics note", k=8)
    assert len(first) == 8


def test_retrieve_edge_cases():
    assert MemoryStore().retrieve("anything", k=3) == []
    with pytest.raises(ValueError):
        _store((0, "x")).retrieve("x", k=0)


def test_latest_by_tag():
    store = MemoryStore()
    store.append(MemoryRecord(T0, "formative", tags=frozenset({"formative"})))
    store.append(MemoryRecord(T0, "saw a toot", tags=frozenset({"platform"})))
    store.append(MemoryRecord(T0, "did a thing"))
    assert [r.text for r in store.latest(5, tag="platform")] == ["saw a toot"]
    assert [r.text for r in store.latest(2)] == ["saw a toot", "did a thing"]
    assert store.latest(0) == []


def test_serialisation():
    store = _store((0, "one"), (2, "two"))
    restored = MemoryStore.from_list(store.to_list())
    assert restored.records == store.records


def test_token_overlap():
    assert token_overlap(tokenize("a b"), tokenize("a b")) == pytest.approx(1.0)
    assert token_overlap(tokenize(""), tokenize("a")) == 0.0
    assert token_overlap(tokenize("Bill's plan"), tokenize("bill's jobs")) == pytest.approx(0.5)


ELECTION_NOTES = [
    (0, "Bill Fredrickson announced his election platform at the mill"),
    (1, "Rain all morning by the river"),
    (2, "The election debate is on Thursday"),
    (3, "Bradley wants more parks"),
    (5, "election election election"),
    (5, "Who will win the election?"),
    (8, "Lunch with Ann at the cafe"),
    (8, "Lunch with Ann at the cafe"),
    (12, "Saw a poster about the mayoral election downtown"),
    (20, "Quiet evening at home"),
]


def _exhaustive_ranking(items, query, recency_weight, relevance_weight, half_life_hours):
    """Score every (offset, text) pair directly and sort with the documented tie rules."""
    words = set(re.findall(r"[a-z0-9']+", query.lower()))
    newest = max(offset for offset, _ in items)
    scored = []
    for index, (offset, text) in enumerate(items):
        tokens = set(re.findall(r"[a-z0-9']+", text.lower()))
        overlap = len(words & tokens) / math.sqrt(len(words) * len(tokens)) if words and tokens else 0.0
        recency = 0.5 ** ((newest - offset) / half_life_hours)
        scored.append((recency_weight * recency + relevance_weight * overlap, offset, index))
    scored.sort(key=lambda s: (-s[0], -s[1], -s[2]))
    return [index for _, _, index in scored]


@pytest.mark.parametrize("weights", [(0.25, 1.0, 24.0), (1.0, 0.5, 6.0), (0.0, 1.0, 24.0)])
def test_retrieval_matches_exhaustive_scoring(weights):
    store = _store(*ELECTION_NOTES)
    records = store.records
    expected = _exhaustive_ranking(ELECTION_NOTES, "election", *weights)
    got = store.retrieve("election", len(records), *weights)
    # identity, so the two identical lunch notes stay distinguishable
    assert [next(i for i, rec in enumerate(records) if rec is r) for r in got] == expected
    assert [r.text for r in store.retrieve("election", 3, *weights)] == [
        ELECTION_NOTES[i][1] for i in expected[:3]
    ]
