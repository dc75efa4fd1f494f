"""
Social Platform

Mastodon-compatible platform layer:

- PlatformClient: the one interface agents and the engine talk to
- PlatformEmulator: in-process, event-sourced implementation (state = fold of
  the event log, so replaying the log rebuilds the platform exactly)
- MastodonRestClient (src/mastodon_client.py): the same interface over a real
  server's REST API

Plus follow-graph initialisation, account provisioning and the introductory
toots that populate the platform before episode 0.

Simulated time stamps everything: created_at = start_time + episode * episode_minutes.
Setup happens at episode -1.
"""

import json
import logging
import re
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from src.llm_backend import CompletionRequest, PromptKind
from src.prompts import render_prompt

logger = logging.getLogger(__name__)

MAX_TOOT_CHARS = 500
MAX_BIO_CHARS = 500
SETUP_EPISODE = -1

_MENTION_RE = re.compile(r"@([A-Za-z0-9_]+)")


# ========================================
# Errors
# ========================================

class PlatformError(RuntimeError):
    """Base class for platform failures."""


class OversizeTootError(PlatformError):
    """Toot text longer than MAX_TOOT_CHARS."""


class UnknownTargetError(PlatformError):
    """Referenced account or toot does not exist."""


class BlockedInteractionError(PlatformError):
    """A block between the two parties forbids the interaction."""


class InsufficientAccountsError(PlatformError):
    """A real server has fewer blank accounts than agents."""


# ========================================
# Wire types
# ========================================

class EventKind(str, Enum):
    REGISTER = "register"
    TOOT = "toot"
    REPLY = "reply"
    BOOST = "boost"
    FAVORITE = "favorite"
    FOLLOW = "follow"
    UNFOLLOW = "unfollow"
    BLOCK = "block"
    UNBLOCK = "unblock"
    PROFILE_UPDATE = "profile_update"


ACTIVITY_KINDS = [k for k in EventKind if k != EventKind.REGISTER]


class Toot(BaseModel):
    """A status. Boosts carry no text of their own."""
    id: str
    author: str
    text: str = Field("", max_length=MAX_TOOT_CHARS)
    created_at: datetime
    in_reply_to: Optional[str] = None
    mentions: List[str] = Field(default_factory=list)
    boost_of: Optional[str] = None

    @model_validator(mode="after")
    def _boost_has_no_text(self) -> "Toot":
        if self.boost_of is not None and self.text:
            raise ValueError("a boost cannot carry fresh text")
        return self


class PlatformEvent(BaseModel):
    """One platform mutation. Field order is the on-disk order."""
    seq: int
    episode: int
    actor: str
    kind: EventKind
    payload: Dict[str, Any] = Field(default_factory=dict)


@dataclass
class Account:
    id: str
    username: str
    display_name: str
    bio: str = ""
    token: str = ""


@dataclass
class FollowGraph:
    """Directed follow edges (follower, followee)."""
    edges: Set[Tuple[str, str]] = field(default_factory=set)

    def add(self, src: str, dst: str) -> None:
        if src == dst:
            raise ValueError(f"self-follow is not allowed: {src}")
        self.edges.add((src, dst))

    def discard(self, src: str, dst: str) -> None:
        self.edges.discard((src, dst))

    def has(self, src: str, dst: str) -> bool:
        return (src, dst) in self.edges

    def following(self, account: str) -> Set[str]:
        return {d for s, d in self.edges if s == account}

    def followers(self, account: str) -> Set[str]:
        return {s for s, d in self.edges if d == account}

    def sorted_edges(self) -> List[Tuple[str, str]]:
        return sorted(self.edges)

    def __len__(self) -> int:
        return len(self.edges)


# ========================================
# Client interface
# ========================================

class PlatformClient(ABC):
    """Operations every platform implementation supports."""

    def __init__(self, start_time: datetime, episode_minutes: int = 30):
        self.start_time = start_time
        self.episode_minutes = episode_minutes
        self.episode = SETUP_EPISODE

    def set_episode(self, episode: int) -> None:
        self.episode = episode

    def episode_time(self, episode: Optional[int] = None) -> datetime:
        episode = self.episode if episode is None else episode
        return self.start_time + timedelta(minutes=self.episode_minutes * episode)

    @abstractmethod
    def register_account(self, username: str, display_name: str, bio: str) -> str: ...

    @abstractmethod
    def lookup(self, username: str) -> str: ...

    @abstractmethod
    def list_accounts(self) -> List[Account]: ...

    @abstractmethod
    def post_toot(self, actor: str, text: str) -> Toot: ...

    @abstractmethod
    def reply(self, actor: str, parent: str, text: str) -> Toot: ...

    @abstractmethod
    def boost(self, actor: str, toot: str) -> Toot: ...

    @abstractmethod
    def favorite(self, actor: str, toot: str) -> None: ...

    @abstractmethod
    def follow(self, actor: str, target: str) -> None: ...

    @abstractmethod
    def unfollow(self, actor: str, target: str) -> None: ...

    @abstractmethod
    def block(self, actor: str, target: str) -> None: ...

    @abstractmethod
    def unblock(self, actor: str, target: str) -> None: ...

    @abstractmethod
    def update_profile(self, actor: str, bio: str, display_name: Optional[str] = None) -> None: ...

    @abstractmethod
    def get_home_timeline(self, actor: str, limit: int = 20) -> List[Toot]: ...

    @abstractmethod
    def get_toot(self, toot_id: str) -> Toot: ...

    @abstractmethod
    def following(self, actor: str) -> Set[str]: ...

    @abstractmethod
    def events(self) -> List[PlatformEvent]: ...

    def follow_graph(self) -> FollowGraph:
        graph = FollowGraph()
        for account in self.list_accounts():
            for target in self.following(account.id):
                graph.add(account.id, target)
        return graph

    def username_of(self, account_id: str) -> str:
        for account in self.list_accounts():
            if account.id == account_id:
                return account.username
        raise UnknownTargetError(f"unknown account: {account_id}")


def check_toot_text(text: str) -> None:
    if not text or not text.strip():
        raise PlatformError("toot text cannot be empty")
    if len(text) > MAX_TOOT_CHARS:
        raise OversizeTootError(
            f"toot has {len(text)} characters, limit is {MAX_TOOT_CHARS}"
        )


# ========================================
# Emulator
# ========================================

class PlatformEmulator(PlatformClient):
    """
    In-process, event-sourced Mastodon stand-in.

    Every mutation is validated against current state, turned into a
    PlatformEvent and applied through _apply(); replay_events() rebuilds an
    identical emulator from the log. Account and toot ids are the decimal
    event seq + 1 of the event that created them.

    A single lock serialises writers and readers.
    """

    def __init__(self, start_time: datetime, episode_minutes: int = 30):
        super().__init__(start_time, episode_minutes)
        self._lock = threading.RLock()
        self._events: List[PlatformEvent] = []
        self._accounts: Dict[str, Account] = {}
        self._by_username: Dict[str, str] = {}
        self._toots: Dict[str, Toot] = {}
        self._graph = FollowGraph()
        self._blocks: Set[Tuple[str, str]] = set()
        self._favorites: Set[Tuple[str, str]] = set()
        self._boosts: Dict[Tuple[str, str], str] = {}

    # ---- event plumbing ----

    def _emit(self, kind: EventKind, actor: str, payload: Dict[str, Any]) -> PlatformEvent:
        event = PlatformEvent(
            seq=len(self._events), episode=self.episode, actor=actor, kind=kind, payload=payload,
        )
        self._apply(event)
        return event

    def _apply(self, event: PlatformEvent) -> None:
        if event.seq != len(self._events):
            raise PlatformError(f"event seq gap: expected {len(self._events)}, got {event.seq}")
        p = event.payload
        new_id = str(event.seq + 1)
        kind = event.kind

        if kind == EventKind.REGISTER:
            self._accounts[new_id] = Account(
                id=new_id, username=p["username"], display_name=p["display_name"],
                bio=p.get("bio", ""), token=f"token-{p['username']}",
            )
            self._by_username[p["username"]] = new_id
        elif kind in (EventKind.TOOT, EventKind.REPLY, EventKind.BOOST):
            self._toots[new_id] = Toot(
                id=new_id, author=event.actor, text=p.get("text", ""),
                created_at=datetime.fromisoformat(p["created_at"]),
                in_reply_to=p.get("in_reply_to"), mentions=list(p.get("mentions", [])),
                boost_of=p.get("boost_of"),
            )
            if kind == EventKind.BOOST:
                self._boosts[(event.actor, p["boost_of"])] = new_id
        elif kind == EventKind.FAVORITE:
            self._favorites.add((event.actor, p["toot"]))
        elif kind == EventKind.FOLLOW:
            self._graph.add(event.actor, p["target"])
        elif kind == EventKind.UNFOLLOW:
            self._graph.discard(event.actor, p["target"])
        elif kind == EventKind.BLOCK:
            target = p["target"]
            self._blocks.add((event.actor, target))
            self._graph.discard(event.actor, target)
            self._graph.discard(target, event.actor)
        elif kind == EventKind.UNBLOCK:
            self._blocks.discard((event.actor, p["target"]))
        elif kind == EventKind.PROFILE_UPDATE:
            account = self._accounts[event.actor]
            account.bio = p["bio"]
            if p.get("display_name"):
                account.display_name = p["display_name"]
        self._events.append(event)

    # ---- validation helpers ----

    def _require_account(self, account_id: str) -> Account:
        account = self._accounts.get(account_id)
        if account is None:
            raise UnknownTargetError(f"unknown account: {account_id}")
        return account

    def _require_toot(self, toot_id: str) -> Toot:
        toot = self._toots.get(toot_id)
        if toot is None:
            raise UnknownTargetError(f"unknown toot: {toot_id}")
        return toot

    def _blocked_between(self, a: str, b: str) -> bool:
        return (a, b) in self._blocks or (b, a) in self._blocks

    def _check_not_blocked(self, actor: str, other: str) -> None:
        if (other, actor) in self._blocks:
            raise BlockedInteractionError(f"account {other} has blocked {actor}")
        if (actor, other) in self._blocks:
            raise BlockedInteractionError(f"account {actor} has blocked {other}; unblock first")

    def _mentions(self, text: str) -> List[str]:
        found = []
        for username in _MENTION_RE.findall(text):
            account_id = self._by_username.get(username.lower())
            if account_id is not None and account_id not in found:
                found.append(account_id)
        return found

    def _toot_payload(self, text: str) -> Dict[str, Any]:
        return {
            "text": text,
            "created_at": self.episode_time().isoformat(),
            "mentions": self._mentions(text),
        }

    # ---- accounts ----

    def register_account(self, username: str, display_name: str, bio: str = "") -> str:
        username = username.lower()
        with self._lock:
            if username in self._by_username:
                return self._by_username[username]
            bio = bio[:MAX_BIO_CHARS]
            event = self._emit(EventKind.REGISTER, "", {
                "username": username, "display_name": display_name, "bio": bio,
            })
            return str(event.seq + 1)

    def lookup(self, username: str) -> str:
        with self._lock:
            account_id = self._by_username.get(username.lstrip("@").lower())
            if account_id is None:
                raise UnknownTargetError(f"unknown username: {username}")
            return account_id

    def list_accounts(self) -> List[Account]:
        with self._lock:
            return list(self._accounts.values())

    def account(self, account_id: str) -> Account:
        with self._lock:
            return self._require_account(account_id)

    def account_for_token(self, token: str) -> Optional[str]:
        with self._lock:
            for account in self._accounts.values():
                if account.token == token:
                    return account.id
            return None

    # ---- statuses ----

    def post_toot(self, actor: str, text: str) -> Toot:
        check_toot_text(text)
        with self._lock:
            self._require_account(actor)
            event = self._emit(EventKind.TOOT, actor, self._toot_payload(text))
            return self._toots[str(event.seq + 1)]

    def reply(self, actor: str, parent: str, text: str) -> Toot:
        check_toot_text(text)
        with self._lock:
            self._require_account(actor)
            parent_toot = self._require_toot(parent)
            self._check_not_blocked(actor, parent_toot.author)
            payload = self._toot_payload(text)
            payload["in_reply_to"] = parent
            event = self._emit(EventKind.REPLY, actor, payload)
            return self._toots[str(event.seq + 1)]

    def boost(self, actor: str, toot: str) -> Toot:
        with self._lock:
            self._require_account(actor)
            original = self._require_toot(toot)
            if original.boost_of is not None:
                original = self._require_toot(original.boost_of)
            self._check_not_blocked(actor, original.author)
            existing = self._boosts.get((actor, original.id))
            if existing is not None:
                return self._toots[existing]
            event = self._emit(EventKind.BOOST, actor, {
                "boost_of": original.id,
                "created_at": self.episode_time().isoformat(),
            })
            return self._toots[str(event.seq + 1)]

    def favorite(self, actor: str, toot: str) -> None:
        with self._lock:
            self._require_account(actor)
            target = self._require_toot(toot)
            self._check_not_blocked(actor, target.author)
            if (actor, toot) in self._favorites:
                return
            self._emit(EventKind.FAVORITE, actor, {"toot": toot})

    def get_toot(self, toot_id: str) -> Toot:
        with self._lock:
            return self._require_toot(toot_id)

    def favorites_of(self, toot_id: str) -> int:
        with self._lock:
            return sum(1 for _, t in self._favorites if t == toot_id)

    # ---- relationships ----

    def follow(self, actor: str, target: str) -> None:
        if actor == target:
            raise PlatformError("cannot follow yourself")
        with self._lock:
            self._require_account(actor)
            self._require_account(target)
            self._check_not_blocked(actor, target)
            if self._graph.has(actor, target):
                return
            self._emit(EventKind.FOLLOW, actor, {"target": target})

    def unfollow(self, actor: str, target: str) -> None:
        with self._lock:
            self._require_account(actor)
            self._require_account(target)
            if not self._graph.has(actor, target):
                return
            self._emit(EventKind.UNFOLLOW, actor, {"target": target})

    def block(self, actor: str, target: str) -> None:
        if actor == target:
            raise PlatformError("cannot block yourself")
        with self._lock:
            self._require_account(actor)
            self._require_account(target)
            if (actor, target) in self._blocks:
                return
            self._emit(EventKind.BLOCK, actor, {"target": target})

    def unblock(self, actor: str, target: str) -> None:
        with self._lock:
            self._require_account(actor)
            self._require_account(target)
            if (actor, target) not in self._blocks:
                return
            self._emit(EventKind.UNBLOCK, actor, {"target": target})

    def update_profile(self, actor: str, bio: str, display_name: Optional[str] = None) -> None:
        if len(bio) > MAX_BIO_CHARS:
            raise OversizeTootError(f"bio has {len(bio)} characters, limit is {MAX_BIO_CHARS}")
        with self._lock:
            self._require_account(actor)
            payload = {"bio": bio}
            if display_name:
                payload["display_name"] = display_name
            self._emit(EventKind.PROFILE_UPDATE, actor, payload)

    def following(self, actor: str) -> Set[str]:
        with self._lock:
            return self._graph.following(actor)

    def is_blocking(self, actor: str, target: str) -> bool:
        with self._lock:
            return (actor, target) in self._blocks

    def follow_graph(self) -> FollowGraph:
        with self._lock:
            return FollowGraph(edges=set(self._graph.edges))

    # ---- timelines ----

    def _visible_to(self, actor: str, toot: Toot) -> bool:
        if self._blocked_between(actor, toot.author):
            return False
        if toot.boost_of is not None:
            original = self._toots[toot.boost_of]
            if self._blocked_between(actor, original.author):
                return False
        return True

    def get_home_timeline(self, actor: str, limit: int = 20) -> List[Toot]:
        """Toots and boosts by followed accounts, newest first, minus blocked parties."""
        with self._lock:
            self._require_account(actor)
            followed = self._graph.following(actor)
            items = [
                t for t in self._toots.values()
                if t.author in followed and self._visible_to(actor, t)
            ]
        items.sort(key=lambda t: (t.created_at, int(t.id)), reverse=True)
        return items[:limit]

    def get_account_timeline(self, actor: str, target: str, limit: int = 20) -> List[Toot]:
        """Toots authored by target as seen by actor (empty if either blocks the other)."""
        with self._lock:
            self._require_account(target)
            if self._blocked_between(actor, target):
                return []
            items = [t for t in self._toots.values() if t.author == target]
        items.sort(key=lambda t: (t.created_at, int(t.id)), reverse=True)
        return items[:limit]

    def events(self) -> List[PlatformEvent]:
        with self._lock:
            return list(self._events)

    def state_fingerprint(self) -> Dict[str, Any]:
        """Comparable dump of the full platform state."""
        with self._lock:
            return {
                "accounts": sorted(
                    (a.id, a.username, a.display_name, a.bio) for a in self._accounts.values()
                ),
                "toots": [t.model_dump(mode="json") for t in self._toots.values()],
                "follows": sorted(self._graph.edges),
                "blocks": sorted(self._blocks),
                "favorites": sorted(self._favorites),
            }


# ========================================
# Event log persistence and replay
# ========================================

def event_to_line(event: PlatformEvent) -> str:
    return json.dumps(event.model_dump(mode="json"), separators=(",", ":"), ensure_ascii=False)


def write_event_log(events: Iterable[PlatformEvent], path) -> None:
    """One JSON object per line: seq, episode, actor, kind, payload."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for event in events:
            f.write(event_to_line(event) + "\n")


def read_event_log(path, limit: Optional[int] = None) -> List[PlatformEvent]:
    events = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if limit is not None and len(events) >= limit:
                break
            if line.strip():
                events.append(PlatformEvent.model_validate_json(line))
    return events


def replay_events(
    events: Iterable[PlatformEvent],
    start_time: datetime,
    episode_minutes: int = 30,
) -> PlatformEmulator:
    """Fold an event log into a fresh emulator."""
    emulator = PlatformEmulator(start_time, episode_minutes)
    last_episode = SETUP_EPISODE
    for event in events:
        emulator._apply(event)
        last_episode = event.episode
    emulator.set_episode(last_episode)
    return emulator


# ========================================
# Follow graph initialisation
# ========================================

def init_follow_graph(
    accounts: Sequence[str],
    candidates: Sequence[str],
    p1: float,
    p2: float,
    rng: np.random.Generator,
    p2_mode: str = "per_direction",
) -> FollowGraph:
    """
    Sample the initial followership network.

    - Every account follows each candidate (except itself).
    - For each unordered non-candidate pair {i, j}: with probability p1 add both
      edges; otherwise add i->j and j->i with probability p2 each (per_direction)
      or one edge in a fair-coin direction with probability p2 (per_pair).
    - No self-edges.
    """
    if len(candidates) != 2 or not set(candidates) <= set(accounts):
        raise ValueError("need exactly two candidates drawn from accounts")
    if not (0.0 <= p1 <= 1.0 and 0.0 <= p2 <= 1.0):
        raise ValueError(f"p1, p2 must be probabilities, got {p1}, {p2}")

    graph = FollowGraph()
    for account in accounts:
        for candidate in candidates:
            if account != candidate:
                graph.add(account, candidate)

    others = [a for a in accounts if a not in candidates]
    for x in range(len(others)):
        for y in range(x + 1, len(others)):
            i, j = others[x], others[y]
            if rng.random() < p1:
                graph.add(i, j)
                graph.add(j, i)
            elif p2_mode == "per_pair":
                if rng.random() < p2:
                    if rng.random() < 0.5:
                        graph.add(i, j)
                    else:
                        graph.add(j, i)
            else:
                if rng.random() < p2:
                    graph.add(i, j)
                if rng.random() < p2:
                    graph.add(j, i)
    return graph


def apply_follow_graph(platform: PlatformClient, graph: FollowGraph, order: Sequence[str]) -> None:
    """Issue follow operations for every edge, ordered by the given account order."""
    rank = {a: i for i, a in enumerate(order)}
    for src, dst in sorted(graph.edges, key=lambda e: (rank[e[0]], rank[e[1]])):
        platform.follow(src, dst)


def graph_pair_stats(graph: FollowGraph, non_candidates: Sequence[str]) -> Dict[str, float]:
    """Reciprocal / one-way / unconnected pair fractions among non-candidates."""
    reciprocal = one_way = 0
    pairs = 0
    for x in range(len(non_candidates)):
        for y in range(x + 1, len(non_candidates)):
            i, j = non_candidates[x], non_candidates[y]
            forward, backward = graph.has(i, j), graph.has(j, i)
            pairs += 1
            if forward and backward:
                reciprocal += 1
            elif forward or backward:
                one_way += 1
    directed = sum(1 for s, d in graph.edges if s in non_candidates and d in non_candidates)
    return {
        "pairs": pairs,
        "reciprocal_fraction": reciprocal / pairs if pairs else 0.0,
        "one_way_fraction": one_way / pairs if pairs else 0.0,
        "directed_edges": directed,
    }


def expected_pair_frequencies(p1: float, p2: float, p2_mode: str = "per_direction") -> Dict[str, float]:
    """Analytic pair-type probabilities of init_follow_graph for one non-candidate pair."""
    if p2_mode == "per_pair":
        reciprocal = p1
        one_way = (1 - p1) * p2
        directed = 2 * p1 + (1 - p1) * p2
    else:
        reciprocal = p1 + (1 - p1) * p2 ** 2
        one_way = (1 - p1) * 2 * p2 * (1 - p2)
        directed = 2 * p1 + (1 - p1) * 2 * p2
    return {"reciprocal": reciprocal, "one_way": one_way, "directed_per_pair": directed}


# ========================================
# Provisioning and introductions
# ========================================

def profile_bio(spec) -> str:
    """Bio text summarising an agent's public context."""
    parts = [spec.goal]
    if getattr(spec, "policy_proposal", None):
        parts.append(f"Running for mayor of Storhampton: {spec.policy_proposal}")
    parts += list(spec.extra_context)
    bio = " | ".join(parts)
    return bio[:MAX_BIO_CHARS]


def provision_accounts(platform: PlatformClient, agent_specs: Sequence) -> Dict[str, str]:
    """
    Bind each agent to one account, setting display name and bio.

    Idempotent: provisioning the same specs again returns the same binding.

    Raises:
        InsufficientAccountsError: A real server ran out of blank accounts
    """
    binding: Dict[str, str] = {}
    for spec in agent_specs:
        binding[spec.name] = platform.register_account(spec.username, spec.name, profile_bio(spec))
    logger.info(f"Provisioned {len(binding)} accounts")
    return binding


def post_introductions(agents: Sequence, llm, platform: PlatformClient, usage_text: str = "") -> List[Toot]:
    """
    Each agent posts one introductory toot before episode 0.

    Agents need .name, .account and .persona (text); oversize output is
    truncated to the toot limit.
    """
    platform.set_episode(SETUP_EPISODE)
    toots = []
    for agent in agents:
        text = llm.complete(CompletionRequest(
            prompt_kind=PromptKind.INTRODUCTION,
            agent_name=agent.name,
            prompt_text=render_prompt(
                "introduction", persona=agent.persona, usage=usage_text,
                name=agent.name, max_chars=MAX_TOOT_CHARS,
            ),
            max_chars=MAX_TOOT_CHARS,
            phase="introductions",
        )).strip() or f"Hello Storhampton, I'm {agent.name}."
        toots.append(platform.post_toot(agent.account, text))
    logger.info(f"Posted {len(toots)} introductions")
    return toots
