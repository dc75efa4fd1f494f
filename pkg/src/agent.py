"""
Agent Runtime

Per-agent cognition: memory retrieval, opinion and plan components, and the
app session (read the feed, choose actions, act).

An app session is two halves:
1. decide_session: perceive the feed and pick actions. Only touches the
   agent's own state and reads the platform, so sessions of different agents
   may run concurrently.
2. apply_session: execute the actions against the platform and remember the
   outcomes. The engine calls it serially in agent order.

Action grammar (one action per line):

    post: <text>            reply: <toot id> <text>     boost: <toot id>
    favorite: <toot id>     follow: @<username>         unfollow: @<username>
    block: @<username>      unblock: @<username>        update_profile: <bio>
    do_nothing
"""

import logging
import re
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np

from src.llm_backend import CompletionRequest, PromptKind
from src.memory import MemoryRecord, MemoryStore
from src.persona import TraitSet, persona_context
from src.prompts import render_prompt
from src.scenario import AgentSpec, Role, RuntimeParams
from src.social_platform import (
    MAX_TOOT_CHARS,
    OversizeTootError,
    PlatformClient,
    PlatformError,
    Toot,
)

logger = logging.getLogger(__name__)

ACTION_MAX_CHARS = 4000
MAX_SUGGESTIONS = 3
RETRY_SUFFIX = (
    "Your previous answer could not be understood. Answer again using exactly "
    "the grammar above, one action per line."
)


class AgentError(ValueError):
    """Base class for agent runtime errors."""


class WrongRoleError(AgentError):
    """A role-specific component was invoked for the wrong role."""


# ========================================
# Actions
# ========================================

class ActionKind(str, Enum):
    POST = "post"
    REPLY = "reply"
    BOOST = "boost"
    FAVORITE = "favorite"
    FOLLOW = "follow"
    UNFOLLOW = "unfollow"
    BLOCK = "block"
    UNBLOCK = "unblock"
    UPDATE_PROFILE = "update_profile"
    DO_NOTHING = "do_nothing"


CONTENT_KINDS = frozenset({ActionKind.POST, ActionKind.REPLY, ActionKind.UPDATE_PROFILE})
TOOT_TARGET_KINDS = frozenset({ActionKind.REPLY, ActionKind.BOOST, ActionKind.FAVORITE})
ACCOUNT_TARGET_KINDS = frozenset({
    ActionKind.FOLLOW, ActionKind.UNFOLLOW, ActionKind.BLOCK, ActionKind.UNBLOCK,
})

ACTION_ALIASES: Dict[str, ActionKind] = {k.value: k for k in ActionKind}
ACTION_ALIASES.update({
    "toot": ActionKind.POST,
    "reblog": ActionKind.BOOST,
    "like": ActionKind.FAVORITE,
    "favourite": ActionKind.FAVORITE,
    "profile": ActionKind.UPDATE_PROFILE,
    "nothing": ActionKind.DO_NOTHING,
    "none": ActionKind.DO_NOTHING,
    "skip": ActionKind.DO_NOTHING,
})

_LINE_RE = re.compile(r"^([A-Za-z_ ]+?)\s*(?::\s*(.*))?$", re.DOTALL)
_TOOT_ID_RE = re.compile(r"^\[?(?:id=|#)?([A-Za-z0-9]+)\]?[,.:]?$")


@dataclass(frozen=True)
class AppAction:
    """One platform action. target is a toot id or a username (no @)."""
    kind: ActionKind
    target: Optional[str] = None
    content: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ActionKind(self.kind))
        has_content = bool(self.content and self.content.strip())
        if has_content != (self.kind in CONTENT_KINDS):
            raise AgentError(f"{self.kind.value}: content present iff post/reply/update_profile")
        needs_target = self.kind in TOOT_TARGET_KINDS or self.kind in ACCOUNT_TARGET_KINDS
        if bool(self.target) != needs_target:
            raise AgentError(f"{self.kind.value}: target required iff it acts on a toot or account")

    def render(self) -> str:
        if self.kind == ActionKind.DO_NOTHING:
            return "do_nothing"
        if self.kind in ACCOUNT_TARGET_KINDS:
            return f"{self.kind.value}: @{self.target}"
        parts = [p for p in (self.target, self.content) if p]
        return f"{self.kind.value}: {' '.join(parts)}"

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "target": self.target, "content": self.content}


DO_NOTHING = AppAction(ActionKind.DO_NOTHING)


def _toot_id(token: str) -> Optional[str]:
    match = _TOOT_ID_RE.match(token.strip())
    return match.group(1) if match else None


def parse_actions(
    text: str,
    feed_ids: Iterable[str],
    known_accounts: Iterable[str],
    max_actions: int = 3,
    self_username: Optional[str] = None,
    compose: Optional[Callable[[], str]] = None,
) -> List[AppAction]:
    """
    Parse a response into actions. Total: never raises on any text.

    Lines that do not fit the grammar, or target toots/accounts outside the
    rendered feed and known accounts, are dropped. do_nothing is dropped when
    other actions survive. A bare "post" line is filled by compose() if given.

    Returns:
        Up to max_actions actions; empty when nothing parsed
    """
    feed_ids = set(feed_ids)
    known = {a.lower() for a in known_accounts}
    if self_username:
        known.discard(self_username.lower())

    actions: List[AppAction] = []
    for raw in (text or "").splitlines():
        line = raw.strip().lstrip("-*•>").strip().rstrip(".")
        match = _LINE_RE.match(line) if line else None
        if match is None:
            continue
        verb = "_".join(match.group(1).lower().split())
        if verb == "donothing":
            verb = "do_nothing"
        kind = ACTION_ALIASES.get(verb)
        if kind is None:
            continue
        arg = (match.group(2) or "").strip()

        action = None
        if kind == ActionKind.DO_NOTHING:
            action = DO_NOTHING
        elif kind == ActionKind.POST:
            content = arg.strip().strip('"').strip()
            if not content and compose is not None:
                content = compose().strip()
            if content:
                action = AppAction(kind, content=content)
        elif kind == ActionKind.UPDATE_PROFILE:
            if arg:
                action = AppAction(kind, content=arg)
        elif kind == ActionKind.REPLY:
            head, _, rest = arg.partition(" ")
            toot = _toot_id(head)
            content = rest.strip().strip('"').strip()
            if toot in feed_ids and content:
                action = AppAction(kind, target=toot, content=content)
        elif kind in TOOT_TARGET_KINDS:
            toot = _toot_id(arg.split(" ")[0]) if arg else None
            if toot in feed_ids:
                action = AppAction(kind, target=toot)
        else:
            username = arg.split(" ")[0].lstrip("@").rstrip(",.").lower() if arg else ""
            if username and username in known:
                action = AppAction(kind, target=username)

        if action is not None:
            actions.append(action)

    meaningful = [a for a in actions if a.kind != ActionKind.DO_NOTHING]
    if meaningful:
        return meaningful[:max_actions]
    return [DO_NOTHING] if actions else []


# ========================================
# Agent state
# ========================================

@dataclass
class AgentState:
    """
    Everything one agent owns. Memories are append-only; the account is bound
    exactly once.
    """
    spec: AgentSpec
    traits: TraitSet
    index: int
    memories: MemoryStore = field(default_factory=MemoryStore)
    account: Optional[str] = None
    backstory: str = ""
    # candidate -> (memory count when computed, opinion text)
    cached_opinions: Dict[str, Tuple[int, str]] = field(default_factory=dict)
    plan: Optional[str] = None
    seen_toots: Set[str] = field(default_factory=set)

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def role(self) -> Role:
        return self.spec.role

    @property
    def persona(self) -> str:
        return persona_context(self.spec, self.traits)

    def bind_account(self, account_id: str) -> None:
        if self.account is not None and self.account != account_id:
            raise AgentError(f"{self.name} is already bound to account {self.account}")
        self.account = account_id

    def remember(self, text: str, when: datetime, tag: str = "observation") -> None:
        self.memories.append(MemoryRecord(timestamp=when, text=text, tags=frozenset({tag})))

    def recent_observations(self, n: int) -> List[MemoryRecord]:
        pool = [r for r in self.memories if r.tags & {"observation", "platform"}]
        return pool[-n:]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "index": self.index,
            "traits": self.traits.to_dict(),
            "memories": self.memories.to_list(),
            "account": self.account,
            "backstory": self.backstory,
            "cached_opinions": {c: list(v) for c, v in sorted(self.cached_opinions.items())},
            "plan": self.plan,
            "seen_toots": sorted(self.seen_toots, key=lambda t: (len(t), t)),
        }

    @classmethod
    def from_dict(cls, spec: AgentSpec, data: dict) -> "AgentState":
        if data["name"] != spec.name:
            raise AgentError(f"state for {data['name']!r} cannot restore {spec.name!r}")
        return cls(
            spec=spec,
            traits=TraitSet.from_dict(data["traits"]),
            index=data["index"],
            memories=MemoryStore.from_list(data["memories"]),
            account=data["account"],
            backstory=data["backstory"],
            cached_opinions={c: (v[0], v[1]) for c, v in data["cached_opinions"].items()},
            plan=data["plan"],
            seen_toots=set(data["seen_toots"]),
        )


# ========================================
# Components
# ========================================

def format_memories(records: Sequence[MemoryRecord]) -> str:
    if not records:
        return "(nothing comes to mind)"
    return "\n".join(f"- [{r.timestamp:%Y-%m-%d %H:%M}] {r.text}" for r in records)


def retrieve_memories(
    state: AgentState, query: str, k: int, runtime: Optional[RuntimeParams] = None
) -> List[MemoryRecord]:
    runtime = runtime or RuntimeParams()
    return state.memories.retrieve(
        query, k,
        recency_weight=runtime.recency_weight,
        relevance_weight=runtime.relevance_weight,
        half_life_hours=runtime.recency_half_life_hours,
    )


def _candidate_query(candidate: str) -> str:
    return f"{candidate} mayor election candidate policy proposal campaign"


def opinion_on_candidate(
    state: AgentState,
    candidate: str,
    llm,
    runtime: Optional[RuntimeParams] = None,
    phase: str = "",
) -> str:
    """General opinion of a candidate, recomputed only after new memories arrive."""
    runtime = runtime or RuntimeParams()
    cached = state.cached_opinions.get(candidate)
    if cached is not None and cached[0] == len(state.memories):
        return cached[1]

    memories = retrieve_memories(state, _candidate_query(candidate), runtime.retrieval_k, runtime)
    text = llm.complete(CompletionRequest(
        prompt_kind=PromptKind.OPINION,
        agent_name=state.name,
        prompt_text=render_prompt(
            "opinion", persona=state.persona, name=state.name,
            memories=format_memories(memories), candidate=candidate,
        ),
        phase=phase,
    ))
    state.cached_opinions[candidate] = (len(state.memories), text)
    return text


def current_opinion_on_candidate(
    state: AgentState,
    candidate: str,
    recent_observations: Optional[Sequence[MemoryRecord]],
    llm,
    runtime: Optional[RuntimeParams] = None,
    phase: str = "",
) -> str:
    """Verdict combining the general opinion with what happened recently."""
    runtime = runtime or RuntimeParams()
    opinion = opinion_on_candidate(state, candidate, llm, runtime, phase)
    if recent_observations is None:
        recent_observations = state.recent_observations(runtime.recent_observations)
    return llm.complete(CompletionRequest(
        prompt_kind=PromptKind.CURRENT_OPINION,
        agent_name=state.name,
        prompt_text=render_prompt(
            "current_opinion", persona=state.persona, name=state.name, candidate=candidate,
            opinion=opinion, observations=format_memories(recent_observations),
        ),
        phase=phase,
    ))


def plan_public_perception(
    state: AgentState,
    opponent: str,
    llm,
    now: datetime,
    runtime: Optional[RuntimeParams] = None,
    phase: str = "",
) -> str:
    """A candidate's plan to improve how voters see them; stored as a memory."""
    if state.role != Role.CANDIDATE:
        raise WrongRoleError(f"{state.name} is a {state.role.value}, not a candidate")
    runtime = runtime or RuntimeParams()
    own = retrieve_memories(state, _candidate_query(state.name), runtime.retrieval_k, runtime)
    other = retrieve_memories(state, _candidate_query(opponent), runtime.retrieval_k, runtime)
    plan = llm.complete(CompletionRequest(
        prompt_kind=PromptKind.PERCEPTION_PLAN,
        agent_name=state.name,
        prompt_text=render_prompt(
            "perception_plan", persona=state.persona, name=state.name, opponent=opponent,
            own_memories=format_memories(own), opponent_memories=format_memories(other),
        ),
        phase=phase,
    ))
    state.plan = plan
    state.remember(f"{state.name}'s plan: {plan}", now, tag="plan")
    return plan


def plan_malicious(
    state: AgentState,
    favored: str,
    opponent: str,
    llm,
    now: datetime,
    runtime: Optional[RuntimeParams] = None,
    phase: str = "",
) -> str:
    """The malicious partisan's strategy against the opponent; stored as a memory."""
    if state.role != Role.MALICIOUS:
        raise WrongRoleError(f"{state.name} is a {state.role.value}, not malicious")
    runtime = runtime or RuntimeParams()
    fav = retrieve_memories(state, _candidate_query(favored), runtime.retrieval_k, runtime)
    opp = retrieve_memories(state, _candidate_query(opponent), runtime.retrieval_k, runtime)
    plan = llm.complete(CompletionRequest(
        prompt_kind=PromptKind.MALICIOUS_PLAN,
        agent_name=state.name,
        prompt_text=render_prompt(
            "malicious_plan", persona=state.persona, name=state.name,
            favored=favored, opponent=opponent,
            favored_memories=format_memories(fav), opponent_memories=format_memories(opp),
        ),
        phase=phase,
    ))
    state.plan = plan
    state.remember(f"{state.name}'s plan: {plan}", now, tag="plan")
    return plan


def role_context(
    state: AgentState,
    candidates: Sequence[str],
    llm,
    now: datetime,
    runtime: Optional[RuntimeParams] = None,
    phase: str = "",
) -> str:
    """
    The role-specific context block of the action prompt:

    - candidate: plan to improve public perception
    - malicious: plan to harm the opponent of the first (conservative) candidate
    - voter: current opinion on each candidate
    """
    if state.role == Role.CANDIDATE:
        opponent = next(c for c in candidates if c != state.name)
        plan = plan_public_perception(state, opponent, llm, now, runtime, phase)
        return f"{state.name}'s plan: {plan}"
    if state.role == Role.MALICIOUS:
        favored, opponent = candidates[0], candidates[1]
        plan = plan_malicious(state, favored, opponent, llm, now, runtime, phase)
        return f"{state.name}'s plan: {plan}"
    lines = []
    for candidate in candidates:
        opinion = current_opinion_on_candidate(state, candidate, None, llm, runtime, phase)
        lines.append(f"{state.name}'s current opinion of {candidate}: {opinion}")
    return "\n".join(lines)


# ========================================
# Feed rendering
# ========================================

def _handle(account_id: str, names: Dict[str, Tuple[str, str]]) -> str:
    username, display = names.get(account_id, (account_id, account_id))
    return f"@{username} ({display})"


def render_feed(feed: Sequence[Toot], platform: PlatformClient) -> str:
    """One line per toot: "[id=12] @user (Name): text"; boosts show the original."""
    if not feed:
        return "(your feed is empty)"
    names = {a.id: (a.username, a.display_name) for a in platform.list_accounts()}
    lines = []
    for toot in feed:
        who = _handle(toot.author, names)
        if toot.boost_of is not None:
            original = platform.get_toot(toot.boost_of)
            lines.append(
                f"[id={toot.id}] {who} boosted {_handle(original.author, names)}: {original.text}"
            )
        elif toot.in_reply_to is not None:
            lines.append(f"[id={toot.id}] {who} replying to [id={toot.in_reply_to}]: {toot.text}")
        else:
            lines.append(f"[id={toot.id}] {who}: {toot.text}")
    return "\n".join(lines)


def _observe_feed(state: AgentState, feed: Sequence[Toot], platform: PlatformClient, now: datetime) -> None:
    names = {a.id: (a.username, a.display_name) for a in platform.list_accounts()}
    for toot in reversed(feed):
        if toot.id in state.seen_toots:
            continue
        state.seen_toots.add(toot.id)
        who = names.get(toot.author, (toot.author, toot.author))[1]
        if toot.boost_of is not None:
            original = platform.get_toot(toot.boost_of)
            author = names.get(original.author, (original.author, original.author))[1]
            text = f"{who} boosted {author}'s toot on Storhampton.social: {original.text}"
        elif toot.in_reply_to is not None:
            text = f"{who} replied on Storhampton.social: {toot.text}"
        else:
            text = f"{who} posted on Storhampton.social: {toot.text}"
        state.remember(text, now, tag="platform")


# ========================================
# App session
# ========================================

@dataclass
class SessionDecision:
    """What an agent decided during the concurrent half of a session."""
    agent_name: str
    agent_index: int
    feed_ids: List[str]
    suggestions: List[str]
    response: str
    actions: List[AppAction]
    retried: bool = False


def _suggest_follows(
    state: AgentState, platform: PlatformClient, rng: np.random.Generator
) -> List[str]:
    followed = platform.following(state.account)
    pool = sorted(
        (a for a in platform.list_accounts() if a.id != state.account and a.id not in followed),
        key=lambda a: a.username,
    )
    if not pool:
        return []
    picks = rng.choice(len(pool), size=min(MAX_SUGGESTIONS, len(pool)), replace=False)
    return [pool[int(i)].username for i in sorted(picks)]


def _compose_toot(state: AgentState, context: str, llm, phase: str) -> str:
    return llm.complete(CompletionRequest(
        prompt_kind=PromptKind.TOOT_CONTENT,
        agent_name=state.name,
        prompt_text=render_prompt(
            "toot_content", persona=state.persona, context=context,
            name=state.name, max_chars=MAX_TOOT_CHARS,
        ),
        phase=phase,
    ))


def decide_session(
    state: AgentState,
    platform: PlatformClient,
    llm,
    rng: np.random.Generator,
    candidates: Sequence[str],
    now: datetime,
    runtime: Optional[RuntimeParams] = None,
    phase: str = "",
) -> SessionDecision:
    """
    Perceive the feed and choose actions. Reads the platform, writes only this
    agent's state.

    An unparseable response is retried once, then becomes do_nothing.
    """
    runtime = runtime or RuntimeParams()
    feed = platform.get_home_timeline(state.account, limit=runtime.feed_window)
    _observe_feed(state, feed, platform, now)

    usernames = [a.username for a in platform.list_accounts()]
    self_username = state.spec.username
    suggestions = _suggest_follows(state, platform, rng)
    context = role_context(state, candidates, llm, now, runtime, phase)

    prompt = render_prompt(
        "app_action", persona=state.persona, context=context, name=state.name,
        time=f"{now:%A %d %B %Y, %H:%M}", feed=render_feed(feed, platform),
        suggestions=", ".join(f"@{s}" for s in suggestions) or "(none)",
        max_actions=runtime.max_actions_per_session, max_chars=MAX_TOOT_CHARS,
    )
    feed_ids = [t.id for t in feed]

    def compose() -> str:
        return _compose_toot(state, context, llm, phase)

    def ask(text: str) -> Tuple[str, List[AppAction]]:
        response = llm.complete(CompletionRequest(
            prompt_kind=PromptKind.APP_ACTION, agent_name=state.name,
            prompt_text=text, max_chars=ACTION_MAX_CHARS, phase=phase,
        ))
        return response, parse_actions(
            response, feed_ids, usernames, runtime.max_actions_per_session,
            self_username=self_username, compose=compose,
        )

    response, actions = ask(prompt)
    retried = False
    if not actions:
        retried = True
        logger.warning(f"{state.name}: unparseable action response, retrying once")
        response, actions = ask(f"{prompt}\n\n{RETRY_SUFFIX}")
        if not actions:
            logger.warning(f"{state.name}: still unparseable, doing nothing")
            actions = [DO_NOTHING]

    return SessionDecision(
        agent_name=state.name, agent_index=state.index, feed_ids=feed_ids,
        suggestions=suggestions, response=response, actions=actions, retried=retried,
    )


def _truncate(text: str, limit: int = MAX_TOOT_CHARS) -> str:
    if len(text) <= limit:
        return text
    cut = text[: limit - 1]
    if " " in cut[limit // 2:]:
        cut = cut[: cut.rindex(" ")]
    return cut.rstrip() + "…"


def _execute(state: AgentState, action: AppAction, platform: PlatformClient) -> str:
    kind, me = action.kind, state.account
    if kind == ActionKind.DO_NOTHING:
        return f"{state.name} checked Storhampton.social and did nothing."
    if kind == ActionKind.POST:
        toot = platform.post_toot(me, action.content)
        return f"{state.name} posted on Storhampton.social: {toot.text}"
    if kind == ActionKind.REPLY:
        toot = platform.reply(me, action.target, action.content)
        return f"{state.name} replied to toot {action.target}: {toot.text}"
    if kind == ActionKind.BOOST:
        platform.boost(me, action.target)
        return f"{state.name} boosted toot {action.target}."
    if kind == ActionKind.FAVORITE:
        platform.favorite(me, action.target)
        return f"{state.name} favorited toot {action.target}."
    if kind == ActionKind.UPDATE_PROFILE:
        platform.update_profile(me, action.content)
        return f"{state.name} updated their profile: {action.content}"
    target = platform.lookup(action.target)
    getattr(platform, kind.value)(me, target)
    return f"{state.name} did {kind.value} @{action.target}."


def apply_session(
    state: AgentState,
    decision: SessionDecision,
    platform: PlatformClient,
    now: datetime,
) -> List[AppAction]:
    """
    Execute decided actions in order and remember each outcome.

    Platform errors become observations. An oversize toot is truncated and
    retried once.
    """
    executed = []
    for action in decision.actions:
        try:
            try:
                outcome = _execute(state, action, platform)
            except OversizeTootError:
                logger.warning(f"{state.name}: oversize {action.kind.value}, truncating")
                action = AppAction(action.kind, target=action.target, content=_truncate(action.content))
                outcome = _execute(state, action, platform)
        except PlatformError as e:
            logger.warning(f"{state.name}: {action.kind.value} failed: {e}")
            outcome = f"{state.name} tried to {action.kind.value} on Storhampton.social but it failed: {e}"
        state.remember(outcome, now, tag="observation")
        executed.append(action)
    return executed


def run_app_session(
    state: AgentState,
    platform: PlatformClient,
    llm,
    rng: np.random.Generator,
    candidates: Sequence[str],
    now: datetime,
    runtime: Optional[RuntimeParams] = None,
    phase: str = "",
) -> List[AppAction]:
    """decide_session followed immediately by apply_session."""
    decision = decide_session(state, platform, llm, rng, candidates, now, runtime, phase)
    return apply_session(state, decision, platform, now)
