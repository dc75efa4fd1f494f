"""
Measurement

Longitudinal surveys and per-episode analytics.

- parse_vote / parse_favorability: total parsers, never raise
- poll_vote / poll_favorability / poll_custom: one agent, one question
- survey_agent: every question for one agent at one episode
- aggregate: vote share (exact fractions), mean favorability, activity counts,
  candidate mentions and the follow graph for one episode
"""

import logging
import re
from dataclasses import dataclass, field
from datetime import datetime
from fractions import Fraction
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

from src.agent import format_memories, retrieve_memories
from src.llm_backend import CompletionRequest, LLMError, PromptKind
from src.prompts import render_prompt
from src.scenario import CustomQuestion, RuntimeParams
from src.social_platform import ACTIVITY_KINDS, EventKind, PlatformEvent

logger = logging.getLogger(__name__)

UNDECIDED = "undecided"
FAVORABILITY_RANGE = (1, 10)
SURVEY_QUERY = "mayor election vote candidate opinion Storhampton"

_INT_RE = re.compile(r"(?<!\d)\d+(?!\d)")


# ========================================
# Records
# ========================================

@dataclass
class SurveyRecord:
    """One agent's answers at one episode. None marks a missing answer."""
    episode: int
    agent: str
    vote: str
    favorability: Dict[str, Optional[int]]
    custom: Dict[str, Optional[int]] = field(default_factory=dict)
    vote_failed: bool = False

    def __post_init__(self):
        lo, hi = FAVORABILITY_RANGE
        for candidate, value in self.favorability.items():
            if value is not None and not lo <= value <= hi:
                raise ValueError(f"favorability for {candidate} out of range: {value}")

    def to_dict(self) -> dict:
        return {
            "episode": self.episode,
            "agent": self.agent,
            "vote": self.vote,
            "favorability": dict(self.favorability),
            "custom": dict(self.custom),
            "vote_failed": self.vote_failed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SurveyRecord":
        return cls(**data)


@dataclass
class AnalyticsSnapshot:
    """Dashboard data for one episode."""
    episode: int
    vote_share: Dict[str, float]
    mean_favorability: Dict[str, Optional[float]]
    activity_counts: Dict[str, int]
    candidate_mentions: Dict[str, int]
    edges: List[Tuple[str, str]]
    active_accounts: List[str]
    polled: int

    def to_dict(self) -> dict:
        return {
            "episode": self.episode,
            "vote_share": dict(self.vote_share),
            "mean_favorability": dict(self.mean_favorability),
            "activity_counts": dict(self.activity_counts),
            "candidate_mentions": dict(self.candidate_mentions),
            "edges": [list(e) for e in self.edges],
            "active_accounts": list(self.active_accounts),
            "polled": self.polled,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AnalyticsSnapshot":
        data = dict(data)
        data["edges"] = [tuple(e) for e in data["edges"]]
        return cls(**data)


# ========================================
# Parsers
# ========================================

def _name_pattern(candidate: str) -> re.Pattern:
    parts = [re.escape(p) for p in candidate.split()]
    return re.compile(r"\b(?:" + "|".join(parts) + r")\b", re.IGNORECASE)


def parse_vote(text: str, candidates: Sequence[str]) -> str:
    """
    Whole-word, case-insensitive match on any part of each candidate's name.

    Exactly one candidate matched -> that candidate; otherwise undecided.
    """
    if not candidates:
        raise ValueError("candidates cannot be empty")
    matched = [c for c in candidates if _name_pattern(c).search(text or "")]
    return matched[0] if len(matched) == 1 else UNDECIDED


def parse_favorability(text: str, lo: int = 1, hi: int = 10) -> Optional[int]:
    """First integer token within [lo, hi], or None."""
    for token in _INT_RE.findall(text or ""):
        value = int(token)
        if lo <= value <= hi:
            return value
    return None


def mentions_candidate(text: str, candidate: str) -> bool:
    return bool(_name_pattern(candidate).search(text or ""))


# ========================================
# Polls
# ========================================

def _survey_memories(agent, runtime: RuntimeParams) -> str:
    return format_memories(retrieve_memories(agent, SURVEY_QUERY, runtime.retrieval_k, runtime))


def poll_vote(
    agent,
    candidates: Sequence[str],
    llm,
    runtime: Optional[RuntimeParams] = None,
    phase: str = "",
) -> Tuple[str, bool]:
    """
    Ask the voting-machine question.

    Returns:
        (vote, failed) where failed marks a backend failure recorded as undecided
    """
    runtime = runtime or RuntimeParams()
    prompt = render_prompt(
        "vote_poll", persona=agent.persona, name=agent.name,
        memories=_survey_memories(agent, runtime),
    )
    try:
        text = llm.complete(CompletionRequest(
            prompt_kind=PromptKind.VOTE_POLL, agent_name=agent.name,
            prompt_text=prompt, phase=phase,
        ))
    except LLMError as e:
        logger.warning(f"{agent.name}: vote poll failed, recording undecided: {e}")
        return UNDECIDED, True
    return parse_vote(text, candidates), False


def _poll_scale(agent, kind: PromptKind, prompt: str, lo: int, hi: int, llm, phase: str) -> Optional[int]:
    for attempt in range(2):
        try:
            text = llm.complete(CompletionRequest(
                prompt_kind=kind, agent_name=agent.name, prompt_text=prompt, phase=phase,
            ))
        except LLMError as e:
            logger.warning(f"{agent.name}: {kind.value} failed: {e}")
            return None
        value = parse_favorability(text, lo, hi)
        if value is not None:
            return value
        if attempt == 0:
            logger.warning(f"{agent.name}: no answer in [{lo}, {hi}] from {text[:40]!r}, retrying")
    return None


def poll_favorability(
    agent,
    candidate: str,
    llm,
    runtime: Optional[RuntimeParams] = None,
    phase: str = "",
) -> Optional[int]:
    """1..10 rating of a candidate; one retry, then missing."""
    runtime = runtime or RuntimeParams()
    prompt = render_prompt(
        "favorability_poll", persona=agent.persona, name=agent.name, candidate=candidate,
        memories=_survey_memories(agent, runtime),
    )
    return _poll_scale(agent, PromptKind.FAVORABILITY_POLL, prompt, *FAVORABILITY_RANGE, llm, phase)


def poll_custom(
    agent,
    question: CustomQuestion,
    llm,
    runtime: Optional[RuntimeParams] = None,
    phase: str = "",
) -> Optional[int]:
    runtime = runtime or RuntimeParams()
    prompt = render_prompt(
        "custom_poll", persona=agent.persona, name=agent.name,
        memories=_survey_memories(agent, runtime), question=question.prompt.replace("{name}", agent.name),
        scale_min=question.scale_min, scale_max=question.scale_max,
    )
    return _poll_scale(
        agent, PromptKind.CUSTOM_POLL, prompt, question.scale_min, question.scale_max, llm, phase,
    )


def survey_agent(
    agent,
    episode: int,
    candidates: Sequence[str],
    llm,
    custom_questions: Sequence[CustomQuestion] = (),
    runtime: Optional[RuntimeParams] = None,
    phase: str = "",
    as_memory: bool = False,
    now: Optional[datetime] = None,
) -> SurveyRecord:
    """Vote, favorability per candidate and custom questions for one agent."""
    vote, failed = poll_vote(agent, candidates, llm, runtime, phase)
    favorability = {c: poll_favorability(agent, c, llm, runtime, phase) for c in candidates}
    custom = {q.id: poll_custom(agent, q, llm, runtime, phase) for q in custom_questions}
    record = SurveyRecord(
        episode=episode, agent=agent.name, vote=vote,
        favorability=favorability, custom=custom, vote_failed=failed,
    )
    if as_memory and now is not None:
        ratings = ", ".join(f"{c}: {v if v is not None else 'no answer'}" for c, v in favorability.items())
        agent.remember(
            f"In a poll, {agent.name} answered {vote} for their vote and rated {ratings}.",
            now, tag="survey",
        )
    return record


# ========================================
# Aggregation
# ========================================

def vote_share(records: Sequence[SurveyRecord], candidates: Sequence[str]) -> Dict[str, Fraction]:
    """Exact shares over candidates plus undecided; no records -> all undecided."""
    keys = list(candidates) + [UNDECIDED]
    if not records:
        return {k: Fraction(int(k == UNDECIDED)) for k in keys}
    total = len(records)
    return {k: Fraction(sum(1 for r in records if r.vote == k), total) for k in keys}


def aggregate(
    records: Sequence[SurveyRecord],
    episode: int,
    candidates: Sequence[str],
    events: Iterable[PlatformEvent] = (),
    edges: Iterable[Tuple[str, str]] = (),
    active_accounts: Iterable[str] = (),
    exclude: Set[str] = frozenset(),
) -> AnalyticsSnapshot:
    """
    Summarise one episode.

    Args:
        records: Survey records (only those of this episode are used)
        events: Platform events (only those of this episode are counted)
        exclude: Agent names left out of vote share and mean favorability
    """
    polled = [r for r in records if r.episode == episode and r.agent not in exclude]
    shares = vote_share(polled, candidates)

    means: Dict[str, Optional[float]] = {}
    for c in candidates:
        values = [r.favorability.get(c) for r in polled if r.favorability.get(c) is not None]
        means[c] = sum(values) / len(values) if values else None

    counts = {k.value: 0 for k in ACTIVITY_KINDS}
    mentions = {c: 0 for c in candidates}
    for event in events:
        if event.episode != episode or event.kind == EventKind.REGISTER:
            continue
        counts[event.kind.value] += 1
        if event.kind in (EventKind.TOOT, EventKind.REPLY):
            text = event.payload.get("text", "")
            for c in candidates:
                if mentions_candidate(text, c):
                    mentions[c] += 1

    return AnalyticsSnapshot(
        episode=episode,
        vote_share={k: float(v) for k, v in shares.items()},
        mean_favorability=means,
        activity_counts=counts,
        candidate_mentions=mentions,
        edges=sorted(edges),
        active_accounts=sorted(active_accounts),
        polled=len(polled),
    )
