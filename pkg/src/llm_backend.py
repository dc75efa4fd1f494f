"""
LLM Backends

Uniform completion interface used by every agent component:

- ScriptedBackend: deterministic rule-driven responses for tests and demos
- RemoteBackend: generic chat-completion HTTP JSON API (httpx) with retry,
  exponential backoff and a requests-per-minute ceiling

Both record an append-only transcript of (request, response) pairs.

Trade-off:
- Scripted call counters are kept per (rule, agent) rather than per rule, so
  agents deciding concurrently cannot reorder each other's scripted answers.
"""

import fnmatch
import hashlib
import json
import logging
import os
import re
import threading
import time
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Deque, Dict, List, Optional, Tuple

import httpx
import yaml

from src.scenario import LLMSettings

logger = logging.getLogger(__name__)

DEFAULT_MAX_CHARS = 4000
_FEED_ID_RE = re.compile(r"\[id=([^\]\s]+)\]")


class PromptKind(str, Enum):
    ANECDOTE = "anecdote"
    BACKSTORY = "backstory"
    INTRODUCTION = "introduction"
    OPINION = "opinion"
    CURRENT_OPINION = "current_opinion"
    PERCEPTION_PLAN = "perception_plan"
    MALICIOUS_PLAN = "malicious_plan"
    APP_ACTION = "app_action"
    TOOT_CONTENT = "toot_content"
    VOTE_POLL = "vote_poll"
    FAVORABILITY_POLL = "favorability_poll"
    CUSTOM_POLL = "custom_poll"


# ========================================
# Errors
# ========================================

class LLMError(RuntimeError):
    """Base exception for completion backends."""

    def __init__(self, message: str, status_code: Optional[int] = None):
        self.status_code = status_code
        super().__init__(message)


class LLMRetryExhaustedError(LLMError):
    """Transient failures persisted past the retry cap."""


class NoMatchingRuleError(LLMError):
    """No scripted rule matches a request (configuration error)."""


class ScriptedRulesError(LLMError):
    """The scripted rules file is malformed or incomplete."""


# ========================================
# Requests and transcript
# ========================================

@dataclass(frozen=True)
class CompletionRequest:
    """One completion call."""
    prompt_kind: PromptKind
    agent_name: str
    prompt_text: str
    max_chars: int = DEFAULT_MAX_CHARS
    phase: str = ""  # barrier-separated stage label, e.g. "e12/decide"

    def __post_init__(self):
        if not self.prompt_text or not self.prompt_text.strip():
            raise ValueError("prompt_text cannot be empty or whitespace-only")
        if self.max_chars < 1:
            raise ValueError(f"max_chars must be >= 1, got {self.max_chars}")
        object.__setattr__(self, "prompt_kind", PromptKind(self.prompt_kind))


@dataclass
class TranscriptEntry:
    seq: int  # issue order
    phase: str
    phase_ordinal: int
    agent_name: str
    agent_seq: int
    prompt_kind: str
    prompt_text: str
    response: str

    def to_dict(self) -> dict:
        return asdict(self)


# ========================================
# Base backend
# ========================================

class LLMBackend(ABC):
    """
    Shared bookkeeping: validation, truncation, transcript, metrics.

    Thread-safe: complete() may be called from many workers.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self._lock = threading.Lock()
        self._transcript: List[TranscriptEntry] = []
        self._next_seq = 0
        self._agent_seq: Dict[str, int] = {}
        self._phase_ordinals: Dict[str, int] = {}

        # Metrics
        self._total_requests = 0
        self._total_chars = 0
        self._total_time = 0.0

    def complete(self, request: CompletionRequest) -> str:
        """Return the response text, truncated to request.max_chars."""
        with self._lock:
            seq = self._next_seq
            self._next_seq += 1
            agent_seq = self._agent_seq.get(request.agent_name, 0)
            self._agent_seq[request.agent_name] = agent_seq + 1
            phase_ordinal = self._phase_ordinals.setdefault(
                request.phase, len(self._phase_ordinals)
            )

        start = time.time()
        text = self._complete(request)[: request.max_chars]
        elapsed = time.time() - start

        with self._lock:
            self._total_requests += 1
            self._total_chars += len(text)
            self._total_time += elapsed
            if self.record:
                self._transcript.append(TranscriptEntry(
                    seq=seq, phase=request.phase, phase_ordinal=phase_ordinal,
                    agent_name=request.agent_name, agent_seq=agent_seq,
                    prompt_kind=request.prompt_kind.value,
                    prompt_text=request.prompt_text, response=text,
                ))
        logger.debug(f"{request.prompt_kind.value} for {request.agent_name}: {text[:60]!r}")
        return text

    @abstractmethod
    def _complete(self, request: CompletionRequest) -> str:
        ...

    @abstractmethod
    def backend_identity(self) -> str:
        ...

    def transcript(self) -> List[Tuple[CompletionRequest, str]]:
        """All recorded calls in the order they returned."""
        with self._lock:
            entries = list(self._transcript)
        return [
            (CompletionRequest(
                prompt_kind=PromptKind(e.prompt_kind), agent_name=e.agent_name,
                prompt_text=e.prompt_text, phase=e.phase,
            ), e.response)
            for e in entries
        ]

    def canonical_transcript(self) -> List[TranscriptEntry]:
        """Transcript ordered independently of worker interleaving."""
        with self._lock:
            entries = list(self._transcript)
        return sorted(entries, key=lambda e: (e.phase_ordinal, e.agent_name, e.agent_seq))

    def state_dict(self) -> Dict[str, Any]:
        """Checkpointable state; the transcript is stored in canonical order and renumbered."""
        canonical = self.canonical_transcript()
        with self._lock:
            return {
                "next_seq": self._next_seq,
                "agent_seq": dict(sorted(self._agent_seq.items())),
                "phase_ordinals": dict(self._phase_ordinals),
                "transcript": [dict(e.to_dict(), seq=i) for i, e in enumerate(canonical)],
            }

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        with self._lock:
            self._next_seq = state["next_seq"]
            self._agent_seq = dict(state["agent_seq"])
            self._phase_ordinals = dict(state["phase_ordinals"])
            self._transcript = [TranscriptEntry(**e) for e in state["transcript"]]

    def get_metrics(self) -> Dict[str, Any]:
        with self._lock:
            return {
                "total_requests": self._total_requests,
                "total_chars_generated": self._total_chars,
                "total_time_seconds": self._total_time,
                "backend": self.backend_identity(),
            }


# ========================================
# Scripted backend
# ========================================

@dataclass
class ScriptedRule:
    """Match on kind, optional agent-name glob and optional prompt substring."""
    kind: PromptKind
    responses: List[str]
    agent: Optional[str] = None
    contains: Optional[str] = None

    def __post_init__(self):
        self.kind = PromptKind(self.kind)
        if not self.responses:
            raise ScriptedRulesError(f"rule for {self.kind.value} has no responses")

    @property
    def is_fallback(self) -> bool:
        return self.agent is None and self.contains is None

    def matches(self, request: CompletionRequest) -> bool:
        if request.prompt_kind != self.kind:
            return False
        if self.agent is not None and not fnmatch.fnmatchcase(request.agent_name, self.agent):
            return False
        if self.contains is not None and self.contains not in request.prompt_text:
            return False
        return True


@dataclass
class ScriptedRules:
    """Ordered rules; the first match wins."""
    rules: List[ScriptedRule] = field(default_factory=list)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ScriptedRules":
        if not isinstance(data, dict) or not isinstance(data.get("rules"), list):
            raise ScriptedRulesError("scripted rules document needs a top-level 'rules' list")
        try:
            rules = [
                ScriptedRule(
                    kind=r["kind"], responses=[str(x) for x in r["responses"]],
                    agent=r.get("agent"), contains=r.get("contains"),
                )
                for r in data["rules"]
            ]
        except (KeyError, TypeError, ValueError) as e:
            raise ScriptedRulesError(f"malformed scripted rule: {e}") from e
        return cls(rules=rules)

    def missing_fallbacks(self) -> List[str]:
        covered = {r.kind for r in self.rules if r.is_fallback}
        return [k.value for k in PromptKind if k not in covered]

    def validate_fallbacks(self) -> None:
        missing = self.missing_fallbacks()
        if missing:
            raise ScriptedRulesError(f"no fallback rule for prompt kinds: {missing}")

    def digest(self) -> str:
        canonical = json.dumps([asdict(r) for r in self.rules], sort_keys=True, default=str)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_scripted_rules(path, require_fallbacks: bool = True) -> ScriptedRules:
    """Load rules from YAML; by default every prompt kind must have a fallback."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as e:
        raise ScriptedRulesError(f"cannot load scripted rules {path}: {e}") from e
    rules = ScriptedRules.from_dict(data)
    if require_fallbacks:
        rules.validate_fallbacks()
    logger.info(f"Loaded {len(rules.rules)} scripted rules from {Path(path).name}")
    return rules


class ScriptedBackend(LLMBackend):
    """
    Deterministic stand-in for an LLM.

    Response = rule.responses[n % len(responses)] where n counts previous hits of
    the same rule by the same agent. Placeholders: {agent_name}, {feed_id}.
    """

    def __init__(self, rules: ScriptedRules, record: bool = True):
        super().__init__(record=record)
        self.rules = rules
        self._counters: Dict[str, int] = {}

    def _complete(self, request: CompletionRequest) -> str:
        for index, rule in enumerate(self.rules.rules):
            if rule.matches(request):
                break
        else:
            raise NoMatchingRuleError(
                f"no scripted rule for kind={request.prompt_kind.value} "
                f"agent={request.agent_name!r}"
            )
        key = f"{index}|{request.agent_name}"
        with self._lock:
            n = self._counters.get(key, 0)
            self._counters[key] = n + 1
        return self._substitute(rule.responses[n % len(rule.responses)], request)

    @staticmethod
    def _substitute(text: str, request: CompletionRequest) -> str:
        text = text.replace("{agent_name}", request.agent_name)
        if "{feed_id}" in text:
            match = _FEED_ID_RE.search(request.prompt_text)
            if match is None:
                return "do_nothing"
            text = text.replace("{feed_id}", match.group(1))
        return text

    def backend_identity(self) -> str:
        return f"scripted:{self.rules.digest()[:16]}"

    def state_dict(self) -> Dict[str, Any]:
        state = super().state_dict()
        with self._lock:
            state["counters"] = dict(sorted(self._counters.items()))
        return state

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        super().load_state_dict(state)
        with self._lock:
            self._counters = dict(state.get("counters", {}))


# ========================================
# Remote backend
# ========================================

class SlidingWindowRateLimiter:
    """At most max_requests acquisitions in any sliding window of window seconds."""

    def __init__(
        self,
        max_requests: int,
        window: float = 60.0,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if max_requests < 1:
            raise ValueError(f"max_requests must be >= 1, got {max_requests}")
        self.max_requests = max_requests
        self.window = window
        self._clock = clock
        self._sleep = sleep
        self._stamps: Deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                while self._stamps and now - self._stamps[0] >= self.window:
                    self._stamps.popleft()
                if len(self._stamps) < self.max_requests:
                    self._stamps.append(now)
                    return
                wait = self.window - (now - self._stamps[0])
            logger.debug(f"Rate limit reached, waiting {wait:.2f}s")
            self._sleep(max(wait, 0.0))


class RemoteBackend(LLMBackend):
    """
    Chat-completion client (POST {endpoint}/chat/completions).

    Retries on 429, 5xx and transport errors with exponential backoff
    (base * 2**attempt, capped); other 4xx fail immediately.
    """

    def __init__(
        self,
        settings: LLMSettings,
        api_key: Optional[str] = None,
        client: Optional[httpx.Client] = None,
        sleep: Callable[[float], None] = time.sleep,
        clock: Callable[[], float] = time.monotonic,
        record: bool = True,
    ):
        super().__init__(record=record)
        self.settings = settings
        api_key = api_key or os.getenv(settings.api_key_env)
        if not api_key:
            raise LLMError(f"missing credential: set {settings.api_key_env}")
        self._client = client or httpx.Client(
            base_url=settings.endpoint,
            timeout=httpx.Timeout(settings.timeout_seconds, connect=10.0),
        )
        self._headers = {"Authorization": f"Bearer {api_key}"}
        self._sleep = sleep
        self._limiter = SlidingWindowRateLimiter(
            settings.requests_per_minute, 60.0, clock=clock, sleep=sleep,
        )
        self.retries = 0

    def backend_identity(self) -> str:
        return f"remote:{self.settings.model}"

    def _backoff(self, attempt: int) -> float:
        return min(
            self.settings.backoff_cap_seconds,
            self.settings.backoff_base_seconds * (2 ** attempt),
        )

    def _complete(self, request: CompletionRequest) -> str:
        body = {
            "model": self.settings.model,
            "messages": [{"role": "user", "content": request.prompt_text}],
            "temperature": self.settings.temperature,
            "max_tokens": self.settings.max_tokens,
        }
        max_retries = self.settings.max_retries
        last_exc: Optional[LLMError] = None

        for attempt in range(max_retries + 1):
            self._limiter.acquire()
            try:
                response = self._client.post(
                    "/chat/completions", json=body, headers=self._headers,
                )
                if response.status_code == 429 or response.status_code >= 500:
                    last_exc = LLMError(
                        f"transient error {response.status_code}: {response.text[:200]}",
                        status_code=response.status_code,
                    )
                elif response.status_code >= 400:
                    raise LLMError(
                        f"API error {response.status_code}: {response.text[:500]}",
                        status_code=response.status_code,
                    )
                else:
                    return self._extract_text(response)
            except httpx.HTTPError as e:
                last_exc = LLMError(f"transport error: {e}")

            if attempt < max_retries:
                delay = self._backoff(attempt)
                with self._lock:
                    self.retries += 1
                logger.warning(
                    f"{last_exc} on attempt {attempt + 1}/{max_retries + 1} "
                    f"({request.prompt_kind.value}, {request.agent_name}); retrying in {delay:.1f}s"
                )
                self._sleep(delay)

        raise LLMRetryExhaustedError(
            f"gave up after {max_retries + 1} attempts: {last_exc}",
            status_code=last_exc.status_code if last_exc else None,
        )

    @staticmethod
    def _extract_text(response: httpx.Response) -> str:
        try:
            data = response.json()
            return data["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise LLMError(f"unexpected completion payload: {e}") from e

    def get_metrics(self) -> Dict[str, Any]:
        metrics = super().get_metrics()
        metrics["retries"] = self.retries
        return metrics

    def close(self) -> None:
        self._client.close()


def build_backend(
    kind: str,
    rules_path=None,
    settings: Optional[LLMSettings] = None,
) -> LLMBackend:
    """Create a backend from CLI-style arguments."""
    if kind == "scripted":
        if rules_path is None:
            raise ScriptedRulesError("scripted backend requires a rules file")
        return ScriptedBackend(load_scripted_rules(rules_path))
    if kind == "remote":
        return RemoteBackend(settings or LLMSettings())
    raise ValueError(f"unknown backend kind: {kind}")
