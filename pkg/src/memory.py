"""
Agent Memory

Append-only, timestamped memory store with deterministic lexical retrieval.

Retrieval score:
    score = recency_weight * recency + relevance_weight * overlap(query, text)

- recency: 0.5 ** (age_hours / half_life_hours), age measured from the newest
  record in the store (simulated time, never wall-clock)
- overlap: cosine similarity of lowercase word-token sets
- ties: newer timestamp first, then later insertion first

The `importance` field is carried for parity with richer retrievers and is
not used by the default scorer.
"""

import math
import re
from dataclasses import dataclass, field
from datetime import datetime
from typing import FrozenSet, Iterable, List, Optional, Tuple

_TOKEN_RE = re.compile(r"[a-z0-9']+")

DEFAULT_RECENCY_WEIGHT = 0.25
DEFAULT_RELEVANCE_WEIGHT = 1.0
DEFAULT_HALF_LIFE_HOURS = 24.0

MEMORY_TAGS = frozenset({"formative", "observation", "platform", "survey", "plan", "opinion"})


def tokenize(text: str) -> FrozenSet[str]:
    return frozenset(_TOKEN_RE.findall(text.lower()))


def token_overlap(a: FrozenSet[str], b: FrozenSet[str]) -> float:
    """Cosine similarity between two token sets."""
    if not a or not b:
        return 0.0
    return len(a & b) / math.sqrt(len(a) * len(b))


@dataclass(frozen=True)
class MemoryRecord:
    """One remembered item."""
    timestamp: datetime
    text: str
    tags: FrozenSet[str] = frozenset({"observation"})
    importance: float = 0.0

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValueError("memory text cannot be empty")
        unknown = set(self.tags) - MEMORY_TAGS
        if unknown:
            raise ValueError(f"unknown memory tags: {sorted(unknown)}")

    def to_dict(self) -> dict:
        return {
            "timestamp": self.timestamp.isoformat(),
            "text": self.text,
            "tags": sorted(self.tags),
            "importance": self.importance,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MemoryRecord":
        return cls(
            timestamp=datetime.fromisoformat(data["timestamp"]),
            text=data["text"],
            tags=frozenset(data["tags"]),
            importance=data.get("importance", 0.0),
        )


@dataclass
class MemoryStore:
    """
    Append-only memory. Records are never removed or edited once added.

    Timestamps must be non-decreasing so the store stays totally ordered.
    """
    _records: List[MemoryRecord] = field(default_factory=list)
    _tokens: List[FrozenSet[str]] = field(default_factory=list)

    def append(self, record: MemoryRecord) -> None:
        if self._records and record.timestamp < self._records[-1].timestamp:
            raise ValueError(
                f"memory timestamp {record.timestamp} precedes the latest "
                f"record {self._records[-1].timestamp}"
            )
        self._records.append(record)
        self._tokens.append(tokenize(record.text))

    def extend(self, records: Iterable[MemoryRecord]) -> None:
        for record in records:
            self.append(record)

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(tuple(self._records))

    @property
    def records(self) -> Tuple[MemoryRecord, ...]:
        return tuple(self._records)

    def latest(self, n: int, tag: Optional[str] = None) -> List[MemoryRecord]:
        """The n most recent records (oldest first), optionally filtered by tag."""
        pool = [r for r in self._records if tag is None or tag in r.tags]
        return pool[-n:] if n > 0 else []

    def retrieve(
        self,
        query: str,
        k: int,
        recency_weight: float = DEFAULT_RECENCY_WEIGHT,
        relevance_weight: float = DEFAULT_RELEVANCE_WEIGHT,
        half_life_hours: float = DEFAULT_HALF_LIFE_HOURS,
    ) -> List[MemoryRecord]:
        """Top-k records for a query (see module docstring for the score)."""
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        if not self._records:
            return []
        scored = score_records(
            self._records, self._tokens, query,
            recency_weight, relevance_weight, half_life_hours,
        )
        # sort key: score desc, timestamp desc, insertion index desc
        order = sorted(
            range(len(self._records)),
            key=lambda i: (-scored[i], -self._records[i].timestamp.timestamp(), -i),
        )
        return [self._records[i] for i in order[:k]]

    def to_list(self) -> List[dict]:
        return [r.to_dict() for r in self._records]

    @classmethod
    def from_list(cls, items: List[dict]) -> "MemoryStore":
        store = cls()
        store.extend(MemoryRecord.from_dict(d) for d in items)
        return store


def score_records(
    records: List[MemoryRecord],
    tokens: List[FrozenSet[str]],
    query: str,
    recency_weight: float,
    relevance_weight: float,
    half_life_hours: float,
) -> List[float]:
    newest = records[-1].timestamp
    query_tokens = tokenize(query)
    scores = []
    for record, toks in zip(records, tokens):
        age_hours = (newest - record.timestamp).total_seconds() / 3600.0
        recency = 0.5 ** (age_hours / half_life_hours)
        scores.append(recency_weight * recency + relevance_weight * token_overlap(query_tokens, toks))
    return scores
