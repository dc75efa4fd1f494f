"""
Episode scheduling

- RngStreams: named, independently seeded numpy Generators derived from one
  root seed. Derivation is a pure function of (root seed, stream name), so
  adding a stream never perturbs another.
- EpisodeSchedule: each agent's base-rate slots, drawn without replacement.
- is_active: scheduled slot OR an independent Bernoulli(stochastic_rate) draw.
  The Bernoulli draw is always consumed so stream positions do not depend on
  the schedule.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, Tuple

import numpy as np

from src.scenario import ScenarioConfig

logger = logging.getLogger(__name__)


def _stream_entropy(root_seed: int, name: str) -> list:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i:i + 4], "big") for i in range(0, 16, 4)]
    return [root_seed & 0xFFFFFFFF, root_seed >> 32] + words


class RngStreams:
    """Lazily created named generators (PCG64) with serialisable state."""

    def __init__(self, root_seed: int):
        if root_seed < 0:
            raise ValueError(f"root_seed must be non-negative, got {root_seed}")
        self.root_seed = root_seed
        self._streams: Dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            seq = np.random.SeedSequence(_stream_entropy(self.root_seed, name))
            self._streams[name] = np.random.Generator(np.random.PCG64(seq))
        return self._streams[name]

    __getitem__ = get

    def state_dict(self) -> Dict[str, Any]:
        return {name: gen.bit_generator.state for name, gen in sorted(self._streams.items())}

    def load_state_dict(self, states: Dict[str, Any]) -> None:
        for name, state in states.items():
            self.get(name).bit_generator.state = state


@dataclass(frozen=True)
class EpisodeSchedule:
    """Per-agent scheduled slots plus the shared stochastic access rate."""
    slots: Dict[str, FrozenSet[int]]
    stochastic_rate: float
    episodes: int

    def to_dict(self) -> dict:
        return {
            "slots": {name: sorted(s) for name, s in self.slots.items()},
            "stochastic_rate": self.stochastic_rate,
            "episodes": self.episodes,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EpisodeSchedule":
        return cls(
            slots={name: frozenset(s) for name, s in data["slots"].items()},
            stochastic_rate=data["stochastic_rate"],
            episodes=data["episodes"],
        )


def build_schedule(config: ScenarioConfig, rng: np.random.Generator) -> EpisodeSchedule:
    """
    Draw base_rate distinct slots per agent from [0, episodes_per_day).

    Raises:
        ValueError: An agent's base rate exceeds the number of episodes
    """
    episodes = config.episodes_per_day
    slots = {}
    for agent in config.agents:
        rate = config.base_rate_for(agent)
        if rate > episodes:
            raise ValueError(
                f"agent {agent.name!r}: base_rate {rate} exceeds {episodes} episodes"
            )
        drawn = rng.choice(episodes, size=rate, replace=False) if rate else []
        slots[agent.name] = frozenset(int(e) for e in drawn)
    return EpisodeSchedule(
        slots=slots,
        stochastic_rate=config.scheduler_params.stochastic_rate,
        episodes=episodes,
    )


def activity_draw(
    schedule: EpisodeSchedule, agent: str, episode: int, rng: np.random.Generator
) -> Tuple[bool, bool]:
    """(scheduled, stochastic) for one agent-episode."""
    if not 0 <= episode < schedule.episodes:
        raise ValueError(f"episode {episode} outside [0, {schedule.episodes})")
    stochastic = bool(rng.random() < schedule.stochastic_rate)
    return episode in schedule.slots[agent], stochastic


def is_active(schedule: EpisodeSchedule, agent: str, episode: int, rng: np.random.Generator) -> bool:
    scheduled, stochastic = activity_draw(schedule, agent, episode, rng)
    return scheduled or stochastic


@dataclass
class ActivityRecord:
    """Session accounting: sessions = scheduled hits + stochastic-only hits."""
    sessions: Dict[str, int] = field(default_factory=dict)
    scheduled_hits: Dict[str, int] = field(default_factory=dict)
    stochastic_only_hits: Dict[str, int] = field(default_factory=dict)

    def record(self, agent: str, scheduled: bool, stochastic: bool) -> bool:
        active = scheduled or stochastic
        if active:
            self.sessions[agent] = self.sessions.get(agent, 0) + 1
            if scheduled:
                self.scheduled_hits[agent] = self.scheduled_hits.get(agent, 0) + 1
            else:
                self.stochastic_only_hits[agent] = self.stochastic_only_hits.get(agent, 0) + 1
        return active

    def to_dict(self) -> dict:
        return {
            "sessions": dict(sorted(self.sessions.items())),
            "scheduled_hits": dict(sorted(self.scheduled_hits.items())),
            "stochastic_only_hits": dict(sorted(self.stochastic_only_hits.items())),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ActivityRecord":
        return cls(**{k: dict(v) for k, v in data.items()})
