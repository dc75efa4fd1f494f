"""
Shared fixtures for the Mastosim test suite.

Everything runs offline: the scripted backend answers every prompt and the
platform is the in-process emulator.
"""

from datetime import datetime
from pathlib import Path

import pytest

from src.llm_backend import ScriptedBackend, ScriptedRules, load_scripted_rules
from src.scenario import builtin_storhampton_scenario, parse_scenario
from src.social_platform import PlatformEmulator

ROOT = Path(__file__).resolve().parent
DEMO_RULES = ROOT / "rules" / "storhampton_demo.yaml"
EXAMPLE_SCENARIO = ROOT / "scenarios" / "storhampton.yaml"
START = datetime(2024, 11, 4, 7, 0)


def small_scenario(variant="control", n=6, episodes=6, seed=0, **overrides):
    """Builtin Storhampton scenario shrunk to a few agents and episodes."""
    data = builtin_storhampton_scenario(variant, n=n, seed=seed).model_dump(mode="json")
    data["episodes_per_day"] = episodes
    data["scheduler_params"]["base_rate_default"] = min(2, episodes)
    for agent in data["agents"]:
        if agent["base_rate"] is not None:
            agent["base_rate"] = min(agent["base_rate"], episodes)
    data.update(overrides)
    return parse_scenario(data)


def demo_backend() -> ScriptedBackend:
    return ScriptedBackend(load_scripted_rules(DEMO_RULES))


def rules_backend(rules: list) -> ScriptedBackend:
    return ScriptedBackend(ScriptedRules.from_dict({"rules": rules}))


@pytest.fixture
def make_scenario():
    return small_scenario


@pytest.fixture
def backend():
    return demo_backend()


@pytest.fixture
def emulator():
    """Emulator with alice, bob and carol registered (ids 1, 2, 3)."""
    platform = PlatformEmulator(START, episode_minutes=30)
    for name in ("alice", "bob", "carol"):
        platform.register_account(name, name.title(), f"{name}'s bio")
    platform.set_episode(0)
    return platform
