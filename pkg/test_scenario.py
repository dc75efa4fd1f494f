"""
Scenario loading, validation and the builtin Storhampton experiments
"""

import pytest
import yaml
from pydantic import ValidationError

from conftest import EXAMPLE_SCENARIO
from src.scenario import (
    BIAS_CONTEXT,
    ExperimentVariant,
    Role,
    ScenarioParseError,
    ScenarioValidationError,
    TraitMode,
    builtin_storhampton_scenario,
    config_hash,
    default_dataset_path,
    fill_candidate_placeholders,
    load_scenario,
    parse_scenario,
    scenario_to_yaml,
)


def _minimal(**overrides):
    data = {
        "agents": [
            {"name": "Ann Lee", "gender": "female", "age": 40, "role": "candidate",
             "goal": "win", "policy_proposal": "parks"},
            {"name": "Ben Ode", "gender": "male", "age": 50, "role": "candidate",
             "goal": "win", "policy_proposal": "roads"},
            {"name": "Cat Ray", "gender": "female", "age": 30, "goal": "vote"},
        ],
    }
    data.update(overrides)
    return data


def test_builtin_control_scenario():
    """Control run: two candidates, no malicious agent, no bias"""
    config = builtin_storhampton_scenario("control")
    assert config.agent_count == 20
    assert config.candidate_names == ["Bill Fredrickson", "Bradley Carter"]
    assert not any(a.role == Role.MALICIOUS for a in config.agents)
    assert all(a.extra_context == [] for a in config.agents)
    assert config.episodes_per_day == 48
    assert config.graph_params.p1 == 0.2
    assert config.graph_params.p2 == 0.15
    print("✓ Builtin control scenario")


def test_builtin_malicious_scenario():
    config = builtin_storhampton_scenario(ExperimentVariant.MALICIOUS)
    malicious = [a for a in config.agents if a.role == Role.MALICIOUS]
    assert len(malicious) == 1
    glenn = malicious[0]
    assert glenn.name == "Glenn Patterson"
    assert glenn.base_rate == 10
    assert "Bill Fredrickson" in glenn.goal
    assert "[Conservative Candidate]" not in glenn.goal
    assert config.base_rate_for(glenn) == 10
    assert config.base_rate_for(config.agents[0]) == 5


def test_builtin_bias_scenario():
    config = builtin_storhampton_scenario("bias_malicious", n=10)
    for agent in config.agents:
        if agent.role == Role.VOTER:
            assert agent.extra_context == [BIAS_CONTEXT]
        else:
            assert agent.extra_context == []
    assert config.agent_count == 10


def test_builtin_rejects_tiny_town():
    with pytest.raises(ValueError):
        builtin_storhampton_scenario("control", n=2)


def test_builtin_schwartz_uses_shipped_dataset():
    config = builtin_storhampton_scenario("control", n=5, trait_mode=TraitMode.SCHWARTZ_SAMPLED)
    assert config.persona.dataset_path == str(default_dataset_path())
    assert default_dataset_path().exists()
    assert all(a.trait_mode == TraitMode.SCHWARTZ_SAMPLED for a in config.agents)


def test_shared_context_placeholders_filled():
    config = builtin_storhampton_scenario("control")
    joined = "\n".join(config.shared_context)
    assert "Bill Fredrickson" in joined and "Bradley Carter" in joined
    assert "[" not in joined
    assert fill_candidate_placeholders(
        "[Conservative Candidate] vs [Progressive Candidate]", "A", "B"
    ) == "A vs B"


def test_usernames():
    config = builtin_storhampton_scenario("control")
    assert config.agents[0].username == "bill_fredrickson"
    assert len({a.username for a in config.agents}) == config.agent_count


def test_minimal_scenario_defaults():
    config = parse_scenario(_minimal())
    assert config.episodes_per_day == 48
    assert config.episode_minutes == 30
    assert config.scheduler_params.stochastic_rate == 0.15
    assert config.experiment_variant == ExperimentVariant.CONTROL
    assert config.survey.include_malicious is True
    assert config.survey.include_candidates is False


@pytest.mark.parametrize("mutate, message", [
    (lambda d: d["agents"][2].update(role="candidate", policy_proposal="x"), "exactly two"),
    (lambda d: d["agents"][2].update(name="Ann Lee"), "unique"),
    (lambda d: d["agents"][2].update(policy_proposal="sneaky"), "policy_proposal"),
    (lambda d: d.update(episodes_per_day=3), "base_rate_default"),
    (lambda d: d["agents"][2].update(base_rate=60), "base_rate"),
    (lambda d: d.update(num_agents=4), "num_agents"),
    (lambda d: d["agents"][1].update(name="Ann Other"), "distinct first names"),
])
def test_invariant_violations(mutate, message):
    """Each violated invariant is reported by name"""
    data = _minimal()
    mutate(data)
    with pytest.raises(ScenarioValidationError, match=message):
        parse_scenario(data)


def test_two_malicious_agents_rejected():
    data = _minimal()
    data["agents"] += [
        {"name": "Dan Fox", "gender": "male", "age": 33, "role": "malicious", "goal": "x"},
        {"name": "Eve Sun", "gender": "female", "age": 34, "role": "malicious", "goal": "y"},
    ]
    with pytest.raises(ScenarioValidationError, match="malicious"):
        parse_scenario(data)


def test_malformed_yaml(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("agents: [\n  - name: x\n", encoding="utf-8")
    with pytest.raises(ScenarioParseError):
        load_scenario(path)


def test_missing_file(tmp_path):
    with pytest.raises(ScenarioParseError):
        load_scenario(tmp_path / "nope.yaml")


def test_non_mapping_document(tmp_path):
    path = tmp_path / "list.yaml"
    path.write_text("- 1\n- 2\n", encoding="utf-8")
    with pytest.raises(ScenarioParseError):
        load_scenario(path)


def test_example_scenario_file():
    config = load_scenario(EXAMPLE_SCENARIO)
    assert config.agent_count == 6
    assert config.experiment_variant == ExperimentVariant.MALICIOUS
    assert [q.id for q in config.survey.custom_questions] == ["trust_local_news"]
    assert config.agent_by_name("Glenn Patterson").role == Role.MALICIOUS


def test_yaml_round_trip(tmp_path):
    config = builtin_storhampton_scenario("bias", n=8, seed=11)
    path = tmp_path / "scenario.yaml"
    path.write_text(scenario_to_yaml(config), encoding="utf-8")
    loaded = load_scenario(path)
    assert loaded == config
    assert config_hash(loaded) == config_hash(config)


def test_config_hash_tracks_seed():
    a = builtin_storhampton_scenario("control", seed=1)
    b = builtin_storhampton_scenario("control", seed=2)
    assert config_hash(a) != config_hash(b)
    assert config_hash(a) == config_hash(builtin_storhampton_scenario("control", seed=1))


def test_config_is_immutable():
    config = parse_scenario(_minimal())
    with pytest.raises(ValidationError):
        config.seed = 5


def test_seed_range():
    with pytest.raises(ScenarioValidationError):
        parse_scenario(_minimal(seed=-1))
    assert parse_scenario(_minimal(seed=2**64 - 1)).seed == 2**64 - 1


def test_yaml_dump_is_plain():
    """The serialised form only uses plain YAML types"""
    text = scenario_to_yaml(builtin_storhampton_scenario("control", n=4))
    data = yaml.safe_load(text)
    assert data["agents"][0]["name"] == "Bill Fredrickson"
