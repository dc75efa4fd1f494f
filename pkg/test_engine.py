"""
End-to-end engine runs with the scripted backend

Covers determinism across seeds and worker counts, checkpoint/resume,
manifests and the malicious-vs-control contrast.
"""

import json

import pytest
import yaml

from conftest import DEMO_RULES, demo_backend, rules_backend, small_scenario
from src.engine import (
    CHECKPOINT_FILE,
    EVENTS_FILE,
    MANIFEST_FILE,
    TRANSCRIPT_FILE,
    CheckpointError,
    RunManifest,
    load_artifacts,
    read_checkpoint,
    record_exports,
    resume,
    run_simulation,
    transcript_lines,
)
from src.llm_backend import LLMError
from src.measurement import UNDECIDED
from src.prompts import template_version
from src.scenario import Role, builtin_storhampton_scenario
from src.social_platform import SETUP_EPISODE, EventKind

RUN_FILES = (EVENTS_FILE, CHECKPOINT_FILE, TRANSCRIPT_FILE, MANIFEST_FILE)
BILL = "Bill Fredrickson"


def _fingerprint(artifacts):
    return (
        [e.model_dump(mode="json") for e in artifacts.events],
        [r.to_dict() for r in artifacts.survey],
        [s.to_dict() for s in artifacts.analytics],
        transcript_lines(artifacts.transcript),
    )


def _files(run_dir):
    return {name: (run_dir / name).read_bytes() for name in RUN_FILES}


def _manifest(run_dir):
    return RunManifest.model_validate_json((run_dir / MANIFEST_FILE).read_text(encoding="utf-8"))


# ========================================
# Determinism
# ========================================

def test_same_seed_same_run():
    config = small_scenario("malicious", seed=3)
    first = run_simulation(config, demo_backend(), workers=1)
    second = run_simulation(config, demo_backend(), workers=1)
    assert _fingerprint(first) == _fingerprint(second)
    assert first.finished and first.completed_episodes == config.episodes_per_day
    print("✓ Identical artifacts for identical seeds")


def test_worker_count_does_not_change_files(tmp_path):
    config = small_scenario("malicious", seed=11)
    run_simulation(config, demo_backend(), tmp_path / "serial", workers=1)
    run_simulation(config, demo_backend(), tmp_path / "pooled", workers=8)
    assert _files(tmp_path / "serial") == _files(tmp_path / "pooled")
    print("✓ 1 and 8 workers write byte-identical run directories")


def test_event_log_shape():
    config = small_scenario(episodes=4)
    artifacts = run_simulation(config, demo_backend())
    events = artifacts.events
    assert [e.seq for e in events] == list(range(len(events)))
    registers = [e for e in events if e.kind == EventKind.REGISTER]
    assert len(registers) == config.agent_count
    assert all(e.episode == SETUP_EPISODE for e in registers)
    episodes = [e.episode for e in events]
    assert episodes == sorted(episodes)
    assert max(episodes) < config.episodes_per_day
    assert set(artifacts.accounts) == {a.name for a in config.agents}


def test_survey_and_analytics_per_episode():
    config = small_scenario(n=6, episodes=3)
    artifacts = run_simulation(config, demo_backend())
    assert len(artifacts.survey) == config.agent_count * config.episodes_per_day
    assert [s.episode for s in artifacts.analytics] == [0, 1, 2]
    for snapshot in artifacts.analytics:
        # candidates are left out of the aggregates by default
        assert snapshot.polled == config.agent_count - 2
        assert sum(snapshot.vote_share.values()) == pytest.approx(1.0)
        assert set(snapshot.vote_share) == set(config.candidate_names) | {UNDECIDED}


def test_negative_arguments():
    config = small_scenario(episodes=2)
    with pytest.raises(ValueError):
        run_simulation(config, demo_backend(), workers=-1)
    with pytest.raises(ValueError):
        run_simulation(config, demo_backend(), stop_after=-1)


# ========================================
# Manifests and checkpoints
# ========================================

def test_manifest_for_complete_run(tmp_path):
    config = small_scenario(episodes=3)
    llm = demo_backend()
    run_simulation(config, llm, tmp_path)
    manifest = _manifest(tmp_path)
    assert manifest.status == "complete"
    assert manifest.last_episode == 2
    assert manifest.seed == config.seed
    assert manifest.num_agents == config.agent_count
    assert manifest.backend_identity == llm.backend_identity()
    assert manifest.prompt_template_version == template_version()
    assert manifest.error is None
    lines = (tmp_path / TRANSCRIPT_FILE).read_text(encoding="utf-8").splitlines()
    assert all("seq" not in json.loads(line) for line in lines)


def test_stop_after_zero_keeps_setup_only(tmp_path):
    config = small_scenario(episodes=3)
    artifacts = run_simulation(config, demo_backend(), tmp_path, stop_after=0)
    assert artifacts.completed_episodes == 0
    assert artifacts.survey == []
    manifest = _manifest(tmp_path)
    assert manifest.status == "interrupted" and manifest.last_episode == -1
    assert read_checkpoint(tmp_path / CHECKPOINT_FILE)["episode"] == 0


def test_interrupted_run_resumes_to_identical_output(tmp_path):
    config = small_scenario("malicious", episodes=5, seed=21)
    full, partial = tmp_path / "full", tmp_path / "partial"
    run_simulation(config, demo_backend(), full)

    run_simulation(config, demo_backend(), partial, stop_after=2)
    manifest = _manifest(partial)
    assert manifest.status == "interrupted" and manifest.last_episode == 1

    artifacts = resume(partial / CHECKPOINT_FILE, demo_backend(), workers=4)
    assert artifacts.finished
    assert _files(partial) == _files(full)
    print("✓ Resumed run matches the uninterrupted one")


def test_resume_in_two_steps(tmp_path):
    config = small_scenario(episodes=4, seed=5)
    full, partial = tmp_path / "full", tmp_path / "partial"
    run_simulation(config, demo_backend(), full)
    run_simulation(config, demo_backend(), partial, stop_after=1)
    resume(partial / CHECKPOINT_FILE, demo_backend(), stop_after=3)
    assert _manifest(partial).last_episode == 2
    resume(partial / CHECKPOINT_FILE, demo_backend())
    assert _files(partial) == _files(full)


def test_resume_finished_run_is_noop(tmp_path):
    config = small_scenario(episodes=2)
    run_simulation(config, demo_backend(), tmp_path)
    before = _files(tmp_path)
    artifacts = resume(tmp_path / CHECKPOINT_FILE, demo_backend())
    assert artifacts.completed_episodes == 2
    assert _files(tmp_path) == before


def test_tampered_checkpoint_rejected(tmp_path):
    config = small_scenario(episodes=2)
    run_simulation(config, demo_backend(), tmp_path, stop_after=1)
    path = tmp_path / CHECKPOINT_FILE
    doc = json.loads(path.read_text(encoding="utf-8"))
    doc["body"]["episode"] = 0
    path.write_text(json.dumps(doc), encoding="utf-8")
    with pytest.raises(CheckpointError, match="hash"):
        resume(path, demo_backend())


def test_unreadable_checkpoints(tmp_path):
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "missing.json")
    garbage = tmp_path / "garbage.json"
    garbage.write_text("{not json", encoding="utf-8")
    with pytest.raises(CheckpointError):
        read_checkpoint(garbage)


def test_resume_needs_event_log(tmp_path):
    config = small_scenario(episodes=2)
    run_simulation(config, demo_backend(), tmp_path, stop_after=1)
    (tmp_path / EVENTS_FILE).unlink()
    with pytest.raises(CheckpointError, match="event log"):
        resume(tmp_path / CHECKPOINT_FILE, demo_backend())


def test_resume_rejects_other_backend(tmp_path):
    config = small_scenario(episodes=2)
    run_simulation(config, demo_backend(), tmp_path, stop_after=1)
    other = rules_backend([{"kind": kind, "responses": ["5"]} for kind in ("vote_poll", "favorability_poll")])
    with pytest.raises(CheckpointError, match="written by"):
        resume(tmp_path / CHECKPOINT_FILE, other)


def test_load_artifacts_matches_run(tmp_path):
    config = small_scenario(episodes=3)
    artifacts = run_simulation(config, demo_backend(), tmp_path)
    loaded = load_artifacts(tmp_path / CHECKPOINT_FILE)
    assert _fingerprint(loaded) == _fingerprint(artifacts)
    assert loaded.accounts == artifacts.accounts


def test_failed_run_writes_manifest(tmp_path):
    with open(DEMO_RULES, "r", encoding="utf-8") as f:
        rules = yaml.safe_load(f)["rules"]
    llm = rules_backend([r for r in rules if r["kind"] != "app_action"])
    config = small_scenario(episodes=3)
    with pytest.raises(LLMError):
        run_simulation(config, llm, tmp_path)
    manifest = _manifest(tmp_path)
    assert manifest.status == "failed"
    assert "app_action" in manifest.error


# ========================================
# Experiment contrast
# ========================================

def test_malicious_agent_raises_candidate_mentions():
    """Same seed, same rules: only the malicious partisan names the candidate in toots."""
    def bill_mentions(variant):
        artifacts = run_simulation(small_scenario(variant, n=6, episodes=4, seed=2), demo_backend())
        return sum(s.candidate_mentions[BILL] for s in artifacts.analytics)

    control, malicious = bill_mentions("control"), bill_mentions("malicious")
    assert control == 0
    assert malicious > control
    print(f"✓ Mentions of {BILL}: control={control}, malicious={malicious}")


def test_record_exports_lists_files_in_run_dir(tmp_path):
    run_simulation(small_scenario(episodes=2), demo_backend(), tmp_path)
    written = {
        "csv": [tmp_path / "survey.csv", tmp_path / "analytics.csv"],
        "timelines": [tmp_path / "timelines" / "alice.txt"],
        "svg": [tmp_path.parent / "elsewhere.svg"],
    }
    manifest = record_exports(tmp_path, written)
    assert manifest.artifacts["csv/survey.csv"] == "survey.csv"
    assert manifest.artifacts["timelines/alice.txt"] == "timelines/alice.txt"
    assert "svg/elsewhere.svg" not in manifest.artifacts
    assert manifest.artifacts["events"] == EVENTS_FILE
    assert _manifest(tmp_path) == manifest
    assert record_exports(tmp_path / "no-run-here", written) is None


# ========================================
# Full-size Storhampton runs (20 agents, 48 episodes)
# ========================================

FULL_SEED = 7


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    """The builtin malicious experiment, run once and shared by the tests below."""
    run_dir = tmp_path_factory.mktemp("full") / "serial"
    config = builtin_storhampton_scenario("malicious", n=20, seed=FULL_SEED)
    artifacts = run_simulation(config, demo_backend(), run_dir, workers=1)
    return artifacts, run_dir


def test_full_run_episode_structure(full_run):
    artifacts, run_dir = full_run
    config = artifacts.config
    assert config.agent_count == 20 and config.episodes_per_day == 48
    assert artifacts.finished and _manifest(run_dir).last_episode == 47
    assert [s.episode for s in artifacts.analytics] == list(range(48))
    assert len(artifacts.survey) == 20 * 48
    for agent in config.agents:
        records = [r for r in artifacts.survey if r.agent == agent.name]
        assert [r.episode for r in records] == list(range(48))
        assert all(set(r.favorability) == set(config.candidate_names) for r in records)


def test_full_run_same_files_with_eight_workers(full_run, tmp_path):
    artifacts, run_dir = full_run
    run_simulation(artifacts.config, demo_backend(), tmp_path, workers=8)
    assert _files(tmp_path) == _files(run_dir)
    print("✓ 20x48 run is byte-identical with 1 and 8 workers")


def test_full_run_resumed_after_episode_20(full_run, tmp_path):
    artifacts, run_dir = full_run
    run_simulation(artifacts.config, demo_backend(), tmp_path, workers=8, stop_after=20)
    manifest = _manifest(tmp_path)
    assert manifest.status == "interrupted" and manifest.last_episode == 19
    resume(tmp_path / CHECKPOINT_FILE, demo_backend(), workers=8)
    assert _files(tmp_path) == _files(run_dir)
    print("✓ Interrupted at episode 20 and resumed: identical to the uninterrupted run")


def test_malicious_agent_posts_for_candidate_every_session(full_run):
    artifacts, _ = full_run
    glenn = next(a.name for a in artifacts.config.agents if a.role == Role.MALICIOUS)
    account = artifacts.accounts[glenn]
    sessions = [s.episode for s in artifacts.analytics if account in s.active_accounts]
    assert sessions

    for episode in sessions:
        texts = [
            e.payload.get("text", "") for e in artifacts.events
            if e.episode == episode and e.actor == account
            and e.kind in (EventKind.TOOT, EventKind.REPLY)
        ]
        assert any("Bill" in text for text in texts), f"no pro-Bill toot in episode {episode}"
    print(f"✓ {glenn} posted about {BILL} in all {len(sessions)} sessions")


def test_full_run_mentions_exceed_control(full_run):
    artifacts, _ = full_run
    control = run_simulation(builtin_storhampton_scenario("control", n=20, seed=FULL_SEED), demo_backend())
    malicious_mentions = sum(s.candidate_mentions[BILL] for s in artifacts.analytics)
    control_mentions = sum(s.candidate_mentions[BILL] for s in control.analytics)
    assert malicious_mentions > control_mentions
