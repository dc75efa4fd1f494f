"""
Simulation Engine

Runs a scenario end to end:

    provisioning -> personas -> candidate proposals -> follow graph
    -> introductions -> schedule -> episodes [0, episodes_per_day)

Each episode:
1. activity draws (one per agent, ascending index)
2. decide_session for active agents, concurrently (ThreadPoolExecutor)
3. apply_session serially in ascending agent index
4. survey every agent, concurrently; records kept in agent order
5. analytics snapshot, then checkpoint

Artifacts depend only on (config, seed, scripted rules): every random draw
comes from a named stream and every concurrent phase writes only agent-owned
state, so the worker count never changes the output.
"""

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, TypeVar

from pydantic import BaseModel, Field
from tqdm import tqdm

from src.agent import AgentState, apply_session, decide_session
from src.llm_backend import LLMBackend, TranscriptEntry
from src.measurement import AnalyticsSnapshot, SurveyRecord, aggregate, survey_agent
from src.persona import build_trait_set, generate_formative_memories, load_survey_dataset
from src.prompts import template_version
from src.scenario import Role, ScenarioConfig, TraitMode, config_hash, parse_scenario
from src.scheduler import ActivityRecord, EpisodeSchedule, RngStreams, activity_draw, build_schedule
from src.social_platform import (
    SETUP_EPISODE,
    PlatformClient,
    PlatformEmulator,
    PlatformEvent,
    apply_follow_graph,
    init_follow_graph,
    post_introductions,
    provision_accounts,
    read_event_log,
    replay_events,
    write_event_log,
)

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
EVENTS_FILE = "events.jsonl"
CHECKPOINT_FILE = "checkpoint.json"
MANIFEST_FILE = "manifest.json"
TRANSCRIPT_FILE = "transcript.jsonl"

T = TypeVar("T")


class SimulationError(RuntimeError):
    """Base class for engine failures."""


class CheckpointError(SimulationError):
    """Checkpoint missing, corrupt or incompatible."""


# ========================================
# State and artifacts
# ========================================

@dataclass
class RunState:
    """Everything needed to continue a run from the start of `episode`."""
    config: ScenarioConfig
    episode: int
    streams: RngStreams
    agents: List[AgentState]
    schedule: EpisodeSchedule
    platform: PlatformClient
    survey: List[SurveyRecord] = field(default_factory=list)
    analytics: List[AnalyticsSnapshot] = field(default_factory=list)
    activity: ActivityRecord = field(default_factory=ActivityRecord)

    @property
    def finished(self) -> bool:
        return self.episode >= self.config.episodes_per_day


@dataclass
class RunArtifacts:
    config: ScenarioConfig
    events: List[PlatformEvent]
    survey: List[SurveyRecord]
    analytics: List[AnalyticsSnapshot]
    transcript: List[TranscriptEntry]
    accounts: Dict[str, str]  # agent name -> account id
    activity: ActivityRecord
    completed_episodes: int
    out_dir: Optional[Path] = None

    @property
    def finished(self) -> bool:
        return self.completed_episodes >= self.config.episodes_per_day


class RunManifest(BaseModel):
    """Run summary written next to the artifacts. No wall-clock fields."""
    config_hash: str
    seed: int
    backend_identity: str
    experiment_variant: str
    num_agents: int
    episodes_per_day: int
    first_episode: int = 0
    last_episode: int = Field(..., description="Last completed episode, -1 if none")
    status: str  # complete | interrupted | failed
    prompt_template_version: int
    artifacts: Dict[str, str] = Field(default_factory=dict)
    error: Optional[str] = None


# ========================================
# Helpers
# ========================================

def _resolve_workers(config: ScenarioConfig, workers: Optional[int]) -> int:
    workers = config.runtime.workers if workers is None else workers
    if workers < 0:
        raise ValueError(f"workers must be >= 0, got {workers}")
    if workers == 0:
        workers = min(config.runtime.max_workers, config.agent_count)
    return max(1, workers)


def _map(pool: Optional[ThreadPoolExecutor], fn: Callable[..., T], items: Sequence) -> List[T]:
    """Ordered map; results line up with items whatever the completion order."""
    if pool is None:
        return [fn(item) for item in items]
    return list(pool.map(fn, items))


def _canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def transcript_lines(entries: Sequence[TranscriptEntry]) -> List[str]:
    """Canonical transcript lines; the interleaving-dependent seq is dropped."""
    lines = []
    for e in entries:
        data = e.to_dict()
        data.pop("seq")
        lines.append(json.dumps(data, ensure_ascii=False))
    return lines


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


# ========================================
# Setup
# ========================================

def setup_run(
    config: ScenarioConfig,
    llm: LLMBackend,
    platform: Optional[PlatformClient] = None,
    pool: Optional[ThreadPoolExecutor] = None,
) -> RunState:
    """Provision, build personas, wire the follow graph and post introductions."""
    streams = RngStreams(config.seed)
    for name in ("graph", "schedule"):
        streams.get(name)
    for spec in config.agents:
        for prefix in ("traits", "activity", "session"):
            streams.get(f"{prefix}/{spec.name}")

    platform = platform or PlatformEmulator(config.start_time, config.episode_minutes)
    platform.set_episode(SETUP_EPISODE)

    dataset = None
    if any(a.trait_mode == TraitMode.SCHWARTZ_SAMPLED for a in config.agents):
        if not config.persona.dataset_path:
            raise SimulationError("schwartz_sampled agents need persona.dataset_path")
        dataset = load_survey_dataset(config.persona.dataset_path, config.persona.scoring_map)

    binding = provision_accounts(platform, config.agents)

    agents = []
    for i, spec in enumerate(config.agents):
        traits = build_trait_set(spec, config, streams[f"traits/{spec.name}"], dataset)
        agent = AgentState(spec=spec, traits=traits, index=i)
        agent.bind_account(binding[spec.name])
        agents.append(agent)

    def build_persona(agent: AgentState):
        return generate_formative_memories(
            agent.spec, agent.traits, config.shared_context, llm, config.start_time,
            num_anecdotes=config.persona.num_anecdotes,
            usage_instructions=config.mastodon_usage_instructions,
        )

    logger.info(f"Generating {len(agents)} personas")
    for agent, formative in zip(agents, _map(pool, build_persona, agents)):
        agent.backstory = formative.backstory
        agent.memories.extend(formative.memories)

    setup_time = platform.episode_time(SETUP_EPISODE)
    for agent in agents:
        for candidate in config.candidates:
            if candidate.name != agent.name:
                agent.remember(
                    f"{candidate.name} is running for mayor of Storhampton. "
                    f"{candidate.name}'s policy proposal: {candidate.policy_proposal}",
                    setup_time, tag="formative",
                )

    ids = [binding[a.name] for a in config.agents]
    candidate_ids = [binding[c.name] for c in config.candidates]
    graph = init_follow_graph(
        ids, candidate_ids, config.graph_params.p1, config.graph_params.p2,
        streams["graph"], config.graph_params.p2_mode,
    )
    apply_follow_graph(platform, graph, ids)
    logger.info(f"Follow graph: {len(graph)} edges")

    post_introductions(agents, llm, platform, "\n".join(config.mastodon_usage_instructions))
    schedule = build_schedule(config, streams["schedule"])

    return RunState(
        config=config, episode=0, streams=streams, agents=agents,
        schedule=schedule, platform=platform,
    )


# ========================================
# Episodes
# ========================================

def _analytics_exclusions(config: ScenarioConfig) -> set:
    excluded = set()
    for spec in config.agents:
        if spec.role == Role.CANDIDATE and not config.survey.include_candidates:
            excluded.add(spec.name)
        if spec.role == Role.MALICIOUS and not config.survey.include_malicious:
            excluded.add(spec.name)
    return excluded


def run_episode(state: RunState, llm: LLMBackend, pool: Optional[ThreadPoolExecutor] = None) -> AnalyticsSnapshot:
    """Advance the run by one episode."""
    config, platform, e = state.config, state.platform, state.episode
    candidates = config.candidate_names
    runtime = config.runtime
    platform.set_episode(e)
    now = platform.episode_time(e)
    event_offset = len(platform.events())

    active = []
    for agent in state.agents:
        scheduled, stochastic = activity_draw(
            state.schedule, agent.name, e, state.streams[f"activity/{agent.name}"]
        )
        if state.activity.record(agent.name, scheduled, stochastic):
            active.append(agent)

    decide_phase = f"e{e:03d}/decide"
    decisions = _map(pool, lambda a: decide_session(
        a, platform, llm, state.streams[f"session/{a.name}"], candidates, now, runtime, decide_phase,
    ), active)
    for agent, decision in zip(active, decisions):
        apply_session(agent, decision, platform, now)

    survey_phase = f"e{e:03d}/survey"
    records = _map(pool, lambda a: survey_agent(
        a, e, candidates, llm, config.survey.custom_questions, runtime, survey_phase,
        as_memory=config.survey.survey_as_memory, now=now,
    ), state.agents)
    state.survey.extend(records)

    snapshot = aggregate(
        records, e, candidates,
        events=platform.events()[event_offset:],
        edges=platform.follow_graph().edges,
        active_accounts=[a.account for a in active],
        exclude=_analytics_exclusions(config),
    )
    state.analytics.append(snapshot)
    state.episode = e + 1
    logger.info(
        f"Episode {e}: {len(active)} active, "
        f"{sum(snapshot.activity_counts.values())} platform events"
    )
    return snapshot


# ========================================
# Checkpoints
# ========================================

def checkpoint_body(state: RunState, llm: LLMBackend) -> Dict[str, Any]:
    return {
        "version": CHECKPOINT_VERSION,
        "config": state.config.model_dump(mode="json"),
        "config_hash": config_hash(state.config),
        "episode": state.episode,
        "platform": "emulator" if isinstance(state.platform, PlatformEmulator) else "rest",
        "event_offset": len(state.platform.events()),
        "rng": state.streams.state_dict(),
        "schedule": state.schedule.to_dict(),
        "agents": [a.to_dict() for a in state.agents],
        "survey": [r.to_dict() for r in state.survey],
        "analytics": [s.to_dict() for s in state.analytics],
        "activity": state.activity.to_dict(),
        "backend_identity": llm.backend_identity(),
        "backend": llm.state_dict(),
    }


def write_checkpoint(path: Path, body: Dict[str, Any]) -> None:
    """{"sha256": <hash of canonical body>, "body": body}"""
    canonical = _canonical_json(body)
    digest = hashlib.sha256(canonical.encode("utf-8")).hexdigest()
    _write_text(path, '{"body":' + canonical + ',"sha256":"' + digest + '"}\n')


def read_checkpoint(path) -> Dict[str, Any]:
    """
    Load and verify a checkpoint.

    Raises:
        CheckpointError: Missing, unparsable, tampered or wrong version
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint not found: {path}") from e
    except json.JSONDecodeError as e:
        raise CheckpointError(f"checkpoint is not valid JSON: {e}") from e
    if not isinstance(doc, dict) or "body" not in doc or "sha256" not in doc:
        raise CheckpointError("checkpoint lacks body/sha256")
    digest = hashlib.sha256(_canonical_json(doc["body"]).encode("utf-8")).hexdigest()
    if digest != doc["sha256"]:
        raise CheckpointError("checkpoint integrity hash mismatch")
    if doc["body"].get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc['body'].get('version')}")
    return doc["body"]


def _persist(state: RunState, llm: LLMBackend, out_dir: Path) -> None:
    write_event_log(state.platform.events(), out_dir / EVENTS_FILE)
    write_checkpoint(out_dir / CHECKPOINT_FILE, checkpoint_body(state, llm))


def _write_transcript(llm: LLMBackend, out_dir: Path) -> None:
    lines = transcript_lines(llm.canonical_transcript())
    _write_text(out_dir / TRANSCRIPT_FILE, "".join(line + "\n" for line in lines))


def write_manifest(
    out_dir: Path, config: ScenarioConfig, llm: LLMBackend,
    completed: int, status: str, error: Optional[str] = None,
) -> RunManifest:
    manifest = RunManifest(
        config_hash=config_hash(config),
        seed=config.seed,
        backend_identity=llm.backend_identity(),
        experiment_variant=config.experiment_variant.value,
        num_agents=config.agent_count,
        episodes_per_day=config.episodes_per_day,
        last_episode=completed - 1,
        status=status,
        prompt_template_version=template_version(),
        artifacts={
            "events": EVENTS_FILE,
            "checkpoint": CHECKPOINT_FILE,
            "transcript": TRANSCRIPT_FILE,
        },
        error=error,
    )
    _write_text(out_dir / MANIFEST_FILE, manifest.model_dump_json(indent=2) + "\n")
    return manifest


def record_exports(run_dir: Path, written: Dict[str, List[Path]]) -> Optional[RunManifest]:
    """
    Add exported files to the run's manifest keyed "<format>/<file name>".

    Only files written into the run directory itself are listed; no-op
    (returns None) when the directory has no manifest.
    """
    run_dir = Path(run_dir)
    path = run_dir / MANIFEST_FILE
    if not path.exists():
        return None
    manifest = RunManifest.model_validate_json(path.read_text(encoding="utf-8"))
    artifacts = dict(manifest.artifacts)
    for fmt, paths in sorted(written.items()):
        for p in paths:
            rel = Path(os.path.relpath(p, run_dir)).as_posix()
            if not rel.startswith("../"):
                artifacts[f"{fmt}/{Path(p).name}"] = rel
    manifest = manifest.model_copy(update={"artifacts": artifacts})
    _write_text(path, manifest.model_dump_json(indent=2) + "\n")
    return manifest


# ========================================
# Driver
# ========================================

def _artifacts(state: RunState, llm: LLMBackend, out_dir: Optional[Path]) -> RunArtifacts:
    return RunArtifacts(
        config=state.config,
        events=state.platform.events(),
        survey=list(state.survey),
        analytics=list(state.analytics),
        transcript=llm.canonical_transcript(),
        accounts={a.name: a.account for a in state.agents},
        activity=state.activity,
        completed_episodes=state.episode,
        out_dir=out_dir,
    )


def _drive(
    state: RunState,
    llm: LLMBackend,
    out_dir: Optional[Path],
    pool: Optional[ThreadPoolExecutor],
    stop_after: Optional[int],
    progress: bool,
) -> RunArtifacts:
    config = state.config
    last = config.episodes_per_day if stop_after is None else min(stop_after, config.episodes_per_day)
    try:
        for _ in tqdm(range(state.episode, last), desc="episodes", unit="ep", disable=not progress):
            run_episode(state, llm, pool)
            if out_dir is not None:
                _persist(state, llm, out_dir)
    except Exception as e:
        logger.error(f"Run failed during episode {state.episode}: {e}")
        if out_dir is not None:
            write_manifest(out_dir, config, llm, state.episode, "failed", error=str(e))
        raise

    if out_dir is not None:
        _write_transcript(llm, out_dir)
        status = "complete" if state.finished else "interrupted"
        write_manifest(out_dir, config, llm, state.episode, status)
        logger.info(f"Run {status} after {state.episode} episodes; artifacts in {out_dir}")
    return _artifacts(state, llm, out_dir)


def run_simulation(
    config: ScenarioConfig,
    llm: LLMBackend,
    out_dir=None,
    platform: Optional[PlatformClient] = None,
    workers: Optional[int] = None,
    stop_after: Optional[int] = None,
    progress: bool = False,
) -> RunArtifacts:
    """
    Run a scenario.

    Args:
        config: Validated scenario
        llm: Completion backend
        out_dir: Run directory (events, checkpoint, transcript, manifest); None keeps
            everything in memory
        platform: Platform client; a fresh emulator when None
        workers: Worker threads for the concurrent phases (0 = auto, 1 = serial)
        stop_after: Stop once this many episodes are complete
        progress: Show a tqdm bar over episodes

    Returns:
        RunArtifacts for the episodes completed
    """
    if stop_after is not None and stop_after < 0:
        raise ValueError(f"stop_after must be >= 0, got {stop_after}")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    n_workers = _resolve_workers(config, workers)
    logger.info(
        f"Starting run: {config.agent_count} agents, {config.episodes_per_day} episodes, "
        f"seed {config.seed}, {n_workers} workers, backend {llm.backend_identity()}"
    )
    pool = ThreadPoolExecutor(max_workers=n_workers) if n_workers > 1 else None
    try:
        state = setup_run(config, llm, platform, pool)
        if out_dir is not None:
            _persist(state, llm, out_dir)
        return _drive(state, llm, out_dir, pool, stop_after, progress)
    finally:
        if pool is not None:
            pool.shutdown(wait=True)


def restore_state(body: Dict[str, Any], events: List[PlatformEvent], llm: Optional[LLMBackend]) -> RunState:
    """Rebuild a RunState from a verified checkpoint body and its event log."""
    config = parse_scenario(body["config"])
    if body["platform"] != "emulator":
        raise CheckpointError("only emulator runs can be resumed")
    if len(events) != body["event_offset"]:
        raise CheckpointError(
            f"event log has {len(events)} events, checkpoint expects {body['event_offset']}"
        )
    platform = replay_events(events, config.start_time, config.episode_minutes)

    streams = RngStreams(config.seed)
    streams.load_state_dict(body["rng"])
    agents = [
        AgentState.from_dict(spec, data) for spec, data in zip(config.agents, body["agents"])
    ]
    if llm is not None:
        if llm.backend_identity() != body["backend_identity"]:
            raise CheckpointError(
                f"checkpoint was written by {body['backend_identity']}, "
                f"resuming with {llm.backend_identity()}"
            )
        llm.load_state_dict(body["backend"])

    return RunState(
        config=config,
        episode=body["episode"],
        streams=streams,
        agents=agents,
        schedule=EpisodeSchedule.from_dict(body["schedule"]),
        platform=platform,
        survey=[SurveyRecord.from_dict(r) for r in body["survey"]],
        analytics=[AnalyticsSnapshot.from_dict(s) for s in body["analytics"]],
        activity=ActivityRecord.from_dict(body["activity"]),
    )


def _load(checkpoint_path) -> tuple:
    checkpoint_path = Path(checkpoint_path)
    body = read_checkpoint(checkpoint_path)
    events_path = checkpoint_path.parent / EVENTS_FILE
    try:
        events = read_event_log(events_path, limit=body["event_offset"])
    except FileNotFoundError as e:
        raise CheckpointError(f"event log not found next to checkpoint: {events_path}") from e
    return body, events


def resume(
    checkpoint_path,
    llm: LLMBackend,
    workers: Optional[int] = None,
    stop_after: Optional[int] = None,
    progress: bool = False,
) -> RunArtifacts:
    """
    Continue a run from its checkpoint, writing into the checkpoint's directory.

    A finished run is returned unchanged.
    """
    body, events = _load(checkpoint_path)
    state = restore_state(body, events, llm)
    out_dir = Path(checkpoint_path).parent
    if state.finished:
        logger.info("Run already complete; nothing to resume")
        return _artifacts(state, llm, out_dir)

    logger.info(f"Resuming at episode {state.episode}")
    n_workers = _resolve_workers(state.config, workers)
    pool = ThreadPoolExecutor(max_workers=n_workers) if n_workers > 1 else None
    try:
        return _drive(state, llm, out_dir, pool, stop_after, progress)
    finally:
        if pool is not None:
            pool.shutdown(wait=True)


def load_artifacts(checkpoint_path) -> RunArtifacts:
    """Artifacts stored in a checkpoint, without a backend (for export)."""
    body, events = _load(checkpoint_path)
    state = restore_state(body, events, llm=None)
    transcript = [TranscriptEntry(**e) for e in body["backend"]["transcript"]]
    return RunArtifacts(
        config=state.config,
        events=events,
        survey=state.survey,
        analytics=state.analytics,
        transcript=transcript,
        accounts={a.name: a.account for a in state.agents},
        activity=state.activity,
        completed_episodes=state.episode,
        out_dir=Path(checkpoint_path).parent,
    )
