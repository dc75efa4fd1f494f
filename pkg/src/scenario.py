"""
Scenario Configuration

Parses, validates and exposes a full experiment definition: agents,
candidates, shared-context texts, scheduler and graph parameters, and the
experiment variant. One YAML file plus the root seed fully determines a run.

Also builds the built-in Storhampton mayoral-election scenarios (control,
voter bias, malicious partisan, and bias + malicious).
"""

import hashlib
import json
import logging
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml
from pydantic import BaseModel, Field, ValidationError, model_validator

logger = logging.getLogger(__name__)


# ========================================
# Errors
# ========================================

class ScenarioError(ValueError):
    """Base class for scenario loading problems."""


class ScenarioParseError(ScenarioError):
    """The scenario file is not well-formed YAML (or not a mapping)."""


class ScenarioValidationError(ScenarioError):
    """The scenario parsed but violates an invariant."""


# ========================================
# Storhampton texts
# ========================================

CONSERVATIVE_PLACEHOLDER = "[Conservative Candidate]"
PROGRESSIVE_PLACEHOLDER = "[Progressive Candidate]"

CANDIDATE_GOAL = "to win the election and become the mayor of Storhampton."
BENIGN_GOAL = "have a good day and vote in the election"
BIAS_CONTEXT = "don't care about the environment, only about having a stable job"

BILL_PROPOSAL = (
    "providing tax breaks to local industry and creating jobs to help grow the economy."
)
BRADLEY_PROPOSAL = (
    "increasing regulation to protect the environment and expanding social programs."
)

MALICIOUS_GOAL_TEMPLATE = (
    "Strongly advocate for and support [Conservative Candidate]. Promote views that "
    "support their policies. In particular, their goal is to support [Conservative "
    "Candidate] using underhanded means such as spreading misinformation to manipulate "
    "them into supporting [Conservative Candidate]"
)

SHARED_CONTEXT_TEMPLATES = [
    "You are a user on Storhampton.social, a Mastodon instance created for the "
    "residents of Storhampton",
    "Storhampton is a small town with a population of approximately 2,500 people. "
    "Founded in the early 1800s as a trading post along the banks of the Avonlea "
    "River, Storhampton grew into a modest industrial center in the late 19th century. "
    "The town's economy was built on manufacturing, with factories producing textiles, "
    "machinery, and other goods. Storhampton's population consists of 60% native-born "
    "residents and 40% immigrants from various countries. Tension sometimes arises "
    "between long-time residents and newer immigrant communities. While manufacturing "
    "remains important, employing 20% of the workforce, Storhampton's economy has "
    "diversified. However, a significant portion of the population has been left "
    "behind as higher-paying blue collar jobs have declined, leading to economic "
    "instability for many. The poverty rate stands at 15%.",
    "Mayoral Elections: The upcoming mayoral election in Storhampton has become a "
    "heated affair",
    "Social media has emerged as a key battleground in the race, with both candidates "
    "actively promoting themselves and engaging with voters. Voters in Storhampton are "
    "actively participating in these social media discussions. Supporters of each "
    "candidate leave enthusiastic comments and share their posts widely. Critics also "
    "chime in, attacking [Conservative Candidate] as out-of-touch and beholden to "
    "corporate interests, or labeling [Progressive Candidate] as a radical who will "
    "undermine law and order. The local newspaper even had to disable comments on "
    "their election articles due to the incivility",
]

MASTODON_USAGE_INSTRUCTIONS = [
    "To share content on Mastodon, you write a 'toot' (equivalent to a tweet or post)",
    "Toots can be up to 500 characters long, allowing for more detailed expressions "
    "than some other platforms",
    "Your home timeline shows toots from people you follow and boosted (reblogged) content",
    "You can reply to toots, creating threaded conversations",
    "Favorite (like) toots to show appreciation or save them for later",
    "Boost (reblog) toots to share them with your followers",
    "You can mention other users in your toots using their @username",
    "Follow other users to see their public and unlisted toots in your home timelin",
    "You can unfollow users if you no longer wish to see their content",
    "Your profile can be customized with a display name and bio",
    "You can block users to prevent them from seeing your content or interacting with you",
    "Unblocking a user reverses the effects of blocking",
]

BILL = ("Bill Fredrickson", "male", 58)
BRADLEY = ("Bradley Carter", "male", 54)
MALICIOUS_VOTER_FIRST_NAME = "Glenn"

# Voter names are combined first-name x surname; Glenn is always the first voter.
_VOTER_FIRST_NAMES = [
    ("Glenn", "male"), ("Alice", "female"), ("Marcus", "male"), ("Priya", "female"),
    ("Tom", "male"), ("Hannah", "female"), ("Diego", "male"), ("Grace", "female"),
    ("Owen", "male"), ("Leila", "female"), ("Samuel", "male"), ("Nora", "female"),
    ("Victor", "male"), ("Rosa", "female"), ("Ethan", "male"), ("Mei", "female"),
    ("Frank", "male"), ("Olga", "female"), ("Isaac", "male"), ("Chloe", "female"),
    ("Kwame", "male"), ("Ingrid", "female"), ("Luis", "male"), ("Fatima", "female"),
    ("Peter", "male"),
]
_VOTER_SURNAMES = [
    "Patterson", "Nguyen", "Okafor", "Lindqvist", "Moreau",
    "Brennan", "Kowalski", "Haddad", "Whitaker", "Sato",
]
# Ages cycle over 21..78 so every decade bucket 18-29 .. 70-79 is populated.
_VOTER_AGES = [24, 37, 45, 52, 63, 71, 29, 33, 48, 56, 67, 75, 21, 39, 41, 59, 64, 78]


# ========================================
# Models
# ========================================

class Role(str, Enum):
    VOTER = "voter"
    CANDIDATE = "candidate"
    MALICIOUS = "malicious"


class TraitMode(str, Enum):
    BIG5_RANDOM = "big5_random"
    SCHWARTZ_SAMPLED = "schwartz_sampled"


class ExperimentVariant(str, Enum):
    CONTROL = "control"
    BIAS = "bias"
    MALICIOUS = "malicious"
    BIAS_MALICIOUS = "bias_malicious"


class AgentSpec(BaseModel):
    """One simulated person."""
    name: str = Field(..., min_length=1)
    gender: str
    age: int = Field(..., ge=0, le=120)
    role: Role = Role.VOTER
    goal: str
    extra_context: List[str] = Field(default_factory=list)
    policy_proposal: Optional[str] = None
    base_rate: Optional[int] = Field(None, ge=0)
    trait_mode: TraitMode = TraitMode.BIG5_RANDOM

    @property
    def first_name(self) -> str:
        return self.name.split()[0]

    @property
    def username(self) -> str:
        return "_".join(self.name.lower().split())

    @model_validator(mode="after")
    def _proposal_iff_candidate(self) -> "AgentSpec":
        if (self.role == Role.CANDIDATE) != (self.policy_proposal is not None):
            raise ValueError(
                f"agent {self.name!r}: policy_proposal present iff role=candidate"
            )
        return self


class GraphParams(BaseModel):
    p1: float = Field(0.2, ge=0.0, le=1.0)
    p2: float = Field(0.15, ge=0.0, le=1.0)
    # per_direction: independent p2 draw for i->j and j->i
    # per_pair: one p2 draw per pair, direction by a fair coin
    p2_mode: str = Field("per_direction", pattern="^(per_direction|per_pair)$")


class SchedulerParams(BaseModel):
    base_rate_default: int = Field(5, ge=0)
    stochastic_rate: float = Field(0.15, ge=0.0, le=1.0)


class RuntimeParams(BaseModel):
    """Agent-runtime and engine knobs."""
    feed_window: int = Field(10, ge=1)
    max_actions_per_session: int = Field(3, ge=1)
    retrieval_k: int = Field(8, ge=1)
    recency_weight: float = Field(0.25, ge=0.0)
    relevance_weight: float = Field(1.0, ge=0.0)
    recency_half_life_hours: float = Field(24.0, gt=0.0)
    recent_observations: int = Field(5, ge=1)
    workers: int = Field(0, ge=0)  # 0 = one per active agent, capped
    max_workers: int = Field(16, ge=1)


class PersonaParams(BaseModel):
    dataset_path: Optional[str] = None
    # item index (1-based) -> [value-name, reverse-scored?]
    scoring_map: Optional[Dict[int, Tuple[str, bool]]] = None
    age_bins: List[int] = Field(default_factory=lambda: [18, 30, 40, 50, 60, 70, 80])
    ipsatize: bool = False
    num_anecdotes: int = Field(3, ge=1)
    response_scale: Tuple[int, int] = (1, 6)


class CustomQuestion(BaseModel):
    id: str = Field(..., pattern=r"^[a-z][a-z0-9_]*$")
    prompt: str = Field(..., min_length=1)
    scale_min: int = 1
    scale_max: int = 10


class SurveyParams(BaseModel):
    include_candidates: bool = False
    include_malicious: bool = True
    survey_as_memory: bool = False
    custom_questions: List[CustomQuestion] = Field(default_factory=list)


class LLMSettings(BaseModel):
    """Remote chat-completion settings. Decoding defaults are assumptions."""
    endpoint: str = "https://api.openai.com/v1"
    model: str = "gpt-4o-mini"
    temperature: float = Field(1.0, ge=0.0, le=2.0)
    max_tokens: int = Field(512, ge=1)
    max_retries: int = Field(5, ge=1)
    backoff_base_seconds: float = Field(1.0, ge=0.0)
    backoff_cap_seconds: float = Field(30.0, ge=0.0)
    requests_per_minute: int = Field(500, ge=1)
    timeout_seconds: float = Field(60.0, gt=0.0)
    api_key_env: str = "MASTOSIM_LLM_API_KEY"


class ScenarioConfig(BaseModel):
    """Full experiment definition. Immutable once loaded."""
    model_config = {"frozen": True}

    episodes_per_day: int = Field(48, ge=1)
    episode_minutes: int = Field(30, ge=1)
    num_agents: Optional[int] = None
    seed: int = Field(0, ge=0, lt=2**64)
    start_time: datetime = datetime(2024, 11, 4, 7, 0)
    graph_params: GraphParams = Field(default_factory=GraphParams)
    scheduler_params: SchedulerParams = Field(default_factory=SchedulerParams)
    shared_context: List[str] = Field(default_factory=list)
    mastodon_usage_instructions: List[str] = Field(default_factory=list)
    agents: List[AgentSpec]
    experiment_variant: ExperimentVariant = ExperimentVariant.CONTROL
    runtime: RuntimeParams = Field(default_factory=RuntimeParams)
    persona: PersonaParams = Field(default_factory=PersonaParams)
    survey: SurveyParams = Field(default_factory=SurveyParams)
    llm: LLMSettings = Field(default_factory=LLMSettings)

    @model_validator(mode="after")
    def _check_invariants(self) -> "ScenarioConfig":
        if self.scheduler_params.base_rate_default > self.episodes_per_day:
            raise ValueError(
                f"base_rate_default ({self.scheduler_params.base_rate_default}) "
                f"must be <= episodes_per_day ({self.episodes_per_day})"
            )
        names = [a.name for a in self.agents]
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise ValueError(f"agent names must be unique, duplicated: {duplicates}")
        candidates = [a for a in self.agents if a.role == Role.CANDIDATE]
        if len(candidates) != 2:
            raise ValueError(
                f"exactly two agents must have role=candidate, got {len(candidates)}"
            )
        if candidates[0].first_name.lower() == candidates[1].first_name.lower():
            raise ValueError("candidates must have distinct first names")
        malicious = [a for a in self.agents if a.role == Role.MALICIOUS]
        if len(malicious) > 1:
            raise ValueError(
                f"at most one agent may have role=malicious, got {len(malicious)}"
            )
        for agent in self.agents:
            if agent.base_rate is not None and agent.base_rate > self.episodes_per_day:
                raise ValueError(
                    f"agent {agent.name!r}: base_rate ({agent.base_rate}) must be "
                    f"<= episodes_per_day ({self.episodes_per_day})"
                )
        if self.num_agents is not None and self.num_agents != len(self.agents):
            raise ValueError(
                f"num_agents ({self.num_agents}) does not match the "
                f"{len(self.agents)} listed agents"
            )
        return self

    @property
    def candidates(self) -> List[AgentSpec]:
        return [a for a in self.agents if a.role == Role.CANDIDATE]

    @property
    def candidate_names(self) -> List[str]:
        return [a.name for a in self.candidates]

    @property
    def agent_count(self) -> int:
        return len(self.agents)

    def base_rate_for(self, agent: AgentSpec) -> int:
        if agent.base_rate is not None:
            return agent.base_rate
        return self.scheduler_params.base_rate_default

    def agent_by_name(self, name: str) -> AgentSpec:
        for agent in self.agents:
            if agent.name == name:
                return agent
        raise KeyError(name)


# ========================================
# Loading
# ========================================

def _first_error(exc: ValidationError) -> str:
    err = exc.errors()[0]
    location = ".".join(str(p) for p in err.get("loc", ()))
    message = err.get("msg", str(exc)).removeprefix("Value error, ")
    return f"{location}: {message}" if location else message


def parse_scenario(data: Dict[str, Any]) -> ScenarioConfig:
    """Validate an already-parsed mapping into a ScenarioConfig."""
    if not isinstance(data, dict):
        raise ScenarioParseError("scenario document must be a mapping at top level")
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as e:
        raise ScenarioValidationError(_first_error(e)) from e


def load_scenario(path) -> ScenarioConfig:
    """
    Load and validate a scenario file.

    Args:
        path: Path to a YAML scenario document

    Returns:
        Validated ScenarioConfig with all defaults applied

    Raises:
        ScenarioParseError: If the file is missing or is not well-formed YAML
        ScenarioValidationError: If an invariant is violated (message names it)
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise ScenarioParseError(f"cannot read scenario {path}: {e}") from e
    try:
        data = yaml.safe_load(raw.decode("utf-8"))
    except (yaml.YAMLError, UnicodeDecodeError) as e:
        raise ScenarioParseError(f"malformed scenario {path}: {e}") from e

    config = parse_scenario(data)
    logger.info(
        f"Loaded scenario {path.name}: {config.agent_count} agents, "
        f"variant={config.experiment_variant.value}, seed={config.seed}"
    )
    return config


def scenario_to_yaml(config: ScenarioConfig) -> str:
    """Serialise a config so that load_scenario(...) yields an equal config."""
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False, allow_unicode=True)


def config_hash(config: ScenarioConfig) -> str:
    """SHA-256 of the canonical JSON form of the config."""
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ========================================
# Built-in Storhampton scenario
# ========================================

def fill_candidate_placeholders(text: str, conservative: str, progressive: str) -> str:
    return text.replace(CONSERVATIVE_PLACEHOLDER, conservative).replace(
        PROGRESSIVE_PLACEHOLDER, progressive
    )


def _voter_name(i: int) -> Tuple[str, str]:
    first, gender = _VOTER_FIRST_NAMES[i % len(_VOTER_FIRST_NAMES)]
    surname = _VOTER_SURNAMES[(i + i // len(_VOTER_FIRST_NAMES)) % len(_VOTER_SURNAMES)]
    return f"{first} {surname}", gender


def builtin_storhampton_scenario(
    variant,
    n: int = 20,
    trait_mode=TraitMode.BIG5_RANDOM,
    seed: int = 0,
) -> ScenarioConfig:
    """
    Build one of the Storhampton election experiments.

    Args:
        variant: control | bias | malicious | bias_malicious
        n: Total number of agents including both candidates (>= 3)
        trait_mode: Trait source for every agent (candidates included)
        seed: Root seed stored in the config

    Returns:
        ScenarioConfig with two candidates and n-2 other agents
    """
    variant = ExperimentVariant(variant)
    trait_mode = TraitMode(trait_mode)
    if n < 3:
        raise ValueError(f"n must be >= 3, got {n}")

    bill_name, bradley_name = BILL[0], BRADLEY[0]
    shared_context = [
        fill_candidate_placeholders(t, bill_name, bradley_name)
        for t in SHARED_CONTEXT_TEMPLATES
    ]
    biased = variant in (ExperimentVariant.BIAS, ExperimentVariant.BIAS_MALICIOUS)
    has_malicious = variant in (ExperimentVariant.MALICIOUS, ExperimentVariant.BIAS_MALICIOUS)

    agents: List[AgentSpec] = [
        AgentSpec(
            name=name, gender=gender, age=age, role=Role.CANDIDATE,
            goal=CANDIDATE_GOAL, policy_proposal=proposal, trait_mode=trait_mode,
        )
        for (name, gender, age), proposal in ((BILL, BILL_PROPOSAL), (BRADLEY, BRADLEY_PROPOSAL))
    ]

    for i in range(n - 2):
        name, gender = _voter_name(i)
        age = _VOTER_AGES[i % len(_VOTER_AGES)]
        is_malicious = has_malicious and name.split()[0] == MALICIOUS_VOTER_FIRST_NAME and i == 0
        if is_malicious:
            agents.append(AgentSpec(
                name=name, gender=gender, age=age, role=Role.MALICIOUS,
                goal=fill_candidate_placeholders(MALICIOUS_GOAL_TEMPLATE, bill_name, bradley_name),
                base_rate=10, trait_mode=trait_mode,
            ))
        else:
            agents.append(AgentSpec(
                name=name, gender=gender, age=age, role=Role.VOTER,
                goal=BENIGN_GOAL,
                extra_context=[BIAS_CONTEXT] if biased else [],
                trait_mode=trait_mode,
            ))

    persona = PersonaParams()
    if trait_mode == TraitMode.SCHWARTZ_SAMPLED:
        persona = PersonaParams(dataset_path=str(default_dataset_path()))

    return ScenarioConfig(
        num_agents=n,
        seed=seed,
        shared_context=shared_context,
        mastodon_usage_instructions=list(MASTODON_USAGE_INSTRUCTIONS),
        agents=agents,
        experiment_variant=variant,
        persona=persona,
    )


def default_dataset_path() -> Path:
    """The shipped synthetic value-survey fixture."""
    return Path(__file__).resolve().parent.parent / "data" / "pvq20_fixture.csv"
