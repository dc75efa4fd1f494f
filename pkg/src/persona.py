"""
Persona Generation

Produces each agent's quantified trait set (random Big-5, or Schwartz values
sampled from demographically identical survey respondents), a backstory, and
the formative memories that seed the agent before the simulation starts.

Pipeline:
1. Trait set: random Big-5 or score a sampled respondent's 20 survey items
2. Anecdotes: the LLM writes autobiographical episodes conditioned on the persona
3. Backstory: the LLM summarises the anecdotes into a complete life story
4. Memories: anecdotes, backstory, goal, context and shared texts become
   timestamped formative MemoryRecords
"""

import logging
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.memory import MemoryRecord
from src.llm_backend import CompletionRequest, PromptKind
from src.prompts import render_prompt
from src.scenario import AgentSpec, Role, ScenarioConfig, TraitMode

logger = logging.getLogger(__name__)

BIG5_TRAITS = (
    "openness", "conscientiousness", "extraversion", "agreeableness", "neuroticism",
)
BIG5_RANGE = (1, 10)

SCHWARTZ_VALUES = (
    "self-direction", "stimulation", "hedonism", "achievement", "power",
    "security", "conformity", "tradition", "benevolence", "universalism",
)
NUM_SURVEY_ITEMS = 20

# Item -> value assignment of the 20-item portrait questionnaire (two items per
# value, none reverse-scored). Overridable from the scenario file.
DEFAULT_SCORING_MAP: Dict[int, Tuple[str, bool]] = {
    1: ("self-direction", False), 11: ("self-direction", False),
    2: ("power", False), 12: ("power", False),
    3: ("universalism", False), 13: ("universalism", False),
    4: ("achievement", False), 14: ("achievement", False),
    5: ("security", False), 15: ("security", False),
    6: ("stimulation", False), 16: ("stimulation", False),
    7: ("conformity", False), 17: ("conformity", False),
    8: ("benevolence", False), 18: ("benevolence", False),
    9: ("tradition", False), 19: ("tradition", False),
    10: ("hedonism", False), 20: ("hedonism", False),
}


class PersonaError(ValueError):
    """Base class for persona pipeline errors."""


class SurveyScoringError(PersonaError):
    """Missing or out-of-range survey answers."""


class EmptyDemographicCellError(PersonaError):
    """No respondent matches the requested (age bucket, gender)."""


@dataclass
class TraitSet:
    """Quantified persona traits with their provenance."""
    scheme: str  # "big5" | "schwartz"
    scores: Dict[str, float]
    provenance: str = "random"  # "random" | "sampled"
    respondent_id: Optional[str] = None

    def __post_init__(self):
        if self.scheme not in ("big5", "schwartz"):
            raise PersonaError(f"unknown trait scheme: {self.scheme}")
        expected = BIG5_TRAITS if self.scheme == "big5" else SCHWARTZ_VALUES
        if set(self.scores) != set(expected):
            raise PersonaError(f"{self.scheme} trait set must have exactly {expected}")
        # canonical order, whatever order the input (e.g. sorted JSON) used
        self.scores = {name: self.scores[name] for name in expected}

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "scores": dict(self.scores),
            "provenance": self.provenance,
            "respondent_id": self.respondent_id,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TraitSet":
        return cls(**data)


@dataclass
class Respondent:
    id: str
    age: int
    gender: str
    answers: List[int]


@dataclass
class SurveyDataset:
    """Value-survey respondents plus the item scoring map."""
    respondents: List[Respondent]
    scoring_map: Dict[int, Tuple[str, bool]] = field(
        default_factory=lambda: dict(DEFAULT_SCORING_MAP)
    )

    def __post_init__(self):
        validate_scoring_map(self.scoring_map)


@dataclass
class FormativeMemories:
    backstory: str
    memories: List[MemoryRecord]


def validate_scoring_map(scoring_map: Dict[int, Tuple[str, bool]]) -> None:
    """Every item maps to one of the 10 values; each value gets exactly 2 items."""
    if sorted(scoring_map) != list(range(1, NUM_SURVEY_ITEMS + 1)):
        raise PersonaError(f"scoring map must cover items 1..{NUM_SURVEY_ITEMS}")
    counts = {v: 0 for v in SCHWARTZ_VALUES}
    for item, (value, _reverse) in scoring_map.items():
        if value not in counts:
            raise PersonaError(f"item {item} maps to unknown value {value!r}")
        counts[value] += 1
    uneven = {v: c for v, c in counts.items() if c != 2}
    if uneven:
        raise PersonaError(f"each value needs exactly 2 items, got {uneven}")


def score_survey_responses(
    answers: Sequence[int],
    scoring_map: Optional[Dict[int, Tuple[str, bool]]] = None,
    response_scale: Tuple[int, int] = (1, 6),
    ipsatize: bool = False,
) -> Dict[str, float]:
    """
    Turn 20 item responses into one score per Schwartz value.

    Args:
        answers: Responses in item order (item 1 first)
        scoring_map: item -> (value, reverse-scored?)
        response_scale: Inclusive (min, max) of the answer scale
        ipsatize: Subtract the respondent's mean answer from every score

    Returns:
        Ordered map value -> mean of that value's (reverse-corrected) items

    Raises:
        SurveyScoringError: Missing item or out-of-range response
    """
    scoring_map = scoring_map or DEFAULT_SCORING_MAP
    lo, hi = response_scale
    if len(answers) != NUM_SURVEY_ITEMS:
        raise SurveyScoringError(
            f"expected {NUM_SURVEY_ITEMS} answers, got {len(answers)} (missing item)"
        )
    for i, a in enumerate(answers, start=1):
        if a is None or not lo <= a <= hi:
            raise SurveyScoringError(f"item {i}: response {a!r} outside [{lo}, {hi}]")

    items: Dict[str, List[float]] = {v: [] for v in SCHWARTZ_VALUES}
    for item, (value, reverse) in scoring_map.items():
        raw = answers[item - 1]
        items[value].append(float(lo + hi - raw) if reverse else float(raw))

    scores = {v: float(np.mean(items[v])) for v in SCHWARTZ_VALUES}
    if ipsatize:
        center = float(np.mean(answers))
        scores = {v: s - center for v, s in scores.items()}
    return scores


def load_survey_dataset(path, scoring_map=None) -> SurveyDataset:
    """
    Read respondents from a delimited file.

    Column order: id, age, gender, q1 .. q20 (header row required).
    """
    frame = pd.read_csv(path, dtype={"id": str, "gender": str})
    expected = ["id", "age", "gender"] + [f"q{i}" for i in range(1, NUM_SURVEY_ITEMS + 1)]
    missing = [c for c in expected if c not in frame.columns]
    if missing:
        raise PersonaError(f"{path}: missing columns {missing}")

    item_cols = expected[3:]
    respondents = [
        Respondent(
            id=str(row.id),
            age=int(row.age),
            gender=str(row.gender).strip().lower(),
            answers=[int(getattr(row, c)) for c in item_cols],
        )
        for row in frame.itertuples(index=False)
    ]
    logger.info(f"Loaded {len(respondents)} survey respondents from {Path(path).name}")
    return SurveyDataset(
        respondents=respondents,
        scoring_map=dict(scoring_map) if scoring_map else dict(DEFAULT_SCORING_MAP),
    )


def age_bucket(age: int, bins: Sequence[int]) -> str:
    """Map an age onto its bin label, e.g. 34 -> '30-39'; the last bin is open."""
    if age < bins[0]:
        return f"<{bins[0]}"
    for lo, hi in zip(bins, bins[1:]):
        if lo <= age < hi:
            return f"{lo}-{hi - 1}"
    return f"{bins[-1]}+"


def sample_trait_set(
    dataset: SurveyDataset,
    age: int,
    gender: str,
    rng: np.random.Generator,
    age_bins: Sequence[int] = (18, 30, 40, 50, 60, 70, 80),
    response_scale: Tuple[int, int] = (1, 6),
    ipsatize: bool = False,
) -> TraitSet:
    """
    Pick a demographically identical respondent uniformly at random and score it.

    Raises:
        EmptyDemographicCellError: No respondent in the (age bucket, gender) cell.
            The cell is never widened.
    """
    if not dataset.respondents:
        raise PersonaError("survey dataset is empty")
    bucket = age_bucket(age, age_bins)
    gender = gender.strip().lower()
    cell = [
        r for r in dataset.respondents
        if r.gender == gender and age_bucket(r.age, age_bins) == bucket
    ]
    if not cell:
        raise EmptyDemographicCellError(
            f"no respondent with gender={gender!r} in age bucket {bucket}"
        )
    chosen = cell[int(rng.integers(len(cell)))]
    scores = score_survey_responses(
        chosen.answers, dataset.scoring_map, response_scale=response_scale, ipsatize=ipsatize,
    )
    return TraitSet(scheme="schwartz", scores=scores, provenance="sampled", respondent_id=chosen.id)


def random_big5(rng: np.random.Generator) -> TraitSet:
    """Five Big-5 scores drawn uniformly from 1..10."""
    lo, hi = BIG5_RANGE
    draws = rng.integers(lo, hi + 1, size=len(BIG5_TRAITS))
    return TraitSet(
        scheme="big5",
        scores={t: float(v) for t, v in zip(BIG5_TRAITS, draws)},
        provenance="random",
    )


def build_trait_set(
    spec: AgentSpec,
    config: ScenarioConfig,
    rng: np.random.Generator,
    dataset: Optional[SurveyDataset] = None,
) -> TraitSet:
    """Dispatch on the agent's trait mode."""
    if spec.trait_mode == TraitMode.BIG5_RANDOM:
        return random_big5(rng)
    if dataset is None:
        raise PersonaError(f"agent {spec.name!r} needs a survey dataset for schwartz_sampled")
    return sample_trait_set(
        dataset, spec.age, spec.gender, rng,
        age_bins=config.persona.age_bins,
        response_scale=config.persona.response_scale,
        ipsatize=config.persona.ipsatize,
    )


def describe_traits(traits: TraitSet) -> str:
    label = "Big-5 personality" if traits.scheme == "big5" else "social values"
    rendered = ", ".join(f"{k}: {v:g}" for k, v in traits.scores.items())
    return f"{label} ({rendered})"


def persona_context(spec: AgentSpec, traits: TraitSet) -> str:
    """Short persona block reused by every prompt."""
    lines = [
        f"{spec.name} is a {spec.age}-year-old {spec.gender} living in Storhampton.",
        f"Traits: {describe_traits(traits)}.",
        f"Goal: {spec.goal}",
    ]
    lines += [f"Belief: {c}" for c in spec.extra_context]
    if spec.role == Role.CANDIDATE:
        lines.append(f"{spec.name} is running for mayor, campaigning on {spec.policy_proposal}")
    return "\n".join(lines)


def generate_formative_memories(
    spec: AgentSpec,
    traits: TraitSet,
    shared_context: Sequence[str],
    llm,
    start_time: datetime,
    num_anecdotes: int = 3,
    usage_instructions: Sequence[str] = (),
) -> FormativeMemories:
    """
    Generate anecdotes and a backstory, and turn everything into formative memories.

    Memory timestamps are synthetic dates spaced one year apart, all strictly
    before start_time. Order: anecdotes, backstory, goal/context, own proposal
    (candidates), shared context, platform usage instructions.
    """
    persona = persona_context(spec, traits)
    context_text = "\n".join(shared_context)

    anecdotes = []
    for i in range(num_anecdotes):
        prompt = render_prompt(
            "anecdote", persona=persona, context=context_text,
            name=spec.name, index=i + 1, total=num_anecdotes,
        )
        anecdotes.append(llm.complete(CompletionRequest(
            prompt_kind=PromptKind.ANECDOTE, agent_name=spec.name,
            prompt_text=prompt, phase="persona",
        )))

    backstory = llm.complete(CompletionRequest(
        prompt_kind=PromptKind.BACKSTORY, agent_name=spec.name,
        prompt_text=render_prompt(
            "backstory", persona=persona, name=spec.name, anecdotes="\n\n".join(anecdotes),
        ),
        phase="persona",
    ))

    texts: List[Tuple[str, str]] = [(a, "formative") for a in anecdotes]
    texts.append((backstory, "formative"))
    texts.append((f"{spec.name}'s goal: {spec.goal}", "formative"))
    texts += [(c, "formative") for c in spec.extra_context]
    if spec.role == Role.CANDIDATE:
        texts.append((f"{spec.name}'s policy proposal: {spec.policy_proposal}", "formative"))
    texts += [(c, "formative") for c in shared_context]
    texts += [(c, "formative") for c in usage_instructions]

    count = len(texts)
    memories = [
        MemoryRecord(
            timestamp=start_time - timedelta(days=365 * (count - i)),
            text=text,
            tags=frozenset({tag}),
        )
        for i, (text, tag) in enumerate(texts)
        if text.strip()
    ]
    logger.debug(f"{spec.name}: {len(memories)} formative memories")
    return FormativeMemories(backstory=backstory, memories=memories)
