"""
Mastosim command line

    python run.py run --variant malicious --seed 7 --rules rules/storhampton_demo.yaml --out runs/m7
    python run.py resume --checkpoint runs/m7/checkpoint.json --rules rules/storhampton_demo.yaml
    python run.py export --checkpoint runs/m7/checkpoint.json --formats csv,svg
    python run.py validate --config scenarios/storhampton.yaml
    python run.py graph-stats --variant control --seeds 500

Exit codes: 0 ok, 2 configuration, 3 LLM backend, 4 platform or output, 5 internal.
Remote credentials come only from environment variables.
"""

import argparse
import logging
import math
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from colorama import Fore, Style, init as colorama_init

from src import engine
from src.export import ALL_FORMATS, ExportError, export
from src.llm_backend import (
    LLMError,
    NoMatchingRuleError,
    ScriptedRulesError,
    build_backend,
)
from src.persona import PersonaError
from src.scenario import (
    ExperimentVariant,
    ScenarioConfig,
    ScenarioError,
    TraitMode,
    builtin_storhampton_scenario,
    load_scenario,
    parse_scenario,
)
from src.scheduler import RngStreams
from src.social_platform import (
    PlatformError,
    expected_pair_frequencies,
    graph_pair_stats,
    init_follow_graph,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BACKEND = 3
EXIT_PLATFORM = 4
EXIT_INTERNAL = 5


class UsageError(ValueError):
    """Bad command-line arguments that argparse cannot catch."""


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the documented exit code."""
    if isinstance(exc, (ScenarioError, PersonaError, ScriptedRulesError,
                        NoMatchingRuleError, engine.CheckpointError, UsageError)):
        return EXIT_CONFIG
    if isinstance(exc, LLMError):
        return EXIT_BACKEND
    if isinstance(exc, (PlatformError, ExportError, OSError)):
        return EXIT_PLATFORM
    return EXIT_INTERNAL


# ========================================
# Console output
# ========================================

def print_status(message: str, color: str = Fore.CYAN) -> None:
    print(f"{color}{message}{Style.RESET_ALL}")


def print_metric(label: str, value, unit: str = "", color: str = Fore.WHITE) -> None:
    print(f"  {color}• {label:.<40} {Style.BRIGHT}{value} {unit}{Style.RESET_ALL}")


def print_error(message: str) -> None:
    print(f"{Fore.RED}{Style.BRIGHT}error:{Style.RESET_ALL} {message}", file=sys.stderr)


# ========================================
# Shared argument handling
# ========================================

def _scenario_from_args(args) -> ScenarioConfig:
    if getattr(args, "config", None):
        config = load_scenario(args.config)
    else:
        config = builtin_storhampton_scenario(
            args.variant, n=args.agents, trait_mode=args.trait_mode,
        )
    if getattr(args, "seed", None) is not None:
        config = config.model_copy(update={"seed": args.seed})
    return config


def _backend_from_args(args, config: ScenarioConfig):
    if args.backend == "scripted" and not args.rules:
        raise UsageError("--rules is required with --backend scripted")
    return build_backend(args.backend, rules_path=args.rules, settings=config.llm)


def _formats(value: str) -> List[str]:
    formats = [f.strip() for f in value.split(",") if f.strip()]
    unknown = sorted(set(formats) - set(ALL_FORMATS))
    if unknown:
        raise UsageError(f"unknown export formats: {unknown}; choose from {', '.join(ALL_FORMATS)}")
    return formats


def _add_scenario_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, help="Scenario YAML (default: builtin Storhampton)")
    p.add_argument(
        "--variant", type=str, default="control",
        choices=[v.value for v in ExperimentVariant],
        help="Builtin scenario variant when --config is not given (default: control)",
    )
    p.add_argument("--agents", type=int, default=20, help="Builtin scenario size N (default: 20)")
    p.add_argument(
        "--trait-mode", type=str, default=TraitMode.BIG5_RANDOM.value,
        choices=[m.value for m in TraitMode], help="Builtin scenario trait source",
    )


def _add_backend_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", type=str, default="scripted", choices=["scripted", "remote"])
    p.add_argument("--rules", type=str, help="Scripted rules YAML (required for scripted)")
    p.add_argument("--workers", type=int, help="Worker threads (0 = auto, 1 = serial)")
    p.add_argument("--no-progress", action="store_true", help="Disable the progress bar")


# ========================================
# Commands
# ========================================

def cmd_run(args) -> int:
    config = _scenario_from_args(args)
    llm = _backend_from_args(args, config)

    platform = None
    formats = _formats(args.formats)
    if args.mastodon_url:
        from src.mastodon_client import MastodonRestClient

        platform = MastodonRestClient.from_env(args.mastodon_url, config.start_time, config.episode_minutes)
        formats = [f for f in formats if f != "timelines"]

    print_status(
        f"Running {config.experiment_variant.value} scenario: "
        f"{config.agent_count} agents, seed {config.seed}"
    )
    artifacts = engine.run_simulation(
        config, llm, out_dir=args.out, platform=platform, workers=args.workers,
        stop_after=args.stop_after, progress=not args.no_progress,
    )
    engine.record_exports(args.out, export(artifacts, args.out, formats))
    _print_summary(artifacts)
    return EXIT_OK


def cmd_resume(args) -> int:
    body = engine.read_checkpoint(args.checkpoint)
    config = parse_scenario(body["config"])
    llm = _backend_from_args(args, config)
    artifacts = engine.resume(
        args.checkpoint, llm, workers=args.workers, progress=not args.no_progress,
    )
    run_dir = Path(args.checkpoint).parent
    engine.record_exports(run_dir, export(artifacts, run_dir, _formats(args.formats)))
    _print_summary(artifacts)
    return EXIT_OK


def cmd_export(args) -> int:
    artifacts = engine.load_artifacts(args.checkpoint)
    out = args.out or Path(args.checkpoint).parent
    written = export(artifacts, out, _formats(args.formats))
    engine.record_exports(out, written)
    print_status(f"Exported {sum(len(v) for v in written.values())} files to {out}", Fore.GREEN)
    return EXIT_OK


def cmd_validate(args) -> int:
    config = load_scenario(args.config)
    print_status(f"✓ {args.config} is valid", Fore.GREEN)
    print_metric("Agents", config.agent_count)
    print_metric("Candidates", ", ".join(config.candidate_names))
    print_metric("Episodes", config.episodes_per_day)
    print_metric("Variant", config.experiment_variant.value)
    return EXIT_OK


def follow_graph_statistics(config: ScenarioConfig, seeds: int, base_seed: int = 0) -> Dict[str, float]:
    """Monte-Carlo pair statistics of the follow-graph initializer over many seeds."""
    if seeds < 1:
        raise ValueError(f"seeds must be >= 1, got {seeds}")
    ids = [str(i + 1) for i in range(config.agent_count)]
    by_name = {spec.name: ids[i] for i, spec in enumerate(config.agents)}
    candidate_ids = [by_name[c.name] for c in config.candidates]
    others = [i for i in ids if i not in candidate_ids]
    params = config.graph_params

    reciprocal, one_way, directed, in_degrees, self_edges = [], [], [], [], 0
    for k in range(seeds):
        rng = RngStreams(base_seed + k)["graph"]
        graph = init_follow_graph(ids, candidate_ids, params.p1, params.p2, rng, params.p2_mode)
        stats = graph_pair_stats(graph, others)
        reciprocal.append(stats["reciprocal_fraction"])
        one_way.append(stats["one_way_fraction"])
        directed.append(stats["directed_edges"])
        in_degrees += [len(graph.followers(c)) for c in candidate_ids]
        self_edges += sum(1 for s, d in graph.edges if s == d)

    expected = expected_pair_frequencies(params.p1, params.p2, params.p2_mode)
    pairs = len(others) * (len(others) - 1) // 2
    return {
        "seeds": seeds,
        "reciprocal_mean": float(np.mean(reciprocal)),
        "reciprocal_expected": expected["reciprocal"],
        "reciprocal_se": float(np.std(reciprocal) / math.sqrt(seeds)),
        "one_way_mean": float(np.mean(one_way)),
        "one_way_expected": expected["one_way"],
        "one_way_se": float(np.std(one_way) / math.sqrt(seeds)),
        "directed_mean": float(np.mean(directed)),
        "directed_expected": pairs * expected["directed_per_pair"],
        "directed_se": float(np.std(directed) / math.sqrt(seeds)),
        "candidate_in_degree_min": int(min(in_degrees)),
        "candidate_in_degree_max": int(max(in_degrees)),
        "candidate_in_degree_expected": config.agent_count - 1,
        "self_edges": self_edges,
    }


def cmd_graph_stats(args) -> int:
    config = _scenario_from_args(args)
    stats = follow_graph_statistics(config, args.seeds, config.seed)
    print_status(f"Follow-graph statistics over {args.seeds} seeds (N={config.agent_count})")
    for key in ("reciprocal", "one_way", "directed"):
        mean, exp, se = stats[f"{key}_mean"], stats[f"{key}_expected"], stats[f"{key}_se"]
        ok = abs(mean - exp) <= 3 * se if se > 0 else math.isclose(mean, exp)
        color = Fore.GREEN if ok else Fore.RED
        print_metric(key.replace("_", "-"), f"{mean:.4f} (expected {exp:.4f}, se {se:.4f})", "", color)
    degree = (stats["candidate_in_degree_min"], stats["candidate_in_degree_max"])
    print_metric("candidate in-degree", f"{degree[0]}..{degree[1]} (expected {stats['candidate_in_degree_expected']})")
    print_metric("self edges", stats["self_edges"])
    return EXIT_OK


def _print_summary(artifacts) -> None:
    color = Fore.GREEN if artifacts.finished else Fore.YELLOW
    print_status(f"✓ {artifacts.completed_episodes} episodes completed", color)
    print_metric("Platform events", len(artifacts.events))
    print_metric("Survey records", len(artifacts.survey))
    if artifacts.analytics:
        final = artifacts.analytics[-1]
        for name, share in final.vote_share.items():
            print_metric(f"Final vote share {name}", f"{share:.2%}")
    if artifacts.out_dir is not None:
        print_metric("Artifacts", str(artifacts.out_dir))


# ========================================
# Parser
# ========================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mastosim",
        description="Generative-agent election simulation on a Mastodon-compatible platform",
    )
    parser.add_argument(
        "--log-level", type=str, default="info",
        choices=["debug", "info", "warning", "error"], help="Logging level (default: info)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="Run a simulation")
    _add_scenario_args(p)
    _add_backend_args(p)
    p.add_argument("--seed", type=int, help="Override the scenario seed")
    p.add_argument("--out", type=str, required=True, help="Run directory")
    p.add_argument("--stop-after", type=int, help="Stop once this many episodes are complete")
    p.add_argument("--formats", type=str, default=",".join(ALL_FORMATS), help="Export formats")
    p.add_argument("--mastodon-url", type=str, help="Real Mastodon server (tokens from $MASTOSIM_MASTODON_TOKENS)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("resume", help="Continue a run from its checkpoint")
    p.add_argument("--checkpoint", type=str, required=True)
    _add_backend_args(p)
    p.add_argument("--formats", type=str, default=",".join(ALL_FORMATS), help="Export formats")
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("export", help="Export artifacts from a checkpoint")
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--out", type=str, help="Output directory (default: the run directory)")
    p.add_argument("--formats", type=str, default=",".join(ALL_FORMATS), help="Export formats")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("validate", help="Validate a scenario file")
    p.add_argument("--config", type=str, required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("graph-stats", help="Follow-graph statistics against analytic expectations")
    _add_scenario_args(p)
    p.add_argument("--seeds", type=int, default=500, help="Number of seeds (default: 500)")
    p.add_argument("--seed", type=int, help="First seed (default: scenario seed)")
    p.set_defaults(func=cmd_graph_stats)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=getattr(logging, args.log_level.upper()),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    colorama_init()

    try:
        return args.func(args)
    except Exception as e:
        code = exit_code_for(e)
        if code == EXIT_INTERNAL:
            logger.exception("Unexpected failure")
        print_error(str(e))
        return code
