"""
Exporters

Writes a run's artifacts in analysis-friendly formats:

    survey.csv                 episode, agent, vote, vote_failed, fav_<candidate>..., q_<id>...
    analytics.csv              episode, share_<c>..., share_undecided, mean_fav_<c>...,
                               <event kind>..., mentions_<c>..., polled, active, edges
    graphs/episode_XXX.gexf    follow graph per episode; node attrs: name, role, vote,
                               active; edge attr: active (source active this episode)
    chart.svg                  vote share and mean favorability over episodes
    timelines/<username>.txt   each agent's final home timeline

All outputs are byte-identical for identical artifacts.
"""

import logging
import re
from pathlib import Path
from typing import Dict, Iterable, List, Optional

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import networkx as nx
import pandas as pd

from src.measurement import UNDECIDED
from src.social_platform import ACTIVITY_KINDS, replay_events

logger = logging.getLogger(__name__)

ALL_FORMATS = ("csv", "gexf", "svg", "timelines")
TIMELINE_LIMIT = 40

_GEXF_DATE_RE = re.compile(r'lastmodifieddate="[^"]*"')


class ExportError(RuntimeError):
    """An output could not be written."""


def _slug(name: str) -> str:
    return "_".join(name.lower().split())


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


# ========================================
# Tables
# ========================================

def survey_frame(artifacts) -> pd.DataFrame:
    candidates = artifacts.config.candidate_names
    question_ids = [q.id for q in artifacts.config.survey.custom_questions]
    rows = []
    for r in artifacts.survey:
        row = {"episode": r.episode, "agent": r.agent, "vote": r.vote, "vote_failed": r.vote_failed}
        for c in candidates:
            row[f"fav_{_slug(c)}"] = r.favorability.get(c)
        for q in question_ids:
            row[f"q_{q}"] = r.custom.get(q)
        rows.append(row)
    columns = ["episode", "agent", "vote", "vote_failed"]
    columns += [f"fav_{_slug(c)}" for c in candidates] + [f"q_{q}" for q in question_ids]
    frame = pd.DataFrame(rows, columns=columns)
    # missing answers stay empty cells, present ones print as integers
    for col in columns[4:]:
        frame[col] = frame[col].astype("Int64")
    return frame


def analytics_frame(artifacts) -> pd.DataFrame:
    candidates = artifacts.config.candidate_names
    rows = []
    for s in artifacts.analytics:
        row = {"episode": s.episode}
        for c in candidates:
            row[f"share_{_slug(c)}"] = s.vote_share[c]
        row["share_undecided"] = s.vote_share[UNDECIDED]
        for c in candidates:
            row[f"mean_fav_{_slug(c)}"] = s.mean_favorability[c]
        for kind in ACTIVITY_KINDS:
            row[kind.value] = s.activity_counts.get(kind.value, 0)
        for c in candidates:
            row[f"mentions_{_slug(c)}"] = s.candidate_mentions[c]
        row["polled"] = s.polled
        row["active"] = len(s.active_accounts)
        row["edges"] = len(s.edges)
        rows.append(row)
    return pd.DataFrame(rows)


def write_tables(artifacts, out_dir: Path) -> List[Path]:
    paths = [out_dir / "survey.csv", out_dir / "analytics.csv"]
    survey_frame(artifacts).to_csv(paths[0], index=False, lineterminator="\n")
    analytics_frame(artifacts).to_csv(paths[1], index=False, lineterminator="\n", float_format="%.6f")
    return paths


# ========================================
# Graphs
# ========================================

def episode_graph(artifacts, snapshot) -> nx.DiGraph:
    """Follow graph at the end of one episode with vote and activity attributes."""
    votes = {r.agent: r.vote for r in artifacts.survey if r.episode == snapshot.episode}
    active = set(snapshot.active_accounts)
    graph = nx.DiGraph()
    for spec in artifacts.config.agents:
        account = artifacts.accounts[spec.name]
        graph.add_node(
            account, label=spec.name, role=spec.role.value,
            vote=votes.get(spec.name, UNDECIDED), active=account in active,
        )
    for src, dst in snapshot.edges:
        graph.add_edge(src, dst, active=src in active)
    return graph


def gexf_text(graph: nx.DiGraph, date: str) -> str:
    """GEXF with a fixed modification date."""
    text = "\n".join(nx.generate_gexf(graph)) + "\n"
    return _GEXF_DATE_RE.sub(f'lastmodifieddate="{date}"', text, count=1)


def write_graphs(artifacts, out_dir: Path) -> List[Path]:
    graph_dir = out_dir / "graphs"
    graph_dir.mkdir(parents=True, exist_ok=True)
    date = artifacts.config.start_time.date().isoformat()
    paths = []
    for snapshot in artifacts.analytics:
        path = graph_dir / f"episode_{snapshot.episode:03d}.gexf"
        _write(path, gexf_text(episode_graph(artifacts, snapshot), date))
        paths.append(path)
    return paths


# ========================================
# Chart
# ========================================

def write_chart(artifacts, out_dir: Path) -> Path:
    """Vote share (top) and mean favorability (bottom) per episode as SVG."""
    candidates = artifacts.config.candidate_names
    episodes = [s.episode for s in artifacts.analytics]
    path = out_dir / "chart.svg"

    with plt.rc_context({"svg.hashsalt": "mastosim", "svg.fonttype": "none"}):
        fig, (ax_vote, ax_fav) = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
        for c in candidates:
            ax_vote.plot(episodes, [s.vote_share[c] for s in artifacts.analytics], label=c)
        ax_vote.plot(
            episodes, [s.vote_share[UNDECIDED] for s in artifacts.analytics],
            label="Undecided", color="black",
        )
        ax_vote.set_ylabel("Vote share")
        ax_vote.set_ylim(0, 1)
        ax_vote.legend(loc="upper right")

        for c in candidates:
            values = [s.mean_favorability[c] for s in artifacts.analytics]
            ax_fav.plot(episodes, [float("nan") if v is None else v for v in values], label=c)
        ax_fav.set_ylabel("Mean favorability")
        ax_fav.set_ylim(1, 10)
        ax_fav.set_xlabel("Episode")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path


# ========================================
# Timelines
# ========================================

def write_timelines(artifacts, out_dir: Path) -> List[Path]:
    """Each agent's home timeline at the end of the run, rebuilt from the event log."""
    config = artifacts.config
    platform = replay_events(artifacts.events, config.start_time, config.episode_minutes)
    names = {a.id: a for a in platform.list_accounts()}
    timeline_dir = out_dir / "timelines"
    timeline_dir.mkdir(parents=True, exist_ok=True)

    paths = []
    for spec in config.agents:
        lines = [f"Home timeline of {spec.name} (@{spec.username})", ""]
        for toot in platform.get_home_timeline(artifacts.accounts[spec.name], TIMELINE_LIMIT):
            author = names[toot.author]
            stamp = f"{toot.created_at:%Y-%m-%d %H:%M}"
            if toot.boost_of is not None:
                original = platform.get_toot(toot.boost_of)
                lines.append(
                    f"{stamp}  {author.display_name} boosted "
                    f"{names[original.author].display_name}: {original.text}"
                )
            else:
                lines.append(f"{stamp}  {author.display_name}: {toot.text}")
        path = timeline_dir / f"{spec.username}.txt"
        _write(path, "\n".join(lines) + "\n")
        paths.append(path)
    return paths


def export(artifacts, out_dir, formats: Optional[Iterable[str]] = None) -> Dict[str, List[Path]]:
    """
    Write the requested formats (default: all).

    Raises:
        ValueError: Unknown format
        ExportError: The directory or a file cannot be written
    """
    formats = list(formats or ALL_FORMATS)
    unknown = sorted(set(formats) - set(ALL_FORMATS))
    if unknown:
        raise ValueError(f"unknown export formats: {unknown}; choose from {ALL_FORMATS}")
    out_dir = Path(out_dir)
    written: Dict[str, List[Path]] = {}
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        if "csv" in formats:
            written["csv"] = write_tables(artifacts, out_dir)
        if "gexf" in formats:
            written["gexf"] = write_graphs(artifacts, out_dir)
        if "svg" in formats:
            written["svg"] = [write_chart(artifacts, out_dir)]
        if "timelines" in formats:
            written["timelines"] = write_timelines(artifacts, out_dir)
    except OSError as e:
        raise ExportError(f"cannot write to {out_dir}: {e}") from e
    logger.info(f"Exported {sum(len(v) for v in written.values())} files to {out_dir}")
    return written
