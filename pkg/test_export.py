"""
Export formats: CSV tables, GEXF graphs, SVG chart, timelines
"""

import networkx as nx
import pandas as pd
import pytest

from conftest import demo_backend, small_scenario
from src.engine import run_simulation
from src.export import ALL_FORMATS, analytics_frame, export, survey_frame


@pytest.fixture(scope="module")
def artifacts():
    config = small_scenario(
        "malicious", n=5, episodes=3, seed=4,
        survey={"custom_questions": [{"id": "trust", "prompt": "How much does {name} trust the news?"}]},
    )
    return run_simulation(config, demo_backend())


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_survey_csv(artifacts, tmp_path):
    export(artifacts, tmp_path, ["csv"])
    frame = pd.read_csv(tmp_path / "survey.csv")
    assert list(frame.columns) == [
        "episode", "agent", "vote", "vote_failed",
        "fav_bill_fredrickson", "fav_bradley_carter", "q_trust",
    ]
    assert len(frame) == len(artifacts.survey)
    assert set(frame["q_trust"]) == {5}
    assert frame["fav_bill_fredrickson"].between(1, 10).all()


def test_analytics_csv(artifacts, tmp_path):
    export(artifacts, tmp_path, ["csv"])
    frame = pd.read_csv(tmp_path / "analytics.csv")
    assert list(frame["episode"]) == [0, 1, 2]
    for column in ("share_bill_fredrickson", "share_bradley_carter", "share_undecided",
                   "toot", "reply", "mentions_bill_fredrickson", "polled", "active", "edges"):
        assert column in frame.columns
    shares = frame[["share_bill_fredrickson", "share_bradley_carter", "share_undecided"]].sum(axis=1)
    assert shares.round(6).eq(1.0).all()


def test_frames_missing_answers_stay_empty(artifacts):
    frame = survey_frame(artifacts)
    assert str(frame["fav_bill_fredrickson"].dtype) == "Int64"
    assert len(analytics_frame(artifacts)) == len(artifacts.analytics)


def test_gexf_per_episode(artifacts, tmp_path):
    written = export(artifacts, tmp_path, ["gexf"])
    assert [p.name for p in written["gexf"]] == [f"episode_{e:03d}.gexf" for e in range(3)]
    snapshot = artifacts.analytics[-1]
    graph = nx.read_gexf(tmp_path / "graphs" / "episode_002.gexf")
    assert graph.is_directed()
    assert graph.number_of_nodes() == artifacts.config.agent_count
    assert graph.number_of_edges() == len(snapshot.edges)
    votes = {r.agent: r.vote for r in artifacts.survey if r.episode == 2}
    glenn = artifacts.accounts["Glenn Patterson"]
    assert graph.nodes[glenn]["role"] == "malicious"
    assert graph.nodes[glenn]["vote"] == votes["Glenn Patterson"]
    date = artifacts.config.start_time.date().isoformat()
    assert f'lastmodifieddate="{date}"' in (tmp_path / "graphs" / "episode_000.gexf").read_text(encoding="utf-8")


def test_chart_svg(artifacts, tmp_path):
    written = export(artifacts, tmp_path, ["svg"])
    text = written["svg"][0].read_text(encoding="utf-8")
    assert text.lstrip().startswith("<?xml")
    assert "<svg" in text
    assert "Vote share" in text


def test_timelines(artifacts, tmp_path):
    written = export(artifacts, tmp_path, ["timelines"])
    names = sorted(p.name for p in written["timelines"])
    assert names == sorted(f"{a.username}.txt" for a in artifacts.config.agents)
    bill = (tmp_path / "timelines" / "bill_fredrickson.txt").read_text(encoding="utf-8")
    assert bill.startswith("Home timeline of Bill Fredrickson (@bill_fredrickson)")


def test_export_is_byte_identical(artifacts, tmp_path):
    export(artifacts, tmp_path / "a")
    export(artifacts, tmp_path / "b")
    first, second = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    assert first == second
    assert {"survey.csv", "analytics.csv", "chart.svg"} <= set(first)
    print(f"✓ {len(first)} exported files identical across exports")


def test_unknown_format(artifacts, tmp_path):
    with pytest.raises(ValueError, match="unknown export formats"):
        export(artifacts, tmp_path, ["csv", "pdf"])
    assert set(ALL_FORMATS) == {"csv", "gexf", "svg", "timelines"}
