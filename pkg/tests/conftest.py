"""Shared fixtures: a small trained maze-small pipeline built once per session."""

from dataclasses import dataclass

import numpy as np
import pytest

from gamnav.maze import ExplorationDB, explore_collect, load_bundled
from gamnav.memory import SimilarityModel, TopoGraph, build_graph, node_rows, train_similarity

_REPORT: list[str] = []


def report_line(line: str) -> None:
    """Print an acceptance verdict now and again in the terminal summary."""
    print(line)
    _REPORT.append(line)


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_REPORT, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


# similarity-training settings shared by the fixture and the acceptance run
SIM_PAIRS = 20000
SIM_EPOCHS = 20


@dataclass
class Pipeline:
    maze: object
    db: ExplorationDB
    model: SimilarityModel
    report: object
    graph: TopoGraph
    node_cells: np.ndarray


def build_pipeline(maze_name="maze-small", seed=0, steps=2000, policy="random", **explore_kw):
    maze = load_bundled(maze_name)
    db = explore_collect(maze, policy, steps, seed, **explore_kw)
    model = SimilarityModel.create(seed=seed)
    report = train_similarity(model, db, epochs=SIM_EPOCHS, n_pairs=SIM_PAIRS, seed=seed)
    graph = build_graph(model, db)
    cells = db.poses[node_rows(db, graph.meta["stride"]), :2]
    return Pipeline(maze, db, model, report, graph, cells)


@pytest.fixture(scope="session")
def small_pipeline():
    return build_pipeline("maze-small", seed=0)
