import csv
import json
import os

import filelock
import numpy as np
import pytest

from gamnav import nn
from gamnav.agent import AgentConfig, goal_observation
from gamnav.cli import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, EXIT_PRECONDITION, run
from gamnav.config import RunConfig
from gamnav.errors import ConfigError
from gamnav.gam import Localizer
from gamnav.maze import ExplorationDB, load_bundled
from gamnav.memory import SimilarityModel, TopoGraph

FAST = [
    "--set", "sim.epochs=2", "--set", "sim.n_pairs=1000",
    "--set", "agent.total_steps=400", "--set", "agent.n_workers=1",
]


def cli(out, *args, extra=FAST):
    return run([*args, "--out", str(out), *extra])


def read(path):
    with open(path, "rb") as fh:
        return fh.read()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    for args in (["explore"], ["train-sim"], ["build-graph"], ["train", "--variant", "gam"],
                 ["train", "--variant", "ff"], ["eval", "--variant", "gam"], ["eval", "--variant", "ff"]):
        assert cli(out, *args) == EXIT_OK, args
    return out


# config


def test_config_roundtrip_default():
    cfg = RunConfig()
    assert RunConfig.from_text(cfg.to_text()) == cfg


def test_config_roundtrip_modified():
    cfg = RunConfig()
    cfg.run.seed = 17
    cfg.sim.lr = 3.3e-4
    cfg.agent.recompute_attention = True
    cfg.agent.heldout_goals = "2,2;8,2"
    cfg.sweep.k_values = "0,5"
    back = RunConfig.from_text(cfg.to_text())
    assert back == cfg
    assert back.to_text() == cfg.to_text()


def test_config_empty_file_is_defaults():
    assert RunConfig.from_text("") == RunConfig()


@pytest.mark.parametrize("text", [
    "[nope]\nx = 1\n",
    "[run]\nbogus = 1\n",
    "[run]\nseed = abc\n",
    "[agent]\ngamma = 1.5\n",
    "[sweep]\nk_values = 1,-3\n",
    "not a config",
])
def test_config_rejects(text):
    with pytest.raises(ConfigError):
        RunConfig.from_text(text)


def test_config_file_and_flags(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[run]\nseed = 4\n[explore]\nsteps = 50\n")
    out = tmp_path / "o"
    assert run(["explore", "--config", str(path), "--out", str(out), "--seed", "5"]) == EXIT_OK
    cfg = RunConfig.load(out / "config.ini")
    assert cfg.run.seed == 5 and cfg.explore.steps == 50


# exit codes


def test_exit_missing_upstream(tmp_path):
    for verb in ("train-sim", "build-graph", "eval", "diag-converge", "sweep-k"):
        assert cli(tmp_path, verb) == EXIT_PRECONDITION, verb


def test_exit_gam_without_graph(tmp_path):
    assert cli(tmp_path, "train", "--variant", "gam") == EXIT_PRECONDITION


def test_exit_config_errors(tmp_path):
    assert cli(tmp_path, "explore", "--maze", "no-such-maze") == EXIT_CONFIG
    assert cli(tmp_path, "explore", extra=["--set", "explore.steps=-1"]) == EXIT_CONFIG
    assert cli(tmp_path, "explore", extra=["--set", "explore.steps"]) == EXIT_CONFIG
    assert run(["explore", "--out", str(tmp_path), "--config", str(tmp_path / "missing.ini")]) == EXIT_CONFIG


def test_exit_bad_maze_file(tmp_path):
    maze = tmp_path / "bad.txt"
    maze.write_text("#####\n#S#G#\n#####\n")
    assert cli(tmp_path / "o", "explore", "--maze", str(maze)) == EXIT_CONFIG


def test_exit_numerical(tmp_path):
    assert cli(tmp_path, "explore") == EXIT_OK
    assert cli(tmp_path, "train-sim", extra=["--set", "sim.lr=1e300", "--set", "sim.n_pairs=500"]) == EXIT_NUMERICAL


def test_lock_held(tmp_path):
    with filelock.FileLock(str(tmp_path / ".lock")):
        assert cli(tmp_path, "explore") == EXIT_PRECONDITION
    assert cli(tmp_path, "explore") == EXIT_OK


# explore


def test_explore_deterministic_and_coverage(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli(a, "explore") == EXIT_OK and cli(b, "explore") == EXIT_OK
    assert read(a / "db.jsonl") == read(b / "db.jsonl")
    db = ExplorationDB.load(a / "db.jsonl")
    maze = load_bundled("maze-small")
    assert len(db) == 2000
    assert len(db.visited_cells()) / len(maze.free_cells()) >= 0.5


def test_explore_blind(tmp_path):
    assert cli(tmp_path, "explore", "--blind") == EXIT_OK
    with open(tmp_path / "db.jsonl") as fh:
        recs = [json.loads(line) for line in fh]
    assert all(set(r) == {"traj_id", "t", "features"} for r in recs)
    assert ExplorationDB.load(tmp_path / "db_oracle.jsonl").poses is not None
    # downstream stages still run from the blind database
    assert cli(tmp_path, "train-sim") == EXIT_OK
    assert cli(tmp_path, "build-graph") == EXIT_OK
    assert json.loads((tmp_path / "graph_quality.json").read_text())["geodesic_validity_pct"] is not None


# similarity and graph


def test_train_sim_report(pipeline):
    with open(pipeline / "sim_report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert all(0.0 <= float(r["heldout_accuracy"]) <= 1.0 for r in rows)


def test_train_sim_resume_matches_continuous(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert cli(out, "explore") == EXIT_OK
    assert cli(a, "train-sim", extra=["--set", "sim.epochs=3", "--set", "sim.n_pairs=1000"]) == EXIT_OK
    assert cli(b, "train-sim", extra=["--set", "sim.epochs=2", "--set", "sim.n_pairs=1000"]) == EXIT_OK
    assert cli(b, "train-sim", "--resume", extra=["--set", "sim.epochs=1", "--set", "sim.n_pairs=1000"]) == EXIT_OK
    assert read(a / "sim.ckpt") == read(b / "sim.ckpt")
    assert read(a / "sim_report.csv") == read(b / "sim_report.csv")


def test_build_graph_outputs(pipeline):
    q = json.loads((pipeline / "graph_quality.json").read_text())
    g = TopoGraph.load(pipeline / "graph.json")
    assert q["n_edges"] == len(g.edges) == q["n_consecutive"] + q["n_classifier"]
    assert q["n_classifier"] == g.meta["L_global"] == round(0.65 * g.n_nodes)
    with open(pipeline / "graph_edges.csv") as fh:
        edges = list(csv.DictReader(fh))
    assert len(edges) == len(g.edges)
    with open(pipeline / "graph_nodes.csv") as fh:
        assert len(list(csv.DictReader(fh))) == g.n_nodes


def test_build_graph_component_warning(tmp_path, capsys):
    assert cli(tmp_path, "explore", extra=["--set", "explore.episode_length=100"]) == EXIT_OK
    assert cli(tmp_path, "train-sim") == EXIT_OK
    capsys.readouterr()
    assert cli(tmp_path, "build-graph", extra=["--set", "graph.l_global=0", "--set", "graph.stride=50"]) == EXIT_OK
    assert "disconnected components" in capsys.readouterr().err


# train and eval


def test_train_artifacts(pipeline):
    for v in ("gam", "ff"):
        meta = json.loads((pipeline / f"agent_{v}.json").read_text())
        assert AgentConfig.from_dict(meta["agent"]).total_steps == 400
        with open(pipeline / f"metrics_{v}.csv") as fh:
            assert next(csv.reader(fh))[:3] == ["step", "episode_reward", "success_rolling"]


def test_train_rerun_byte_identical(pipeline, tmp_path):
    for name in ("db.jsonl", "sim.ckpt", "graph.json"):
        (tmp_path / name).write_bytes(read(pipeline / name))
    assert cli(tmp_path, "train", "--variant", "gam") == EXIT_OK
    assert read(tmp_path / "agent_gam.ckpt") == read(pipeline / "agent_gam.ckpt")
    assert read(tmp_path / "metrics_gam.csv") == read(pipeline / "metrics_gam.csv")


def test_eval_json(pipeline):
    r = json.loads((pipeline / "eval_gam.json").read_text())
    maze = load_bundled("maze-small")
    assert len(r["outcomes"]) == len(maze.spawn_poses)
    assert r["success_window"] == 500 and r["score_window"] == 2000
    assert r["success_rate"] == np.mean([o["success"] for o in r["outcomes"]])
    with open(pipeline / "traj_gam.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {int(row["start"]) for row in rows} == set(range(len(maze.spawn_poses)))


def test_eval_comparison_table(pipeline):
    with open(pipeline / "comparison.csv") as fh:
        runs = {r["run"] for r in csv.DictReader(fh)}
    assert {"gam", "ff"} <= runs


def test_eval_novel_starts(pipeline):
    assert cli(pipeline, "eval", "--variant", "gam", "--novel-starts") == EXIT_OK
    r = json.loads((pipeline / "eval_gam_novel.json").read_text())
    spawn = {p.cell for p in load_bundled("maze-small").spawn_poses}
    assert len(r["outcomes"]) == 6
    assert all((o["start"]["x"], o["start"]["y"]) not in spawn for o in r["outcomes"])


def test_eval_novel_goal_relocalizes(pipeline):
    assert cli(pipeline, "eval", "--variant", "gam", "--goal-cell", "2,2") == EXIT_OK
    r = json.loads((pipeline / "eval_gam_goal2-2.json").read_text())
    assert r["goal_cell"] == [2, 2]
    model = SimilarityModel.from_params(nn.load_checkpoint(pipeline / "sim.ckpt"))
    graph = TopoGraph.load(pipeline / "graph.json")
    maze = load_bundled("maze-small").with_goal((2, 2))
    assert r["goal_node"] == Localizer(model, graph)(goal_observation(maze))


def test_eval_goal_on_wall(pipeline):
    assert cli(pipeline, "eval", "--variant", "gam", "--goal-cell", "0,0") == EXIT_CONFIG


def test_manifest_chain(pipeline):
    m = json.loads((pipeline / "manifest_eval-gam.json").read_text())
    assert set(m["chain"]) == {"explore", "train-sim", "build-graph", "train-gam"}
    for stage, digest in m["chain"].items():
        assert json.loads((pipeline / f"manifest_{stage}.json").read_text())["digest"] == digest
    tm = json.loads((pipeline / "manifest_train-gam.json").read_text())
    from gamnav.cli import sha256_file
    assert tm["outputs"]["agent_gam.ckpt"] == sha256_file(pipeline / "agent_gam.ckpt")


def test_manifest_digest_ignores_wall_clock(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli(a, "explore") == EXIT_OK and cli(b, "explore") == EXIT_OK
    ma = json.loads((a / "manifest_explore.json").read_text())
    mb = json.loads((b / "manifest_explore.json").read_text())
    assert ma["digest"] == mb["digest"]


# diagnostics


def test_diag_converge(pipeline):
    assert cli(pipeline, "diag-converge", "--k-max", "50") == EXIT_OK
    with open(pipeline / "converge.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 51
    gaps = [float(r["max_row_gap"]) for r in rows]
    assert all(b <= a + 1e-12 for a, b in zip(gaps, gaps[1:]))


def test_sweep_k(pipeline):
    extra = FAST + ["--set", "sweep.train=false", "--set", "sweep.k_values=0,2,1000"]
    assert cli(pipeline, "sweep-k", extra=extra) == EXIT_OK
    with open(pipeline / "sweep_k.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["K"]) for r in rows] == [0, 2, 1000]
    assert sum(int(r["best"]) for r in rows) == 1
    # K=0 is the raw feature difference, averaged over nodes against the goal node
    graph = TopoGraph.load(pipeline / "graph.json")
    goal = json.loads((pipeline / "eval_gam.json").read_text())["goal_node"]
    n_heads = AgentConfig().H
    raw = np.linalg.norm(graph.features - graph.features[goal], axis=1) * np.sqrt(n_heads)
    assert float(rows[0]["eta_norm_mean"]) == pytest.approx(raw.mean(), rel=1e-12)
    norms = [float(r["eta_norm_mean"]) for r in rows]
    assert norms[0] > norms[1] > norms[2]


def test_sweep_k_trains_per_k(tmp_path, pipeline):
    for name in ("db.jsonl", "sim.ckpt", "graph.json"):
        (tmp_path / name).write_bytes(read(pipeline / name))
    extra = FAST + ["--set", "sweep.k_values=1,4", "--set", "agent.total_steps=200"]
    assert cli(tmp_path, "sweep-k", extra=extra) == EXIT_OK
    with open(tmp_path / "sweep_k.csv") as fh:
        assert [int(r["K"]) for r in csv.DictReader(fh)] == [1, 4]


def test_module_entry_point(tmp_path):
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "gamnav", "explore", "--out", str(tmp_path), "-q"],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert os.path.exists(tmp_path / "db.jsonl")
