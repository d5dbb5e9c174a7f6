"""Command-line pipeline: explore -> train-sim -> build-graph -> train -> eval.

Every stage reads and writes files in one output directory and leaves a
``manifest_<stage>.json`` recording input/output hashes and the digests of
the upstream manifests.  Exit codes: 0 ok, 2 bad config or maze,
3 missing upstream artifact or busy directory, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import glob
import hashlib
import io
import json
import logging
import os
import sys
import time

import filelock
import numpy as np

from . import __version__, nn
from .agent import (
    SCORE_WINDOWS,
    VARIANTS,
    Agent,
    AgentConfig,
    canonical_variant,
    evaluate,
    goal_observation,
    novel_starts,
    train,
)
from .config import RunConfig, parse_cell
from .errors import ConfigError, GamError, MazeError, NumericalError, PreconditionError
from .gam import converge_diag, heads_from_params, make_heads
from .maze import HEADINGS, ExplorationDB, MazeSpec, distance_map, explore_collect, resolve_maze
from .memory import (
    SimilarityModel,
    SimilarityReport,
    TopoGraph,
    build_graph,
    graph_quality,
    node_rows,
    train_similarity,
)

log = logging.getLogger("gamnav")

EXIT_OK, EXIT_CONFIG, EXIT_PRECONDITION, EXIT_NUMERICAL = 0, 2, 3, 4

DB_FILE = "db.jsonl"
DB_ORACLE_FILE = "db_oracle.jsonl"  # poses kept apart when --blind
SIM_FILE = "sim.ckpt"
SIM_REPORT = "sim_report.csv"
GRAPH_FILE = "graph.json"
NODES_CSV = "graph_nodes.csv"
EDGES_CSV = "graph_edges.csv"
QUALITY_FILE = "graph_quality.json"
CONFIG_FILE = "config.ini"


# --------------------------------------------------------------------------
# artifacts and manifests


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest_path(out: str, stage: str) -> str:
    return os.path.join(out, f"manifest_{stage}.json")


def read_manifest(out: str, stage: str) -> dict | None:
    path = manifest_path(out, stage)
    if not os.path.exists(path):
        return None
    with open(path) as fh:
        return json.load(fh)


def write_manifest(out: str, stage: str, inputs, outputs, upstream, config_text: str, started: float) -> dict:
    """Hash artifacts and chain upstream digests.

    ``digest`` covers everything except the wall-clock, so identical reruns
    produce identical digests.
    """
    chain = {}
    for up in upstream:
        m = read_manifest(out, up)
        if m is None:
            continue
        chain.update(m.get("chain", {}))
        chain[up] = m["digest"]
    body = {
        "stage": stage,
        "version": __version__,
        "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
        "inputs": {os.path.basename(p): sha256_file(p) for p in inputs},
        "outputs": {os.path.basename(p): sha256_file(p) for p in outputs},
        "chain": dict(sorted(chain.items())),
    }
    body["digest"] = hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()
    body["wall_clock_s"] = round(time.time() - started, 3)
    with open(manifest_path(out, stage), "w") as fh:
        json.dump(body, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return body


def require(path: str, stage: str) -> str:
    if not os.path.exists(path):
        raise PreconditionError(f"missing {os.path.basename(path)}; run '{stage}' first")
    return path


def write_text(path: str, text: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(text)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# --------------------------------------------------------------------------
# loaders shared by several stages


class Ctx:
    """Resolved config, output directory and maze for one command."""

    def __init__(self, cfg: RunConfig, out: str):
        self.cfg = cfg
        self.out = out
        self.seed = cfg.run.seed
        self.maze = resolve_maze(cfg.run.maze)
        self.config_text = cfg.to_text()
        # the output directory is where artifacts live, not what they are
        self.config_key = dataclasses.replace(cfg, run=dataclasses.replace(cfg.run, out="")).to_text()

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)

    def db(self) -> ExplorationDB:
        return ExplorationDB.load(require(self.path(DB_FILE), "explore"))

    def oracle_db(self) -> ExplorationDB:
        """The DB with poses; only evaluation oracles use this."""
        p = self.path(DB_ORACLE_FILE)
        return ExplorationDB.load(p) if os.path.exists(p) else self.db()

    def model(self) -> SimilarityModel:
        return SimilarityModel.from_params(nn.load_checkpoint(require(self.path(SIM_FILE), "train-sim")))

    def graph(self) -> TopoGraph:
        return TopoGraph.load(require(self.path(GRAPH_FILE), "build-graph"))

    def agent_files(self, variant: str) -> tuple[str, str]:
        return self.path(f"agent_{variant}.ckpt"), self.path(f"agent_{variant}.json")

    def load_agent(self, variant: str, maze: MazeSpec | None = None) -> Agent:
        ckpt, meta = self.agent_files(variant)
        require(ckpt, f"train --variant {variant}")
        with open(require(meta, f"train --variant {variant}")) as fh:
            config = AgentConfig.from_dict(json.load(fh)["agent"])
        graph = model = None
        if variant == "gam":
            graph, model = self.graph(), self.model()
        goal_obs = goal_observation(maze or self.maze)
        return Agent(variant, config, nn.load_checkpoint(ckpt), goal_obs, graph, model)


# --------------------------------------------------------------------------
# stages


def cmd_explore(ctx: Ctx, args) -> None:
    e = ctx.cfg.explore
    db = explore_collect(
        ctx.maze, e.policy, e.steps, ctx.seed, e.noise_sigma,
        episode_length=e.episode_length or None, follow_noise=e.follow_noise,
    )
    outputs = [ctx.path(DB_FILE)]
    db.save(ctx.path(DB_FILE), blind=args.blind)
    if args.blind:
        db.save(ctx.path(DB_ORACLE_FILE))
        outputs.append(ctx.path(DB_ORACLE_FILE))
    elif os.path.exists(ctx.path(DB_ORACLE_FILE)):
        os.remove(ctx.path(DB_ORACLE_FILE))
    free = len(ctx.maze.free_cells())
    log.info("explored %d steps, %d trajectories, coverage %.3f", len(db), len(db.trajectories()),
             len(db.visited_cells()) / free)
    ctx.stage_io = ([], outputs, [])


def _sim_report_csv(report: SimilarityReport) -> str:
    rows = [(e, repr(float(l)), repr(float(a)))
            for e, (l, a) in enumerate(zip(report.epoch_loss, report.heldout_accuracy))]
    return csv_text(("epoch", "train_loss", "heldout_accuracy"), rows)


def _read_sim_report(path: str) -> SimilarityReport:
    report = SimilarityReport()
    with open(path) as fh:
        for row in csv.DictReader(fh):
            report.epoch_loss.append(float(row["train_loss"]))
            report.heldout_accuracy.append(float(row["heldout_accuracy"]))
    return report


def cmd_train_sim(ctx: Ctx, args) -> None:
    s = ctx.cfg.sim
    db = ctx.db()
    ckpt, rep_path = ctx.path(SIM_FILE), ctx.path(SIM_REPORT)
    if args.resume:
        model = ctx.model()
        report = _read_sim_report(require(rep_path, "train-sim"))
        start = len(report.epoch_loss)
    else:
        model = SimilarityModel.create(embed_dim=s.embed_dim, hidden=s.hidden, seed=ctx.seed)
        report, start = None, 0
    report = train_similarity(model, db, s.epochs, s.batch, s.lr, s.n_pairs, ctx.seed, s.holdout,
                              start_epoch=start, report=report)
    nn.save_checkpoint(model.params, ckpt)
    write_text(rep_path, _sim_report_csv(report))
    log.info("similarity: %d train / %d held-out pairs, held-out accuracy %.4f",
             report.n_train, report.n_heldout, report.final_accuracy)
    ctx.stage_io = ([ctx.path(DB_FILE)], [ckpt, rep_path], ["explore"])


def cmd_build_graph(ctx: Ctx, args) -> None:
    g = ctx.cfg.graph
    db = ctx.db()
    graph = build_graph(ctx.model(), db, None if g.l_global < 0 else g.l_global, g.stride)
    graph.save(ctx.path(GRAPH_FILE))
    outputs = [ctx.path(GRAPH_FILE)]
    n_comp = int(graph.components().max() + 1)
    if n_comp > 1:
        log.warning("graph has %d disconnected components (stride %d); aggregation cannot cross them",
                    n_comp, g.stride)
    oracle = ctx.oracle_db()
    if oracle.poses is not None:
        poses = oracle.poses[node_rows(oracle, g.stride)]
        cells = poses[:, :2]
        q = graph_quality(graph, ctx.maze, cells)
        node_rows_out = [(i, int(x), int(y), HEADINGS[int(h)], int(graph.sources[i, 0]), int(graph.sources[i, 1]))
                         for i, (x, y, h) in enumerate(poses)]
        write_text(ctx.path(NODES_CSV), csv_text(("node", "x", "y", "heading", "traj_id", "t"), node_rows_out))
        classifier = {tuple(e) for e in graph.meta.get("classifier_edges", [])}
        edge_rows = []
        for i, j in graph.edges:
            a, b = cells[i], cells[j]
            geo = distance_map(ctx.maze, (int(a[0]), int(a[1])))[b[1], b[0]]
            edge_rows.append((i, j, "classifier" if (i, j) in classifier else "consecutive",
                              int(a[0]), int(a[1]), int(b[0]), int(b[1]), int(geo),
                              f"{float(np.hypot(*(a - b))):.6f}"))
        write_text(ctx.path(EDGES_CSV), csv_text(
            ("i", "j", "kind", "x_i", "y_i", "x_j", "y_j", "geodesic", "euclidean"), edge_rows))
        report = q.as_dict()
        report["geodesic_validity_pct"] = 100.0 * q.frac_within_8
        outputs += [ctx.path(NODES_CSV), ctx.path(EDGES_CSV)]
        log.info("graph: %d nodes, %d edges (%d consecutive + %d classifier), %.1f%% within 8 cells, "
                 "%d wall crossings", q.n_nodes, q.n_edges, q.n_consecutive, q.n_classifier,
                 report["geodesic_validity_pct"], q.n_wall_crossing)
    else:
        report = {"n_nodes": graph.n_nodes, "n_edges": len(graph.edges), "n_components": n_comp,
                  "geodesic_validity_pct": None}
        log.warning("no poses available; overlay export and geodesic validity skipped")
    with open(ctx.path(QUALITY_FILE), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    outputs.append(ctx.path(QUALITY_FILE))
    ctx.stage_io = ([ctx.path(DB_FILE), ctx.path(SIM_FILE)], outputs, ["explore", "train-sim"])


def cmd_train(ctx: Ctx, args) -> None:
    variant = ctx.variant
    config = ctx.cfg.agent
    graph = model = None
    inputs, upstream = [], []
    if variant == "gam":
        graph, model = ctx.graph(), ctx.model()
        inputs = [ctx.path(GRAPH_FILE), ctx.path(SIM_FILE)]
        upstream = ["build-graph"]
    started = time.time()

    def progress(steps, recent, last):
        if steps % max(config.total_steps // 10, 1) < config.n_workers * config.t_h:
            rate = float(np.mean(recent)) if recent else float("nan")
            log.info("step %d rolling success %.2f entropy %.3f (%.0fs)", steps, rate,
                     last["policy_entropy"], time.time() - started)

    result = train(variant, ctx.maze, config, ctx.seed, graph, model, progress=progress)
    ckpt, meta = ctx.agent_files(variant)
    nn.save_checkpoint(result.agent.params, ckpt)
    with open(meta, "w") as fh:
        json.dump({"variant": variant, "seed": ctx.seed, "maze": ctx.cfg.run.maze,
                   "agent": dataclasses.asdict(config)}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    metrics = ctx.path(f"metrics_{variant}.csv")
    write_text(metrics, result.metrics_csv())
    ctx.stage_io = (inputs, [ckpt, meta, metrics], upstream)


def _eval_tag(variant: str, args, goal) -> str:
    tag = variant
    if args.novel_starts:
        tag += "_novel"
    if goal is not None:
        tag += f"_goal{goal[0]}-{goal[1]}"
    return tag


def cmd_eval(ctx: Ctx, args) -> None:
    variant = ctx.variant
    maze = ctx.maze
    goal = parse_cell(args.goal_cell) if args.goal_cell else None
    if goal is not None:
        if not maze.is_free(*goal):
            raise ConfigError(f"goal cell {goal} is not a free cell")
        maze = maze.with_goal(goal)
    agent = ctx.load_agent(variant, ctx.maze)
    if goal is not None:
        # the goal node is found by localising the new goal observation only
        agent.set_goal(goal_observation(maze))
    e = ctx.cfg.eval
    if args.novel_starts:
        starts = novel_starts(maze, e.n_novel_starts, ctx.seed)
    else:
        starts = list(maze.spawn_poses)
    score_steps = SCORE_WINDOWS.get(maze.name, 2000) if e.score_steps < 0 else e.score_steps
    res = evaluate(agent, maze, starts, e.max_steps, score_steps, seed=ctx.seed)
    tag = _eval_tag(variant, args, goal)
    report = {
        "variant": variant,
        "maze": ctx.cfg.run.maze,
        "goal_cell": list(maze.goal_cell),
        "goal_node": None if agent.goal_node is None else int(agent.goal_node),
        "novel_starts": bool(args.novel_starts),
        "success_window": e.max_steps,
        "score_window": score_steps,
        "success_rate": res.success_rate,
        "score": res.score,
        "scores": res.scores,
        "outcomes": res.outcomes,
    }
    eval_path = ctx.path(f"eval_{tag}.json")
    with open(eval_path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    rows = [(k, *row[:3], HEADINGS[row[3]], repr(float(row[4])))
            for k, tr in enumerate(res.trajectories) for row in tr]
    traj_path = ctx.path(f"traj_{tag}.csv")
    write_text(traj_path, csv_text(("start", "t", "x", "y", "heading", "reward"), rows))
    comp_path = ctx.path("comparison.csv")
    write_text(comp_path, comparison_csv(ctx.out))
    log.info("%s: success %.3f score %.3f over %d starts", tag, res.success_rate, res.score, len(starts))
    ckpt, meta = ctx.agent_files(variant)
    inputs = [ckpt, meta] + ([ctx.path(GRAPH_FILE), ctx.path(SIM_FILE)] if variant == "gam" else [])
    ctx.stage_io = (inputs, [eval_path, traj_path, comp_path], [f"train-{variant}"])
    ctx.stage = f"eval-{tag}"


def comparison_csv(out: str) -> str:
    """One row per evaluation JSON in ``out``."""
    rows = []
    for path in sorted(glob.glob(os.path.join(out, "eval_*.json"))):
        with open(path) as fh:
            r = json.load(fh)
        tag = os.path.basename(path)[5:-5]
        rows.append((tag, r["variant"], int(r["novel_starts"]), f"{r['goal_cell'][0]},{r['goal_cell'][1]}",
                     len(r["outcomes"]), repr(r["success_rate"]), repr(r["score"])))
    return csv_text(("run", "variant", "novel_starts", "goal_cell", "n_starts", "success_rate", "score"), rows)


def cmd_diag_converge(ctx: Ctx, args) -> None:
    graph = ctx.graph()
    inputs, upstream = [ctx.path(GRAPH_FILE)], ["build-graph"]
    ckpt, _ = ctx.agent_files("gam")
    if os.path.exists(ckpt):
        heads = heads_from_params(nn.load_checkpoint(ckpt))
        inputs.append(ckpt)
        upstream.append("train-gam")
    else:
        log.info("no trained GAM agent; using freshly initialised attention heads (seed %d)", ctx.seed)
        heads = make_heads(nn.ParamStore(), 1, graph.features.shape[1], np.random.default_rng([ctx.seed, 7]),
                           ctx.cfg.agent.att_hidden)
    rep = converge_diag(graph, heads[args.head], k_max=args.k_max)
    path = ctx.path("converge.csv")
    write_text(path, rep.to_csv())
    log.info("%d component(s); final gap to limit %.3e; step delta below tol at k=%s",
             rep.n_components, rep.final_gap, rep.first_k_below)
    ctx.stage_io = (inputs, [path], upstream)


def eta_norm_mean(agent: Agent) -> float:
    """Mean ``||eta(i, goal)||`` over all graph nodes i."""
    nodes = np.arange(agent.graph.n_nodes)
    eta = agent.extractor.eta(nodes, np.full_like(nodes, agent.goal_node))
    return float(np.mean(np.linalg.norm(eta, axis=1)))


def cmd_sweep_k(ctx: Ctx, args) -> None:
    sweep = ctx.cfg.sweep
    graph, model = ctx.graph(), ctx.model()
    inputs, upstream = [ctx.path(GRAPH_FILE), ctx.path(SIM_FILE)], ["build-graph"]
    base = None
    if not sweep.train:
        base = ctx.load_agent("gam")
        inputs += list(ctx.agent_files("gam"))
        upstream.append("train-gam")
    e = ctx.cfg.eval
    rows = []
    for K in sweep.ks():
        config = dataclasses.replace(ctx.cfg.agent, K=K)
        if sweep.train:
            agent = train("gam", ctx.maze, config, ctx.seed, graph, model).agent
        else:
            agent = Agent("gam", config, base.params, goal_observation(ctx.maze), graph, model)
        res = evaluate(agent, ctx.maze, ctx.maze.spawn_poses, e.max_steps, 0, seed=ctx.seed)
        rows.append((K, repr(res.success_rate), repr(eta_norm_mean(agent))))
        log.info("K=%d success %.3f mean |eta| %.3e", K, res.success_rate, float(rows[-1][2]))
    best = max(rows, key=lambda r: (float(r[1]), -r[0]))[0]
    path = ctx.path("sweep_k.csv")
    write_text(path, csv_text(("K", "success_rate", "eta_norm_mean", "best"),
                              [(*r, int(r[0] == best)) for r in rows]))
    ctx.stage_io = (inputs, [path], upstream)


COMMANDS = {
    "explore": cmd_explore,
    "train-sim": cmd_train_sim,
    "build-graph": cmd_build_graph,
    "train": cmd_train,
    "eval": cmd_eval,
    "diag-converge": cmd_diag_converge,
    "sweep-k": cmd_sweep_k,
}


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="sectioned key=value config file")
    common.add_argument("--seed", type=int, help="overrides [run] seed")
    common.add_argument("--maze", help="bundled maze name or path to an ASCII maze")
    common.add_argument("--out", help="output directory (overrides [run] out)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config option (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("-q", "--quiet", action="store_true")

    variant = argparse.ArgumentParser(add_help=False)
    variant.add_argument("--variant", default="gam", choices=VARIANTS)

    p = argparse.ArgumentParser(prog="gamnav", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"gamnav {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    ex = sub.add_parser("explore", parents=[common], help="record an exploration database")
    ex.add_argument("--blind", action="store_true", help="strip poses from db.jsonl")
    ts = sub.add_parser("train-sim", parents=[common], help="train the similarity classifier")
    ts.add_argument("--resume", action="store_true", help="continue from sim.ckpt for [sim] epochs more")
    sub.add_parser("build-graph", parents=[common], help="build the topological graph")
    sub.add_parser("train", parents=[common, variant], help="train a navigation agent")
    ev = sub.add_parser("eval", parents=[common, variant], help="evaluate a trained agent")
    ev.add_argument("--novel-starts", action="store_true", help="start from cells that are not spawns")
    ev.add_argument("--goal-cell", metavar="X,Y", help="relocate the goal without retraining")
    dc = sub.add_parser("diag-converge", parents=[common], help="trace W^k X towards its limit")
    dc.add_argument("--k-max", type=int, default=10000)
    dc.add_argument("--head", type=int, default=0)
    sub.add_parser("sweep-k", parents=[common], help="success and mean |eta| per aggregation depth K")
    return p


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.maze:
        cfg.run.maze = args.maze
    if args.out:
        cfg.run.out = args.out
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value)
    return cfg.validate()


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        cfg = load_config(args)
        out = cfg.run.out
        os.makedirs(out, exist_ok=True)
        lock = filelock.FileLock(os.path.join(out, ".lock"), timeout=0)
        try:
            lock.acquire()
        except filelock.Timeout as exc:
            raise PreconditionError(f"output directory {out!r} is in use by another gamnav process") from exc
        try:
            started = time.time()
            ctx = Ctx(cfg, out)
            ctx.stage = args.command
            if hasattr(args, "variant"):
                ctx.variant = canonical_variant(args.variant)
                if args.command == "train":
                    ctx.stage = f"train-{ctx.variant}"
            COMMANDS[args.command](ctx, args)
            write_text(ctx.path(CONFIG_FILE), ctx.config_text)
            inputs, outputs, upstream = ctx.stage_io
            write_manifest(out, ctx.stage, inputs, outputs, upstream, ctx.config_key, started)
        finally:
            lock.release()
    except (ConfigError, MazeError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except PreconditionError as exc:
        log.error("%s", exc)
        return EXIT_PRECONDITION
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except GamError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    return EXIT_OK


def main() -> None:
    sys.exit(run())
