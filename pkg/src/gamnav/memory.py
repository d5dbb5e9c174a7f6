"""Topological memory: horizon-labelled pairs, the siamese connection
classifier, connection probabilities and graph construction."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, NumericalError, PreconditionError
from .maze import OBS_DIM, ExplorationDB, MazeSpec, distance_map

log = logging.getLogger(__name__)

T_MIN = 5
T_MAX = 20


def pair_label(traj_a: int, t_a: int, traj_b: int, t_b: int, t_min=T_MIN, t_max=T_MAX) -> int:
    """1 iff both samples share a trajectory and ``t_min <= t_b - t_a <= t_max``."""
    return int(traj_a == traj_b and t_min <= t_b - t_a <= t_max)


@dataclass
class PairSample:
    obs_a: np.ndarray
    obs_b: np.ndarray
    label: int


@dataclass
class PairSet:
    """Pairs as row indices into an :class:`ExplorationDB`."""

    idx_a: np.ndarray
    idx_b: np.ndarray
    label: np.ndarray
    db: ExplorationDB = field(repr=False)

    def __len__(self):
        return len(self.label)

    def __iter__(self):
        f = self.db.features
        for a, b, y in zip(self.idx_a, self.idx_b, self.label):
            yield PairSample(f[a], f[b], int(y))

    def subset(self, rows) -> "PairSet":
        return PairSet(self.idx_a[rows], self.idx_b[rows], self.label[rows], self.db)


def sample_pairs(
    db: ExplorationDB,
    n: int,
    rng: np.random.Generator,
    t_min: int = T_MIN,
    t_max: int = T_MAX,
    near_frac: float = 0.1,
) -> PairSet:
    """Balanced positive/negative pairs under the temporal-horizon rule.

    Positives are uniform over same-trajectory ``(t, k)`` with
    ``t_min <= k - t <= t_max``.  A ``near_frac`` share of the negatives
    comes from the ``0 < k - t < t_min`` zone; the rest is split evenly
    between far same-trajectory pairs (``k - t > t_max``) and
    cross-trajectory pairs.  Each pair is presented in random order.
    """
    trajs = db.trajectories()
    pos, far, near = [], [], []
    for rows in trajs.values():
        L = len(rows)
        for d in range(1, L):
            a, b = rows[: L - d], rows[d:]
            if t_min <= d <= t_max:
                pos.append(np.stack([a, b], 1))
            elif d < t_min:
                near.append(np.stack([a, b], 1))
    if not pos:
        raise PreconditionError(f"no trajectory is long enough for a positive pair (t_max={t_max})")
    pos = np.concatenate(pos)
    near = np.concatenate(near) if near else np.zeros((0, 2), dtype=np.int64)
    long_trajs = [rows for rows in trajs.values() if len(rows) > t_max + 1]
    n_pos = n // 2
    n_neg = n - n_pos
    n_near = int(round(near_frac * n_neg)) if len(near) else 0
    n_cross = (n_neg - n_near) // 2 if len(trajs) > 1 else 0
    n_far = n_neg - n_near - n_cross
    if n_far and not long_trajs:
        n_cross += n_far
        n_far = 0
        if len(trajs) < 2:
            raise PreconditionError("no negative pairs available")

    p = pos[rng.integers(len(pos), size=n_pos)]
    parts = [p]
    if n_near:
        parts.append(near[rng.integers(len(near), size=n_near)])
    if n_far:
        lens = np.array([len(r) for r in long_trajs], dtype=np.float64)
        weights = (lens - t_max - 1) * (lens - t_max) / 2.0
        choice = rng.choice(len(long_trajs), size=n_far, p=weights / weights.sum())
        out = np.zeros((n_far, 2), dtype=np.int64)
        for j, c in enumerate(choice):
            rows = long_trajs[c]
            L = len(rows)
            while True:
                t = int(rng.integers(L))
                k = int(rng.integers(L))
                if k - t > t_max:
                    break
            out[j] = rows[t], rows[k]
        parts.append(out)
    if n_cross:
        tids = db.traj_id
        out = np.zeros((n_cross, 2), dtype=np.int64)
        for j in range(n_cross):
            while True:
                a, b = rng.integers(len(db), size=2)
                if tids[a] != tids[b]:
                    break
            out[j] = a, b
        parts.append(out)
    pairs = np.concatenate(parts)
    labels = np.array(
        [pair_label(db.traj_id[a], db.t[a], db.traj_id[b], db.t[b], t_min, t_max) for a, b in pairs],
        dtype=np.int64,
    )
    swap = rng.random(len(pairs)) < 0.5
    pairs[swap] = pairs[swap][:, ::-1]
    order = rng.permutation(len(pairs))
    return PairSet(pairs[order, 0], pairs[order, 1], labels[order], db)


# --------------------------------------------------------------------------
# connection classifier


class SimilarityModel:
    """Siamese classifier: shared encoder, then an MLP head on ``[x_a, x_b]``."""

    def __init__(self, encoder: nn.MlpSpec, head: nn.MlpSpec, params: nn.ParamStore):
        if head.layer_sizes[0] != 2 * encoder.layer_sizes[-1]:
            raise ConfigError("head input must be twice the embedding width")
        if head.layer_sizes[-1] != 1 or head.output_mode != "sigmoid":
            raise ConfigError("head must end in a single sigmoid unit")
        self.encoder = encoder
        self.head = head
        self.params = params

    @classmethod
    def create(cls, obs_dim=OBS_DIM, embed_dim=32, hidden=64, seed=0) -> "SimilarityModel":
        rng = np.random.default_rng(seed)
        enc = nn.MlpSpec((obs_dim, hidden, embed_dim), "relu", "linear")
        head = nn.MlpSpec((2 * embed_dim, hidden, hidden, 1), "relu", "sigmoid")
        params = nn.ParamStore()
        nn.init_mlp(params, "enc.", enc, rng)
        nn.init_mlp(params, "head.", head, rng)
        return cls(enc, head, params)

    @classmethod
    def from_params(cls, params: nn.ParamStore) -> "SimilarityModel":
        n_enc = len(params.subset("enc.W"))
        n_head = len(params.subset("head.W"))
        enc_sizes = [params[f"enc.W0"].shape[0]] + [params[f"enc.W{l}"].shape[1] for l in range(n_enc)]
        head_sizes = [params[f"head.W0"].shape[0]] + [params[f"head.W{l}"].shape[1] for l in range(n_head)]
        return cls(
            nn.MlpSpec(tuple(enc_sizes), "relu", "linear"),
            nn.MlpSpec(tuple(head_sizes), "relu", "sigmoid"),
            params,
        )

    @property
    def embed_dim(self) -> int:
        return self.encoder.layer_sizes[-1]

    def embed(self, obs) -> np.ndarray:
        out, _ = nn.mlp_forward(self.encoder, self.params, obs, "enc.")
        return out

    def prob_from_embeddings(self, xa, xb) -> np.ndarray:
        xa, xb = np.atleast_2d(xa), np.atleast_2d(xb)
        xa, xb = np.broadcast_arrays(xa, xb)
        p, _ = nn.mlp_forward(self.head, self.params, np.concatenate([xa, xb], 1), "head.")
        return p[:, 0]

    def prob(self, obs_a, obs_b) -> np.ndarray:
        return self.prob_from_embeddings(self.embed(np.atleast_2d(obs_a)), self.embed(np.atleast_2d(obs_b)))

    def loss_and_grad(self, obs_a, obs_b, labels, backward=True) -> float:
        """Mean binary cross-entropy over the batch; accumulates gradients."""
        M = len(labels)
        xa, ta = nn.mlp_forward(self.encoder, self.params, obs_a, "enc.")
        xb, tb = nn.mlp_forward(self.encoder, self.params, obs_b, "enc.")
        p, th = nn.mlp_forward(self.head, self.params, np.concatenate([xa, xb], 1), "head.")
        p = p[:, 0]
        loss = float(np.mean(nn.binary_cross_entropy(p, labels)))
        if backward:
            g = (nn.binary_cross_entropy_grad(p, labels) / M)[:, None]
            gx = nn.mlp_backward(self.head, self.params, th, g, "head.")
            D = self.embed_dim
            nn.mlp_backward(self.encoder, self.params, ta, gx[:, :D], "enc.")
            nn.mlp_backward(self.encoder, self.params, tb, gx[:, D:], "enc.")
        return loss


@dataclass
class SimilarityReport:
    epoch_loss: list = field(default_factory=list)
    heldout_accuracy: list = field(default_factory=list)
    n_train: int = 0
    n_heldout: int = 0

    @property
    def final_accuracy(self) -> float:
        return self.heldout_accuracy[-1] if self.heldout_accuracy else float("nan")


def pair_accuracy(model: SimilarityModel, pairs: PairSet) -> float:
    f = pairs.db.features
    p = model.prob(f[pairs.idx_a], f[pairs.idx_b])
    return float(np.mean((p >= 0.5) == (pairs.label == 1)))


def train_similarity(
    model: SimilarityModel,
    db: ExplorationDB,
    epochs: int = 200,
    batch: int = 64,
    lr: float = 1e-3,
    n_pairs: int = 4000,
    seed: int = 0,
    holdout: float = 0.1,
    start_epoch: int = 0,
    report: SimilarityReport | None = None,
) -> SimilarityReport:
    """Minimise mean binary cross-entropy with Adam over a fixed pair pool.

    The pool and the 10% held-out split depend only on ``seed``; the shuffle
    of epoch ``e`` only on ``(seed, e)``, so training can resume from a
    checkpoint taken between epochs.
    """
    pool = sample_pairs(db, n_pairs, np.random.default_rng([seed, 0]))
    n_hold = max(1, int(round(holdout * len(pool))))
    held = pool.subset(np.arange(n_hold))
    train = pool.subset(np.arange(n_hold, len(pool)))
    report = report or SimilarityReport()
    report.n_train, report.n_heldout = len(train), len(held)
    f = db.features
    for epoch in range(start_epoch, start_epoch + epochs):
        order = np.random.default_rng([seed, 1, epoch]).permutation(len(train))
        total = 0.0
        for s in range(0, len(order), batch):
            rows = order[s : s + batch]
            model.params.zero_grad()
            loss = model.loss_and_grad(f[train.idx_a[rows]], f[train.idx_b[rows]], train.label[rows])
            if not np.isfinite(loss):
                raise NumericalError(f"similarity loss diverged (seed={seed}, epoch={epoch}, batch={s // batch})")
            nn.adam_step(model.params, lr)
            total += loss * len(rows)
        report.epoch_loss.append(total / len(train))
        report.heldout_accuracy.append(pair_accuracy(model, held))
        log.debug("epoch %d loss %.4f acc %.3f", epoch, report.epoch_loss[-1], report.heldout_accuracy[-1])
    return report


def connection_probs(model: SimilarityModel, features: np.ndarray, i: int) -> np.ndarray:
    """``phi(o_i, o_k)`` for every row k of ``features``."""
    emb = model.embed(features)
    return model.prob_from_embeddings(emb[i][None, :], emb)


def connection_matrix(model: SimilarityModel, emb: np.ndarray, chunk: int = 128) -> np.ndarray:
    """Dense ``P[i, k] = phi`` on embeddings, computed in row chunks."""
    N = len(emb)
    P = np.zeros((N, N))
    for s in range(0, N, chunk):
        a = emb[s : s + chunk]
        xa = np.repeat(a, N, axis=0)
        xb = np.tile(emb, (len(a), 1))
        P[s : s + chunk] = model.prob_from_embeddings(xa, xb).reshape(len(a), N)
    return P


# --------------------------------------------------------------------------
# graph


class TopoGraph:
    """Nodes with feature vectors plus an undirected edge set.

    ``neighbors[i]`` always starts with ``i`` itself, followed by the
    other endpoints in increasing order.
    """

    def __init__(self, features, edges, sources=None, meta=None, obs=None):
        self.features = np.asarray(features, dtype=np.float64)
        N = len(self.features)
        clean = set()
        for i, j in edges:
            i, j = int(i), int(j)
            if i == j:
                continue
            if not (0 <= i < N and 0 <= j < N):
                raise ConfigError(f"edge ({i},{j}) out of range for {N} nodes")
            clean.add((min(i, j), max(i, j)))
        self.edges = sorted(clean)
        self.sources = (
            np.asarray(sources, dtype=np.int64) if sources is not None else np.zeros((N, 2), np.int64)
        )
        self.meta = dict(meta or {})
        self.obs = obs
        nb = [[] for _ in range(N)]
        for i, j in self.edges:
            nb[i].append(j)
            nb[j].append(i)
        self.neighbors = [np.array([i] + sorted(n), dtype=np.int64) for i, n in enumerate(nb)]
        self._components = None

    @property
    def n_nodes(self) -> int:
        return len(self.features)

    def components(self) -> np.ndarray:
        """Component label per node (labels ordered by smallest member)."""
        if self._components is None:
            import scipy.sparse as sp
            from scipy.sparse.csgraph import connected_components

            N = self.n_nodes
            e = np.array(self.edges, dtype=np.int64).reshape(-1, 2)
            A = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(N, N))
            _, labels = connected_components(A, directed=False)
            remap = {}
            for lab in labels:
                remap.setdefault(lab, len(remap))
            self._components = np.array([remap[l] for l in labels], dtype=np.int64)
        return self._components

    def to_json(self) -> str:
        nodes = [
            {"id": i, "feature": [float(v) for v in self.features[i]],
             "traj": int(self.sources[i, 0]), "t": int(self.sources[i, 1])}
            for i in range(self.n_nodes)
        ]
        return json.dumps({"nodes": nodes, "edges": [list(e) for e in self.edges], "meta": self.meta})

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "TopoGraph":
        d = json.loads(text)
        nodes = sorted(d["nodes"], key=lambda n: n["id"])
        feats = [n["feature"] for n in nodes]
        src = [(n["traj"], n["t"]) for n in nodes]
        return cls(feats, d["edges"], src, d.get("meta", {}))

    @classmethod
    def load(cls, path) -> "TopoGraph":
        with open(path) as fh:
            return cls.from_json(fh.read())


def node_rows(db: ExplorationDB, stride: int) -> np.ndarray:
    """DB rows that become nodes: every ``stride``-th sample in (traj, t) order."""
    order = np.lexsort((db.t, db.traj_id))
    return order[::stride]


def default_l_global(n_nodes: int) -> int:
    return int(round(0.65 * n_nodes))


def build_graph(model: SimilarityModel, db: ExplorationDB, l_global: int | None = None, stride: int = 5):
    """Nodes from strided samples; edges = consecutive nodes + global top-L pairs.

    Pair scores are the mean of ``phi(a, b)`` and ``phi(b, a)``.  Only
    observations enter the construction.
    """
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    rows = node_rows(db, stride)
    N = len(rows)
    if l_global is None:
        l_global = default_l_global(N)
    if l_global < 0:
        raise ConfigError("L_global must be >= 0")
    emb = model.embed(db.features[rows])
    sources = np.stack([db.traj_id[rows], db.t[rows]], 1)
    consecutive = {(i, i + 1) for i in range(N - 1) if sources[i, 0] == sources[i + 1, 0]}
    iu, ju = np.triu_indices(N, k=1)
    keep = np.array([(a, b) not in consecutive for a, b in zip(iu, ju)], dtype=bool)
    iu, ju = iu[keep], ju[keep]
    if l_global > len(iu):
        raise ConfigError(f"L_global={l_global} exceeds the {len(iu)} candidate pairs")
    chosen = []
    if l_global:
        P = connection_matrix(model, emb)
        score = 0.5 * (P[iu, ju] + P[ju, iu])
        top = np.argsort(-score, kind="stable")[:l_global]
        chosen = list(zip(iu[top].tolist(), ju[top].tolist()))
    meta = {"L_global": int(l_global), "stride": int(stride), "n_consecutive": len(consecutive)}
    graph = TopoGraph(emb, sorted(consecutive) + chosen, sources, meta, obs=db.features[rows])
    graph.meta["classifier_edges"] = [list(e) for e in sorted(chosen)]
    return graph


@dataclass
class GraphQuality:
    n_nodes: int
    n_edges: int
    n_consecutive: int
    n_classifier: int
    frac_within_8: float
    n_wall_crossing: int
    n_components: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def graph_quality(graph: TopoGraph, maze: MazeSpec, node_cells, near=8, slope=3.0, offset=4.0):
    """Geodesic validity of classifier edges against the BFS oracle.

    ``node_cells`` are the ground-truth (x, y) per node.  An edge counts as
    a wall crossing when geodesic > slope * euclidean + offset.
    """
    cls_edges = graph.meta.get("classifier_edges")
    if cls_edges is None:
        cls_edges = [e for e in graph.edges if tuple(e) not in
                     {(i, i + 1) for i in range(graph.n_nodes - 1)
                      if graph.sources[i, 0] == graph.sources[i + 1, 0]}]
    node_cells = np.asarray(node_cells)
    ok, bad = 0, 0
    for i, j in cls_edges:
        a, b = node_cells[i], node_cells[j]
        geo = distance_map(maze, (a[0], a[1]))[b[1], b[0]]
        euc = float(np.hypot(*(a - b)))
        ok += geo <= near
        bad += geo > slope * euc + offset
    n_cls = len(cls_edges)
    return GraphQuality(
        graph.n_nodes,
        len(graph.edges),
        graph.meta.get("n_consecutive", len(graph.edges) - n_cls),
        n_cls,
        ok / n_cls if n_cls else 1.0,
        int(bad),
        int(graph.components().max() + 1) if graph.n_nodes else 0,
    )
