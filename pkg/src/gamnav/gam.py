"""Graph attention over the topological memory.

Attention rows are softmaxes of a small pairwise network over each node's
neighbourhood (which always contains the node itself), so the attention
matrix W is row-stochastic with a positive diagonal.  Repeated
aggregation ``X <- W X`` is a random walk on the graph; the stationary
oracle here computes the left Perron vector independently of that
iteration so tests can check the limit ``W^k -> 1 pi^T``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import nn
from .errors import ConfigError, DimensionError, NumericalError, PreconditionError
from .memory import SimilarityModel, TopoGraph

log = logging.getLogger(__name__)


class ComponentWarning(UserWarning):
    """Current and goal nodes lie in different graph components."""


@dataclass
class AttentionHead:
    """Scalar-logit pairwise network psi([x_i, x_j]) stored under ``prefix``."""

    params: nn.ParamStore
    prefix: str
    spec: nn.MlpSpec

    @classmethod
    def create(cls, params: nn.ParamStore, prefix: str, feature_dim: int, rng, hidden: int = 16):
        spec = nn.MlpSpec((2 * feature_dim, hidden, 1), "relu", "linear")
        nn.init_mlp(params, prefix, spec, rng)
        return cls(params, prefix, spec)

    def forward(self, xi, xj):
        out, tape = nn.mlp_forward(self.spec, self.params, np.concatenate([xi, xj], axis=-1), self.prefix)
        return out[..., 0], tape

    def logits(self, xi, xj) -> np.ndarray:
        return self.forward(xi, xj)[0]

    def backward(self, tape, grad_logits):
        return nn.mlp_backward(self.spec, self.params, tape, np.asarray(grad_logits)[:, None], self.prefix)


def make_heads(params: nn.ParamStore, n_heads: int, feature_dim: int, rng, hidden: int = 16):
    return [AttentionHead.create(params, f"att{h}.", feature_dim, rng, hidden) for h in range(n_heads)]


def heads_from_params(params: nn.ParamStore) -> list[AttentionHead]:
    heads = []
    h = 0
    while f"att{h}.W0" in params:
        W0 = params[f"att{h}.W0"]
        spec = nn.MlpSpec((W0.shape[0], W0.shape[1], 1), "relu", "linear")
        heads.append(AttentionHead(params, f"att{h}.", spec))
        h += 1
    return heads


# --------------------------------------------------------------------------
# localisation


def localize(model: SimilarityModel, graph: TopoGraph, obs, l_loc: int = 5, emb=None) -> int:
    """Node of median similarity among the ``l_loc`` most similar nodes.

    Ordering is by descending score, ties by ascending node id; the median
    of an odd-sized list is its middle element.
    """
    N = graph.n_nodes
    if N == 0:
        raise PreconditionError("cannot localize on an empty graph")
    if l_loc < 1 or l_loc > N or l_loc % 2 == 0:
        raise ConfigError(f"L_loc must be odd and in [1, {N}], got {l_loc}")
    if emb is None:
        emb = model.embed(np.atleast_2d(obs))[0]
    scores = model.prob_from_embeddings(emb[None, :], graph.features)
    order = np.lexsort((np.arange(N), -scores))
    return int(order[: l_loc][l_loc // 2])


class Localizer:
    """:func:`localize` memoised on the exact observation bytes."""

    def __init__(self, model: SimilarityModel, graph: TopoGraph, l_loc: int = 5):
        self.model = model
        self.graph = graph
        self.l_loc = l_loc
        self._cache: dict[bytes, int] = {}

    def __call__(self, obs) -> int:
        key = np.ascontiguousarray(obs, dtype=np.float64).tobytes()
        hit = self._cache.get(key)
        if hit is None:
            hit = localize(self.model, self.graph, obs, self.l_loc)
            self._cache[key] = hit
        return hit

    def many(self, obs_batch) -> np.ndarray:
        return np.array([self(o) for o in obs_batch], dtype=np.int64)


# --------------------------------------------------------------------------
# attention matrix


@dataclass
class StochasticMatrix:
    """Row-stochastic attention matrix stored as CSR plus its edge list.

    ``rows``/``cols`` enumerate the support (self-loops included) in CSR
    order; ``alpha`` holds the matching entries.
    """

    W: sp.csr_matrix
    rows: np.ndarray
    cols: np.ndarray
    alpha: np.ndarray
    indptr: np.ndarray
    tape: object = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.W.shape[0]

    def dense(self) -> np.ndarray:
        return self.W.toarray()


def edge_index(graph: TopoGraph):
    """CSR-ordered support of the attention matrix."""
    counts = np.array([len(nb) for nb in graph.neighbors], dtype=np.int64)
    if np.any(counts == 0):
        raise PreconditionError("node with empty neighbour list")
    indptr = np.concatenate([[0], np.cumsum(counts)])
    rows = np.repeat(np.arange(graph.n_nodes), counts)
    cols = np.concatenate(graph.neighbors) if graph.n_nodes else np.zeros(0, np.int64)
    return rows, cols, indptr


# exp(-700) is still a normal float64, so every neighbour (self included) keeps a
# strictly positive weight however peaked the logits get; the backward pass ignores
# the clamp, which is off by at most ~1e-304 per coefficient.
LOGIT_FLOOR = -700.0


def segment_softmax(logits, indptr) -> np.ndarray:
    starts = indptr[:-1]
    counts = np.diff(indptr)
    mx = np.maximum.reduceat(logits, starts)
    e = np.exp(np.maximum(logits - np.repeat(mx, counts), LOGIT_FLOOR))
    s = np.add.reduceat(e, starts)
    return e / np.repeat(s, counts)


def segment_softmax_backward(alpha, grad_alpha, indptr) -> np.ndarray:
    counts = np.diff(indptr)
    dot = np.add.reduceat(alpha * grad_alpha, indptr[:-1])
    return alpha * (grad_alpha - np.repeat(dot, counts))


def attention_coeffs(head: AttentionHead, graph: TopoGraph, X, index=None) -> StochasticMatrix:
    """alpha_ij = softmax over j in N_i of psi(x_i, x_j); zero off the neighbourhood."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] != graph.n_nodes:
        raise DimensionError(f"feature matrix has {X.shape[0]} rows for {graph.n_nodes} nodes")
    rows, cols, indptr = index if index is not None else edge_index(graph)
    logits, tape = head.forward(X[rows], X[cols])
    if not np.all(np.isfinite(logits)):
        raise NumericalError("attention logits are not finite")
    alpha = segment_softmax(logits, indptr)
    N = graph.n_nodes
    W = sp.csr_matrix((alpha, cols, indptr), shape=(N, N))
    return StochasticMatrix(W, rows, cols, alpha, indptr, tape)


def aggregate_step(W, X) -> np.ndarray:
    """One aggregation ``x_i' = sum_j alpha_ij x_j``."""
    M = W.W if isinstance(W, StochasticMatrix) else W
    X = np.asarray(X, dtype=np.float64)
    if M.shape[1] != X.shape[0]:
        raise DimensionError(f"W is {M.shape}, X has {X.shape[0]} rows")
    return np.asarray(M @ X)


def recurrent_aggregate(W, X0, K: int) -> np.ndarray:
    if K < 0:
        raise ConfigError("K must be >= 0")
    X = np.asarray(X0, dtype=np.float64)
    for _ in range(K):
        X = aggregate_step(W, X)
    return X


# --------------------------------------------------------------------------
# stationary oracle


def support_components(W) -> np.ndarray:
    """Component labels of the (symmetrised) support of W."""
    from scipy.sparse.csgraph import connected_components

    M = sp.csr_matrix(W.W if isinstance(W, StochasticMatrix) else W)
    _, labels = connected_components(M, directed=True, connection="weak")
    remap: dict[int, int] = {}
    for lab in labels:
        remap.setdefault(int(lab), len(remap))
    return np.array([remap[int(l)] for l in labels], dtype=np.int64)


def stationary_oracle(W, tol: float = 1e-14, max_iter: int = 2_000_000) -> np.ndarray:
    """Left Perron vector per connected component, each block summing to one.

    Blocks of at most 50 states are solved as the linear system
    ``pi^T (W - I) = 0, sum(pi) = 1``; larger blocks use power iteration
    ``v <- v W`` from the uniform vector.  Neither path touches
    :func:`recurrent_aggregate`.
    """
    M = W.dense() if isinstance(W, StochasticMatrix) else (W.toarray() if sp.issparse(W) else np.asarray(W, float))
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ConfigError("W must be square")
    if np.any(M < 0) or np.max(np.abs(M.sum(axis=1) - 1.0)) > 1e-9:
        raise ConfigError("W is not row-stochastic")
    labels = support_components(sp.csr_matrix(M))
    pi = np.zeros(len(M))
    for c in range(labels.max() + 1 if len(labels) else 0):
        idx = np.nonzero(labels == c)[0]
        B = M[np.ix_(idx, idx)]
        n = len(idx)
        if n <= 50:
            A = np.vstack([B.T - np.eye(n), np.ones((1, n))])
            rhs = np.zeros(n + 1)
            rhs[-1] = 1.0
            v = np.linalg.lstsq(A, rhs, rcond=None)[0]
            v = np.clip(v, 0.0, None)
        else:
            v = np.full(n, 1.0 / n)
            for _ in range(max_iter):
                nv = v @ B
                if np.max(np.abs(nv - v)) < tol:
                    v = nv
                    break
                v = nv
        pi[idx] = v / v.sum()
    return pi


def stationary_limit(W, X0, pi=None) -> np.ndarray:
    """``1 pi^T X0`` evaluated per component."""
    X0 = np.asarray(X0, dtype=np.float64)
    pi = stationary_oracle(W) if pi is None else pi
    labels = support_components(W.W if isinstance(W, StochasticMatrix) else W)
    out = np.empty_like(X0)
    for c in range(labels.max() + 1):
        idx = labels == c
        out[idx] = pi[idx] @ X0[idx]
    return out


# --------------------------------------------------------------------------
# guided features


@dataclass
class GuidedFeature:
    eta: np.ndarray
    k_used: int


def guided_feature(heads, graph: TopoGraph, X, cur: int, goal: int, K: int = 3) -> GuidedFeature:
    """Concatenate over heads ``x_cur^(K) - x_goal^(K)``."""
    N = graph.n_nodes
    for name, v in (("cur", cur), ("goal", goal)):
        if not 0 <= int(v) < N:
            raise ConfigError(f"{name} node {v} out of range [0, {N})")
    if K < 1:
        raise ConfigError("K must be >= 1")
    comps = graph.components()
    if comps[cur] != comps[goal]:
        warnings.warn(f"nodes {cur} and {goal} are in different components", ComponentWarning, stacklevel=2)
    index = edge_index(graph)
    parts = []
    for head in heads:
        W = attention_coeffs(head, graph, X, index)
        XK = recurrent_aggregate(W, X, K)
        parts.append(XK[cur] - XK[goal])
    return GuidedFeature(np.concatenate(parts), K)


class GuidedFeatureExtractor:
    """Cached multi-head aggregation with a backward pass into the heads.

    ``refresh()`` must be called whenever the head parameters change.  With
    ``recompute_attention`` the attention matrix is re-evaluated on the
    aggregated features at every iteration instead of once on X0.
    """

    def __init__(self, heads, graph: TopoGraph, K: int = 3, recompute_attention: bool = False):
        if K < 0:
            raise ConfigError("K must be >= 0")
        self.heads = list(heads)
        self.graph = graph
        self.X0 = np.asarray(graph.features, dtype=np.float64)
        self.K = int(K)
        self.recompute = recompute_attention
        self.index = edge_index(graph)
        self._fwd = None
        self.refresh()

    @property
    def dim(self) -> int:
        return len(self.heads) * self.X0.shape[1]

    def refresh(self) -> None:
        fwd = []
        for head in self.heads:
            Xs = [self.X0]
            mats = []
            W = attention_coeffs(head, self.graph, self.X0, self.index)
            for k in range(self.K):
                if self.recompute and k > 0:
                    W = attention_coeffs(head, self.graph, Xs[-1], self.index)
                mats.append(W)
                Xs.append(aggregate_step(W, Xs[-1]))
            fwd.append((Xs, mats))
        self._fwd = fwd
        self.XK = [Xs[-1] for Xs, _ in fwd]

    def eta(self, cur, goal) -> np.ndarray:
        """Guided features for index arrays (or scalars) ``cur`` and ``goal``."""
        return np.concatenate([XK[cur] - XK[goal] for XK in self.XK], axis=-1)

    def backward(self, cur, goal, grad_eta) -> None:
        """Accumulate d(loss)/d(head params) given d(loss)/d(eta) per sample."""
        cur = np.atleast_1d(np.asarray(cur, dtype=np.int64))
        goal = np.atleast_1d(np.asarray(goal, dtype=np.int64))
        grad_eta = np.atleast_2d(grad_eta)
        D = self.X0.shape[1]
        rows, cols, indptr = self.index
        for h, (head, (Xs, mats)) in enumerate(zip(self.heads, self._fwd)):
            if self.K == 0:
                continue
            g = grad_eta[:, h * D : (h + 1) * D]
            G = np.zeros_like(self.X0)
            np.add.at(G, cur, g)
            np.add.at(G, goal, -g)
            if not np.any(G):
                continue
            d_alpha_total = np.zeros(len(rows))
            for k in range(self.K - 1, -1, -1):
                W = mats[k]
                d_alpha = np.einsum("ed,ed->e", G[rows], Xs[k][cols])
                G = np.asarray(W.W.T @ G)
                if self.recompute:
                    d_logit = segment_softmax_backward(W.alpha, d_alpha, indptr)
                    d_in = head.backward(W.tape, d_logit)
                    if k > 0:
                        np.add.at(G, rows, d_in[:, :D])
                        np.add.at(G, cols, d_in[:, D:])
                else:
                    d_alpha_total += d_alpha
            if not self.recompute:
                W = mats[0]
                d_logit = segment_softmax_backward(W.alpha, d_alpha_total, indptr)
                head.backward(W.tape, d_logit)


# --------------------------------------------------------------------------
# convergence diagnostics


@dataclass
class ConvergenceReport:
    step_delta: list  # ||X^(k+1) - X^(k)||_inf, k = 0..k_max-1
    row_gap: list  # max within-component column spread of X^(k), k = 0..k_max
    gap_to_limit: list  # ||X^(k) - 1 pi^T X0||_inf per component, k = 0..k_max
    component_converged: list  # per k: one bool per component (spread <= tol)
    first_k_below: int | None  # first k with step_delta <= tol
    n_components: int
    component_sizes: list
    component_limits: list  # pi^T X0 per component
    tol: float = 1e-9

    @property
    def final_gap(self) -> float:
        return self.gap_to_limit[-1]

    def to_csv(self) -> str:
        lines = ["k,max_row_gap,gap_to_limit,step_delta,component_flags"]
        for k in range(len(self.row_gap)):
            delta = self.step_delta[k] if k < len(self.step_delta) else float("nan")
            flags = ";".join("1" if f else "0" for f in self.component_converged[k])
            lines.append(f"{k},{self.row_gap[k]:.6e},{self.gap_to_limit[k]:.6e},{delta:.6e},{flags}")
        return "\n".join(lines) + "\n"


def converge_diag(graph: TopoGraph, head: AttentionHead, X=None, k_max: int = 10000, tol: float = 1e-9):
    """Trace the aggregation of one head towards its stationary limit."""
    X0 = np.asarray(graph.features if X is None else X, dtype=np.float64)
    W = attention_coeffs(head, graph, X0)
    labels = support_components(W)
    n_comp = int(labels.max() + 1)
    limit = stationary_limit(W, X0)
    members = [np.nonzero(labels == c)[0] for c in range(n_comp)]

    def spreads(X):
        return [float(np.max(X[m].max(axis=0) - X[m].min(axis=0))) if len(m) else 0.0 for m in members]

    X = X0
    deltas, gaps, lim_gaps, flags = [], [], [], []
    first = None
    s = spreads(X)
    gaps.append(max(s))
    lim_gaps.append(float(np.max(np.abs(X - limit))))
    flags.append([v <= tol for v in s])
    for k in range(k_max):
        Xn = aggregate_step(W, X)
        d = float(np.max(np.abs(Xn - X)))
        deltas.append(d)
        if first is None and d <= tol:
            first = k
        X = Xn
        s = spreads(X)
        gaps.append(max(s))
        lim_gaps.append(float(np.max(np.abs(X - limit))))
        flags.append([v <= tol for v in s])
    return ConvergenceReport(
        deltas, gaps, lim_gaps, flags, first, n_comp,
        [len(m) for m in members], [limit[m[0]].tolist() for m in members], tol,
    )
