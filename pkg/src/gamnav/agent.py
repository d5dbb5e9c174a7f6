"""Synchronous advantage actor-critic on ``s_t = [o_t, eta_t]`` and the
three baselines (FF-nogoal, FF-goal, LSTM-nogoal)."""

from __future__ import annotations

import io
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import nn
from .errors import ConfigError, NumericalError, PreconditionError
from .gam import GuidedFeatureExtractor, Localizer, heads_from_params, make_heads
from .maze import (
    GOAL_REWARD,
    N_ACTIONS,
    OBS_DIM,
    AgentPose,
    MazeEnv,
    MazeSpec,
    render_observation,
)
from .memory import SimilarityModel, TopoGraph

log = logging.getLogger(__name__)

VARIANTS = ("gam", "ff", "ff-goal", "lstm")
VARIANT_ALIASES = {"ff-nogoal": "ff", "lstm-nogoal": "lstm", "GAM": "gam"}
SUCCESS_WINDOW = 500
SCORE_WINDOWS = {"maze-small": 2000, "maze-large": 6000}


def canonical_variant(variant: str) -> str:
    v = VARIANT_ALIASES.get(variant, variant)
    if v not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    return v


@dataclass
class AgentConfig:
    gamma: float = 0.99
    beta: float = 0.01
    eps_start: float = 0.1
    eps_end: float = 0.02
    eps_anneal_frac: float = 0.5
    t_h: int = 20
    lr: float = 2.5e-4
    total_steps: int = 200_000
    n_workers: int = 8
    K: int = 3
    H: int = 4
    L_loc: int = 5
    hidden: int = 128
    hidden2: int = 64
    lstm_hidden: int = 64
    att_hidden: int = 16
    episode_length: int = 2000
    grad_clip: float = 0.5
    recompute_attention: bool = False
    noise_sigma: float = 0.0
    eval_mode: str = "sample"
    goal_mode: str = "fixed"
    goal_random_frac: float = 1.0
    heldout_goals: str = ""

    def validate(self) -> "AgentConfig":
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must lie in (0, 1)")
        for name in ("lr", "t_h", "n_workers", "H", "hidden", "hidden2", "lstm_hidden", "att_hidden",
                     "episode_length"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.beta < 0 or self.total_steps < 0 or self.K < 0 or self.grad_clip < 0:
            raise ConfigError("beta, total_steps, K and grad_clip must be non-negative")
        for name in ("eps_start", "eps_end", "eps_anneal_frac"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.L_loc < 1 or self.L_loc % 2 == 0:
            raise ConfigError("L_loc must be a positive odd integer")
        if self.eval_mode not in ("sample", "argmax"):
            raise ConfigError("eval_mode must be 'sample' or 'argmax'")
        if self.goal_mode not in ("fixed", "random"):
            raise ConfigError("goal_mode must be 'fixed' or 'random'")
        if not 0.0 <= self.goal_random_frac <= 1.0:
            raise ConfigError("goal_random_frac must lie in [0, 1]")
        parse_cells(self.heldout_goals)
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown agent options {sorted(unknown)}")
        return cls(**d).validate()


def parse_cells(text: str) -> list[tuple[int, int]]:
    """``"x,y;x,y"`` -> list of cells."""
    cells = []
    for part in text.replace(" ", "").split(";"):
        if not part:
            continue
        try:
            x, y = part.split(",")
            cells.append((int(x), int(y)))
        except ValueError as exc:
            raise ConfigError(f"bad cell {part!r}; expected x,y") from exc
    return cells


def goal_candidates(maze: MazeSpec, heldout=()) -> list[tuple[int, int]]:
    """Cells eligible as training goals: free, not a spawn, not held out."""
    banned = {p.cell for p in maze.spawn_poses} | {tuple(c) for c in heldout}
    cells = [c for c in maze.free_cells() if c not in banned]
    if not cells:
        raise ConfigError("no free cell is eligible as a training goal")
    return cells


def novel_starts(maze: MazeSpec, n: int, seed: int = 0) -> list[AgentPose]:
    """``n`` start poses on free cells that are neither spawns nor the goal."""
    banned = {p.cell for p in maze.spawn_poses} | {tuple(maze.goal_cell)}
    cells = [c for c in maze.free_cells() if c not in banned]
    if len(cells) < n:
        raise ConfigError(f"maze has only {len(cells)} cells eligible as novel starts, need {n}")
    rng = np.random.default_rng([seed, 29])
    pick = rng.choice(len(cells), n, replace=False)
    return [AgentPose(cells[i][0], cells[i][1], int(rng.integers(4))) for i in pick]


def explore_eps(config: AgentConfig, step: int) -> float:
    """Linear anneal from eps_start to eps_end over the first eps_anneal_frac of training."""
    horizon = config.eps_anneal_frac * config.total_steps
    if horizon <= 0:
        return config.eps_end
    frac = min(step / horizon, 1.0)
    return config.eps_start + frac * (config.eps_end - config.eps_start)


# --------------------------------------------------------------------------
# state assembly


def make_state(variant: str, obs, guided=None, goal_obs=None) -> np.ndarray:
    """``[obs, eta]`` for GAM, ``[obs, goal_obs]`` for FF-goal, ``obs`` otherwise."""
    variant = canonical_variant(variant)
    obs = np.asarray(obs, dtype=np.float64)
    if variant == "gam":
        if guided is None:
            raise ConfigError("GAM state needs a guided feature")
        eta = guided.eta if hasattr(guided, "eta") else np.asarray(guided)
        return np.concatenate([obs, eta], axis=-1)
    if guided is not None:
        raise ConfigError(f"{variant} state takes no guided feature")
    if variant == "ff-goal":
        if goal_obs is None:
            raise ConfigError("FF-goal state needs the goal observation")
        goal_obs = np.broadcast_to(goal_obs, obs.shape)
        return np.concatenate([obs, goal_obs], axis=-1)
    return obs


# --------------------------------------------------------------------------
# network


class PolicyNet:
    """Shared trunk with a joint output layer: 7 policy logits + 1 value.

    FF variants use a two-hidden-layer MLP; the LSTM variant replaces the
    second hidden layer with an LSTM cell.
    """

    def __init__(self, state_dim: int, config: AgentConfig, params: nn.ParamStore, recurrent: bool):
        self.state_dim = state_dim
        self.recurrent = recurrent
        self.params = params
        if recurrent:
            self.enc = nn.MlpSpec((state_dim, config.hidden), "relu", "linear")
            self.out = nn.MlpSpec((config.lstm_hidden, N_ACTIONS + 1), "relu", "linear")
            self.n_hidden = config.lstm_hidden
        else:
            self.trunk = nn.MlpSpec((state_dim, config.hidden, config.hidden2, N_ACTIONS + 1), "relu", "linear")
            self.n_hidden = 0

    @classmethod
    def create(cls, state_dim, config, params, recurrent, rng) -> "PolicyNet":
        net = cls(state_dim, config, params, recurrent)
        if recurrent:
            nn.init_mlp(params, "pi_enc.", net.enc, rng)
            nn.init_lstm(params, "lstm.", config.hidden, config.lstm_hidden, rng)
            nn.init_mlp(params, "pi_out.", net.out, rng)
        else:
            nn.init_mlp(params, "pi.", net.trunk, rng)
        # small final layer keeps the initial policy close to uniform
        last = "pi_out.W0" if recurrent else f"pi.W{net.trunk.n_layers - 1}"
        params.values[last] *= 0.1
        return net

    def initial_state(self, batch: int) -> nn.LstmState | None:
        return nn.LstmState.zeros(self.n_hidden, batch) if self.recurrent else None

    def step(self, states, lstm_state=None):
        """Forward one time step for a batch; returns ``(logits, values, new_lstm_state)``."""
        states = np.atleast_2d(states)
        if not self.recurrent:
            out, _ = nn.mlp_forward(self.trunk, self.params, states, "pi.")
            return out[:, :N_ACTIONS], out[:, N_ACTIONS], None
        z, _ = nn.mlp_forward(self.enc, self.params, states, "pi_enc.")
        new, _ = nn.lstm_forward(self.params, np.maximum(z, 0.0), lstm_state, "lstm.")
        out, _ = nn.mlp_forward(self.out, self.params, new.hidden, "pi_out.")
        return out[:, :N_ACTIONS], out[:, N_ACTIONS], new

    def unroll(self, states, h0=None, resets=None):
        """Forward a (T, B, S) block; ``resets[t, b]`` zeroes the LSTM state before step t."""
        T, B, S = states.shape
        if not self.recurrent:
            out, tape = nn.mlp_forward(self.trunk, self.params, states.reshape(T * B, S), "pi.")
            out = out.reshape(T, B, -1)
            return out[..., :N_ACTIONS], out[..., N_ACTIONS], ("ff", tape, T, B, S)
        h, c = h0.hidden.copy(), h0.cell.copy()
        caches = []
        outs = []
        for t in range(T):
            keep = 1.0 if resets is None else (~resets[t])[:, None].astype(np.float64)
            h, c = h * keep, c * keep
            z, et = nn.mlp_forward(self.enc, self.params, states[t], "pi_enc.")
            st, lc = nn.lstm_forward(self.params, np.maximum(z, 0.0), nn.LstmState(h, c), "lstm.")
            o, ot = nn.mlp_forward(self.out, self.params, st.hidden, "pi_out.")
            caches.append((keep, z, et, lc, ot))
            outs.append(o)
            h, c = st.hidden, st.cell
        out = np.stack(outs)
        return out[..., :N_ACTIONS], out[..., N_ACTIONS], ("lstm", caches, T, B, S)

    def backward(self, cache, d_logits, d_values) -> np.ndarray:
        """Accumulate parameter grads; returns d(loss)/d(states) shaped (T, B, S)."""
        kind, inner, T, B, S = cache
        d_out = np.concatenate([d_logits, d_values[..., None]], axis=-1)
        if kind == "ff":
            d_in = nn.mlp_backward(self.trunk, self.params, inner, d_out.reshape(T * B, -1), "pi.")
            return d_in.reshape(T, B, S)
        d_states = np.zeros((T, B, S))
        dh = np.zeros((B, self.n_hidden))
        dc = np.zeros((B, self.n_hidden))
        for t in range(T - 1, -1, -1):
            keep, z, et, lc, ot = inner[t]
            dh = dh + nn.mlp_backward(self.out, self.params, ot, d_out[t], "pi_out.")
            dx, dh, dc = nn.lstm_backward(self.params, lc, dh, dc, "lstm.")
            d_states[t] = nn.mlp_backward(self.enc, self.params, et, dx * (z > 0), "pi_enc.")
            dh, dc = dh * keep, dc * keep
        return d_states


# --------------------------------------------------------------------------
# action selection, returns, loss


def policy_stats(logits):
    logp = nn.log_softmax(logits, axis=-1)
    p = np.exp(logp)
    entropy = -np.sum(p * logp, axis=-1)
    return p, logp, entropy


def select_action(net: PolicyNet, state, eps: float, rng, lstm_state=None):
    """Epsilon-greedy over a softmax policy for a single state.

    Returns ``(action, log_prob, entropy, value)``; log-prob and entropy
    always describe the policy distribution, however the action was drawn.
    """
    if not 0.0 <= eps <= 1.0:
        raise ConfigError("eps must lie in [0, 1]")
    logits, values, _ = net.step(np.asarray(state)[None, :], lstm_state)
    p, logp, ent = policy_stats(logits[0])
    action = sample_actions(p[None, :], eps, [rng])[0]
    return int(action), float(logp[action]), float(ent), float(values[0])


def sample_actions(probs, eps, rngs) -> np.ndarray:
    actions = np.empty(len(probs), dtype=np.int64)
    for b, rng in enumerate(rngs):
        if rng.random() < eps:
            actions[b] = rng.integers(N_ACTIONS)
        else:
            cdf = np.cumsum(probs[b])
            actions[b] = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), N_ACTIONS - 1)
    return actions


def compute_returns(rewards, gamma: float, bootstrap=0.0, dones=None) -> np.ndarray:
    """Backward recursion ``R_t = r_t + gamma R_{t+1}``.

    ``bootstrap`` seeds the value after the last step; ``dones[t]`` cuts the
    recursion after step t (the episode ended there).
    """
    r = np.asarray(rewards, dtype=np.float64)
    out = np.zeros_like(r)
    R = np.asarray(bootstrap, dtype=np.float64) * np.ones_like(r[0] if r.ndim > 1 else r[:1][0])
    for t in range(len(r) - 1, -1, -1):
        if dones is not None:
            R = np.where(np.asarray(dones)[t], 0.0, R)
        R = r[t] + gamma * R
        out[t] = R
    return out


@dataclass
class A2CLoss:
    loss: float
    d_logits: np.ndarray
    d_values: np.ndarray
    policy_loss: float
    value_loss: float
    entropy: float


def a2c_loss(logits, values, actions, returns, beta: float) -> A2CLoss:
    """Mean over samples of ``-log pi(a|s) A + (R - V)^2 - beta H(pi)``.

    The advantage ``A = R - V`` in the policy term is held constant.
    """
    logits = np.asarray(logits, dtype=np.float64)
    lead = logits.shape[:-1]
    n = int(np.prod(lead))
    actions = np.asarray(actions, dtype=np.int64)
    p, logp, ent = policy_stats(logits)
    lp_a = np.take_along_axis(logp, actions[..., None], axis=-1)[..., 0]
    adv = returns - values
    pol = -lp_a * adv
    val = adv * adv
    loss = (pol.sum() + val.sum() - beta * ent.sum()) / n
    if not np.isfinite(loss):
        raise NumericalError("non-finite A2C loss")
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, actions[..., None], 1.0, axis=-1)
    d_logits = -adv[..., None] * (onehot - p) + beta * p * (logp + ent[..., None])
    d_values = -2.0 * adv
    return A2CLoss(float(loss), d_logits / n, d_values / n, float(pol.mean()), float(val.mean()),
                   float(ent.mean()))


# --------------------------------------------------------------------------
# agent


class Agent:
    """Policy network plus, for GAM, the graph-memory feature path."""

    def __init__(self, variant, config: AgentConfig, params: nn.ParamStore, maze_goal_obs=None,
                 graph: TopoGraph | None = None, model: SimilarityModel | None = None):
        self.variant = canonical_variant(variant)
        self.config = config
        self.params = params
        self.graph = graph
        self.model = model
        self.goal_obs = maze_goal_obs
        self.extractor = None
        self.localizer = None
        self.goal_node = None
        if self.variant == "gam":
            if graph is None or model is None:
                raise PreconditionError("GAM variant needs a built graph and a trained similarity model")
            heads = heads_from_params(params)
            self.extractor = GuidedFeatureExtractor(heads, graph, config.K, config.recompute_attention)
            self.localizer = Localizer(model, graph, config.L_loc)
            if maze_goal_obs is not None:
                self.goal_node = self.localizer(maze_goal_obs)
        self.net = PolicyNet(self.state_dim, config, params, self.variant == "lstm")

    @property
    def state_dim(self) -> int:
        if self.variant == "gam":
            return OBS_DIM + self.config.H * self.graph.features.shape[1]
        if self.variant == "ff-goal":
            return 2 * OBS_DIM
        return OBS_DIM

    @classmethod
    def create(cls, variant, config: AgentConfig, seed: int, goal_obs=None, graph=None, model=None):
        variant = canonical_variant(variant)
        config.validate()
        rng = np.random.default_rng([seed, 7])
        params = nn.ParamStore()
        if variant == "gam":
            if graph is None or model is None:
                raise PreconditionError("GAM variant needs a built graph and a trained similarity model")
            make_heads(params, config.H, graph.features.shape[1], rng, config.att_hidden)
            state_dim = OBS_DIM + config.H * graph.features.shape[1]
        else:
            state_dim = 2 * OBS_DIM if variant == "ff-goal" else OBS_DIM
        PolicyNet.create(state_dim, config, params, variant == "lstm", rng)
        return cls(variant, config, params, goal_obs, graph, model)

    def set_goal(self, goal_obs) -> None:
        """Point the agent at a new goal observation (re-localises the goal node)."""
        self.goal_obs = np.asarray(goal_obs, dtype=np.float64)
        if self.variant == "gam":
            self.goal_node = self.localizer(self.goal_obs)

    def states(self, obs_batch, goal_nodes=None, goal_obs=None):
        """States for a batch of observations, plus the localised nodes (GAM).

        ``goal_nodes`` / ``goal_obs`` override the agent's goal per row.
        """
        obs_batch = np.atleast_2d(obs_batch)
        if self.variant == "gam":
            cur = self.localizer.many(obs_batch)
            goal = np.full(len(cur), self.goal_node, dtype=np.int64) if goal_nodes is None else goal_nodes
            eta = self.extractor.eta(cur, goal)
            return make_state("gam", obs_batch, eta), cur
        if self.variant == "ff-goal":
            g = self.goal_obs if goal_obs is None else goal_obs
            return make_state("ff-goal", obs_batch, goal_obs=g), None
        return make_state(self.variant, obs_batch), None

    def refresh(self) -> None:
        if self.extractor is not None:
            self.extractor.refresh()


@dataclass
class Rollout:
    obs: np.ndarray  # (T, B, D_obs)
    actions: np.ndarray  # (T, B)
    rewards: np.ndarray  # (T, B)
    dones: np.ndarray  # (T, B) episode ended after step t
    values: np.ndarray  # (T, B)
    log_probs: np.ndarray
    entropies: np.ndarray
    bootstrap: np.ndarray  # (B,)
    cur_nodes: np.ndarray | None = None  # (T, B)
    h0: nn.LstmState | None = None
    resets: np.ndarray | None = None  # (T, B) state reset before step t
    goal_nodes: np.ndarray | None = None  # (T, B) per-step goal node, random-goal training
    goal_obs: np.ndarray | None = None  # (T, B, D_obs)


def rollout_loss(agent: Agent, ro: Rollout, returns, backward: bool = True) -> A2CLoss:
    """Recompute states from stored observations and evaluate the A2C loss.

    Gradients flow into the policy/value weights and, for GAM, through the
    guided features into the attention heads.
    """
    T, B, _ = ro.obs.shape
    flat_obs = ro.obs.reshape(T * B, -1)
    if agent.variant == "gam":
        cur = ro.cur_nodes.reshape(-1)
        if ro.goal_nodes is not None:
            goal = ro.goal_nodes.reshape(-1)
        else:
            goal = np.full(len(cur), agent.goal_node, dtype=np.int64)
        states = make_state("gam", flat_obs, agent.extractor.eta(cur, goal))
    elif agent.variant == "ff-goal":
        g = agent.goal_obs if ro.goal_obs is None else ro.goal_obs.reshape(T * B, -1)
        states = make_state("ff-goal", flat_obs, goal_obs=g)
    else:
        states = flat_obs
    states = states.reshape(T, B, -1)
    logits, values, cache = agent.net.unroll(states, ro.h0, ro.resets)
    res = a2c_loss(logits, values, ro.actions, returns, agent.config.beta)
    if backward:
        d_states = agent.net.backward(cache, res.d_logits, res.d_values)
        if agent.variant == "gam":
            d_eta = d_states.reshape(T * B, -1)[:, OBS_DIM:]
            agent.extractor.backward(cur, goal, d_eta)
    return res


# --------------------------------------------------------------------------
# training


METRIC_COLUMNS = ("step", "episode_reward", "success_rolling", "policy_entropy", "value_loss", "eta_norm_mean")


@dataclass
class TrainResult:
    agent: Agent
    metrics: list = field(default_factory=list)
    attempts: int = 0
    successes: int = 0

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(METRIC_COLUMNS) + "\n")
        for row in self.metrics:
            buf.write(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in METRIC_COLUMNS))
            buf.write("\n")
        return buf.getvalue()


def goal_observation(maze: MazeSpec) -> np.ndarray:
    """What the agent sees standing on the goal cell facing north."""
    return render_observation(maze, AgentPose(maze.goal_cell[0], maze.goal_cell[1], 0))


def train(variant, maze: MazeSpec, config: AgentConfig, seed: int = 0, graph=None, model=None,
          agent: Agent | None = None, rolling: int = 100, progress=None) -> TrainResult:
    """Synchronous A2C over ``n_workers`` environments.

    Every ``t_h`` steps the loss is evaluated on the batched rollout and one
    RMSProp step is applied.  Success statistics follow the evaluation
    protocol: each (re)spawn starts an attempt that succeeds if the goal is
    reached within 500 steps.  With ``goal_mode='random'`` every attempt
    draws its own goal cell (see :func:`goal_candidates`).
    """
    config.validate()
    goal_obs = goal_observation(maze)
    if agent is None:
        agent = Agent.create(variant, config, seed, goal_obs, graph, model)
    result = TrainResult(agent)
    if config.total_steps == 0:
        return result
    B = config.n_workers
    seeds = np.random.SeedSequence([seed, 11]).spawn(2 * B)
    envs = [MazeEnv(maze, np.random.default_rng(seeds[b]), config.noise_sigma, config.episode_length)
            for b in range(B)]
    act_rngs = [np.random.default_rng(seeds[B + b]) for b in range(B)]
    random_goals = config.goal_mode == "random"
    goal_obs_w = np.broadcast_to(goal_obs, (B, OBS_DIM)).copy()
    goal_node_w = np.full(B, agent.goal_node if agent.goal_node is not None else -1, dtype=np.int64)
    if random_goals:
        cands = goal_candidates(maze, parse_cells(config.heldout_goals))
        goal_rngs = [np.random.default_rng(s) for s in np.random.SeedSequence([seed, 13]).spawn(B)]
        goal_mazes: dict = {}

    def new_goal(b):
        rng = goal_rngs[b]
        if rng.random() < config.goal_random_frac:
            cell = cands[int(rng.integers(len(cands)))]
        else:
            cell = maze.goal_cell
        if cell not in goal_mazes:
            gm = maze.with_goal(cell)
            g_obs = goal_observation(gm)
            goal_mazes[cell] = (gm, g_obs, agent.localizer(g_obs) if agent.variant == "gam" else -1)
        envs[b].maze, goal_obs_w[b], goal_node_w[b] = goal_mazes[cell]

    if random_goals:
        for b in range(B):
            new_goal(b)
    obs = np.stack([env.reset() for env in envs])
    lstm_state = agent.net.initial_state(B)
    need_reset = np.zeros(B, dtype=bool)
    ep_reward = np.zeros(B)
    attempt_t = np.zeros(B, dtype=np.int64)
    attempt_open = np.ones(B, dtype=bool)
    outcomes: list[int] = []
    last = {"policy_entropy": float("nan"), "value_loss": float("nan"), "eta_norm_mean": 0.0}
    steps = 0
    T = config.t_h
    while steps < config.total_steps:
        ro_obs = np.zeros((T, B, OBS_DIM))
        ro_act = np.zeros((T, B), dtype=np.int64)
        ro_rew = np.zeros((T, B))
        ro_done = np.zeros((T, B), dtype=bool)
        ro_val = np.zeros((T, B))
        ro_lp = np.zeros((T, B))
        ro_ent = np.zeros((T, B))
        ro_cur = np.zeros((T, B), dtype=np.int64) if agent.variant == "gam" else None
        ro_reset = np.zeros((T, B), dtype=bool)
        ro_goal_node = np.zeros((T, B), dtype=np.int64) if random_goals else None
        ro_goal_obs = np.zeros((T, B, OBS_DIM)) if random_goals and agent.variant == "ff-goal" else None
        h0 = lstm_state
        ro_reset[0] = need_reset
        need_reset = np.zeros(B, dtype=bool)
        eta_norms = []
        for t in range(T):
            eps = explore_eps(config, steps)
            if random_goals:
                ro_goal_node[t] = goal_node_w
                if ro_goal_obs is not None:
                    ro_goal_obs[t] = goal_obs_w
                states, cur = agent.states(obs, goal_node_w, goal_obs_w)
            else:
                states, cur = agent.states(obs)
            if cur is not None:
                ro_cur[t] = cur
                eta_norms.append(float(np.mean(np.linalg.norm(states[:, OBS_DIM:], axis=1))))
            if lstm_state is not None:
                keep = (~ro_reset[t])[:, None]
                lstm_state = nn.LstmState(lstm_state.hidden * keep, lstm_state.cell * keep)
            logits, values, lstm_state = agent.net.step(states, lstm_state)
            p, logp, ent = policy_stats(logits)
            actions = sample_actions(p, eps, act_rngs)
            ro_obs[t] = obs
            ro_act[t] = actions
            ro_val[t] = values
            ro_lp[t] = logp[np.arange(B), actions]
            ro_ent[t] = ent
            for b, env in enumerate(envs):
                res = env.step(int(actions[b]))
                ro_rew[t, b] = res.reward
                ep_reward[b] += res.reward
                attempt_t[b] += 1
                if res.respawned:
                    if attempt_open[b]:
                        outcomes.append(1)
                    attempt_open[b] = True
                    attempt_t[b] = 0
                    if random_goals:
                        new_goal(b)
                elif attempt_open[b] and attempt_t[b] >= SUCCESS_WINDOW:
                    outcomes.append(0)
                    attempt_open[b] = False
                if res.done:
                    ro_done[t, b] = True
                    roll = outcomes[-rolling:]
                    result.metrics.append({
                        "step": steps + B,
                        "episode_reward": float(round(ep_reward[b], 10)),
                        "success_rolling": float(np.mean(roll)) if roll else 0.0,
                        "policy_entropy": last["policy_entropy"],
                        "value_loss": last["value_loss"],
                        "eta_norm_mean": last["eta_norm_mean"],
                    })
                    ep_reward[b] = 0.0
                    if random_goals:
                        new_goal(b)
                    obs_b = env.reset()
                    attempt_open[b] = True
                    attempt_t[b] = 0
                    if t + 1 < T:
                        ro_reset[t + 1, b] = True
                    else:
                        need_reset[b] = True
                else:
                    obs_b = res.observation
                obs[b] = obs_b
            steps += B
        # bootstrap from the post-rollout state
        if random_goals:
            states, _ = agent.states(obs, goal_node_w, goal_obs_w)
        else:
            states, _ = agent.states(obs)
        boot_state = lstm_state
        if boot_state is not None:
            keep = (~need_reset)[:, None]
            boot_state = nn.LstmState(boot_state.hidden * keep, boot_state.cell * keep)
        _, boot_v, _ = agent.net.step(states, boot_state)
        ro = Rollout(ro_obs, ro_act, ro_rew, ro_done, ro_val, ro_lp, ro_ent, boot_v, ro_cur, h0, ro_reset,
                     ro_goal_node, ro_goal_obs)
        returns = compute_returns(ro_rew, config.gamma, boot_v, ro_done)
        agent.params.zero_grad()
        loss = rollout_loss(agent, ro, returns)
        nn.clip_grad_norm(agent.params, config.grad_clip)
        nn.rmsprop_step(agent.params, config.lr)
        agent.refresh()
        last = {
            "policy_entropy": float(round(loss.entropy, 10)),
            "value_loss": float(round(loss.value_loss, 10)),
            "eta_norm_mean": float(round(np.mean(eta_norms), 10)) if eta_norms else 0.0,
        }
        if progress is not None:
            progress(steps, outcomes[-rolling:], last)
    result.attempts = len(outcomes)
    result.successes = int(sum(outcomes))
    return result


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    score: float
    success_rate: float
    outcomes: list  # per start: {"start", "success", "steps"}
    scores: list  # per start total reward over the scoring window
    trajectories: list  # per start list of (t, x, y, heading, reward)


def _run_batch(agent: Agent, maze: MazeSpec, starts, n_steps, rng_seed, mode, stop_on_goal):
    B = len(starts)
    seeds = np.random.SeedSequence([rng_seed, 23]).spawn(2 * B)
    envs = [MazeEnv(maze, np.random.default_rng(seeds[b]), agent.config.noise_sigma, n_steps) for b in range(B)]
    act_rngs = [np.random.default_rng(seeds[B + b]) for b in range(B)]
    obs = np.stack([env.reset(p) for env, p in zip(envs, starts)])
    lstm_state = agent.net.initial_state(B)
    active = np.ones(B, dtype=bool)
    first_goal = np.full(B, -1)
    total = np.zeros(B)
    traj = [[(0, p.x, p.y, p.heading, 0.0)] for p in starts]
    for t in range(n_steps):
        states, _ = agent.states(obs)
        logits, _, lstm_state = agent.net.step(states, lstm_state)
        p, _, _ = policy_stats(logits)
        if mode == "argmax":
            actions = np.argmax(p, axis=1)
        else:
            actions = sample_actions(p, 0.0, act_rngs)
        for b, env in enumerate(envs):
            if not active[b]:
                continue
            res = env.step(int(actions[b]))
            total[b] += res.reward
            traj[b].append((t + 1, res.pose.x, res.pose.y, res.pose.heading, res.reward))
            obs[b] = res.observation
            if res.reward == GOAL_REWARD and first_goal[b] < 0:
                first_goal[b] = t + 1
                if stop_on_goal:
                    active[b] = False
        if not active.any():
            break
    return first_goal, total, traj


def evaluate(agent: Agent, maze: MazeSpec, starts, max_steps: int = SUCCESS_WINDOW, score_steps=None,
             seed: int = 0, mode: str | None = None) -> EvalResult:
    """Success from each start within ``max_steps`` plus the fixed-window score.

    Actions are sampled from the policy with eps=0 unless ``mode='argmax'``.
    The goal is ``maze.goal_cell``; the agent's goal observation should
    already point there (see :meth:`Agent.set_goal`).
    """
    starts = list(starts)
    if not starts:
        raise ConfigError("evaluation needs at least one start pose")
    mode = mode or agent.config.eval_mode
    if score_steps is None:
        score_steps = SCORE_WINDOWS.get(maze.name, 2000)
    first, _, traj = _run_batch(agent, maze, starts, max_steps, seed, mode, stop_on_goal=True)
    outcomes = [
        {"start": p.to_dict(), "success": bool(f > 0), "steps": int(f) if f > 0 else None}
        for p, f in zip(starts, first)
    ]
    scores = []
    if score_steps > 0:
        _, total, _ = _run_batch(agent, maze, starts, score_steps, seed + 1, mode, stop_on_goal=False)
        scores = [float(round(v, 10)) for v in total]
    return EvalResult(
        float(np.mean(scores)) if scores else float("nan"),
        float(np.mean([o["success"] for o in outcomes])),
        outcomes,
        scores,
        traj,
    )


def config_dict(config: AgentConfig) -> dict:
    return asdict(config)
