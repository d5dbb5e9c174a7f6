"""Discrete grid maze: poses, seven-action dynamics, rewards, ray observations.

Coordinates are ``(x, y)`` with ``x`` the column and ``y`` the row, rows
growing downward.  Headings are indices into ``"NESW"``.

ASCII format::

    #  wall (texture 0)     0-7  wall with that texture id
    .  free                 S    free spawn cell (heading N)
    G  goal cell (free)
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import ConfigError, MazeError

ACTIONS = (
    "move_forward",
    "move_backward",
    "move_left",
    "move_right",
    "turn_left",
    "turn_right",
    "not_move",
)
N_ACTIONS = len(ACTIONS)
HEADINGS = "NESW"
_DIRS = ((0, -1), (1, 0), (0, 1), (-1, 0))
_HEADING_ANGLE = (90.0, 0.0, 270.0, 180.0)

GOAL_REWARD = 10.0
STEP_PENALTY = -0.05
N_RAYS = 12
N_TEXTURES = 8
OBS_DIM = 3 * N_RAYS + N_RAYS * N_TEXTURES
UNREACHABLE = math.inf

BUNDLED = {"maze-small": "maze_small.txt", "maze-large": "maze_large.txt"}


@dataclass(frozen=True, order=True)
class AgentPose:
    x: int
    y: int
    heading: int = 0

    @property
    def cell(self) -> tuple[int, int]:
        return (self.x, self.y)

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "h": HEADINGS[self.heading]}

    @classmethod
    def from_dict(cls, d) -> "AgentPose":
        h = d["h"]
        return cls(int(d["x"]), int(d["y"]), HEADINGS.index(h) if isinstance(h, str) else int(h))


@dataclass(eq=False)
class MazeSpec:
    walls: np.ndarray  # (H, W) bool
    texture: np.ndarray  # (H, W) int, meaningful on wall cells
    spawn_poses: tuple[AgentPose, ...]
    goal_cell: tuple[int, int]
    name: str = "maze"
    _obs_cache: dict = field(default_factory=dict, repr=False)
    _dist_cache: dict = field(default_factory=dict, repr=False)

    @property
    def height(self) -> int:
        return self.walls.shape[0]

    @property
    def width(self) -> int:
        return self.walls.shape[1]

    @property
    def d_max(self) -> float:
        return float(max(self.width, self.height))

    def is_free(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height and not self.walls[y, x]

    def free_cells(self) -> list[tuple[int, int]]:
        ys, xs = np.nonzero(~self.walls)
        return sorted(zip(xs.tolist(), ys.tolist()), key=lambda c: (c[1], c[0]))

    def with_goal(self, cell) -> "MazeSpec":
        cell = (int(cell[0]), int(cell[1]))
        if not self.is_free(*cell):
            raise MazeError(f"goal cell {cell} is not free")
        spawns = tuple(p for p in self.spawn_poses if p.cell != cell)
        # observations and distances do not depend on the goal: share caches
        return MazeSpec(self.walls, self.texture, spawns, cell, self.name, self._obs_cache, self._dist_cache)

    def with_spawns(self, poses) -> "MazeSpec":
        poses = tuple(poses)
        for p in poses:
            if not self.is_free(p.x, p.y):
                raise MazeError(f"spawn {p} is not on a free cell")
        return MazeSpec(self.walls, self.texture, poses, self.goal_cell, self.name, self._obs_cache, self._dist_cache)


def load_maze(text: str, name: str = "maze") -> MazeSpec:
    rows = [r.rstrip("\r") for r in text.strip("\n").split("\n")]
    rows = [r for r in rows if r.strip()]
    if not rows:
        raise MazeError("empty maze")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise MazeError("non-rectangular maze: all rows must have equal length")
    H = len(rows)
    walls = np.zeros((H, width), dtype=bool)
    texture = np.zeros((H, width), dtype=np.int64)
    spawns, goals = [], []
    for y, row in enumerate(rows):
        for x, ch in enumerate(row):
            if ch == "#":
                walls[y, x] = True
            elif ch.isdigit():
                if int(ch) >= N_TEXTURES:
                    raise MazeError(f"texture id {ch} out of range at ({x},{y})")
                walls[y, x] = True
                texture[y, x] = int(ch)
            elif ch == ".":
                pass
            elif ch == "S":
                spawns.append(AgentPose(x, y, 0))
            elif ch == "G":
                goals.append((x, y))
            else:
                raise MazeError(f"unknown maze character {ch!r} at ({x},{y})")
    if len(goals) != 1:
        raise MazeError(f"maze needs exactly one goal 'G', found {len(goals)}")
    free = list(zip(*np.nonzero(~walls)))
    start = (int(free[0][1]), int(free[0][0]))
    seen = {start}
    queue = deque([start])
    while queue:
        cx, cy = queue.popleft()
        for dx, dy in _DIRS:
            nx, ny = cx + dx, cy + dy
            if 0 <= nx < width and 0 <= ny < H and not walls[ny, nx] and (nx, ny) not in seen:
                seen.add((nx, ny))
                queue.append((nx, ny))
    if len(seen) != len(free):
        raise MazeError(f"disconnected free space: {len(seen)} of {len(free)} cells reachable")
    return MazeSpec(walls, texture, tuple(spawns), goals[0], name)


def load_bundled(name: str) -> MazeSpec:
    if name not in BUNDLED:
        raise ConfigError(f"unknown bundled maze {name!r}; choose from {sorted(BUNDLED)}")
    text = resources.files("gamnav.mazes").joinpath(BUNDLED[name]).read_text()
    return load_maze(text, name=name)


def resolve_maze(ref: str) -> MazeSpec:
    """A bundled maze name or a path to an ASCII maze file."""
    if ref in BUNDLED:
        return load_bundled(ref)
    try:
        with open(ref) as fh:
            return load_maze(fh.read(), name=str(ref))
    except OSError as exc:
        raise ConfigError(f"cannot read maze {ref!r}: {exc}") from exc


# --------------------------------------------------------------------------
# dynamics


def transition(maze: MazeSpec, pose: AgentPose, action: int) -> AgentPose:
    """Deterministic pose update; blocked moves leave the pose unchanged."""
    if not 0 <= int(action) < N_ACTIONS:
        raise ConfigError(f"invalid action index {action}")
    action = int(action)
    h = pose.heading
    if action == 4:
        return AgentPose(pose.x, pose.y, (h - 1) % 4)
    if action == 5:
        return AgentPose(pose.x, pose.y, (h + 1) % 4)
    if action == 6:
        return pose
    move_heading = {0: h, 1: (h + 2) % 4, 2: (h - 1) % 4, 3: (h + 1) % 4}[action]
    dx, dy = _DIRS[move_heading]
    nx, ny = pose.x + dx, pose.y + dy
    if maze.is_free(nx, ny):
        return AgentPose(nx, ny, h)
    return pose


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    respawned: bool
    pose: AgentPose | None = None
    done: bool = False


def step(maze: MazeSpec, pose: AgentPose, action: int, rng, noise_sigma: float = 0.0, oracle=True):
    """Apply one action: returns a :class:`StepResult` with the post-step observation.

    Reaching the goal pays +10 and respawns uniformly over the spawn poses.
    """
    new = transition(maze, pose, action)
    respawned = False
    reward = STEP_PENALTY
    if new.cell == maze.goal_cell:
        reward = GOAL_REWARD
        respawned = True
        new = maze.spawn_poses[int(rng.integers(len(maze.spawn_poses)))]
    obs = render_observation(maze, new, noise_sigma, rng)
    return StepResult(obs, reward, respawned, new if oracle else None)


class MazeEnv:
    """Stateful episode wrapper around :func:`step` with a fixed episode length."""

    def __init__(self, maze: MazeSpec, rng, noise_sigma=0.0, episode_length=2000):
        if not maze.spawn_poses:
            raise MazeError("maze has no spawn poses")
        self.maze = maze
        self.rng = rng
        self.noise_sigma = noise_sigma
        self.episode_length = int(episode_length)
        self.pose: AgentPose | None = None
        self.t = 0

    def reset(self, pose: AgentPose | None = None) -> np.ndarray:
        if pose is None:
            pose = self.maze.spawn_poses[int(self.rng.integers(len(self.maze.spawn_poses)))]
        self.pose = pose
        self.t = 0
        return render_observation(self.maze, pose, self.noise_sigma, self.rng)

    def step(self, action: int) -> StepResult:
        res = step(self.maze, self.pose, action, self.rng, self.noise_sigma)
        self.pose = res.pose
        self.t += 1
        res.done = self.t >= self.episode_length
        return res


# --------------------------------------------------------------------------
# observations


def _cast_ray(maze: MazeSpec, x0: float, y0: float, angle_deg: float):
    """Grid traversal from (x0, y0); returns (entry distance, texture of hit cell)."""
    a = math.radians(angle_deg)
    dx, dy = math.cos(a), -math.sin(a)
    if abs(dx) < 1e-12:
        dx = 0.0
    if abs(dy) < 1e-12:
        dy = 0.0
    cx, cy = int(math.floor(x0)), int(math.floor(y0))
    step_x = 1 if dx > 0 else -1
    step_y = 1 if dy > 0 else -1
    t_dx = abs(1.0 / dx) if dx else math.inf
    t_dy = abs(1.0 / dy) if dy else math.inf
    t_x = ((cx + 1 - x0) if dx > 0 else (x0 - cx)) * t_dx if dx else math.inf
    t_y = ((cy + 1 - y0) if dy > 0 else (y0 - cy)) * t_dy if dy else math.inf
    while True:
        if t_x < t_y:
            t = t_x
            cx += step_x
            t_x += t_dx
        else:
            t = t_y
            cy += step_y
            t_y += t_dy
        if not (0 <= cx < maze.width and 0 <= cy < maze.height):
            return t, 0
        if maze.walls[cy, cx]:
            return t, int(maze.texture[cy, cx])


def _clean_observation(maze: MazeSpec, pose: AgentPose) -> np.ndarray:
    key = (pose.x, pose.y, pose.heading)
    hit = maze._obs_cache.get(key)
    if hit is not None:
        return hit
    F = N_RAYS
    out = np.zeros(OBS_DIM)
    base = _HEADING_ANGLE[pose.heading]
    for k in range(F):
        ang = base + k * 360.0 / F
        t, tex = _cast_ray(maze, pose.x + 0.5, pose.y + 0.5, ang)
        out[k] = min((t + 0.5) / maze.d_max, 1.0)
        out[F + k] = math.sin(math.radians(ang))
        out[2 * F + k] = math.cos(math.radians(ang))
        out[3 * F + k * N_TEXTURES + tex] = 1.0
    out.setflags(write=False)
    maze._obs_cache[key] = out
    return out


def render_observation(maze: MazeSpec, pose: AgentPose, noise_sigma: float = 0.0, rng=None):
    """Ray-cast feature vector of length ``OBS_DIM``.

    Layout: ``[depth(F), sin bearing(F), cos bearing(F), texture one-hot(F*T)]``
    with F=12 rays spaced 30 degrees apart starting straight ahead.  Depth
    counts the distance from the cell centre to the hit wall cell's centre
    line, so a wall directly in front reads ``1/d_max``.
    """
    if not maze.is_free(pose.x, pose.y):
        raise MazeError(f"pose {pose} is not on a free cell")
    obs = _clean_observation(maze, pose)
    if noise_sigma > 0:
        obs = obs.copy()
        obs[:N_RAYS] = np.clip(obs[:N_RAYS] + rng.normal(0.0, noise_sigma, N_RAYS), 0.0, 1.0)
        return obs
    return obs.copy()


# --------------------------------------------------------------------------
# geodesic oracle


def distance_map(maze: MazeSpec, source) -> np.ndarray:
    """BFS distances (in cells) from ``source``; unreachable cells are inf."""
    source = (int(source[0]), int(source[1]))
    hit = maze._dist_cache.get(source)
    if hit is not None:
        return hit
    dist = np.full(maze.walls.shape, np.inf)
    if not maze.is_free(*source):
        raise MazeError(f"cell {source} is not free")
    dist[source[1], source[0]] = 0
    queue = deque([source])
    while queue:
        cx, cy = queue.popleft()
        d = dist[cy, cx] + 1
        for dx, dy in _DIRS:
            nx, ny = cx + dx, cy + dy
            if maze.is_free(nx, ny) and dist[ny, nx] == np.inf:
                dist[ny, nx] = d
                queue.append((nx, ny))
    dist.setflags(write=False)
    maze._dist_cache[source] = dist
    return dist


def geodesic_distance(maze: MazeSpec, a, b):
    """Shortest free-cell path length between cells ``a`` and ``b``."""
    if not maze.is_free(int(b[0]), int(b[1])):
        raise MazeError(f"cell {tuple(b)} is not free")
    d = distance_map(maze, a)[int(b[1]), int(b[0])]
    return UNREACHABLE if d == np.inf else int(d)


# --------------------------------------------------------------------------
# exploration database


@dataclass
class ExplorationDB:
    traj_id: np.ndarray  # (N,) int
    t: np.ndarray  # (N,) int, index within trajectory
    features: np.ndarray  # (N, D)
    poses: np.ndarray | None = None  # (N, 3) int (x, y, heading); oracle only
    maze_name: str = ""

    def __len__(self) -> int:
        return len(self.traj_id)

    def trajectories(self) -> dict[int, np.ndarray]:
        """traj_id -> row indices ordered by t."""
        out = {}
        for tid in np.unique(self.traj_id):
            rows = np.nonzero(self.traj_id == tid)[0]
            out[int(tid)] = rows[np.argsort(self.t[rows], kind="stable")]
        return out

    def visited_cells(self) -> set:
        if self.poses is None:
            raise ConfigError("database was exported blind; no poses available")
        return {(int(x), int(y)) for x, y, _ in self.poses}

    def to_jsonl(self, blind: bool = False) -> str:
        lines = []
        for i in range(len(self)):
            rec = {
                "traj_id": int(self.traj_id[i]),
                "t": int(self.t[i]),
                "features": [float(v) for v in self.features[i]],
            }
            if not blind and self.poses is not None:
                x, y, h = self.poses[i]
                rec["pose"] = {"x": int(x), "y": int(y), "h": HEADINGS[int(h)]}
            lines.append(json.dumps(rec))
        return "\n".join(lines) + "\n"

    def save(self, path, blind: bool = False) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl(blind))

    @classmethod
    def from_jsonl(cls, text: str) -> "ExplorationDB":
        tids, ts, feats, poses = [], [], [], []
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            tids.append(rec["traj_id"])
            ts.append(rec["t"])
            feats.append(rec["features"])
            if "pose" in rec:
                p = AgentPose.from_dict(rec["pose"])
                poses.append((p.x, p.y, p.heading))
        if poses and len(poses) != len(tids):
            raise ConfigError("pose fields present on only some records")
        return cls(
            np.asarray(tids, dtype=np.int64),
            np.asarray(ts, dtype=np.int64),
            np.asarray(feats, dtype=np.float64),
            np.asarray(poses, dtype=np.int64) if poses else None,
        )

    @classmethod
    def load(cls, path) -> "ExplorationDB":
        with open(path) as fh:
            return cls.from_jsonl(fh.read())


def _wall_follow_action(maze: MazeSpec, pose: AgentPose, rng, p_random: float = 0.2) -> int:
    """Left-hand rule with occasional random actions to avoid tight loops."""
    if rng.random() < p_random:
        return int(rng.integers(N_ACTIONS))
    h = pose.heading
    lx, ly = _DIRS[(h - 1) % 4]
    fx, fy = _DIRS[h]
    if maze.is_free(pose.x + lx, pose.y + ly):
        return 2
    if maze.is_free(pose.x + fx, pose.y + fy):
        return 0
    return 5


def explore_collect(
    maze: MazeSpec,
    policy: str = "random",
    steps: int = 2000,
    seed: int = 0,
    noise_sigma: float = 0.0,
    t_max: int = 20,
    episode_length: int | None = None,
    follow_noise: float = 0.2,
) -> ExplorationDB:
    """Record ``steps`` observations from an exploring agent.

    A new trajectory starts whenever the agent is respawned: on reaching
    the goal, or every ``episode_length`` steps when that is given.
    """
    if steps < t_max + 1:
        raise ConfigError(f"exploration needs at least t_max+1={t_max + 1} steps, got {steps}")
    if episode_length is not None and episode_length < t_max + 1:
        raise ConfigError(f"episode_length must be at least t_max+1={t_max + 1}")
    if policy not in ("random", "wall-follow"):
        raise ConfigError(f"unknown exploration policy {policy!r}")
    rng = np.random.default_rng(seed)
    pose = maze.spawn_poses[int(rng.integers(len(maze.spawn_poses)))]
    obs = render_observation(maze, pose, noise_sigma, rng)
    tids = np.zeros(steps, dtype=np.int64)
    ts = np.zeros(steps, dtype=np.int64)
    feats = np.zeros((steps, OBS_DIM))
    poses = np.zeros((steps, 3), dtype=np.int64)
    traj, t = 0, 0
    for i in range(steps):
        tids[i], ts[i] = traj, t
        feats[i] = obs
        poses[i] = (pose.x, pose.y, pose.heading)
        if policy == "random":
            action = int(rng.integers(N_ACTIONS))
        else:
            action = _wall_follow_action(maze, pose, rng, follow_noise)
        res = step(maze, pose, action, rng, noise_sigma)
        pose, obs = res.pose, res.observation
        if episode_length and t + 1 >= episode_length and not res.respawned:
            pose = maze.spawn_poses[int(rng.integers(len(maze.spawn_poses)))]
            obs = render_observation(maze, pose, noise_sigma, rng)
            traj += 1
            t = 0
        elif res.respawned:
            traj += 1
            t = 0
        else:
            t += 1
    return ExplorationDB(tids, ts, feats, poses, maze.name)
