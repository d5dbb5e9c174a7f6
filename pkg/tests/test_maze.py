from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gamnav import maze as mz
from gamnav.errors import ConfigError, MazeError
from gamnav.maze import AgentPose


@pytest.fixture(scope="module")
def small():
    return mz.load_bundled("maze-small")


@pytest.fixture(scope="module")
def large():
    return mz.load_bundled("maze-large")


def bfs_oracle(walls, a):
    """Plain dict-based BFS, written independently of distance_map."""
    H, W = walls.shape
    dist = {a: 0}
    q = deque([a])
    while q:
        x, y = q.popleft()
        for nx, ny in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)):
            if 0 <= nx < W and 0 <= ny < H and not walls[ny, nx] and (nx, ny) not in dist:
                dist[(nx, ny)] = dist[(x, y)] + 1
                q.append((nx, ny))
    return dist


# ----------------------------------------------------------------- loading


def test_all_free_3x3():
    m = mz.load_maze("S..\n...\n..G")
    assert len(m.free_cells()) == 9
    assert m.goal_cell == (2, 2)
    assert m.spawn_poses == (AgentPose(0, 0, 0),)


def test_disconnected_rejected():
    with pytest.raises(MazeError, match="disconnected"):
        mz.load_maze("S.#.\n..#G\n####")


def test_missing_goal_rejected():
    with pytest.raises(MazeError, match="goal"):
        mz.load_maze("S..\n...")


def test_non_rectangular_rejected():
    with pytest.raises(MazeError, match="rectangular"):
        mz.load_maze("S..\n..\n..G")


def test_unknown_character_rejected():
    with pytest.raises(MazeError):
        mz.load_maze("S.x\n..G")


def test_digit_texture():
    m = mz.load_maze("#3#\nS.G\n###")
    assert m.walls[0, 1] and m.texture[0, 1] == 3
    assert m.texture[0, 0] == 0


def test_bundled_small(small):
    assert small.walls.shape == (11, 11)
    assert len(small.spawn_poses) >= 6
    assert all(small.is_free(p.x, p.y) for p in small.spawn_poses)
    assert small.is_free(*small.goal_cell)


def test_bundled_large(large):
    assert large.walls.shape == (11, 21)
    assert len(large.spawn_poses) == 10
    gx = large.goal_cell[0]
    # goal sits in the far room, well away from the spawns on average
    d = [mz.geodesic_distance(large, p.cell, large.goal_cell) for p in large.spawn_poses]
    assert gx >= 15 and np.median(d) > 25


def test_unknown_bundled():
    with pytest.raises(ConfigError):
        mz.load_bundled("maze-huge")


# ----------------------------------------------------------------- dynamics


def test_forward_into_wall(small):
    pose = AgentPose(1, 1, 0)  # facing N into the border wall
    res = mz.step(small, pose, 0, np.random.default_rng(0))
    assert res.pose == pose and res.reward == -0.05 and not res.respawned


def test_step_onto_goal(small):
    gx, gy = small.goal_cell
    pose = AgentPose(gx - 1, gy, 1)  # facing E, goal ahead
    res = mz.step(small, pose, 0, np.random.default_rng(0))
    assert res.reward == 10.0 and res.respawned
    assert res.pose in small.spawn_poses


def test_respawn_uniform(small):
    gx, gy = small.goal_cell
    pose = AgentPose(gx - 1, gy, 1)
    rng = np.random.default_rng(1)
    counts = {}
    for _ in range(6000):
        p = mz.step(small, pose, 0, rng).pose
        counts[p] = counts.get(p, 0) + 1
    assert set(counts) == set(small.spawn_poses)
    assert max(counts.values()) - min(counts.values()) < 250


def test_turn_left_four_times(small):
    pose = AgentPose(3, 3, 2)
    p = pose
    for _ in range(4):
        p = mz.transition(small, p, 4)
    assert p == pose
    assert mz.transition(small, pose, 4).heading == 1
    assert mz.transition(small, pose, 5).heading == 3


def test_strafe_and_backward(small):
    pose = AgentPose(7, 6, 0)  # facing N
    assert mz.transition(small, pose, 1) == AgentPose(7, 7, 0)
    assert mz.transition(small, pose, 2) == AgentPose(6, 6, 0)
    assert mz.transition(small, pose, 3) == AgentPose(8, 6, 0)
    assert mz.transition(small, pose, 6) == pose


def test_invalid_action(small):
    with pytest.raises(ConfigError):
        mz.transition(small, AgentPose(1, 1, 0), 7)


@settings(max_examples=300)
@given(st.integers(0, 10), st.integers(0, 10), st.integers(0, 3))
def test_forward_backward_reversible(x, y, h):
    m = mz.load_bundled("maze-small")
    if not m.is_free(x, y):
        return
    pose = AgentPose(x, y, h)
    fwd = mz.transition(m, pose, 0)
    if fwd != pose:
        assert mz.transition(m, fwd, 1) == pose


def test_env_episode_length(small):
    env = mz.MazeEnv(small, np.random.default_rng(0), episode_length=30)
    env.reset()
    done = [env.step(6).done for _ in range(30)]
    assert done == [False] * 29 + [True]


def test_episode_reward_bookkeeping(small):
    env = mz.MazeEnv(small, np.random.default_rng(3), episode_length=2000)
    env.reset()
    rng = np.random.default_rng(4)
    rewards = [env.step(int(rng.integers(7))).reward for _ in range(2000)]
    goals = sum(r == 10.0 for r in rewards)
    assert set(rewards) <= {10.0, -0.05}
    assert sum(rewards) == pytest.approx(10 * goals - 0.05 * (2000 - goals), abs=1e-9)


# ----------------------------------------------------------------- observations


def test_observation_layout(small):
    obs = mz.render_observation(small, AgentPose(5, 5, 0))
    assert obs.shape == (mz.OBS_DIM,) == (132,)
    F = mz.N_RAYS
    depth = obs[:F]
    assert np.all((depth >= 0) & (depth <= 1))
    tex = obs[3 * F:].reshape(F, mz.N_TEXTURES)
    assert np.array_equal(tex.sum(axis=1), np.ones(F))
    assert set(np.unique(tex)) <= {0.0, 1.0}
    assert np.allclose(obs[F:2 * F] ** 2 + obs[2 * F:3 * F] ** 2, 1.0)


def test_adjacent_wall_depth(small):
    obs = mz.render_observation(small, AgentPose(1, 1, 0))
    assert obs[0] == pytest.approx(1.0 / small.d_max, abs=1e-12)


def test_texture_of_hit_face(small):
    # at (4,1) facing E the wall at (5,1) carries texture 2
    obs = mz.render_observation(small, AgentPose(4, 1, 1))
    assert obs[0] == pytest.approx(1.0 / small.d_max)
    assert np.argmax(obs[36:44]) == 2


def test_observation_deterministic(small):
    a = mz.render_observation(small, AgentPose(3, 5, 2))
    b = mz.render_observation(small, AgentPose(3, 5, 2))
    assert np.array_equal(a, b)


def test_distinct_rooms_differ(small):
    a = mz.render_observation(small, AgentPose(2, 2, 1))
    b = mz.render_observation(small, AgentPose(8, 8, 1))
    assert np.linalg.norm(a - b) > 0.5


def test_noise_only_depth(small):
    pose = AgentPose(5, 5, 3)
    clean = mz.render_observation(small, pose)
    noisy = mz.render_observation(small, pose, 0.1, np.random.default_rng(0))
    F = mz.N_RAYS
    assert not np.array_equal(clean[:F], noisy[:F])
    assert np.array_equal(clean[F:], noisy[F:])
    assert np.all((noisy[:F] >= 0) & (noisy[:F] <= 1))


def test_render_on_wall_rejected(small):
    with pytest.raises(MazeError):
        mz.render_observation(small, AgentPose(0, 0, 0))


# ----------------------------------------------------------------- geodesic oracle


def test_geodesic_examples(small):
    assert mz.geodesic_distance(small, (1, 1), (2, 1)) == 1
    assert mz.geodesic_distance(small, (3, 5), (3, 5)) == 0
    oracle = bfs_oracle(small.walls, (1, 1))
    assert mz.geodesic_distance(small, (1, 1), (9, 9)) == oracle[(9, 9)] == 16


def test_geodesic_matches_oracle_everywhere(large):
    for src in [(1, 1), (19, 1), (12, 5)]:
        oracle = bfs_oracle(large.walls, src)
        for c in large.free_cells():
            assert mz.geodesic_distance(large, src, c) == oracle[c]


def test_geodesic_unreachable():
    m = mz.MazeSpec(
        np.array([[False, True, False]]), np.zeros((1, 3), dtype=np.int64), (AgentPose(0, 0, 0),), (2, 0), "split"
    )
    assert mz.geodesic_distance(m, (0, 0), (2, 0)) == mz.UNREACHABLE


def test_geodesic_is_metric(small):
    rng = np.random.default_rng(0)
    cells = small.free_cells()
    for _ in range(300):
        a, b, c = (cells[i] for i in rng.integers(len(cells), size=3))
        ab = mz.geodesic_distance(small, a, b)
        assert ab == mz.geodesic_distance(small, b, a)
        assert mz.geodesic_distance(small, a, c) <= ab + mz.geodesic_distance(small, b, c)


# ----------------------------------------------------------------- exploration


def test_explore_minimum_steps(small):
    with pytest.raises(ConfigError):
        mz.explore_collect(small, steps=20)
    mz.explore_collect(small, steps=21)


def test_explore_coverage(small):
    # threshold from the 10-seed minimum (0.786) on this fixture
    n = len(small.free_cells())
    for seed in range(3):
        db = mz.explore_collect(small, "random", 2000, seed)
        assert len(db.visited_cells()) / n >= 0.78


def test_explore_deterministic(small):
    a = mz.explore_collect(small, "wall-follow", 300, 5)
    b = mz.explore_collect(small, "wall-follow", 300, 5)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.poses, b.poses)


def test_explore_trajectory_boundaries(small):
    db = mz.explore_collect(small, "random", 3000, 2)
    for rows in db.trajectories().values():
        assert np.array_equal(db.t[rows], np.arange(len(rows)))
        # only the first pose of a trajectory (after the first) can be a spawn jump
        cells = db.poses[rows, :2]
        jumps = np.abs(np.diff(cells, axis=0)).sum(axis=1)
        assert np.all(jumps <= 1)


def test_explore_episode_length(large):
    db = mz.explore_collect(large, "random", 1000, 0, episode_length=100)
    assert max(len(r) for r in db.trajectories().values()) <= 100


def test_db_jsonl_roundtrip(tmp_path, small):
    db = mz.explore_collect(small, "random", 50, 1)
    path = tmp_path / "db.jsonl"
    db.save(path)
    back = mz.ExplorationDB.load(path)
    assert np.array_equal(back.features, db.features)
    assert np.array_equal(back.poses, db.poses)
    blind = mz.ExplorationDB.from_jsonl(db.to_jsonl(blind=True))
    assert blind.poses is None and '"pose"' not in db.to_jsonl(blind=True)
    with pytest.raises(ConfigError):
        blind.visited_cells()
