import copy
import math
from collections import deque

import numpy as np
import pytest

from evopath.envs import evaluate_success, make_family
from evopath.envs.landscape import (LandscapeConfig, landscape_oracle, landscape_reward,
                                    landscape_value, path_min)
from evopath.envs.reacher import (DIM_NAMES, GraspReacherEnv, ReacherConfig, ScriptedPD,
                                  grip_quality, load_demo, make_demo_trajectory, save_demo,
                                  success_tolerance)
from evopath.expert import reset_to_state
from evopath.policy import GaussianMlpPolicy

BARRIER = LandscapeConfig(D=2, barrier_height=0.8, barrier_width=0.15)


# landscape

def test_landscape_point_values():
    assert landscape_reward([1, 1], BARRIER) == pytest.approx(1 - 0.8 * math.exp(-0.5 / 0.045), abs=1e-15)
    assert 1 - landscape_reward([1, 1], BARRIER) == pytest.approx(1.2e-5, abs=1e-6)
    assert landscape_reward([0.5, 0.5], BARRIER) == pytest.approx(-0.05, abs=1e-12)
    assert abs(landscape_reward([1, 0], BARRIER) - 0.5) < 1e-4
    assert landscape_reward([0, 0], LandscapeConfig(D=2, barrier_height=0.0)) == 0.0


def test_landscape_noise_is_seeded():
    cfg = LandscapeConfig(noise_sigma=0.1)
    a = landscape_reward([0.2, 0.3], cfg, np.random.default_rng(5))
    b = landscape_reward([0.2, 0.3], cfg, np.random.default_rng(5))
    assert a == b and a != landscape_value([0.2, 0.3], cfg)


def test_landscape_config_validation():
    with pytest.raises(ValueError):
        LandscapeConfig(barrier_height=-1)
    with pytest.raises(ValueError):
        LandscapeConfig(barrier_width=0)
    with pytest.raises(ValueError):
        LandscapeConfig(noise_sigma=-0.1)


def test_diagonal_vs_corner_path():
    t = np.linspace(0, 1, 21)
    diag = landscape_value(np.stack([t, t], 1), BARRIER)
    assert diag.min() == pytest.approx(-0.05, abs=1e-12)
    corner = np.concatenate([np.stack([t, 0 * t], 1), np.stack([0 * t + 1, t], 1)])
    values = landscape_value(corner, BARRIER)
    # every point past the barrier's progress level is comfortably positive
    assert values[corner.mean(1) >= 0.5].min() > 0.49
    assert diag.min() < 0 < values[corner.mean(1) >= 0.5].min()
    assert landscape_value([1, 1], BARRIER) >= 1 - 0.8 * math.exp(-0.5 / 0.045) - 1e-15


def test_path_min_from_level():
    assert path_min([0.0, 0.2, 0.5, 0.1, 0.7]) == 0.0
    assert path_min([0.0, 0.2, 0.5, 0.1, 0.7], from_level=0.3) == 0.1
    assert path_min([0.0, 0.1], from_level=0.3) == math.inf


def _bfs_maximin(cfg, res, min_progress=0.0):
    """Independent oracle: largest threshold whose superlevel set connects 0 to 1."""
    axis = np.linspace(0, 1, res)
    grid = np.stack(np.meshgrid(*([axis] * cfg.D), indexing="ij"), -1)
    f = landscape_value(grid, cfg)
    score = np.where(grid.mean(-1) >= min_progress - 1e-12, f, np.inf)
    start, goal = (0,) * cfg.D, (res - 1,) * cfg.D
    best = -np.inf
    for v in np.unique(score[np.isfinite(score)]):
        if score[start] < v or score[goal] < v:
            continue
        seen, queue = {start}, deque([start])
        while queue:
            node = queue.popleft()
            for d in range(cfg.D):
                for s in (-1, 1):
                    nxt = list(node)
                    nxt[d] += s
                    nxt = tuple(nxt)
                    if all(0 <= i < res for i in nxt) and nxt not in seen and score[nxt] >= v:
                        seen.add(nxt)
                        queue.append(nxt)
        if goal in seen:
            best = max(best, v)
    if not np.isfinite(score[start]) and not np.any(np.isfinite(score)):
        return np.inf
    return best


@pytest.mark.parametrize("cfg,res,mp", [
    (BARRIER, 11, 0.0),
    (BARRIER, 11, 0.5),
    (LandscapeConfig(D=2, barrier_height=0.0), 9, 0.0),
    (LandscapeConfig(D=3, barrier_height=0.6, barrier_width=0.2), 5, 0.4),
])
def test_oracle_matches_threshold_bfs(cfg, res, mp):
    path, value = landscape_oracle(cfg, res, min_progress=mp)
    assert value == pytest.approx(_bfs_maximin(cfg, res, mp), abs=1e-12)
    # path is 4-connected, starts at 0, ends at 1, and attains the value
    assert np.array_equal(path[0], np.zeros(cfg.D)) and np.array_equal(path[-1], np.ones(cfg.D))
    steps = np.abs(np.diff(np.array(path), axis=0)) * (res - 1)
    assert np.allclose(steps.sum(1), 1.0)
    p = np.array(path)
    vals = landscape_value(p, cfg)[p.mean(1) >= mp - 1e-12]
    assert vals.min() == pytest.approx(value, abs=1e-12)


def test_oracle_reference_values():
    _, plain = landscape_oracle(BARRIER, 21)
    assert plain == pytest.approx(landscape_value([0, 0], BARRIER), abs=1e-15)  # start node is the bottleneck
    _, bypass = landscape_oracle(BARRIER, 21, min_progress=0.5)
    assert bypass >= 0.49
    _, flat = landscape_oracle(LandscapeConfig(D=2, barrier_height=0.0), 21)
    assert flat == 0.0


def test_oracle_rejects_high_dimension():
    with pytest.raises(NotImplementedError):
        landscape_oracle(LandscapeConfig(D=4), 3)
    with pytest.raises(ValueError):
        landscape_oracle(BARRIER, 1)


def test_landscape_env_single_step():
    fam = make_family("landscape", D=2)
    env = fam.make([1.0, 0.0], np.random.default_rng(0))
    env.reset()
    _, reward, done = env.step([0.0])
    assert done and reward == pytest.approx(0.5, abs=1e-4) and env.success_flag
    with pytest.raises(RuntimeError):
        env.step([0.0])


def test_family_registry():
    with pytest.raises(ValueError):
        make_family("mujoco-hand")
    with pytest.raises(ValueError):
        make_family("landscape", bogus=1)


# grasp reacher

CFG = ReacherConfig()


def test_reacher_defaults():
    assert CFG.horizon == 200
    assert len(DIM_NAMES) == 8


@pytest.mark.parametrize("alpha,radius", [(np.zeros(8), 1.0), (np.ones(8), 1.2)])
def test_reset_radius(alpha, radius):
    env = GraspReacherEnv(CFG, alpha, np.random.default_rng(1))
    obs = env.reset()
    assert np.linalg.norm(obs[:2]) == pytest.approx(radius, abs=1e-12)
    assert np.array_equal(obs[2:4], [0.0, 0.0])
    assert len(obs) == 6


def test_tolerance_plugin_values():
    assert grip_quality(CFG, np.zeros(8)) == 1.0
    assert success_tolerance(CFG, np.zeros(8)) == pytest.approx(0.15, abs=1e-15)
    mid = np.full(8, 0.5)
    assert grip_quality(CFG, mid) == 0.5
    assert success_tolerance(CFG, mid) == pytest.approx(0.078125, abs=1e-15)
    staggered = np.full(8, 0.3)
    staggered[0] = staggered[1] = 1.0
    assert grip_quality(CFG, staggered) == 1.0
    eps0 = 0.15 + 0.3 * (0.10 - 0.15)
    assert success_tolerance(CFG, staggered) == pytest.approx(eps0, abs=1e-15)


def test_servo_first_path_keeps_grip():
    for t in np.linspace(0, 1, 41):
        alpha = np.zeros(8)
        alpha[1] = min(1.0, 2 * t)
        alpha[0] = max(0.0, 2 * t - 1)
        assert grip_quality(CFG, alpha) == 1.0


def test_zero_action_never_gains_speed():
    alpha = np.full(8, 0.4)
    alpha[7] = 0.0  # no dynamics noise
    env = GraspReacherEnv(CFG, alpha, np.random.default_rng(0))
    env.reset_to_state([0.5, -0.2, 0.7, 0.3])
    speeds = [np.linalg.norm(env.vel)]
    while not env.done:
        env.step([0.0, 0.0])
        speeds.append(np.linalg.norm(env.vel))
    assert all(b <= a for a, b in zip(speeds, speeds[1:]))


def test_episode_reward_is_sparse_and_bounded():
    fam = make_family("grasp-reacher")
    pol = GaussianMlpPolicy(6, 2, rng=np.random.default_rng(0))
    trajs = fam.rollout(pol, np.tile(np.linspace(0, 1, 8), (20, 1)),
                        [np.random.default_rng(i) for i in range(20)])
    for traj in trajs:
        assert set(np.unique(traj.rewards)) <= {0.0, 1.0}
        assert traj.rewards.sum() in (0.0, 1.0)
        assert len(traj) <= 200
        assert traj.success == (traj.rewards.sum() == 1.0)
        if not traj.success:
            assert len(traj) == 200


def test_step_after_done_raises():
    env = GraspReacherEnv(CFG, np.zeros(8), np.random.default_rng(0))
    env.reset()
    while not env.done:
        env.step([0.0, 0.0])
    with pytest.raises(RuntimeError):
        env.step([0.0, 0.0])


def test_actions_are_clipped():
    a = GraspReacherEnv(CFG, np.zeros(8), np.random.default_rng(0))
    b = GraspReacherEnv(CFG, np.zeros(8), np.random.default_rng(0))
    a.reset_to_state([0.5, 0.5, 0, 0])
    b.reset_to_state([0.5, 0.5, 0, 0])
    a.step([5.0, -3.0])
    b.step([1.0, -1.0])
    assert np.array_equal(a.state, b.state)


def test_vectorized_rollout_matches_scalar_env():
    fam = make_family("grasp-reacher")
    pd = ScriptedPD()
    alphas = np.array([np.zeros(8), np.r_[np.full(7, 0.5), 0.0], np.r_[np.ones(7), 0.0]])  # noise-free
    starts = np.array([[1.0, 0.0, 0.0, 0.0], [0.3, -0.8, 0.1, 0.0], [-0.6, 0.6, 0.0, 0.2]])
    trajs = fam.rollout(pd, alphas, [np.random.default_rng(i) for i in range(3)],
                        deterministic=True, init_states=starts)
    for alpha, start, traj in zip(alphas, starts, trajs):
        env = GraspReacherEnv(CFG, alpha, np.random.default_rng(99))
        obs = env.reset_to_state(start)
        seen = [obs]
        while not env.done:
            obs, _, _ = env.step(pd.mean(obs))
            seen.append(obs)
        np.testing.assert_allclose(np.array(seen[:-1]), traj.observations, rtol=0, atol=1e-13)
        assert env.success_flag == traj.success


def test_demo_trajectory():
    demo = make_demo_trajectory(CFG, np.random.default_rng(4))
    assert np.linalg.norm(demo[0, :2]) == pytest.approx(1.0, abs=1e-12)
    assert len(demo) - 1 >= CFG.hold_steps
    assert len(demo) - 1 <= CFG.horizon
    tail = np.linalg.norm(demo[-CFG.hold_steps:, :2], axis=1)
    assert np.all(tail <= success_tolerance(CFG, np.zeros(8)))


def test_demo_failure_is_an_error():
    weak = ReacherConfig(demo_kp=0.0, demo_kd=0.0)
    with pytest.raises(RuntimeError):
        make_demo_trajectory(weak, np.random.default_rng(0))


def test_demo_file_round_trip(tmp_path):
    demo = make_demo_trajectory(CFG, np.random.default_rng(4))
    save_demo(demo, tmp_path / "demo.json")
    assert np.array_equal(load_demo(tmp_path / "demo.json"), demo)


def test_evaluate_success_baselines():
    fam = make_family("grasp-reacher")
    rate, used = evaluate_success(ScriptedPD(), fam, np.zeros(8), 50,
                                  lambda i: np.random.default_rng(i), deterministic=True)
    assert rate == 1.0 and used == 50
    random_policy = GaussianMlpPolicy(6, 2, rng=np.random.default_rng(0))
    rate, used = evaluate_success(random_policy, fam, np.zeros(8), 100,
                                  lambda i: np.random.default_rng(1000 + i))
    assert rate < 0.2 and used == 100
    with pytest.raises(ValueError):
        evaluate_success(random_policy, fam, np.zeros(8), 0, lambda i: None)


def test_success_ratio_counting():
    class Fixed:
        env_id = "fixed"

        def rollout(self, policy, alphas, rngs, deterministic=False, init_states=None):
            from evopath.envs.base import Trajectory
            return [Trajectory(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros(1), np.zeros(1),
                               "success" if i < 7 else "horizon", np.zeros(1), 1) for i in range(len(rngs))]

    assert evaluate_success(None, Fixed(), [0.0], 10, lambda i: None) == (0.7, 10)


# reset-to-state

def test_reset_to_state_contract():
    demo = make_demo_trajectory(CFG, np.random.default_rng(2))
    env = GraspReacherEnv(CFG, np.zeros(8), np.random.default_rng(0))
    obs1 = reset_to_state(env, demo[-2])
    obs2 = reset_to_state(env, demo[-2])
    assert np.array_equal(obs1, obs2)
    assert np.array_equal(obs1[:4], demo[-2])
    for steps in range(1, CFG.hold_steps + 2):
        env.step([0.0, 0.0])
        if env.done:
            break
    assert env.success_flag and steps <= CFG.hold_steps + 1
    with pytest.raises(ValueError):
        env.reset_to_state([0.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        env.reset_to_state([np.nan, 0, 0, 0])

    class NoReset:
        pass

    with pytest.raises(NotImplementedError):
        reset_to_state(NoReset(), demo[0])


def test_reset_reproduces_rollout_suffix():
    alpha = np.full(8, 0.7)  # nonzero dynamics noise
    actions = np.random.default_rng(8).uniform(-1, 1, (60, 2))
    env = GraspReacherEnv(CFG, alpha, np.random.default_rng(3))
    env.reset_to_state([0.9, 0.1, 0.0, 0.0])
    k = 25
    for a in actions[:k]:
        env.step(a)
    saved_state, saved_rng = env.state.copy(), copy.deepcopy(env.rng)
    original = []
    for a in actions[k:]:
        if env.done:
            break
        original.append(env.step(a)[0])
    replay = GraspReacherEnv(CFG, alpha, saved_rng)
    replay.reset_to_state(saved_state)
    again = [replay.step(a)[0] for a in actions[k:k + len(original)]]
    assert np.array_equal(np.array(original), np.array(again))
