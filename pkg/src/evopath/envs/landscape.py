"""Analytic reward landscape over the cube, with a Gaussian barrier.

The "episode" is a single bandit pull: reward f(alpha) plus Gaussian noise,
success iff that reward clears ``success_level``. There is nothing to learn,
so the family is marked non-trainable and curriculum training is a no-op.
"""
from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass

import numpy as np

from .base import Trajectory


@dataclass(frozen=True)
class LandscapeConfig:
    D: int = 2
    barrier_height: float = 0.8
    barrier_center: tuple | None = None  # defaults to 0.5 * ones(D)
    barrier_width: float = 0.15
    noise_sigma: float = 0.0
    success_level: float = 0.3

    def __post_init__(self):
        if self.D < 1:
            raise ValueError("D must be >= 1")
        if self.barrier_height < 0:
            raise ValueError("barrier_height must be >= 0")
        if not self.barrier_width > 0:
            raise ValueError("barrier_width must be > 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        c = self.barrier_center
        c = np.full(self.D, 0.5) if c is None else np.asarray(c, dtype=np.float64).reshape(-1)
        if c.size != self.D:
            raise ValueError("barrier_center must have D components")
        object.__setattr__(self, "barrier_center", tuple(float(x) for x in c))


def landscape_value(alpha, cfg: LandscapeConfig) -> np.ndarray:
    """Noise-free f(alpha); works on (D,) or (N, D)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    c = np.asarray(cfg.barrier_center)
    pull = 1.0 - np.sum((1.0 - alpha) ** 2, axis=-1) / cfg.D
    barrier = cfg.barrier_height * np.exp(
        -np.sum((alpha - c) ** 2, axis=-1) / (2.0 * cfg.barrier_width ** 2))
    return pull - barrier


def landscape_reward(alpha, cfg: LandscapeConfig, rng: np.random.Generator | None = None) -> float:
    value = float(landscape_value(alpha, cfg))
    if cfg.noise_sigma > 0:
        value += cfg.noise_sigma * float(rng.standard_normal())
    return value


def path_min(values, from_level: float | None = None) -> float:
    """Minimum of a value sequence, optionally ignoring the initial climb.

    With ``from_level`` set, only the suffix starting at the first value
    ``>= from_level`` counts; ``inf`` if the level is never reached.
    """
    values = np.asarray(values, dtype=np.float64)
    if from_level is None:
        return float(values.min())
    hits = np.flatnonzero(values >= from_level)
    if hits.size == 0:
        return float("inf")
    return float(values[hits[0]:].min())


def landscape_oracle(cfg: LandscapeConfig, grid_resolution: int, min_progress: float = 0.0):
    """Exact maximin path from 0 to 1 on a regular grid.

    Moves are single-axis +-1 grid steps. The path value is the minimum of f
    over its nodes; nodes whose mean progress ``mean(alpha)`` is below
    ``min_progress`` are left out of that minimum (0 keeps every node).
    Widest-path Dijkstra; exponential in D, so D <= 3.

    Returns ``(path, value)`` with ``path`` a list of alpha arrays.
    """
    if cfg.D > 3:
        raise NotImplementedError("grid oracle supports D <= 3")
    if grid_resolution < 2:
        raise ValueError("grid_resolution must be >= 2")
    r = grid_resolution
    axis = np.linspace(0.0, 1.0, r)
    shape = (r,) * cfg.D
    nodes = np.stack(np.meshgrid(*([axis] * cfg.D), indexing="ij"), axis=-1)
    f = landscape_value(nodes, cfg)
    score = np.where(nodes.mean(axis=-1) >= min_progress - 1e-12, f, np.inf)

    start = (0,) * cfg.D
    goal = (r - 1,) * cfg.D
    best = np.full(shape, -np.inf)
    best[start] = score[start]
    parent = {}
    counter = itertools.count()
    heap = [(-best[start], next(counter), start)]
    done = np.zeros(shape, dtype=bool)
    steps = [tuple(s * (k == d) for k in range(cfg.D)) for d in range(cfg.D) for s in (1, -1)]
    while heap:
        neg, _, node = heapq.heappop(heap)
        if done[node]:
            continue
        done[node] = True
        if node == goal:
            break
        for step in steps:
            nxt = tuple(a + b for a, b in zip(node, step))
            if any(i < 0 or i >= r for i in nxt) or done[nxt]:
                continue
            cand = min(-neg, score[nxt])
            if cand > best[nxt]:
                best[nxt] = cand
                parent[nxt] = node
                heapq.heappush(heap, (-cand, next(counter), nxt))

    path = [goal]
    while path[-1] != start:
        path.append(parent[path[-1]])
    path.reverse()
    return [nodes[p].copy() for p in path], float(best[goal])


class LandscapeEnv:
    """Single-step bandit episode at a fixed alpha."""

    obs_dim = None
    act_dim = 1
    horizon = 1

    def __init__(self, cfg: LandscapeConfig, alpha, rng: np.random.Generator):
        self.cfg = cfg
        self.alpha = np.asarray(alpha, dtype=np.float64)
        self.obs_dim = cfg.D
        self.rng = rng
        self.done = True
        self.success_flag = False

    def reset(self):
        self.done = False
        self.success_flag = False
        return self.alpha.copy()

    def step(self, action):
        if self.done:
            raise RuntimeError("step() called on a finished episode")
        reward = landscape_reward(self.alpha, self.cfg, self.rng)
        self.success_flag = reward >= self.cfg.success_level
        self.done = True
        return self.alpha.copy(), reward, True


class LandscapeFamily:
    env_id = "landscape"
    trainable = False

    def __init__(self, cfg: LandscapeConfig | None = None):
        self.cfg = cfg or LandscapeConfig()
        self.dim = self.cfg.D
        self.obs_dim = self.cfg.D
        self.act_dim = 1
        self.horizon = 1

    def make(self, alpha, rng):
        return LandscapeEnv(self.cfg, alpha, rng)

    def value(self, alpha):
        return landscape_value(alpha, self.cfg)

    def rollout(self, policy, alphas, rngs, deterministic=False, init_states=None):
        # the policy plays no role: the bandit has no learnable behaviour
        trajs = []
        for alpha, rng in zip(np.asarray(alphas, dtype=np.float64), rngs):
            reward = landscape_reward(alpha, self.cfg, rng)
            ok = reward >= self.cfg.success_level
            trajs.append(Trajectory(
                observations=alpha[None, :].copy(),
                actions=np.zeros((1, 1)),
                rewards=np.array([reward]),
                log_probs=np.zeros(1),
                done_reason="success" if ok else "horizon",
                alpha=alpha.copy(),
                horizon=1,
            ))
        return trajs
