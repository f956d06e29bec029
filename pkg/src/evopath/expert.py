"""Source-robot expert training by reverse curriculum along a demonstration.

Episodes start from demonstration states, first close to the goal and then
progressively earlier, until the policy succeeds from the task's nominal
initial states.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .envs.base import evaluate_success
from .policy import GaussianMlpPolicy, ValueFunction
from .rl import Ledger, RlConfig, train_iteration
from .seeding import Streams

log = logging.getLogger(__name__)


@dataclass
class ReverseCurriculumConfig:
    stride: int = 5
    promote_threshold: float = 0.667
    noise_scale: float = 0.02
    max_outer_iters: int = 2000
    window: int = 20
    target_success: float = 0.8
    eval_episodes: int = 100
    rotate: bool = True
    confirm_evals: int = 2  # consecutive passing evaluations required at index 0

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if not 0 < self.promote_threshold <= 1:
            raise ValueError("promote_threshold must be in (0, 1]")
        if self.noise_scale < 0 or self.max_outer_iters < 1 or self.window < 1 or self.confirm_evals < 1:
            raise ValueError("invalid reverse curriculum settings")


@dataclass
class CurriculumLog:
    success: bool = False
    indices: list = field(default_factory=list)  # curriculum index used at each iteration
    promotions: list = field(default_factory=list)  # (iteration, new index)
    evaluations: list = field(default_factory=list)  # (iteration, success rate)
    train_success: list = field(default_factory=list)
    furthest_index: int = -1
    final_success_rate: float = 0.0


def reset_to_state(env, state):
    if not hasattr(env, "reset_to_state"):
        raise NotImplementedError(f"{type(env).__name__} cannot reset to an arbitrary state")
    return env.reset_to_state(state)


def _rotate(states, angles):
    c, s = np.cos(angles), np.sin(angles)
    out = states.copy()
    for lo in (0, 2):
        x, y = states[:, lo], states[:, lo + 1]
        out[:, lo] = c * x - s * y
        out[:, lo + 1] = s * x + c * y
    return out


def observation_stats(family, demo_states):
    """Normalizer frozen from the demonstration's observations."""
    from .envs.reacher import observe

    obs = observe(demo_states[:, :2], demo_states[:, 2:])
    # rotations make every planar coordinate zero-mean with the radial spread
    scale = np.sqrt(np.mean(obs ** 2, axis=0))
    for lo in (0, 2, 4):
        scale[lo:lo + 2] = np.sqrt(np.mean(scale[lo:lo + 2] ** 2))
    return np.zeros(obs.shape[1]), np.maximum(scale, 1e-3)


def reverse_curriculum_train(family, demo_states, policy_init: GaussianMlpPolicy | None,
                             cfg: ReverseCurriculumConfig, rl_cfg: RlConfig, seed: int,
                             ledger: Ledger | None = None, value_fn: ValueFunction | None = None,
                             workers: int = 1):
    """Train an expert at alpha = 0. Returns ``(policy, value_fn, CurriculumLog)``.

    ``log.success`` is False when ``max_outer_iters`` runs out first; the
    policy is then the last one trained and ``log.furthest_index`` tells
    how far back the curriculum got.
    """
    if not getattr(family, "supports_reset_to_state", False):
        raise NotImplementedError(f"{family.env_id} does not support reset-to-state")
    demo_states = np.asarray(demo_states, dtype=np.float64)
    streams = Streams(seed)
    ledger = ledger if ledger is not None else Ledger()
    mean, std = observation_stats(family, demo_states)
    if policy_init is None:
        policy_init = GaussianMlpPolicy(family.obs_dim, family.act_dim, rng=streams("expert.init.policy"),
                                        env_id=family.env_id)
    policy = policy_init.with_normalizer(mean, std)
    if value_fn is None:
        value_fn = ValueFunction(family.obs_dim, rng=streams("expert.init.value"), obs_mean=mean, obs_std=std,
                                 fit_iters=rl_cfg.value_fit_iters)
    alpha0 = np.zeros((1, family.dim))
    index = max(len(demo_states) - cfg.stride, 0)
    history = CurriculumLog(furthest_index=index)
    window = deque(maxlen=cfg.window)
    passes = 0
    n = rl_cfg.batch

    for it in range(cfg.max_outer_iters):
        rngs = [streams("expert.train", it, i) for i in range(n)]
        if index > 0:
            jitter = streams("expert.jitter", it)
            starts = np.repeat(demo_states[index][None, :], n, axis=0)
            if cfg.rotate:
                starts = _rotate(starts, jitter.uniform(0.0, 2.0 * np.pi, n))
            starts[:, :2] += cfg.noise_scale * jitter.standard_normal((n, 2))
        else:
            starts = None
        policy, trajs, diag = train_iteration(policy, value_fn, family, alpha0, rngs, rl_cfg, ledger,
                                              init_states=starts, workers=workers)
        history.indices.append(index)
        history.train_success.append(diag["success_rate"])
        window.extend(t.success for t in trajs)
        full = len(window) == cfg.window
        rate = float(np.mean(window)) if window else 0.0
        if index > 0 and full and rate >= cfg.promote_threshold:
            index = max(index - cfg.stride, 0)
            history.furthest_index = index
            history.promotions.append((it, index))
            window.clear()
            log.info("iter %d: promoted to demo index %d", it, index)
        elif index == 0 and full and rate >= cfg.target_success:
            k = len(history.evaluations)
            succ, used = evaluate_success(policy, family, alpha0[0], cfg.eval_episodes,
                                          lambda i: streams("expert.eval", k, i))
            ledger.add_epochs("evaluation", used)
            history.evaluations.append((it, succ))
            log.info("iter %d: evaluation success %.3f", it, succ)
            passes = passes + 1 if succ >= cfg.target_success else 0
            if passes >= cfg.confirm_evals:
                history.success = True
                history.final_success_rate = succ
                return policy, value_fn, history
            window.clear()
    return policy, value_fn, history
