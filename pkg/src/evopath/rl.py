"""Rollouts, GAE, value regression and natural policy gradient updates."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .envs.base import Trajectory

log = logging.getLogger(__name__)

PURPOSES = ("jacobian", "training", "evaluation")
CHUNK = 128  # episodes per vectorized rollout call; fixed so worker count never changes results


@dataclass
class RlConfig:
    gamma: float = 0.995
    gae_lambda: float = 0.97
    npg_step: float = 1e-4
    batch: int = 12
    cg_iters: int = 10
    cg_damping: float = 1e-4
    value_fit_iters: int = 40
    normalize_advantages: bool = True

    def __post_init__(self):
        for name in ("gamma", "gae_lambda", "npg_step", "cg_damping"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.gamma > 1 or self.gae_lambda > 1:
            raise ValueError("gamma and gae_lambda must be <= 1")
        if self.batch < 1 or self.cg_iters < 1:
            raise ValueError("batch and cg_iters must be >= 1")


@dataclass
class Ledger:
    """Exact counters for simulated episodes (by purpose) and policy updates."""

    sim_epochs: dict = field(default_factory=lambda: {p: 0 for p in PURPOSES})
    train_iters: int = 0

    def add_epochs(self, purpose: str, count: int) -> None:
        if purpose not in self.sim_epochs:
            raise ValueError(f"unknown epoch purpose {purpose!r}")
        self.sim_epochs[purpose] += int(count)

    @property
    def total_epochs(self) -> int:
        return sum(self.sim_epochs.values())

    def snapshot(self) -> dict:
        return {"sim_epochs": dict(self.sim_epochs), "train_iters": self.train_iters}

    def minus(self, earlier: dict) -> dict:
        return {
            "sim_epochs": {p: self.sim_epochs[p] - earlier["sim_epochs"][p] for p in PURPOSES},
            "train_iters": self.train_iters - earlier["train_iters"],
        }


def run_episodes(policy, family, alphas, rngs, *, deterministic=False, init_states=None,
                 workers: int = 1) -> list[Trajectory]:
    """Simulate ``len(rngs)`` episodes in fixed-size chunks, in index order."""
    alphas = np.atleast_2d(np.asarray(alphas, dtype=np.float64))
    n = len(rngs)
    if alphas.shape[0] == 1 and n > 1:
        alphas = np.repeat(alphas, n, axis=0)
    starts = list(range(0, n, CHUNK))

    def chunk(lo):
        hi = min(lo + CHUNK, n)
        init = None if init_states is None else init_states[lo:hi]
        return family.rollout(policy, alphas[lo:hi], rngs[lo:hi],
                              deterministic=deterministic, init_states=init)

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(chunk, starts))
    else:
        parts = [chunk(lo) for lo in starts]
    return [t for part in parts for t in part]


def collect_rollouts(policy, family, alphas, rngs, ledger: Ledger | None = None,
                     purpose: str = "training", **kwargs) -> tuple[list[Trajectory], int]:
    if len(rngs) < 1:
        raise ValueError("batch must be >= 1")
    trajs = run_episodes(policy, family, alphas, rngs, **kwargs)
    if ledger is not None:
        ledger.add_epochs(purpose, len(trajs))
    return trajs, len(trajs)


def discounted_cumsum(x, discount):
    out = np.zeros(len(x))
    acc = 0.0
    for t in range(len(x) - 1, -1, -1):
        acc = x[t] + discount * acc
        out[t] = acc
    return out


def compute_gae(traj: Trajectory, values, gamma: float, gae_lambda: float) -> np.ndarray:
    """Raw GAE advantages for one trajectory; V after the last step is 0."""
    values = np.asarray(values, dtype=np.float64)
    next_values = np.append(values[1:], 0.0)
    deltas = traj.rewards + gamma * next_values - values
    return discounted_cumsum(deltas, gamma * gae_lambda)


def value_inputs(trajs):
    obs = np.concatenate([t.observations for t in trajs])
    frac = np.concatenate([t.times / t.horizon for t in trajs])
    return obs, frac


def batch_advantages(trajs, value_fn, cfg: RlConfig) -> np.ndarray:
    """GAE over a batch, concatenated, normalized to zero mean / unit std."""
    advs = []
    for traj in trajs:
        values = value_fn.predict(traj.observations, traj.times / traj.horizon)
        advs.append(compute_gae(traj, values, cfg.gamma, cfg.gae_lambda))
    adv = np.concatenate(advs)
    if cfg.normalize_advantages:
        adv = normalize(adv)
    return adv


def normalize(adv):
    adv = adv - adv.mean()
    std = adv.std()
    return adv / std if std > 0 else adv


def fit_value(value_fn, trajs, gamma: float, iters=None) -> dict:
    if not trajs:
        raise ValueError("fit_value needs at least one trajectory")
    obs, frac = value_inputs(trajs)
    targets = np.concatenate([discounted_cumsum(t.rewards, gamma) for t in trajs])
    history = value_fn.fit(obs, frac, targets, iters=iters)
    return {"pre_loss": history[0], "post_loss": value_fn.last_loss, "history": history}


def conjugate_gradient(fvp, b, iters: int, tol: float = 1e-10):
    """Solve A x = b for symmetric positive definite A given as a product."""
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    for _ in range(iters):
        if rr <= tol:
            break
        ap = fvp(p)
        step = rr / (p @ ap)
        x += step * p
        r -= step * ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


def fisher_product(scores, damping):
    n = scores.shape[0]

    def fvp(v):
        return scores.T @ (scores @ v) / n + damping * v

    return fvp


def npg_update(policy, trajs, advantages, cfg: RlConfig, ledger: Ledger | None = None):
    """One natural-gradient step. Always counts one training iteration.

    Skipped (policy returned unchanged) when the gradient is zero or
    non-finite or when the curvature g.x is not positive.
    """
    if not trajs:
        raise ValueError("npg_update needs a nonempty batch")
    if ledger is not None:
        ledger.train_iters += 1
    obs = np.concatenate([t.observations for t in trajs])
    acts = np.concatenate([t.actions for t in trajs])
    advantages = np.asarray(advantages, dtype=np.float64)
    scores = policy.score_matrix(obs, acts)
    grad = scores.T @ advantages / len(advantages)
    diag = {"accepted": False, "grad_norm": float(np.linalg.norm(grad)), "gx": 0.0,
            "cg_residual": 0.0, "kl": 0.0}
    if not np.all(np.isfinite(grad)):
        log.warning("non-finite policy gradient; update skipped")
        return policy, diag
    if diag["grad_norm"] == 0.0:
        return policy, diag
    fvp = fisher_product(scores, cfg.cg_damping)
    x = conjugate_gradient(fvp, grad, cfg.cg_iters)
    gx = float(grad @ x)
    diag["gx"] = gx
    diag["cg_residual"] = float(np.linalg.norm(fvp(x) - grad) / np.linalg.norm(grad))
    if diag["cg_residual"] > 1e-6:
        log.debug("CG stopped after %d iterations, relative residual %.2e",
                  cfg.cg_iters, diag["cg_residual"])
    if not np.isfinite(gx) or gx <= 0.0:
        log.warning("non-positive curvature g.x=%g; update skipped", gx)
        return policy, diag
    step = np.sqrt(2.0 * cfg.npg_step / (gx + 1e-10)) * x
    new_params = policy.params + step
    if not np.all(np.isfinite(new_params)):
        log.warning("non-finite parameters after step; update skipped")
        return policy, diag
    new_policy = policy.with_params(new_params)
    diag["accepted"] = True
    diag["kl"] = new_policy.kl_from(policy, obs)
    return new_policy, diag


def train_iteration(policy, value_fn, family, alphas, rngs, cfg: RlConfig, ledger: Ledger,
                    init_states=None, workers: int = 1):
    """Collect a batch, take one NPG step, refit the baseline.

    Returns ``(policy, trajectories, diagnostics)``.
    """
    trajs, _ = collect_rollouts(policy, family, alphas, rngs, ledger, "training",
                                init_states=init_states, workers=workers)
    adv = batch_advantages(trajs, value_fn, cfg)
    policy, diag = npg_update(policy, trajs, adv, cfg, ledger)
    fit = fit_value(value_fn, trajs, cfg.gamma, cfg.value_fit_iters)
    diag["value_loss"] = fit["post_loss"]
    diag["success_rate"] = float(np.mean([t.success for t in trajs]))
    return policy, trajs, diag
