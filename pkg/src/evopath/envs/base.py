"""Shared episode containers and the family registry."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np


@dataclass
class Trajectory:
    observations: np.ndarray  # (T, obs_dim)
    actions: np.ndarray  # (T, act_dim)
    rewards: np.ndarray  # (T,)
    log_probs: np.ndarray  # (T,)
    done_reason: str  # "success" or "horizon"
    alpha: np.ndarray
    horizon: int

    def __len__(self):
        return len(self.rewards)

    @property
    def success(self) -> bool:
        return self.done_reason == "success"

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.rewards), dtype=np.float64)

    def discounted_return(self, gamma: float) -> float:
        return float(np.sum(self.rewards * gamma ** np.arange(len(self.rewards))))


FAMILIES: dict[str, tuple[type, type]] = {}


def register(env_id: str, family_cls: type, config_cls: type) -> None:
    FAMILIES[env_id] = (family_cls, config_cls)


def make_family(env_id: str, **overrides):
    """Build a family from its id and config overrides (unknown keys raise)."""
    try:
        family_cls, config_cls = FAMILIES[env_id]
    except KeyError:
        raise ValueError(f"unknown env id {env_id!r}; known: {sorted(FAMILIES)}") from None
    names = {f.name for f in dataclasses.fields(config_cls)}
    unknown = set(overrides) - names
    if unknown:
        raise ValueError(f"unknown {env_id} config keys: {sorted(unknown)}")
    return family_cls(config_cls(**overrides))


def evaluate_success(policy, family, alpha, episodes: int, rng_for, *, deterministic=False):
    """Fraction of successful episodes at ``alpha``.

    ``rng_for(i)`` returns the generator for episode ``i``. Returns
    ``(success_rate, episodes_used)``.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    alphas = np.repeat(np.asarray(alpha, dtype=np.float64)[None, :], episodes, axis=0)
    trajs = family.rollout(policy, alphas, [rng_for(i) for i in range(episodes)],
                           deterministic=deterministic)
    wins = sum(t.success for t in trajs)
    return wins / episodes, episodes
