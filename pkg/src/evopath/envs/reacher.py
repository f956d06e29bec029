"""Grasp-handoff point-mass reacher.

A 2-D point mass must reach the origin and stay within a tolerance for
``hold_steps`` consecutive steps. Two actuation channels crossfade along
the evolution: the "hand" gain fades out while the "servo" gain fades in.
Grip quality ``Q = max(hand, servo)`` scales the success tolerance, so the
straight path (both channels at half strength) is the hard way through,
while saturating the servo before fading the hand keeps ``Q = 1``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..evo import ParamSpace, interpolate
from .base import Trajectory

DIM_NAMES = (
    "hand_gain",
    "servo_gain",
    "mass",
    "damping",
    "action_scale",
    "base_tolerance",
    "start_radius",
    "dyn_noise",
)
STATE_FIELDS = ("px", "py", "vx", "vy")
DEMO_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ReacherConfig:
    theta_source: tuple = (1.0, 0.0, 1.0, 0.05, 1.0, 0.15, 1.0, 0.0)
    theta_target: tuple = (0.0, 1.0, 1.5, 0.15, 0.8, 0.10, 1.2, 0.01)
    dt: float = 0.05
    hold_steps: int = 10
    horizon: int = 200
    demo_kp: float = 2.0
    demo_kd: float = 1.5

    def __post_init__(self):
        if len(self.theta_source) != len(DIM_NAMES) or len(self.theta_target) != len(DIM_NAMES):
            raise ValueError(f"reacher parameter vectors must have {len(DIM_NAMES)} entries")
        if self.hold_steps < 1 or self.horizon < 1:
            raise ValueError("hold_steps and horizon must be >= 1")
        object.__setattr__(self, "theta_source", tuple(float(x) for x in self.theta_source))
        object.__setattr__(self, "theta_target", tuple(float(x) for x in self.theta_target))

    @property
    def space(self) -> ParamSpace:
        return ParamSpace(np.array(self.theta_source), np.array(self.theta_target), DIM_NAMES)


def physical(cfg: ReacherConfig, alpha) -> dict[str, np.ndarray]:
    """Physical parameters at alpha (or a batch of alphas), keyed by name."""
    theta = interpolate(cfg.space, alpha)
    out = {name: theta[..., i] for i, name in enumerate(DIM_NAMES)}
    out["grip_quality"] = np.maximum(out["hand_gain"], out["servo_gain"])
    out["tolerance"] = out["base_tolerance"] * (0.25 + 0.75 * out["grip_quality"])
    return out


def grip_quality(cfg: ReacherConfig, alpha) -> float:
    return float(physical(cfg, alpha)["grip_quality"])


def success_tolerance(cfg: ReacherConfig, alpha) -> float:
    return float(physical(cfg, alpha)["tolerance"])


def _advance(pos, vel, action, phys, noise, dt):
    """One integration step; arrays are (N, 2), phys entries (N,)."""
    a = np.clip(action, -1.0, 1.0)
    drive = (phys["action_scale"] * (phys["hand_gain"] + phys["servo_gain"]) * dt
             / phys["mass"])[:, None]
    vel = (1.0 - phys["damping"])[:, None] * vel + drive * a + phys["dyn_noise"][:, None] * noise
    pos = pos + vel * dt
    return pos, vel


def observe(pos, vel):
    # goal sits at the origin
    return np.concatenate([pos, vel, -pos], axis=-1)


class GraspReacherEnv:
    """Single-episode environment instance at a fixed alpha."""

    obs_dim = 6
    act_dim = 2

    def __init__(self, cfg: ReacherConfig, alpha, rng: np.random.Generator):
        self.cfg = cfg
        self.alpha = np.asarray(alpha, dtype=np.float64)
        self.horizon = cfg.horizon
        self.rng = rng
        self.phys = {k: np.atleast_1d(v) for k, v in physical(cfg, self.alpha).items()}
        self.pos = np.zeros(2)
        self.vel = np.zeros(2)
        self.t = 0
        self.hold = 0
        self.done = True
        self.success_flag = False

    @property
    def tolerance(self) -> float:
        return float(self.phys["tolerance"][0])

    @property
    def state(self) -> np.ndarray:
        return np.concatenate([self.pos, self.vel])

    def _obs(self):
        return observe(self.pos, self.vel)

    def reset(self):
        angle = self.rng.uniform(0.0, 2.0 * math.pi)
        radius = float(self.phys["start_radius"][0])
        return self.reset_to_state([radius * math.cos(angle), radius * math.sin(angle), 0.0, 0.0])

    def reset_to_state(self, state):
        state = np.asarray(state, dtype=np.float64).reshape(-1)
        if state.size != 4 or not np.all(np.isfinite(state)):
            raise ValueError(f"reacher state must be 4 finite values {STATE_FIELDS}, got {state}")
        self.pos = state[:2].copy()
        self.vel = state[2:].copy()
        self.t = 0
        self.hold = 0
        self.done = False
        self.success_flag = False
        return self._obs()

    def step(self, action):
        if self.done:
            raise RuntimeError("step() called on a finished episode")
        action = np.asarray(action, dtype=np.float64).reshape(1, 2)
        noise = self.rng.standard_normal((1, 2))
        pos, vel = _advance(self.pos[None], self.vel[None], action, self.phys, noise, self.cfg.dt)
        self.pos, self.vel = pos[0], vel[0]
        self.t += 1
        self.hold = self.hold + 1 if np.linalg.norm(self.pos) <= self.tolerance else 0
        reward = 0.0
        if self.hold >= self.cfg.hold_steps:
            reward = 1.0
            self.success_flag = True
            self.done = True
        elif self.t >= self.horizon:
            self.done = True
        return self._obs(), reward, self.done


class ScriptedPD:
    """PD controller on position error, usable wherever a policy is."""

    def __init__(self, kp: float = 2.0, kd: float = 1.5):
        self.kp = kp
        self.kd = kd
        self.act_dim = 2
        self.log_std = np.zeros(2)

    def mean(self, obs):
        obs = np.asarray(obs, dtype=np.float64)
        return np.clip(-self.kp * obs[..., 0:2] - self.kd * obs[..., 2:4], -1.0, 1.0)


def make_demo_trajectory(cfg: ReacherConfig, rng: np.random.Generator) -> np.ndarray:
    """State sequence (T+1, 4) of a scripted PD run at alpha = 0 ending in success."""
    env = GraspReacherEnv(cfg, np.zeros(len(DIM_NAMES)), rng)
    pd = ScriptedPD(cfg.demo_kp, cfg.demo_kd)
    obs = env.reset()
    states = [env.state]
    done = False
    while not done:
        obs, _, done = env.step(pd.mean(obs))
        states.append(env.state)
    if not env.success_flag:
        raise RuntimeError("scripted demo controller failed at alpha=0; environment is broken")
    return np.array(states)


def save_demo(states, path, env_id: str = "grasp-reacher") -> None:
    doc = {
        "format": "evopath.demo",
        "format_version": DEMO_FORMAT_VERSION,
        "env_id": env_id,
        "state_fields": list(STATE_FIELDS),
        "states": np.asarray(states, dtype=np.float64).tolist(),
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_demo(path) -> np.ndarray:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != DEMO_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported demo format_version {doc.get('format_version')!r}")
    states = np.asarray(doc["states"], dtype=np.float64)
    if states.ndim != 2 or states.shape[1] != len(STATE_FIELDS):
        raise ValueError(f"{path}: demo states must be rows of {len(STATE_FIELDS)} values")
    return states


class GraspReacherFamily:
    env_id = "grasp-reacher"
    trainable = True
    supports_reset_to_state = True
    obs_dim = 6
    act_dim = 2

    def __init__(self, cfg: ReacherConfig | None = None):
        self.cfg = cfg or ReacherConfig()
        self.dim = len(DIM_NAMES)
        self.horizon = self.cfg.horizon

    def make(self, alpha, rng):
        return GraspReacherEnv(self.cfg, alpha, rng)

    def rollout(self, policy, alphas, rngs, deterministic=False, init_states=None):
        """Simulate one episode per (alpha, rng) pair, vectorized over episodes.

        Each episode draws, in order from its own generator: the start angle,
        the action noise block (horizon, 2) and the dynamics noise block
        (horizon, 2). ``init_states`` (N, 4) overrides the start state.
        """
        cfg = self.cfg
        alphas = np.atleast_2d(np.asarray(alphas, dtype=np.float64))
        n, horizon = len(rngs), cfg.horizon
        phys = physical(cfg, alphas)
        angle = np.empty(n)
        nu_a = np.empty((n, horizon, 2))
        nu_env = np.empty((n, horizon, 2))
        for i, rng in enumerate(rngs):
            angle[i] = rng.uniform(0.0, 2.0 * math.pi)
            nu_a[i] = rng.standard_normal((horizon, 2))
            nu_env[i] = rng.standard_normal((horizon, 2))
        if init_states is None:
            pos = phys["start_radius"][:, None] * np.stack([np.cos(angle), np.sin(angle)], axis=1)
            vel = np.zeros((n, 2))
        else:
            init_states = np.asarray(init_states, dtype=np.float64).reshape(n, 4)
            pos, vel = init_states[:, :2].copy(), init_states[:, 2:].copy()

        log_std = np.asarray(policy.log_std, dtype=np.float64)
        std = np.exp(log_std)
        logp_const = -np.sum(log_std) - 0.5 * len(log_std) * math.log(2.0 * math.pi)

        obs_buf = np.zeros((n, horizon, 6))
        act_buf = np.zeros((n, horizon, 2))
        logp_buf = np.zeros((n, horizon))
        rew_buf = np.zeros((n, horizon))
        length = np.full(n, horizon)
        success = np.zeros(n, dtype=bool)
        active = np.ones(n, dtype=bool)
        hold = np.zeros(n, dtype=int)
        tol = phys["tolerance"]
        for t in range(horizon):
            obs = observe(pos, vel)
            mean = policy.mean(obs)
            if deterministic:
                act = mean
                logp = np.full(n, logp_const)
            else:
                act = mean + std * nu_a[:, t]
                logp = logp_const - 0.5 * np.sum(nu_a[:, t] ** 2, axis=1)
            obs_buf[:, t] = obs
            act_buf[:, t] = act
            logp_buf[:, t] = logp
            new_pos, new_vel = _advance(pos, vel, act, phys, nu_env[:, t], cfg.dt)
            pos = np.where(active[:, None], new_pos, pos)
            vel = np.where(active[:, None], new_vel, vel)
            inside = np.linalg.norm(pos, axis=1) <= tol
            hold = np.where(inside, hold + 1, 0)
            hit = active & (hold >= cfg.hold_steps)
            rew_buf[hit, t] = 1.0
            success |= hit
            length[hit] = t + 1
            active &= ~hit
            if not active.any():
                break

        return [
            Trajectory(
                observations=obs_buf[i, :length[i]].copy(),
                actions=act_buf[i, :length[i]].copy(),
                rewards=rew_buf[i, :length[i]].copy(),
                log_probs=logp_buf[i, :length[i]].copy(),
                done_reason="success" if success[i] else "horizon",
                alpha=alphas[i].copy(),
                horizon=horizon,
            )
            for i in range(n)
        ]
