"""Differentiable evolution path search and the linear-path baseline.

Starting from the source robot (alpha = 0) with an expert policy, each
step either keeps the current direction (the policy still succeeds one
step ahead) or re-plans it: probe the reward on a small sphere around
alpha, fit the reward gradient w.r.t. alpha by least squares, blend it
with a pull toward alpha = 1, and fine-tune the policy on robots sampled
between alpha and alpha + l with a shrinking range.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .envs.base import evaluate_success
from .evo import at_target, clamp_box, distance_to_target, sample_sphere
from .policy import ValueFunction
from .rl import PURPOSES, Ledger, RlConfig, run_episodes, train_iteration
from .seeding import Streams

log = logging.getLogger(__name__)

PATH_RECORD_VERSION = 1


class PreconditionError(RuntimeError):
    """The starting policy does not meet the success gate at alpha = 0."""


@dataclass
class TransferConfig:
    xi: float = 0.03
    n: int = 72
    lam: float = 1.0
    lambda1: float = 0.995
    q: float = 0.667
    n_e: int = 50
    probe_episodes: int = 1
    eval_episodes: int = 12
    precheck_episodes: int = 50
    max_steps: int = 1000
    early_stop: bool = True
    recheck_after_train: bool = False
    common_random_numbers: bool = False
    ridge: float = 1e-6
    rl: RlConfig = field(default_factory=RlConfig)

    def __post_init__(self):
        if not self.xi > 0:
            raise ValueError("xi must be > 0")
        if self.n < 1 or self.probe_episodes < 1 or self.eval_episodes < 1 or self.precheck_episodes < 1:
            raise ValueError("n, probe_episodes and eval_episodes must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not 0 < self.lambda1 < 1:
            raise ValueError("lambda1 must be in (0, 1)")
        if not 0 < self.q <= 1:
            raise ValueError("q must be in (0, 1]")
        if self.n_e < 0 or self.max_steps < 1:
            raise ValueError("n_e must be >= 0 and max_steps >= 1")

    @property
    def faithful(self) -> bool:
        return not self.early_stop and not self.recheck_after_train

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class JacobianEstimate:
    J: np.ndarray
    residual_norm: float
    n_probes: int
    rho0: float


@dataclass
class PathStep:
    alpha: list
    direction: list
    jacobian: list | None
    gate_success: float
    triggered: bool
    train_iters: int
    sim_epochs: dict

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class PathRecord:
    method: str
    env_id: str
    seed: int
    config: dict
    steps: list = field(default_factory=list)
    final_alpha: list | None = None
    status: str = "running"
    # work outside the path steps ("precheck", "finish"), each with train_iters and sim_epochs
    phases: dict = field(default_factory=dict)

    @property
    def alphas(self) -> list:
        return [s.alpha for s in self.steps] + ([self.final_alpha] if self.final_alpha is not None else [])

    def totals(self) -> dict:
        """Counters summed over the path steps and the extra phases."""
        parts = [(s.sim_epochs, s.train_iters) for s in self.steps]
        parts += [(ph["sim_epochs"], ph["train_iters"]) for ph in self.phases.values()]
        epochs = {p: sum(e[p] for e, _ in parts) for p in PURPOSES}
        return {"sim_epochs": epochs, "sim_epochs_total": sum(epochs.values()),
                "train_iters": sum(i for _, i in parts),
                "triggered_steps": sum(s.triggered for s in self.steps)}

    def to_document(self) -> dict:
        return {
            "schema_version": PATH_RECORD_VERSION,
            "method": self.method,
            "env_id": self.env_id,
            "seed": self.seed,
            "status": self.status,
            "config": self.config,
            "steps": [s.to_dict() for s in self.steps],
            "final_alpha": self.final_alpha,
            "phases": self.phases,
            "totals": self.totals(),
        }


def _episode_rngs(streams, label, count):
    return [streams(label, j) for j in range(count)]


def probe_returns(policy, family, alpha, deltas, m: int, streams: Streams, label: str,
                  gamma: float, ledger: Ledger | None = None, common_random_numbers=False,
                  workers: int = 1):
    """Mean discounted return at clamp(alpha + delta_i) for delta_0 = 0 and each probe.

    Returns ``(rho0, rho, episodes_used)``; all episodes are tagged
    ``jacobian`` in the ledger.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    deltas = np.asarray(getattr(deltas, "deltas", deltas), dtype=np.float64)
    points = clamp_box(np.vstack([np.zeros(deltas.shape[1]), deltas]) + alpha)
    alphas = np.repeat(points, m, axis=0)
    if common_random_numbers:
        rngs = [streams(label, j) for _ in range(len(points)) for j in range(m)]
    else:
        rngs = [streams(label, i, j) for i in range(len(points)) for j in range(m)]
    trajs = run_episodes(policy, family, alphas, rngs, workers=workers)
    returns = np.array([t.discounted_return(gamma) for t in trajs]).reshape(len(points), m).mean(axis=1)
    if ledger is not None:
        ledger.add_epochs("jacobian", len(trajs))
    return float(returns[0]), returns[1:], len(trajs)


def lsq_jacobian(deltas, rho, rho0: float, ridge: float = 1e-6) -> JacobianEstimate:
    """Least-squares reward gradient from probe displacements and returns.

    Plain least squares when the probes span every dimension; otherwise
    (fewer or degenerate probes) solves (D^T D + ridge I) J = D^T (rho - rho0)
    with the probes as rows of D.
    """
    deltas = np.asarray(getattr(deltas, "deltas", deltas), dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64).reshape(-1)
    if deltas.shape[0] != rho.size or deltas.shape[0] < 1:
        raise ValueError(f"{deltas.shape[0]} probes but {rho.size} returns")
    if not (np.all(np.isfinite(deltas)) and np.all(np.isfinite(rho)) and np.isfinite(rho0)):
        raise ValueError("non-finite probe data")
    rhs = rho - rho0
    J, _, rank, _ = np.linalg.lstsq(deltas, rhs, rcond=None)
    if rank < deltas.shape[1]:
        gram = deltas.T @ deltas + ridge * np.eye(deltas.shape[1])
        J = np.linalg.solve(gram, deltas.T @ rhs)
    residual = float(np.linalg.norm(deltas @ J - rhs))
    return JacobianEstimate(J=J, residual_norm=residual, n_probes=int(deltas.shape[0]), rho0=float(rho0))


def evolution_direction(J, alpha, lam: float, xi: float) -> np.ndarray:
    """Step of length xi along J/|J| + lam * (1 - alpha)/|1 - alpha|.

    Falls back to the pure pull toward 1 when J vanishes or exactly cancels
    the pull.
    """
    J = np.asarray(J, dtype=np.float64)
    gap = 1.0 - np.asarray(alpha, dtype=np.float64)
    gap_norm = np.linalg.norm(gap)
    if gap_norm == 0.0:
        raise ValueError("alpha is already at the target")
    pull = gap / gap_norm
    j_norm = np.linalg.norm(J)
    if j_norm < 1e-12:
        return xi * pull
    direction = J / j_norm + lam * pull
    d_norm = np.linalg.norm(direction)
    if d_norm < 1e-12:
        return xi * pull
    return direction / d_norm * xi


def beta_bounds(e: int, lambda1: float) -> tuple[float, float]:
    return 1.0 - lambda1 ** e, 1.0


def sample_betas(rng: np.random.Generator, e: int, lambda1: float, size: int) -> np.ndarray:
    lo, hi = beta_bounds(e, lambda1)
    return rng.uniform(lo, hi, size)


def curriculum_train(policy, value_fn, family, alpha, l, cfg: TransferConfig, ledger: Ledger,
                     streams: Streams, label: str, workers: int = 1, check_first: bool = False):
    """Fine-tune on robots alpha + beta * l with beta ~ U(1 - lambda1^e, 1).

    A fresh beta is drawn for every trajectory. Up to ``n_e`` iterations;
    with ``early_stop`` the loop ends as soon as the policy clears the gate
    at alpha + l (checked before every iteration after the first, and before
    the first too when ``check_first``).
    """
    if not family.trainable:
        return policy
    target = clamp_box(alpha + l)
    for e in range(cfg.n_e):
        if cfg.early_stop and (e > 0 or check_first):
            rate, used = evaluate_success(policy, family, target, cfg.eval_episodes,
                                          lambda i: streams(label, "stop", e, i))
            ledger.add_epochs("evaluation", used)
            if rate >= cfg.q:
                break
        betas = sample_betas(streams(label, "beta", e), e, cfg.lambda1, cfg.rl.batch)
        alphas = clamp_box(alpha + betas[:, None] * l)
        rngs = _episode_rngs(streams, f"{label}.rollout.{e}", cfg.rl.batch)
        policy, _, _ = train_iteration(policy, value_fn, family, alphas, rngs, cfg.rl, ledger,
                                       workers=workers)
    return policy


def gate_success(policy, family, alpha, cfg: TransferConfig, ledger: Ledger, streams, label):
    rate, used = evaluate_success(policy, family, alpha, cfg.eval_episodes,
                                  lambda i: streams(label, i))
    ledger.add_epochs("evaluation", used)
    return rate


def new_value_function(policy, family, streams: Streams, rl: RlConfig) -> ValueFunction:
    return ValueFunction(family.obs_dim, rng=streams("value.init"),
                         obs_mean=getattr(policy, "obs_mean", None),
                         obs_std=getattr(policy, "obs_std", None), fit_iters=rl.value_fit_iters)


def _walk(method, family, policy, cfg: TransferConfig, seed: int, ledger: Ledger | None,
          value_fn, workers: int, iter_budget: int | None = None):
    streams = Streams(seed)
    ledger = ledger if ledger is not None else Ledger()
    dim = family.dim
    if value_fn is None and family.trainable:
        value_fn = new_value_function(policy, family, streams, cfg.rl)
    record = PathRecord(method=method, env_id=family.env_id, seed=int(seed), config=cfg.to_dict())

    alpha = np.zeros(dim)
    if family.trainable:
        rate, used = evaluate_success(policy, family, alpha, cfg.precheck_episodes,
                                      lambda i: streams(f"{method}.precheck", i))
        ledger.add_epochs("evaluation", used)
        record.phases["precheck"] = {"success_rate": rate, "train_iters": 0,
                                     "sim_epochs": {p: used if p == "evaluation" else 0 for p in PURPOSES}}
        if rate < cfg.q:
            raise PreconditionError(f"starting policy succeeds {rate:.3f} < q={cfg.q} at alpha=0")
    if method == "deps":
        l = sample_sphere(streams("deps.init"), dim, cfg.xi, 1).deltas[0]
    else:
        l = np.full(dim, cfg.xi / np.sqrt(dim))

    k = 0
    while not at_target(alpha):
        if k >= cfg.max_steps or (iter_budget is not None and ledger.train_iters >= iter_budget):
            record.status = "timeout"
            break
        before = ledger.snapshot()
        ahead = clamp_box(alpha + l)
        rate = gate_success(policy, family, ahead, cfg, ledger, streams, f"{method}.gate.{k}")
        # a kept direction that no longer brings alpha closer to 1 (e.g. pinned
        # against a face) is re-planned even when the gate passes
        stalled = method == "deps" and distance_to_target(ahead) >= distance_to_target(alpha)
        triggered = rate < cfg.q or stalled
        jac = None
        if triggered:
            if method == "deps":
                deltas = sample_sphere(streams("deps.delta", k), dim, cfg.xi, cfg.n)
                rho0, rho, _ = probe_returns(policy, family, alpha, deltas, cfg.probe_episodes, streams,
                                             f"deps.probe.{k}", cfg.rl.gamma, ledger,
                                             cfg.common_random_numbers, workers)
                est = lsq_jacobian(deltas, rho, rho0, cfg.ridge)
                jac = est.J.tolist()
                l = evolution_direction(est.J, alpha, cfg.lam, cfg.xi)
            policy = curriculum_train(policy, value_fn, family, alpha, l, cfg, ledger, streams,
                                      f"{method}.train.{k}", workers, check_first=method == "deps")
        advance = True
        if triggered and cfg.recheck_after_train and family.trainable:
            recheck = gate_success(policy, family, clamp_box(alpha + l), cfg, ledger, streams,
                                   f"{method}.recheck.{k}")
            advance = recheck >= cfg.q
        delta = ledger.minus(before)
        record.steps.append(PathStep(alpha=alpha.tolist(), direction=l.tolist(), jacobian=jac,
                                     gate_success=rate, triggered=bool(triggered),
                                     train_iters=delta["train_iters"], sim_epochs=delta["sim_epochs"]))
        if advance:
            alpha = clamp_box(alpha + l)
        k += 1
    else:
        record.status = "completed"
    record.final_alpha = alpha.tolist()
    return policy, value_fn, record


def deps_transfer(family, expert_policy, cfg: TransferConfig, seed: int, ledger: Ledger | None = None,
                  value_fn=None, workers: int = 1, iter_budget: int | None = None):
    """Transfer along a searched path. Returns ``(policy, value_fn, PathRecord)``."""
    return _walk("deps", family, expert_policy, cfg, seed, ledger, value_fn, workers, iter_budget)


def linear_transfer(family, expert_policy, cfg: TransferConfig, seed: int, ledger: Ledger | None = None,
                    value_fn=None, workers: int = 1, iter_budget: int | None = None):
    """Baseline: fixed step xi * 1/sqrt(D) along the diagonal, same gate and curriculum."""
    return _walk("linear", family, expert_policy, cfg, seed, ledger, value_fn, workers, iter_budget)


def finish_training(policy, value_fn, family, cfg: TransferConfig, seed: int, ledger: Ledger,
                    target_success: float = 0.8, eval_episodes: int = 50, eval_every: int = 5,
                    iter_budget: int = 20000, workers: int = 1, record: PathRecord | None = None):
    """Keep training on the target robot until the success rate reaches the target.

    Evaluates first, then alternates ``eval_every`` training iterations with
    an evaluation. Stops when ``ledger.train_iters`` reaches ``iter_budget``.
    The work is stored as ``record.phases["finish"]`` when a record is given.
    Returns ``(policy, reached, final_rate)``.
    """
    before = ledger.snapshot()
    policy, reached, rate = _finish(policy, value_fn, family, cfg, Streams(seed), ledger, target_success,
                                    eval_episodes, eval_every, iter_budget, workers)
    if record is not None:
        delta = ledger.minus(before)
        record.phases["finish"] = {"reached": reached, "success_rate": rate,
                                   "train_iters": delta["train_iters"], "sim_epochs": delta["sim_epochs"]}
    return policy, reached, rate


def _finish(policy, value_fn, family, cfg, streams, ledger, target_success, eval_episodes, eval_every,
            iter_budget, workers):
    target = np.ones(family.dim)
    rate = 0.0
    for k in range(10 ** 9):
        rate, used = evaluate_success(policy, family, target, eval_episodes,
                                      lambda i: streams("finish.eval", k, i))
        ledger.add_epochs("evaluation", used)
        if rate >= target_success:
            return policy, True, rate
        if not family.trainable or ledger.train_iters >= iter_budget:
            return policy, False, rate
        for e in range(eval_every):
            if ledger.train_iters >= iter_budget:
                break
            rngs = _episode_rngs(streams, f"finish.rollout.{k}.{e}", cfg.rl.batch)
            policy, _, _ = train_iteration(policy, value_fn, family, target[None, :], rngs, cfg.rl,
                                           ledger, workers=workers)
    return policy, False, rate
