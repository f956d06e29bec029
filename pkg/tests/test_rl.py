import logging

import numpy as np
import pytest

from evopath.envs import Trajectory, make_family
from evopath.policy import GaussianMlpPolicy, ValueFunction
from evopath.rl import (
    Ledger, RlConfig, batch_advantages, collect_rollouts, compute_gae, conjugate_gradient,
    discounted_cumsum, fisher_product, fit_value, normalize, npg_update, run_episodes,
    train_iteration,
)
from evopath.seeding import Streams


def make_traj(rewards, obs_dim=3, act_dim=2, seed=0):
    rng = np.random.default_rng(seed)
    t = len(rewards)
    return Trajectory(
        observations=rng.normal(size=(t, obs_dim)), actions=rng.normal(size=(t, act_dim)),
        rewards=np.asarray(rewards, dtype=np.float64), log_probs=np.zeros(t),
        done_reason="horizon", alpha=np.zeros(1), horizon=200,
    )


class LinearValue:
    """Value stub returning fixed per-step numbers."""

    def __init__(self, values):
        self.values = list(values)

    def predict(self, obs, frac):
        return np.asarray(self.values.pop(0))


def test_defaults_match_published_hyperparameters():
    cfg = RlConfig()
    assert (cfg.gamma, cfg.gae_lambda, cfg.npg_step, cfg.batch) == (0.995, 0.97, 1e-4, 12)
    with pytest.raises(ValueError):
        RlConfig(gamma=0.0)
    with pytest.raises(ValueError):
        RlConfig(batch=0)


def test_discounted_return_matches_cumsum():
    rng = np.random.default_rng(1)
    traj = make_traj(rng.normal(size=40))
    assert abs(traj.discounted_return(0.9) - discounted_cumsum(traj.rewards, 0.9)[0]) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_gae_identities(seed):
    rng = np.random.default_rng(seed)
    traj = make_traj(rng.normal(size=25), seed=seed)
    v = rng.normal(size=25)
    gamma = 0.99
    delta = traj.rewards + gamma * np.append(v[1:], 0.0) - v
    np.testing.assert_allclose(compute_gae(traj, v, gamma, 0.0), delta, rtol=0, atol=1e-12)
    # lambda = 1 telescopes to Monte-Carlo return minus baseline
    ret = np.array([sum(gamma ** (k - t) * traj.rewards[k] for k in range(t, 25)) for t in range(25)])
    np.testing.assert_allclose(compute_gae(traj, v, gamma, 1.0), ret - v, rtol=0, atol=1e-10)


def test_gae_single_step():
    traj = make_traj([2.5])
    assert compute_gae(traj, [0.75], 0.995, 0.97)[0] == pytest.approx(1.75, abs=1e-15)


def test_batch_advantages_are_normalized():
    rng = np.random.default_rng(3)
    trajs = [make_traj(rng.exponential(size=int(n)), seed=i)
             for i, n in enumerate(rng.integers(1, 30, 6))]
    values = LinearValue([rng.normal(size=len(t)) for t in trajs])
    adv = batch_advantages(trajs, values, RlConfig())
    assert abs(adv.mean()) < 1e-10
    assert abs(adv.std() - 1.0) < 1e-6
    # a constant batch has zero std and is only centered
    np.testing.assert_array_equal(normalize(np.full(5, 3.0)), np.zeros(5))


def test_fisher_product_symmetric():
    rng = np.random.default_rng(4)
    scores = rng.normal(size=(300, 40))
    fvp = fisher_product(scores, 1e-4)
    for _ in range(10):
        u, v = rng.normal(size=40), rng.normal(size=40)
        assert abs(v @ fvp(u) - u @ fvp(v)) < 1e-8


def test_conjugate_gradient_residual():
    rng = np.random.default_rng(5)
    scores = rng.normal(size=(500, 8))
    fvp = fisher_product(scores, 1e-4)
    g = rng.normal(size=8)
    x = conjugate_gradient(fvp, g, iters=10)
    assert np.linalg.norm(fvp(x) - g) <= 1e-6 * np.linalg.norm(g)


def test_cg_exhaustion_is_logged(caplog):
    pol = GaussianMlpPolicy(6, 2, rng=np.random.default_rng(0))
    pol = pol.with_params(np.random.default_rng(1).normal(scale=0.3, size=pol.n_params))
    trajs = [make_traj(np.zeros(50), obs_dim=6, seed=i) for i in range(3)]
    adv = np.random.default_rng(2).normal(size=150)
    with caplog.at_level(logging.DEBUG, logger="evopath.rl"):
        _, diag = npg_update(pol, trajs, adv, RlConfig())
    assert diag["cg_residual"] <= 1e-6 or "CG stopped" in caplog.text


def test_huge_damping_gives_vanilla_direction():
    pol = GaussianMlpPolicy(3, 2, hidden=(4,), rng=np.random.default_rng(0))
    trajs = [make_traj(np.zeros(20), seed=i) for i in range(2)]
    adv = np.random.default_rng(7).normal(size=40)
    new, diag = npg_update(pol, trajs, adv, RlConfig(cg_damping=1e9))
    assert diag["accepted"]
    obs = np.concatenate([t.observations for t in trajs])
    acts = np.concatenate([t.actions for t in trajs])
    g = pol.score_matrix(obs, acts).T @ adv / len(adv)
    step = new.params - pol.params
    cos = step @ g / (np.linalg.norm(step) * np.linalg.norm(g))
    assert cos > 1 - 1e-9


class MeanOnly:
    """Unit-variance Gaussian in R^2 whose only parameters are the mean."""

    def __init__(self, mu):
        self.params = np.asarray(mu, dtype=np.float64)

    def with_params(self, p):
        return MeanOnly(p)

    def score_matrix(self, obs, acts):
        return acts - self.params

    def kl_from(self, other, obs):
        return 0.5 * float(np.sum((self.params - other.params) ** 2))


def test_npg_solves_quadratic_bandit():
    # reward -|a - a*|^2 under N(mu, I) has expectation -|mu - a*|^2 - 2, maximized at mu = a*
    target = np.array([0.6, -0.8])
    rng = np.random.default_rng(11)
    pol = MeanOnly([0.0, 0.0])
    cfg = RlConfig()
    for _ in range(200):
        acts = pol.params + rng.normal(size=(256, 2))
        rewards = -np.sum((acts - target) ** 2, axis=1)
        trajs = [Trajectory(np.zeros((1, 1)), a[None], np.array([r]), np.zeros(1), "horizon",
                            np.zeros(1), 1) for a, r in zip(acts, rewards)]
        pol, diag = npg_update(pol, trajs, normalize(rewards), cfg)
        assert diag["kl"] <= 3 * cfg.npg_step
    assert np.linalg.norm(pol.params - target) < 0.05


def test_kl_bound_on_reacher_batch():
    fam = make_family("grasp-reacher")
    streams = Streams(0)
    pol = GaussianMlpPolicy(fam.obs_dim, fam.act_dim, rng=streams("init"))
    vf = ValueFunction(fam.obs_dim, rng=streams("vf"))
    cfg = RlConfig()
    for it in range(3):
        trajs, _ = collect_rollouts(pol, fam, np.zeros(fam.dim), [streams("b", it, i) for i in range(12)])
        adv = normalize(streams("adv", it).normal(size=sum(len(t) for t in trajs)))
        new, diag = npg_update(pol, trajs, adv, cfg)
        assert diag["accepted"]
        assert diag["kl"] <= 2 * cfg.npg_step * 1.5
        pol = new


def test_collect_rollouts_batch_shape_and_ledger():
    fam = make_family("grasp-reacher")
    streams = Streams(2)
    pol = GaussianMlpPolicy(fam.obs_dim, fam.act_dim, rng=streams("init"))
    led = Ledger()
    trajs, n = collect_rollouts(pol, fam, np.zeros(fam.dim), [streams("r", i) for i in range(12)], led)
    assert n == 12 and len(trajs) == 12
    assert all(1 <= len(t) <= 200 for t in trajs)
    assert led.sim_epochs == {"jacobian": 0, "training": 12, "evaluation": 0}
    again, _ = collect_rollouts(pol, fam, np.zeros(fam.dim), [streams("r", i) for i in range(12)])
    for a, b in zip(trajs, again):
        np.testing.assert_array_equal(a.actions, b.actions)
        np.testing.assert_array_equal(a.rewards, b.rewards)
    with pytest.raises(ValueError):
        collect_rollouts(pol, fam, np.zeros(fam.dim), [], led)


def test_worker_count_does_not_change_rollouts():
    fam = make_family("grasp-reacher")
    streams = Streams(3)
    pol = GaussianMlpPolicy(fam.obs_dim, fam.act_dim, rng=streams("init"))
    alphas = streams("alpha").uniform(size=(300, fam.dim))
    one = run_episodes(pol, fam, alphas, [streams("e", i) for i in range(300)], workers=1)
    many = run_episodes(pol, fam, alphas, [streams("e", i) for i in range(300)], workers=8)
    assert len(one) == len(many) == 300
    for a, b in zip(one, many):
        np.testing.assert_array_equal(a.observations, b.observations)
        np.testing.assert_array_equal(a.log_probs, b.log_probs)


def test_zero_gradient_update_is_skipped_but_counted():
    pol = GaussianMlpPolicy(3, 2, hidden=(4,), rng=np.random.default_rng(0))
    trajs = [make_traj(np.zeros(10), seed=i) for i in range(2)]
    led = Ledger()
    new, diag = npg_update(pol, trajs, np.zeros(20), RlConfig(), led)
    assert new is pol and not diag["accepted"]
    assert led.train_iters == 1
    new, diag = npg_update(pol, trajs, np.full(20, np.nan), RlConfig(), led)
    assert new is pol and led.train_iters == 2


def test_train_iteration_counts_exactly():
    fam = make_family("grasp-reacher")
    streams = Streams(4)
    pol = GaussianMlpPolicy(fam.obs_dim, fam.act_dim, rng=streams("init"))
    vf = ValueFunction(fam.obs_dim, rng=streams("vf"))
    led = Ledger()
    for it in range(3):
        pol, trajs, diag = train_iteration(pol, vf, fam, np.zeros(fam.dim),
                                           [streams("t", it, i) for i in range(12)], RlConfig(), led)
        assert {"accepted", "kl", "success_rate", "value_loss"} <= set(diag)
    assert led.train_iters == 3
    assert led.sim_epochs["training"] == 36 and led.total_epochs == 36


def test_fit_value_constant_returns():
    c = 0.7
    trajs = [make_traj([c], seed=i) for i in range(40)]
    vf = ValueFunction(3, rng=np.random.default_rng(0))
    out = fit_value(vf, trajs, 0.995, iters=300)
    assert out["post_loss"] <= out["pre_loss"]
    assert np.all(np.diff(out["history"]) <= 1e-12)
    obs = np.concatenate([t.observations for t in trajs])
    pred = vf.predict(obs, np.zeros(len(obs)))
    assert np.mean((pred - c) ** 2) < 1e-3
    with pytest.raises(ValueError):
        fit_value(vf, [], 0.995)
