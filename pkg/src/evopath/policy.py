"""Gaussian MLP policy and value network with hand-written backprop."""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class Mlp:
    """tanh MLP with a linear output layer over a flat parameter vector.

    Weights are stored per layer as (fan_out, fan_in) row-major blocks
    followed by the bias, so ``params`` is W1, b1, W2, b2, ...
    """

    def __init__(self, sizes):
        self.sizes = tuple(int(s) for s in sizes)
        self.shapes = [(o, i) for i, o in zip(self.sizes[:-1], self.sizes[1:])]
        self.n_params = sum(o * i + o for o, i in self.shapes)

    def init_params(self, rng: np.random.Generator, out_scale: float = 1.0) -> np.ndarray:
        chunks = []
        for k, (o, i) in enumerate(self.shapes):
            w = rng.standard_normal((o, i)) / math.sqrt(i)
            if k == len(self.shapes) - 1:
                w *= out_scale
            chunks += [w.ravel(), np.zeros(o)]
        return np.concatenate(chunks)

    def unpack(self, params):
        layers, at = [], 0
        for o, i in self.shapes:
            w = params[at:at + o * i].reshape(o, i)
            at += o * i
            b = params[at:at + o]
            at += o
            layers.append((w, b))
        return layers

    def forward(self, params, x):
        """Returns (output, activations) where activations[k] feeds layer k."""
        layers = self.unpack(params)
        acts = [x]
        h = x
        for k, (w, b) in enumerate(layers):
            z = h @ w.T + b
            h = z if k == len(layers) - 1 else np.tanh(z)
            acts.append(h)
        return h, acts

    def per_sample_grads(self, params, acts, dout):
        """d(out . dout_n)/d(params) for every sample n -> (N, n_params)."""
        layers = self.unpack(params)
        n = dout.shape[0]
        blocks = [None] * (2 * len(layers))
        delta = dout
        for k in range(len(layers) - 1, -1, -1):
            w, _ = layers[k]
            blocks[2 * k] = (delta[:, :, None] * acts[k][:, None, :]).reshape(n, -1)
            blocks[2 * k + 1] = delta
            if k > 0:
                delta = (delta @ w) * (1.0 - acts[k] ** 2)
        return np.concatenate(blocks, axis=1)

    def summed_grads(self, params, acts, dout):
        """Same as per_sample_grads(...).sum(0) without the (N, P) matrix."""
        layers = self.unpack(params)
        blocks = [None] * (2 * len(layers))
        delta = dout
        for k in range(len(layers) - 1, -1, -1):
            w, _ = layers[k]
            blocks[2 * k] = (delta.T @ acts[k]).ravel()
            blocks[2 * k + 1] = delta.sum(axis=0)
            if k > 0:
                delta = (delta @ w) * (1.0 - acts[k] ** 2)
        return np.concatenate(blocks)


def _check_obs(obs, dim):
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape[-1] != dim:
        raise ValueError(f"observation has {obs.shape[-1]} entries, expected {dim}")
    if not np.all(np.isfinite(obs)):
        raise ValueError("observation contains non-finite values")
    return obs


class GaussianMlpPolicy:
    """Diagonal Gaussian policy with a state-independent log std.

    The full parameter vector is the MLP parameters followed by ``log_std``.
    Observations are standardized with frozen ``obs_mean``/``obs_std``
    before entering the network. Instances are treated as immutable: use
    :meth:`with_params` to get an updated copy.
    """

    def __init__(self, obs_dim, act_dim, hidden=(32, 32), params=None, rng=None,
                 obs_mean=None, obs_std=None, env_id=""):
        self.obs_dim = int(obs_dim)
        self.act_dim = int(act_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.net = Mlp((self.obs_dim, *self.hidden, self.act_dim))
        self.n_params = self.net.n_params + self.act_dim
        self.env_id = env_id
        self.obs_mean = np.zeros(obs_dim) if obs_mean is None else np.asarray(obs_mean, dtype=np.float64).copy()
        self.obs_std = np.ones(obs_dim) if obs_std is None else np.asarray(obs_std, dtype=np.float64).copy()
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            params = np.concatenate([self.net.init_params(rng, out_scale=0.01), np.zeros(act_dim)])
        params = np.array(params, dtype=np.float64)
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {params.shape}")
        if not np.all(np.isfinite(params)):
            raise ValueError("policy parameters must be finite")
        self.params = params

    @property
    def log_std(self) -> np.ndarray:
        return self.params[self.net.n_params:]

    def with_params(self, params) -> "GaussianMlpPolicy":
        return GaussianMlpPolicy(self.obs_dim, self.act_dim, self.hidden, params=params,
                                 obs_mean=self.obs_mean, obs_std=self.obs_std, env_id=self.env_id)

    def with_normalizer(self, obs_mean, obs_std) -> "GaussianMlpPolicy":
        return GaussianMlpPolicy(self.obs_dim, self.act_dim, self.hidden, params=self.params,
                                 obs_mean=obs_mean, obs_std=obs_std, env_id=self.env_id)

    def _normalize(self, obs):
        return (obs - self.obs_mean) / self.obs_std

    def _forward(self, obs):
        obs = _check_obs(obs, self.obs_dim)
        return self.net.forward(self.params[:self.net.n_params], self._normalize(obs))

    def mean(self, obs) -> np.ndarray:
        return self._forward(obs)[0]

    def log_prob(self, obs, actions) -> np.ndarray:
        mu = self.mean(obs)
        z = (np.asarray(actions, dtype=np.float64) - mu) * np.exp(-self.log_std)
        return (-np.sum(self.log_std) - 0.5 * self.act_dim * math.log(2.0 * math.pi)
                - 0.5 * np.sum(z ** 2, axis=-1))

    def sample_action(self, obs, rng: np.random.Generator):
        mu = self.mean(obs)
        nu = rng.standard_normal(mu.shape)
        action = mu + np.exp(self.log_std) * nu
        logp = (-np.sum(self.log_std) - 0.5 * self.act_dim * math.log(2.0 * math.pi)
                - 0.5 * np.sum(nu ** 2, axis=-1))
        return action, logp

    def score_matrix(self, obs, actions) -> np.ndarray:
        """Per-sample gradient of log pi(a|s) w.r.t. all parameters, (N, P)."""
        obs = np.atleast_2d(obs)
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        mu, acts = self._forward(obs)
        inv_var = np.exp(-2.0 * self.log_std)
        diff = actions - mu
        g_net = self.net.per_sample_grads(self.params[:self.net.n_params], acts, diff * inv_var)
        g_log_std = diff ** 2 * inv_var - 1.0
        return np.concatenate([g_net, g_log_std], axis=1)

    def log_prob_grad(self, obs, action) -> np.ndarray:
        return self.score_matrix(np.asarray(obs)[None, :], np.asarray(action)[None, :])[0]

    def kl_from(self, other: "GaussianMlpPolicy", obs) -> float:
        """Mean KL(other || self) over a batch of observations."""
        mu_p, mu_q = other.mean(obs), self.mean(obs)
        ls_p, ls_q = other.log_std, self.log_std
        var_p, var_q = np.exp(2 * ls_p), np.exp(2 * ls_q)
        kl = ls_q - ls_p + (var_p + (mu_p - mu_q) ** 2) / (2.0 * var_q) - 0.5
        return float(np.mean(np.sum(kl, axis=-1)))

    # serialization

    def to_document(self) -> dict:
        layers = self.net.unpack(self.params[:self.net.n_params])
        return {
            "format": "evopath.policy",
            "format_version": FORMAT_VERSION,
            "env_id": self.env_id,
            "obs_dim": self.obs_dim,
            "act_dim": self.act_dim,
            "layer_sizes": list(self.net.sizes),
            "activation": "tanh",
            "layers": [{"weight": w.tolist(), "bias": b.tolist()} for w, b in layers],
            "log_std": self.log_std.tolist(),
            "obs_mean": self.obs_mean.tolist(),
            "obs_std": self.obs_std.tolist(),
        }

    @classmethod
    def from_document(cls, doc: dict, *, obs_dim=None, act_dim=None, env_id=None):
        version = doc.get("format_version")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported policy format_version {version!r} (expected {FORMAT_VERSION})")
        sizes = [int(s) for s in doc["layer_sizes"]]
        if sizes[0] != doc["obs_dim"] or sizes[-1] != doc["act_dim"]:
            raise ValueError("layer_sizes disagree with obs_dim/act_dim")
        if obs_dim is not None and doc["obs_dim"] != obs_dim:
            raise ValueError(f"policy obs_dim {doc['obs_dim']} != environment obs_dim {obs_dim}")
        if act_dim is not None and doc["act_dim"] != act_dim:
            raise ValueError(f"policy act_dim {doc['act_dim']} != environment act_dim {act_dim}")
        if env_id is not None and doc.get("env_id") != env_id:
            raise ValueError(f"policy was trained for {doc.get('env_id')!r}, not {env_id!r}")
        chunks = []
        for layer, (fan_in, fan_out) in zip(doc["layers"], zip(sizes[:-1], sizes[1:])):
            w = np.asarray(layer["weight"], dtype=np.float64)
            b = np.asarray(layer["bias"], dtype=np.float64)
            if w.shape != (fan_out, fan_in) or b.shape != (fan_out,):
                raise ValueError(f"layer shape mismatch: weight {w.shape}, bias {b.shape}")
            chunks += [w.ravel(), b]
        log_std = np.asarray(doc["log_std"], dtype=np.float64)
        if log_std.shape != (sizes[-1],):
            raise ValueError("log_std length must equal act_dim")
        return cls(sizes[0], sizes[-1], hidden=sizes[1:-1],
                   params=np.concatenate(chunks + [log_std]),
                   obs_mean=doc["obs_mean"], obs_std=doc["obs_std"], env_id=doc.get("env_id", ""))


def save_policy(policy: GaussianMlpPolicy, path) -> None:
    Path(path).write_text(json.dumps(policy.to_document()) + "\n")


def load_policy(path, **expect) -> GaussianMlpPolicy:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read policy document {path}: {exc}") from exc
    try:
        return GaussianMlpPolicy.from_document(doc, **expect)
    except (KeyError, ValueError) as exc:
        raise ValueError(f"{path}: {exc}") from exc


class ValueFunction:
    """MLP baseline V(s, t/horizon) fitted by full-batch L-BFGS."""

    def __init__(self, obs_dim, hidden=(32, 32), rng=None, obs_mean=None, obs_std=None,
                 fit_iters=40):
        self.obs_dim = int(obs_dim)
        self.net = Mlp((self.obs_dim + 1, *hidden, 1))
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = self.net.init_params(rng, out_scale=0.01)
        self.obs_mean = np.zeros(obs_dim) if obs_mean is None else np.asarray(obs_mean, dtype=np.float64)
        self.obs_std = np.ones(obs_dim) if obs_std is None else np.asarray(obs_std, dtype=np.float64)
        self.fit_iters = fit_iters
        self.last_loss = None

    def features(self, obs, time_frac):
        obs = (np.atleast_2d(obs) - self.obs_mean) / self.obs_std
        return np.concatenate([obs, np.reshape(time_frac, (-1, 1))], axis=1)

    def predict(self, obs, time_frac) -> np.ndarray:
        return self.net.forward(self.params, self.features(obs, time_frac))[0][:, 0]

    def loss_and_grad(self, params, x, y):
        out, acts = self.net.forward(params, x)
        err = out[:, 0] - y
        loss = float(np.mean(err ** 2))
        grad = self.net.summed_grads(params, acts, (2.0 / len(y)) * err[:, None])
        return loss, grad

    def fit(self, obs, time_frac, targets, iters=None):
        """Regress toward ``targets``; returns the per-iteration loss history.

        L-BFGS with a Wolfe line search, so the history is nonincreasing
        and the final loss never exceeds the initial one.
        """
        from scipy.optimize import minimize

        x = self.features(obs, time_frac)
        y = np.asarray(targets, dtype=np.float64)
        history = [self.loss_and_grad(self.params, x, y)[0]]

        def record(intermediate_result):
            history.append(float(intermediate_result.fun))

        result = minimize(self.loss_and_grad, self.params, args=(x, y), jac=True, method="L-BFGS-B",
                          callback=record, options={"maxiter": iters or self.fit_iters})
        if result.fun <= history[0]:
            self.params = result.x
        self.last_loss = min(result.fun, history[0])
        return history
