"""Stochastic policy heads on top of :mod:`mlp`.

``evaluate`` returns per-sample log-probabilities and entropies plus a
closure mapping their upstream gradients to parameter gradients, so the
PPO loss can be differentiated without an autodiff library.
"""
from __future__ import annotations

import numpy as np

from .mlp import HIDDEN, backward, forward_cached, init_mlp, mlp_forward

LOG_2PI = np.log(2.0 * np.pi)


def log1m_tanh2(u):
    """log(1 - tanh(u)^2), stable for large |u|."""
    return 2.0 * (np.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


class SquashedGaussian:
    """Diagonal Gaussian with state-independent log-std, squashed by tanh onto a box.

    Actor parameters are the MLP parameters followed by the log-std vector.
    The raw (pre-squash) sample is what PPO stores; the squashing Jacobian
    does not depend on the parameters, so it cancels in probability ratios.
    """

    discrete = False

    def __init__(self, low, high):
        self.low = np.asarray(low, dtype=float)
        self.high = np.asarray(high, dtype=float)
        self.half = (self.high - self.low) / 2.0
        self.dim = self.low.size

    def init(self, rng, obs_dim, hidden=HIDDEN):
        return init_mlp(rng, obs_dim, self.dim, hidden, out_scale=0.01) + [np.zeros(self.dim)]

    def squash(self, u):
        return self.low + (np.tanh(u) + 1.0) * self.half

    def unsquash(self, a):
        y = np.clip((np.asarray(a, float) - self.low) / self.half - 1.0, -1 + 1e-15, 1 - 1e-15)
        return np.arctanh(y)

    def gaussian_logp(self, mu, log_std, u):
        z = (u - mu) / np.exp(log_std)
        return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)

    def sample(self, params, obs, rng):
        mu = mlp_forward(params[:-1], obs)
        log_std = params[-1]
        u = mu + np.exp(log_std) * rng.standard_normal(self.dim)
        return u, self.squash(u), float(self.gaussian_logp(mu, log_std, u))

    def greedy(self, params, obs):
        return self.squash(mlp_forward(params[:-1], obs))

    def log_prob(self, params, obs, action):
        """Log density of an action in the environment's units."""
        u = self.unsquash(action)
        mu = mlp_forward(params[:-1], obs)
        jac = np.sum(log1m_tanh2(u) + np.log(self.half), axis=-1)
        return self.gaussian_logp(mu, params[-1], u) - jac

    def mean_action(self, params, obs, n_quad=64):
        """E[action] by Gauss-Hermite quadrature over each dimension."""
        mu = mlp_forward(params[:-1], obs)
        std = np.exp(params[-1])
        x, w = np.polynomial.hermite_e.hermegauss(n_quad)
        w = w / w.sum()
        t = np.tanh(mu[..., None] + std[..., None] * x) @ w
        return self.low + (t + 1.0) * self.half

    def evaluate(self, params, obs, u):
        net, log_std = params[:-1], params[-1]
        mu, cache = forward_cached(net, obs)
        inv_var = np.exp(-2.0 * log_std)
        diff = u - mu
        logp = np.sum(-0.5 * diff * diff * inv_var - log_std - 0.5 * LOG_2PI, axis=-1)
        ent = np.full(len(u), np.sum(log_std + 0.5 * (LOG_2PI + 1.0)))

        def back(g_logp, g_ent):
            g_mu = g_logp[:, None] * diff * inv_var
            g_log_std = (g_logp[:, None] * (diff * diff * inv_var - 1.0)).sum(axis=0) + np.sum(g_ent)
            return backward(net, cache, g_mu) + [g_log_std]

        return logp, ent, back


class MultiCategorical:
    """Independent categorical choice per head, with a boolean validity mask."""

    discrete = True

    def __init__(self, mask):
        self.mask = np.asarray(mask, dtype=bool)
        self.heads, self.choices = self.mask.shape

    def init(self, rng, obs_dim, hidden=HIDDEN):
        return init_mlp(rng, obs_dim, self.heads * self.choices, hidden, out_scale=0.01)

    def _log_softmax(self, logits):
        z = np.where(self.mask, logits, -np.inf)
        m = z.max(axis=-1, keepdims=True)
        lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
        return np.where(self.mask, z - lse, -np.inf)

    def logits(self, params, obs):
        out = mlp_forward(params, obs)
        return out.reshape(out.shape[:-1] + (self.heads, self.choices))

    def sample(self, params, obs, rng):
        logp_all = self._log_softmax(self.logits(params, obs))
        p = np.exp(logp_all)
        cdf = np.cumsum(p, axis=-1)
        r = rng.random(self.heads)[:, None] * cdf[:, -1:]
        idx = np.minimum((cdf <= r).sum(axis=-1), self.mask.sum(axis=-1) - 1)
        logp = float(logp_all[np.arange(self.heads), idx].sum())
        return idx, idx, logp

    def greedy(self, params, obs):
        z = np.where(self.mask, self.logits(params, obs), -np.inf)
        return np.argmax(z, axis=-1)

    def evaluate(self, params, obs, idx):
        out, cache = forward_cached(params, obs)
        B = out.shape[0]
        logits = out.reshape(B, self.heads, self.choices)
        logp_all = self._log_softmax(logits)
        p = np.exp(logp_all)
        safe = np.where(self.mask, logp_all, 0.0)
        idx = np.asarray(idx, dtype=int)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
        logp = np.sum(safe * onehot, axis=(1, 2))
        head_ent = -np.sum(p * safe, axis=-1)
        ent = head_ent.sum(axis=-1)

        def back(g_logp, g_ent):
            g = g_logp[:, None, None] * (onehot - p)
            g += g_ent[:, None, None] * (-p * (safe + head_ent[..., None]))
            return backward(params, cache, g.reshape(B, -1))

        return logp, ent, back
