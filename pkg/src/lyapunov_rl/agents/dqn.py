"""Replay-buffer Q-learning over a factored action space.

A joint action picks one option per head (a discretised action dimension,
or a routing node). The joint value is the mean of per-head values,
``Q(s, a) = mean_h Q_h(s, a_h)``, so ``max_a Q(s, a)`` is the mean of the
per-head maxima and the TD target stays exact for the joint action.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from ..errors import TrainingError
from .mlp import HIDDEN, Adam, backward, clip_grad_norm, forward_cached, init_mlp, mlp_forward


@dataclass
class DqnConfig:
    capacity: int = 10000
    minibatch: int = 128
    discount: float = 0.95
    lr: float = 1e-3
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_fraction: float = 0.5
    target_sync: int = 250
    train_every: int = 4
    levels: int = 5
    max_grad_norm: float = 10.0
    steps_per_episode: int = 500
    max_episodes: int = 1000
    hidden: Tuple[int, ...] = HIDDEN

    def __post_init__(self):
        if self.capacity < self.minibatch:
            raise ValueError("replay capacity must be >= minibatch")
        if self.levels < 2:
            raise ValueError("need at least 2 discretisation levels")

    def epsilon(self, step, total_steps):
        horizon = max(1.0, self.eps_decay_fraction * total_steps)
        frac = min(1.0, step / horizon)
        return self.eps_start + frac * (self.eps_end - self.eps_start)


class ReplayBuffer:
    """Fixed-capacity ring buffer; the oldest transition is overwritten first."""

    def __init__(self, capacity, obs_dim, n_heads):
        self.capacity = int(capacity)
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros((capacity, n_heads), dtype=int)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.pos = 0

    def __len__(self):
        return self.size

    def add(self, obs, action, reward, next_obs, done):
        i = self.pos
        self.obs[i] = obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_obs[i] = next_obs
        self.dones[i] = done
        self.pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, rng, n):
        idx = rng.integers(0, self.size, size=n)
        return self.obs[idx], self.actions[idx], self.rewards[idx], self.next_obs[idx], self.dones[idx]


def head_values(params, obs, mask):
    out = mlp_forward(params, obs)
    return out.reshape(out.shape[:-1] + mask.shape)


def td_loss(params, target_params, mask, obs, actions, rewards, next_obs, dones, gamma):
    """0.5 * mean((Q(s,a) - y)^2) and its gradient w.r.t. ``params``."""
    B = len(rewards)
    H, C = mask.shape
    q_next = head_values(target_params, next_obs, mask)
    best_next = np.where(mask, q_next, -np.inf).max(axis=-1).mean(axis=-1)
    y = rewards + gamma * np.where(dones, 0.0, best_next)

    out, cache = forward_cached(params, obs)
    q = out.reshape(B, H, C)
    chosen = np.take_along_axis(q, actions[..., None], axis=-1)[..., 0]
    q_sa = chosen.mean(axis=-1)
    err = q_sa - y
    g = np.zeros_like(q)
    np.put_along_axis(g, actions[..., None], (err / (B * H))[:, None, None] * np.ones((B, H, 1)), axis=-1)
    grads = backward(params, cache, g.reshape(B, -1))
    return float(0.5 * np.mean(err * err)), grads


class DqnAgent:
    def __init__(self, mask, obs_dim: int, cfg: DqnConfig, rng, values=None):
        """``values`` maps per-head choice indices to environment actions (continuous boxes)."""
        self.mask = np.asarray(mask, dtype=bool)
        self.cfg = cfg
        self.values = values
        H, C = self.mask.shape
        self.q = init_mlp(rng, obs_dim, H * C, cfg.hidden, out_scale=1.0)
        self.target = [p.copy() for p in self.q]
        self.opt = Adam(self.q, cfg.lr)
        self.updates = 0

    def to_env(self, idx):
        if self.values is None:
            return idx
        return self.values[np.arange(len(idx)), idx]

    def greedy_idx(self, obs):
        q = head_values(self.q, obs, self.mask)
        return np.argmax(np.where(self.mask, q, -np.inf), axis=-1)

    def greedy(self, obs):
        return self.to_env(self.greedy_idx(obs))

    def act(self, obs, rng, eps):
        if rng.random() < eps:
            counts = self.mask.sum(axis=-1)
            idx = np.floor(rng.random(len(counts)) * counts).astype(int)
        else:
            idx = self.greedy_idx(obs)
        return idx, self.to_env(idx)

    def tensors(self):
        return [(f"q.{i}", p) for i, p in enumerate(self.q)]

    def update(self, replay: ReplayBuffer, rng, normalize=None):
        return dqn_update(self, replay, self.cfg, rng, normalize)


def dqn_update(agent: DqnAgent, replay: ReplayBuffer, cfg: DqnConfig, rng, normalize=None):
    """One TD step on a uniform minibatch; syncs the target network on schedule."""
    if len(replay) < cfg.minibatch:
        raise ValueError("replay holds fewer transitions than one minibatch")
    obs, act, rew, nxt, done = replay.sample(rng, cfg.minibatch)
    if normalize is not None:
        obs, nxt = normalize(obs), normalize(nxt)
    loss, grads = td_loss(agent.q, agent.target, agent.mask, obs, act, rew, nxt, done, cfg.discount)
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite TD loss at update {agent.updates}", batch_index=agent.updates)
    grads, _ = clip_grad_norm(grads, cfg.max_grad_norm)
    agent.opt.step(agent.q, grads)
    agent.updates += 1
    if agent.updates % cfg.target_sync == 0:
        agent.target = [p.copy() for p in agent.q]
    return loss
