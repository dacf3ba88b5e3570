"""Clipped-surrogate actor-critic (PPO) with separate actor and critic trunks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from ..errors import TrainingError
from .mlp import HIDDEN, Adam, backward, clip_grad_norm, forward_cached, init_mlp, mlp_forward


@dataclass
class PpoConfig:
    clip_epsilon: float = 0.2
    discount: float = 0.95
    gae_lambda: float = 0.95
    lr: float = 3e-4
    epochs: int = 4
    minibatch: int = 128
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    rollout_episodes: int = 1
    steps_per_episode: int = 500
    max_episodes: int = 1000
    hidden: Tuple[int, ...] = HIDDEN

    def __post_init__(self):
        if not 0 < self.clip_epsilon < 1:
            raise ValueError("clip_epsilon must lie in (0, 1)")
        if not 0 < self.discount <= 1:
            raise ValueError("discount must lie in (0, 1]")


@dataclass
class TrajectoryBatch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    values: np.ndarray
    logp: np.ndarray
    advantages: np.ndarray = None
    returns: np.ndarray = None

    def __len__(self):
        return len(self.rewards)


def discounted_returns(rewards, gamma, dones=None) -> np.ndarray:
    """G_t = r_t + gamma * G_{t+1}, restarting after each done flag."""
    rewards = np.asarray(rewards, dtype=float)
    dones = np.zeros(len(rewards), bool) if dones is None else np.asarray(dones, bool)
    out = np.zeros_like(rewards)
    running = 0.0
    for t in reversed(range(len(rewards))):
        running = rewards[t] + (0.0 if dones[t] else gamma * running)
        out[t] = running
    return out


def gae(rewards, values, last_value, gamma, lam, dones=None):
    """Generalised advantage estimates and value targets for one trajectory segment.

    ``last_value`` bootstraps past the final step unless that step is done.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    T = len(rewards)
    dones = np.zeros(T, bool) if dones is None else np.asarray(dones, bool)
    adv = np.zeros(T)
    last = 0.0
    for t in reversed(range(T)):
        next_v = last_value if t == T - 1 else values[t + 1]
        nonterminal = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_v * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv, adv + values


def clipped_surrogate(ratio, adv, eps):
    return np.minimum(ratio * adv, np.clip(ratio, 1 - eps, 1 + eps) * adv)


def ppo_loss(policy, actor, critic, obs, actions, old_logp, adv, returns, cfg: PpoConfig):
    """Total loss and its gradients w.r.t. actor and critic parameters.

    loss = -mean(min(r A, clip(r) A)) + value_coef * mean((V - G)^2) - entropy_coef * mean(H)
    """
    B = len(adv)
    logp, ent, back = policy.evaluate(actor, obs, actions)
    ratio = np.exp(logp - old_logp)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1 - cfg.clip_epsilon, 1 + cfg.clip_epsilon) * adv
    surr = np.minimum(unclipped, clipped)
    # the clipped branch is flat in the ratio wherever it is the active minimum
    d_surr = np.where(unclipped <= clipped, unclipped, 0.0)
    g_logp = -d_surr / B
    g_ent = np.full(B, -cfg.entropy_coef / B)
    actor_grads = back(g_logp, g_ent)

    v, cache = forward_cached(critic, obs)
    v = v[:, 0]
    err = v - returns
    critic_grads = backward(critic, cache, (2.0 * cfg.value_coef * err / B)[:, None])

    loss = -surr.mean() + cfg.value_coef * np.mean(err * err) - cfg.entropy_coef * ent.mean()
    stats = {
        "policy_loss": float(-surr.mean()),
        "value_loss": float(np.mean(err * err)),
        "entropy": float(ent.mean()),
        "clip_frac": float(np.mean(np.abs(ratio - 1) > cfg.clip_epsilon)),
    }
    return float(loss), actor_grads, critic_grads, stats


class PpoAgent:
    def __init__(self, policy, obs_dim: int, cfg: PpoConfig, rng):
        self.policy = policy
        self.cfg = cfg
        self.actor = policy.init(rng, obs_dim, cfg.hidden)
        self.critic = init_mlp(rng, obs_dim, 1, cfg.hidden, out_scale=1.0)
        self.actor_opt = Adam(self.actor, cfg.lr)
        self.critic_opt = Adam(self.critic, cfg.lr)

    def act(self, obs, rng):
        raw, action, logp = self.policy.sample(self.actor, obs, rng)
        value = float(mlp_forward(self.critic, obs)[0])
        return raw, action, logp, value

    def value(self, obs) -> float:
        return float(mlp_forward(self.critic, obs)[0])

    def greedy(self, obs):
        return self.policy.greedy(self.actor, obs)

    def tensors(self) -> List[Tuple[str, np.ndarray]]:
        named = [(f"actor.{i}", p) for i, p in enumerate(self.actor)]
        return named + [(f"critic.{i}", p) for i, p in enumerate(self.critic)]

    def update(self, batch: TrajectoryBatch, rng):
        return ppo_update(self, batch, self.cfg, rng)


def ppo_update(agent: PpoAgent, batch: TrajectoryBatch, cfg: PpoConfig, rng):
    """Run ``cfg.epochs`` passes of minibatch PPO over ``batch``; updates ``agent`` in place."""
    n = len(batch)
    if n == 0:
        raise ValueError("empty trajectory batch")
    stats = []
    index = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            mb = perm[start:start + cfg.minibatch]
            adv = batch.advantages[mb]
            if len(mb) > 1:
                adv = (adv - adv.mean()) / (adv.std() + 1e-8)
            loss, ga, gc, st = ppo_loss(
                agent.policy, agent.actor, agent.critic, batch.obs[mb], batch.actions[mb],
                batch.logp[mb], adv, batch.returns[mb], cfg,
            )
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite PPO loss at minibatch {index}", batch_index=index)
            ga, _ = clip_grad_norm(ga, cfg.max_grad_norm)
            gc, _ = clip_grad_norm(gc, cfg.max_grad_norm)
            agent.actor_opt.step(agent.actor, ga)
            agent.critic_opt.step(agent.critic, gc)
            stats.append(st)
            index += 1
    return agent
