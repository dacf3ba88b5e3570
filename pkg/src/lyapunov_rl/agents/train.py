"""Episode loop wiring environments, reward shapers and agents together."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from ..errors import TrainingError
from ..queues import RewardShaper, reward
from .dqn import DqnAgent, DqnConfig, ReplayBuffer
from .policies import MultiCategorical, SquashedGaussian
from .ppo import PpoAgent, PpoConfig, TrajectoryBatch, gae

log = logging.getLogger(__name__)


class RunningNorm:
    """Running mean/variance observation normaliser (parallel-variance update)."""

    def __init__(self, dim, clip=10.0):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = 1e-4
        self.clip = clip
        self.frozen = False

    def update(self, x):
        if self.frozen:
            return
        x = np.atleast_2d(x)
        b_mean, b_var, n = x.mean(axis=0), x.var(axis=0), len(x)
        delta = b_mean - self.mean
        total = self.count + n
        self.mean = self.mean + delta * n / total
        m2 = self.var * self.count + b_var * n + delta**2 * self.count * n / total
        self.var = m2 / total
        self.count = total

    def __call__(self, x):
        return np.clip((x - self.mean) / np.sqrt(self.var + 1e-8), -self.clip, self.clip)


@dataclass
class EpisodeRecord:
    episode: int
    slot: int  # cumulative slots at the end of the episode
    mean_reward: float
    mean_backlog: float
    mean_penalty: float
    backlog_std: float


@dataclass
class TrainResult:
    records: List[EpisodeRecord]
    agent: object
    normalizer: RunningNorm
    error: Optional[str] = None

    def policy(self) -> Callable:
        norm, agent = self.normalizer, self.agent
        return lambda obs: agent.greedy(norm(obs))


def is_discrete(env) -> bool:
    return hasattr(env, "mask")


def make_agent(env, cfg, rng):
    if isinstance(cfg, PpoConfig):
        policy = MultiCategorical(env.mask) if is_discrete(env) else SquashedGaussian(env.action_low, env.action_high)
        return PpoAgent(policy, env.obs_dim, cfg, rng)
    if isinstance(cfg, DqnConfig):
        if is_discrete(env):
            return DqnAgent(env.mask, env.obs_dim, cfg, rng)
        levels = np.linspace(0.0, 1.0, cfg.levels)
        values = env.action_low[:, None] + levels[None, :] * (env.action_high - env.action_low)[:, None]
        mask = np.ones(values.shape, dtype=bool)
        return DqnAgent(mask, env.obs_dim, cfg, rng, values=values)
    raise TypeError(f"unsupported agent config {type(cfg).__name__}")


def _record(ep, slot, rewards, backlogs, penalties):
    return EpisodeRecord(ep, slot, float(np.mean(rewards)), float(np.mean(backlogs)),
                         float(np.mean(penalties)), float(np.std(backlogs)))


def train(env, shaper: RewardShaper, cfg, seed: int, episodes: Optional[int] = None,
          steps_per_episode: Optional[int] = None) -> TrainResult:
    """Train a fresh agent on ``env`` with rewards from ``shaper``.

    The agent sees rewards multiplied by ``env.reward_scale``; records carry
    raw rewards. A :class:`TrainingError` stops the run and is reported in
    ``TrainResult.error`` with the records gathered so far.
    """
    episodes = cfg.max_episodes if episodes is None else episodes
    steps = cfg.steps_per_episode if steps_per_episode is None else steps_per_episode
    rng = np.random.default_rng(seed)
    agent = make_agent(env, cfg, rng)
    norm = RunningNorm(env.obs_dim)
    result = TrainResult([], agent, norm)
    try:
        if isinstance(cfg, PpoConfig):
            _train_ppo(env, shaper, cfg, agent, norm, rng, episodes, steps, result.records)
        else:
            _train_dqn(env, shaper, cfg, agent, norm, rng, episodes, steps, result.records)
    except TrainingError as exc:
        log.warning("training aborted: %s", exc)
        result.error = str(exc)
    norm.frozen = True
    return result


def _train_ppo(env, shaper, cfg: PpoConfig, agent: PpoAgent, norm, rng, episodes, steps, records):
    scale = env.reward_scale
    pending = []
    slot = 0
    for ep in range(episodes):
        obs = env.reset()
        xs, acts, rews, vals, logps = [], [], [], [], []
        raw_rewards, backlogs, penalties = [], [], []
        for _ in range(steps):
            norm.update(obs)
            x = norm(obs)
            raw, action, logp, value = agent.act(x, rng)
            obs, tr = env.step(action)
            r = reward(shaper, tr.backlog_before, tr.backlog_after, tr.penalty)
            xs.append(x)
            acts.append(raw)
            rews.append(r * scale)
            vals.append(value)
            logps.append(logp)
            raw_rewards.append(r)
            backlogs.append(float(tr.backlog_after.sum()))
            penalties.append(tr.penalty)
        slot += steps
        adv, ret = gae(rews, vals, agent.value(norm(obs)), cfg.discount, cfg.gae_lambda)
        pending.append((np.array(xs), np.array(acts), np.array(rews), np.array(vals), np.array(logps), adv, ret))
        if len(pending) >= cfg.rollout_episodes or ep == episodes - 1:
            cols = [np.concatenate(c) for c in zip(*pending)]
            batch = TrajectoryBatch(cols[0], cols[1], cols[2], np.zeros(len(cols[2]), bool), cols[3], cols[4],
                                    advantages=cols[5], returns=cols[6])
            pending = []
            agent.update(batch, rng)
        records.append(_record(ep, slot, raw_rewards, backlogs, penalties))


def _train_dqn(env, shaper, cfg: DqnConfig, agent: DqnAgent, norm, rng, episodes, steps, records):
    scale = env.reward_scale
    replay = ReplayBuffer(cfg.capacity, env.obs_dim, agent.mask.shape[0])
    total = episodes * steps
    slot = 0
    for ep in range(episodes):
        obs = env.reset()
        raw_rewards, backlogs, penalties = [], [], []
        for _ in range(steps):
            norm.update(obs)
            idx, action = agent.act(norm(obs), rng, cfg.epsilon(slot, total))
            next_obs, tr = env.step(action)
            r = reward(shaper, tr.backlog_before, tr.backlog_after, tr.penalty)
            replay.add(obs, idx, r * scale, next_obs, False)
            obs = next_obs
            slot += 1
            if len(replay) >= cfg.minibatch and slot % cfg.train_every == 0:
                agent.update(replay, rng, norm)
            raw_rewards.append(r)
            backlogs.append(float(tr.backlog_after.sum()))
            penalties.append(tr.penalty)
        records.append(_record(ep, slot, raw_rewards, backlogs, penalties))


@dataclass
class EvalResult:
    mean_energy: float
    mean_queue: float
    queue_std: float
    latency: Optional[float]
    backlog_totals: np.ndarray = field(repr=False)
    arrival_bits: np.ndarray = field(repr=False)


def evaluate(env, policy: Callable, slots: int = 2000, latency_warmup: int = 200) -> EvalResult:
    """Run ``policy(obs) -> action`` for ``slots`` consecutive slots from a reset."""
    from ..routing import end_to_end_latency

    obs = env.reset()
    energy = np.zeros(slots)
    totals = np.zeros(slots)
    arrivals = np.zeros(slots)
    for t in range(slots):
        obs, tr = env.step(policy(obs))
        energy[t] = tr.penalty
        totals[t] = tr.backlog_after.sum()
        arrivals[t] = tr.info.get("arrival_bits", np.sum(tr.info.get("arrivals", 0.0)))
    latency = None
    if env.kind == "routing":
        latency = end_to_end_latency(totals, arrivals, warmup=min(latency_warmup, slots - 1))
    return EvalResult(float(energy.mean()), float(totals.mean()), float(totals.std()), latency, totals, arrivals)
