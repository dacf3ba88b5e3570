"""Slotted mobile edge computing environment.

K users each keep a task queue; bits leave a user queue either through the
local CPU or over an orthogonal wireless channel to a base station (BS) that
runs its own edge-compute queue. The per-slot penalty is energy in Joules.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from .config import dump_kv, from_kv, parse_kv, to_kv
from .errors import ConfigError, ContractViolation
from .queues import RewardShaper, Transition, reward, step_queue


@dataclass
class MecConfig:
    K: int = 10
    lambda_: float = field(default=2.0, metadata={"key": "lambda"})
    d_max: float = 100.0
    B: float = 10e3
    sigma: float = 3.16e-11
    cL_max: float = 1000.0
    cE_max: float = 5000.0
    P_max: float = 1.0
    eta_user: Optional[List[float]] = None
    eta_bs: float = 1e-4
    delta_t: float = 1.0
    V: float = 1.0

    def __post_init__(self):
        if self.eta_user is None:
            self.eta_user = [1e-3] * int(self.K)
        self.eta_user = [float(e) for e in self.eta_user]
        self.validate()

    def validate(self):
        if int(self.K) != self.K or self.K < 1:
            raise ConfigError(f"K must be a positive integer, got {self.K}")
        for name in ("lambda_", "d_max", "B", "sigma", "cL_max", "cE_max", "P_max", "delta_t"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ConfigError(f"{name.rstrip('_')} must be > 0, got {v}")
        if not (np.isfinite(self.V) and self.V >= 0):
            raise ConfigError(f"V must be >= 0, got {self.V}")
        if len(self.eta_user) != self.K:
            raise ConfigError(f"eta_user needs {self.K} entries, got {len(self.eta_user)}")
        if any(not np.isfinite(e) or e < 0 for e in self.eta_user) or self.eta_bs < 0:
            raise ConfigError("energy coefficients must be finite and >= 0")

    def to_text(self) -> str:
        return dump_kv(to_kv(self))

    @classmethod
    def from_text(cls, text: str) -> "MecConfig":
        return from_kv(cls, parse_kv(text), strict=True)


@dataclass(frozen=True)
class MecState:
    user_queues: np.ndarray
    bs_queue: float
    channel_gains: np.ndarray
    slot: int = 0

    @property
    def backlogs(self) -> np.ndarray:
        """Users followed by the BS queue."""
        return np.append(self.user_queues, self.bs_queue)


@dataclass(frozen=True)
class MecAction:
    cL: np.ndarray
    cE: float
    P: np.ndarray

    def check(self, cfg: MecConfig):
        cL = np.asarray(self.cL, dtype=float)
        P = np.asarray(self.P, dtype=float)
        if cL.shape != (cfg.K,) or P.shape != (cfg.K,):
            raise ContractViolation(f"action needs {cfg.K} cL and P entries")
        ok = (
            np.all(np.isfinite(cL)) and np.all((cL >= 0) & (cL <= cfg.cL_max))
            and np.all(np.isfinite(P)) and np.all((P >= 0) & (P <= cfg.P_max))
            and np.isfinite(self.cE) and 0 <= self.cE <= cfg.cE_max
        )
        if not ok:
            raise ContractViolation("action outside its box bounds")

    def as_vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.cL, float), [float(self.cE)], np.asarray(self.P, float)])


def sample_gains(rng, K) -> np.ndarray:
    # Rayleigh fading power: exponential with unit mean
    return rng.exponential(1.0, size=K)


def mec_reset(cfg: MecConfig, seed: int) -> MecState:
    return initial_state(cfg, np.random.default_rng(seed))


def initial_state(cfg: MecConfig, rng) -> MecState:
    cfg.validate()
    return MecState(np.zeros(cfg.K), 0.0, sample_gains(rng, cfg.K), 0)


def sample_arrivals(rng, lam: float, d_max: float, K: int = 1) -> np.ndarray:
    """Compound Poisson bits per user: Poisson(lam) tasks of Uniform(0, d_max) bits each."""
    counts = rng.poisson(lam, size=K)
    total = int(counts.sum())
    if total == 0:
        return np.zeros(K)
    sizes = rng.uniform(0.0, d_max, size=total)
    owner = np.repeat(np.arange(K), counts)
    return np.bincount(owner, weights=sizes, minlength=K)


def offload_rate(B, omega, P, sigma):
    """Shannon rate B log2(1 + omega P / sigma) in bits/s."""
    return B * np.log2(1.0 + np.asarray(omega) * np.asarray(P) / sigma)


def mec_energy(action: MecAction, cfg: MecConfig) -> float:
    dt = cfg.delta_t
    P = np.asarray(action.P, dtype=float)
    cL = np.asarray(action.cL, dtype=float)
    return float(P.sum() * dt + np.dot(cfg.eta_user, cL) * dt + cfg.eta_bs * action.cE * dt)


def mec_step(state: MecState, action: MecAction, cfg: MecConfig, rng):
    """Advance one slot. Returns ``(next_state, transition)``.

    Departures are split local-first: the local CPU serves up to
    ``cL * dt`` bits, the radio then offloads up to ``R * dt`` of what is
    left. Only offloaded bits reach the BS. Arrivals land after departures.
    """
    action.check(cfg)
    dt = cfg.delta_t
    q = state.user_queues
    arrivals = sample_arrivals(rng, cfg.lambda_, cfg.d_max, cfg.K)
    rate = offload_rate(cfg.B, state.channel_gains, action.P, cfg.sigma)
    local = np.minimum(np.asarray(action.cL, float) * dt, q)
    offloaded = np.minimum(rate * dt, q - local)
    users = step_queue(q, arrivals, local + offloaded)
    bs_in = float(offloaded.sum())
    bs = float(step_queue([state.bs_queue], [bs_in], [action.cE * dt])[0])
    penalty = mec_energy(action, cfg)
    gains = sample_gains(rng, cfg.K)
    nxt = MecState(users, bs, gains, state.slot + 1)
    tr = Transition(
        obs=observe(state),
        action=action,
        next_obs=observe(nxt),
        penalty=penalty,
        backlog_before=state.backlogs,
        backlog_after=nxt.backlogs,
        info={"arrivals": arrivals, "local": local, "offloaded": offloaded, "bs_arrivals": bs_in, "rate": rate},
    )
    return nxt, tr


def observe(state: MecState) -> np.ndarray:
    """Raw observation [Q_1..Q_K, Q_BS, omega_1..omega_K]."""
    return np.concatenate([state.user_queues, [state.bs_queue], state.channel_gains])


def mec_reward(shaper: RewardShaper, tr: Transition) -> float:
    return reward(shaper, tr.backlog_before, tr.backlog_after, tr.penalty)


class MecEnv:
    """Stateful wrapper used by the trainers.

    Action vectors are laid out as ``[cL_1..cL_K, cE, P_1..P_K]``.
    """

    kind = "mec"

    def __init__(self, cfg: MecConfig, seed: int = 0):
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        K = cfg.K
        self.obs_dim = 2 * K + 1
        self.action_low = np.zeros(2 * K + 1)
        self.action_high = np.concatenate([np.full(K, cfg.cL_max), [cfg.cE_max], np.full(K, cfg.P_max)])
        self.state = initial_state(cfg, self.rng)
        # typical LDPTRLQ reward magnitude: every queue holding one slot of mean arrivals
        mean_bits = cfg.lambda_ * cfg.d_max / 2
        self.reward_scale = 1.0 / ((K + 1) * mean_bits**2)

    def reset(self) -> np.ndarray:
        self.state = initial_state(self.cfg, self.rng)
        return observe(self.state)

    def decode(self, vec) -> MecAction:
        vec = np.clip(np.asarray(vec, dtype=float), self.action_low, self.action_high)
        K = self.cfg.K
        return MecAction(vec[:K], float(vec[K]), vec[K + 1:])

    def step(self, vec):
        self.state, tr = mec_step(self.state, self.decode(vec), self.cfg, self.rng)
        return observe(self.state), tr

    def max_service_action(self) -> np.ndarray:
        return self.action_high.copy()


def with_overrides(cfg: MecConfig, **kw) -> MecConfig:
    if "K" in kw and "eta_user" not in kw:
        kw["eta_user"] = None
    return replace(cfg, **kw)
