"""Queue dynamics, Lyapunov drift-plus-penalty quantities and reward shapers.

Everything here is a pure function of its arguments. Queue vectors are
accepted as any 1-D array-like of nonnegative finite reals (bits) and
returned as fresh float64 numpy arrays.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Any, Optional, Sequence

import numpy as np

from .errors import ContractViolation


class ShaperKind(str, enum.Enum):
    LDPTRLQ = "LDPTRLQ"
    ORIGINAL_LDP = "OriginalLDP"
    SIMPLIFIED_LDP = "SimplifiedLDP"
    LERL = "LERL"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        for kind in cls:
            if kind.value.lower() == str(value).lower():
                return kind
        raise ContractViolation(f"unknown reward shaper kind: {value!r}")


@dataclass(frozen=True)
class RewardShaper:
    kind: ShaperKind
    V: float = 1.0
    w: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ShaperKind.parse(self.kind))
        if not (np.isfinite(self.V) and self.V >= 0):
            raise ContractViolation(f"V must be finite and >= 0, got {self.V}")
        if not (np.isfinite(self.w) and self.w >= 0):
            raise ContractViolation(f"w must be finite and >= 0, got {self.w}")

    def __call__(self, q_t, q_t1, p):
        return reward(self, q_t, q_t1, p)


@dataclass(frozen=True)
class Transition:
    """One environment step.

    ``backlog_before``/``backlog_after`` are the full queue vectors the
    reward is computed over (for MEC: users then the base station).
    """

    obs: np.ndarray
    action: Any
    next_obs: np.ndarray
    penalty: float
    backlog_before: np.ndarray
    backlog_after: np.ndarray
    info: Optional[dict] = None


def as_queue(q, name="q") -> np.ndarray:
    arr = np.array(q, dtype=float, copy=True)
    if arr.ndim != 1:
        raise ContractViolation(f"{name} must be one-dimensional, got shape {arr.shape}")
    # one fused check on the hot path; NaN fails the comparison, inf fails the sum
    if arr.size and not (arr.min() >= 0 and np.isfinite(arr.sum())):
        if not np.all(np.isfinite(arr)):
            raise ContractViolation(f"{name} has non-finite entries")
        raise ContractViolation(f"{name} has negative entries")
    return arr


def _same_length(a, b, what="queue vectors"):
    if a.shape != b.shape:
        raise ContractViolation(f"dimension mismatch between {what}: {a.shape} vs {b.shape}")


def step_queue(q, arrivals, departures) -> np.ndarray:
    """Q' = max(Q - departures, 0) + arrivals, componentwise."""
    q = as_queue(q)
    arr = as_queue(arrivals, "arrivals")
    dep = as_queue(departures, "departures")
    _same_length(q, arr)
    _same_length(q, dep)
    return np.maximum(q - dep, 0.0) + arr


def lyapunov(q) -> float:
    q = as_queue(q)
    return 0.5 * float(np.dot(q, q))


def realized_drift(q_t, q_t1) -> float:
    a, b = as_queue(q_t, "q_t"), as_queue(q_t1, "q_t1")
    _same_length(a, b)
    return lyapunov(b) - lyapunov(a)


def p3_objective(q_t, q_t1, p, V) -> float:
    """Per-slot drift-plus-penalty objective 1/2 sum(Q'^2 - Q^2) + V p."""
    return realized_drift(q_t, q_t1) + V * float(p)


def reward(shaper: RewardShaper, q_t, q_t1, p) -> float:
    a, b = as_queue(q_t, "q_t"), as_queue(q_t1, "q_t1")
    _same_length(a, b)
    p = float(p)
    V = shaper.V
    kind = shaper.kind
    if kind is ShaperKind.LDPTRLQ:
        return -0.5 * float(np.dot(b, b) + np.dot(a, a)) - V * p
    if kind is ShaperKind.ORIGINAL_LDP:
        return -0.5 * float(np.dot(b, b) - np.dot(a, a)) - V * p
    if kind is ShaperKind.SIMPLIFIED_LDP:
        return -float(np.dot(a, b - a)) - V * p
    if kind is ShaperKind.LERL:
        return -shaper.w * float(b.sum()) - p
    raise ContractViolation(f"unknown reward shaper kind: {kind!r}")


def time_avg_penalty(series: Sequence[float]) -> float:
    values = np.asarray(series, dtype=float)
    if values.size == 0:
        raise ContractViolation("penalty series is empty")
    return float(values.mean())


def mean_rate_stability_score(backlog_totals, window: int, slots=None) -> float:
    """Mean of total backlog divided by slot index over the final ``window`` entries.

    ``slots`` gives the slot index of each entry; by default entry ``i`` sits
    at slot ``i + 1``.
    """
    totals = np.asarray(backlog_totals, dtype=float)
    window = int(window)
    if window <= 0:
        raise ContractViolation("window must be positive")
    if window >= totals.size:
        raise ContractViolation(f"window {window} must be smaller than series length {totals.size}")
    if slots is None:
        t = np.arange(1, totals.size + 1, dtype=float)
    else:
        t = np.asarray(slots, dtype=float)
        if t.shape != totals.shape or np.any(t <= 0):
            raise ContractViolation("slots must be positive and aligned with backlog_totals")
    return float(np.mean(totals[-window:] / t[-window:]))


def greedy_select(shaper: RewardShaper, q_t, candidates) -> int:
    """Index of the candidate ``(q_t1, p)`` with the highest reward.

    Ties go to the lowest index.
    """
    if len(candidates) == 0:
        raise ContractViolation("no candidate actions")
    values = [reward(shaper, q_t, q_t1, p) for q_t1, p in candidates]
    return int(np.argmax(values))
