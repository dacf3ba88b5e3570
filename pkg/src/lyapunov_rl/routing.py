"""Single-commodity store-and-forward routing over a random geometric topology.

Every non-sink node holds one queue of bits bound for the sink. In each slot
a node either idles or transmits over exactly one outgoing link, moving
``min(Q_u, R_uv * dt)`` bits (pre-move backlogs). Sources receive compound
Poisson arrivals; the sink absorbs everything it receives.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from .config import dump_kv, from_kv, parse_kv, to_kv
from .errors import ConfigError, ContractViolation
from .mec import sample_arrivals
from .queues import RewardShaper, Transition, as_queue, reward

IDLE = -1


@dataclass
class RoutingConfig:
    n_nodes: int = 20
    k_nn: int = 5
    p_link: float = 0.5
    R_E: float = 1000.0
    lambda_r: float = 1.0
    d_max: float = 100.0
    n_sources: int = 3
    eta1: float = 1e-6
    eta2: float = 1e-9
    V: float = 0.0
    delta_t: float = 1.0
    pattern_cap: int = 10**6

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.n_nodes < 2:
            raise ConfigError("n_nodes must be at least 2")
        if not 1 <= self.k_nn < self.n_nodes:
            raise ConfigError(f"k_nn must be in [1, n_nodes), got {self.k_nn}")
        if not 0 <= self.p_link <= 1:
            raise ConfigError(f"p_link must be a probability, got {self.p_link}")
        for name in ("R_E", "lambda_r", "d_max", "delta_t"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.eta1 < 0 or self.eta2 < 0 or self.V < 0:
            raise ConfigError("eta1, eta2 and V must be >= 0")
        if not 1 <= self.n_sources < self.n_nodes:
            raise ConfigError("n_sources must be in [1, n_nodes)")

    def to_text(self) -> str:
        return dump_kv(to_kv(self))

    @classmethod
    def from_text(cls, text: str) -> "RoutingConfig":
        return from_kv(cls, parse_kv(text), strict=True)


@dataclass
class TopologyGraph:
    coords: np.ndarray
    rates: Dict[Tuple[int, int], float]
    mean_rate: float
    random_links: int = 0  # undirected links drawn before connectivity repair

    @property
    def n_nodes(self) -> int:
        return len(self.coords)

    @property
    def links(self) -> List[Tuple[int, int]]:
        return sorted(self.rates)

    def out_neighbors(self, u: int) -> List[int]:
        return sorted(v for (a, v) in self.rates if a == u)

    def to_networkx(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(range(self.n_nodes))
        for (u, v), r in self.rates.items():
            g.add_edge(u, v, rate=r)
        return g

    def is_connected(self) -> bool:
        return nx.is_strongly_connected(self.to_networkx())

    def to_text(self) -> str:
        lines = [f"node {i} {x:.6g} {y:.6g}" for i, (x, y) in enumerate(self.coords)]
        lines += [f"link {u} {v} {self.rates[(u, v)]:.6g}" for u, v in self.links]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, mean_rate: float = float("nan")) -> "TopologyGraph":
        nodes, rates = {}, {}
        for lineno, line in enumerate(text.splitlines(), 1):
            parts = line.split("#", 1)[0].split()
            if not parts:
                continue
            try:
                if parts[0] == "node" and len(parts) == 4:
                    nodes[int(parts[1])] = (float(parts[2]), float(parts[3]))
                elif parts[0] == "link" and len(parts) == 4:
                    rates[(int(parts[1]), int(parts[2]))] = float(parts[3])
                else:
                    raise ValueError
            except ValueError:
                raise ConfigError(f"topology line {lineno}: cannot parse {line!r}") from None
        if sorted(nodes) != list(range(len(nodes))):
            raise ConfigError("topology node ids must be 0..n-1")
        coords = np.array([nodes[i] for i in range(len(nodes))], dtype=float).reshape(-1, 2)
        for u, v in rates:
            if u == v or u not in nodes or v not in nodes:
                raise ConfigError(f"invalid link {u} {v}")
        return cls(coords, rates, mean_rate)


def generate_topology(seed: int, cfg: RoutingConfig) -> TopologyGraph:
    """Random k-nearest-neighbour topology, repaired to connectivity.

    Each node tries to link to each of its ``k_nn`` nearest neighbours with
    probability ``p_link``. While the graph is split, the closest node pair
    lying in different components is linked. Each undirected connection gets
    rate ``rho * R_E`` with ``rho ~ U(0.3, 1.7)``, used in both directions.
    """
    rng = np.random.default_rng(seed)
    n = cfg.n_nodes
    coords = rng.uniform(0.0, 100.0, size=(n, 2))
    dist = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=-1)
    edges = set()
    for i in range(n):
        order = [j for j in np.argsort(dist[i], kind="stable") if j != i][: cfg.k_nn]
        draws = rng.random(len(order))
        for j, u in zip(order, draws):
            if u < cfg.p_link:
                edges.add((min(i, int(j)), max(i, int(j))))
    random_links = len(edges)

    g = nx.Graph()
    g.add_nodes_from(range(n))
    g.add_edges_from(edges)
    while not nx.is_connected(g):
        comp = np.empty(n, dtype=int)
        for c, members in enumerate(nx.connected_components(g)):
            comp[list(members)] = c
        masked = np.where(comp[:, None] != comp[None, :], dist, np.inf)
        i, j = np.unravel_index(np.argmin(masked), masked.shape)
        a, b = min(i, j), max(i, j)
        g.add_edge(int(a), int(b))
        edges.add((int(a), int(b)))

    rates = {}
    for a, b in sorted(edges):
        r = float(rng.uniform(0.3, 1.7) * cfg.R_E)
        rates[(a, b)] = r
        rates[(b, a)] = r
    return TopologyGraph(coords, rates, cfg.R_E, random_links)


def choose_endpoints(seed: int, g: TopologyGraph, n_sources: int):
    """Uniformly chosen sink and distinct source nodes."""
    rng = np.random.default_rng([seed, 1])
    perm = rng.permutation(g.n_nodes)
    sink = int(perm[0])
    sources = sorted(int(s) for s in perm[1:1 + n_sources])
    return sink, sources


def node_choices(g: TopologyGraph, sink: int) -> List[List[int]]:
    """Per-node options: ``IDLE`` first, then outgoing neighbours ascending."""
    return [[IDLE] if u == sink else [IDLE] + g.out_neighbors(u) for u in range(g.n_nodes)]


@dataclass(frozen=True)
class FactoredPatterns:
    """Per-node independent choices, used when the full product is too large."""

    choices: Tuple[Tuple[int, ...], ...]

    @property
    def size(self) -> int:
        return math.prod(len(c) for c in self.choices)


def enumerate_patterns(g: TopologyGraph, sink: int, cap: int = 10**6):
    choices = node_choices(g, sink)
    total = math.prod(len(c) for c in choices)
    if total > cap:
        return FactoredPatterns(tuple(tuple(c) for c in choices))
    return [tuple(p) for p in itertools.product(*choices)]


def link_energy(rate, eta1, eta2):
    return eta2 * rate * rate + eta1 * rate


def check_pattern(g: TopologyGraph, pattern, sink: int) -> np.ndarray:
    pattern = np.asarray(pattern, dtype=int)
    if pattern.shape != (g.n_nodes,):
        raise ContractViolation(f"pattern needs {g.n_nodes} entries")
    if pattern[sink] != IDLE:
        raise ContractViolation("the sink cannot transmit")
    for u, v in enumerate(pattern):
        if v != IDLE and (u, int(v)) not in g.rates:
            raise ContractViolation(f"no link {u}->{v}")
    return pattern


def transfers(g: TopologyGraph, q: np.ndarray, pattern, dt: float):
    """Bits moved on each selected link, capped by the pre-move backlog."""
    moves = []
    for u, v in enumerate(pattern):
        if v != IDLE:
            bits = min(q[u], g.rates[(u, int(v))] * dt)
            moves.append((u, int(v), bits))
    return moves


def backpressure_step(g: TopologyGraph, queues, sink: int, V: float = 0.0,
                      eta1: float = 0.0, eta2: float = 0.0, dt: float = 1.0) -> Tuple[int, ...]:
    """Pattern minimising sum_n Q_n (arr_n - dep_n) + V * energy.

    The objective splits into one term per transmitting node,
    ``(Q_v - Q_u) * bits_uv + V * E(R_uv)``, so each node picks its best
    link independently and idles unless some link scores strictly below 0.
    Remaining ties go to the lowest neighbour index.
    """
    q = as_queue(queues)
    pattern = [IDLE] * g.n_nodes
    for u in range(g.n_nodes):
        if u == sink or q[u] <= 0:
            continue
        best, best_val = IDLE, 0.0
        for v in g.out_neighbors(u):
            rate = g.rates[(u, v)]
            bits = min(q[u], rate * dt)
            val = (q[v] - q[u]) * bits
            if V > 0:
                val += V * link_energy(rate, eta1, eta2)
            if val < best_val:
                best, best_val = v, val
        pattern[u] = best
    return tuple(pattern)


def pattern_objective(g: TopologyGraph, queues, pattern, V=0.0, eta1=0.0, eta2=0.0, dt=1.0) -> float:
    q = np.asarray(queues, dtype=float)
    arr = np.zeros(g.n_nodes)
    dep = np.zeros(g.n_nodes)
    energy = 0.0
    for u, v, bits in transfers(g, q, pattern, dt):
        dep[u] += bits
        arr[v] += bits
        if bits > 0:
            energy += link_energy(g.rates[(u, v)], eta1, eta2)
    return float(np.dot(q, arr - dep) + V * energy)


@dataclass(frozen=True)
class RoutingState:
    queues: np.ndarray
    slot: int = 0


def routing_step(state: RoutingState, pattern, g: TopologyGraph, cfg: RoutingConfig, rng,
                 sink: int, sources: Sequence[int]):
    """Synchronous slot: move bits, inject source arrivals, drain the sink."""
    pattern = check_pattern(g, pattern, sink)
    q = state.queues
    new = q.copy()
    energy = 0.0
    for u, v, bits in transfers(g, q, pattern, cfg.delta_t):
        new[u] -= bits
        new[v] += bits
        if bits > 0:
            energy += link_energy(g.rates[(u, v)], cfg.eta1, cfg.eta2)
    new = np.maximum(new, 0.0)
    delivered = new[sink]
    arrivals = sample_arrivals(rng, cfg.lambda_r, cfg.d_max, len(sources))
    new[list(sources)] += arrivals
    new[sink] = 0.0
    nxt = RoutingState(new, state.slot + 1)
    tr = Transition(
        obs=q.copy(),
        action=tuple(int(x) for x in pattern),
        next_obs=new.copy(),
        penalty=energy,
        backlog_before=q.copy(),
        backlog_after=new.copy(),
        info={"arrival_bits": float(arrivals.sum()), "delivered": float(delivered)},
    )
    return nxt, tr


def routing_reward(shaper: RewardShaper, tr: Transition) -> float:
    return reward(shaper, tr.backlog_before, tr.backlog_after, tr.penalty)


def end_to_end_latency(backlog_totals, arrival_bits, warmup: int = 0) -> Optional[float]:
    """Little's law: mean total backlog over mean arrival bits per slot, in slots.

    Returns ``None`` when nothing arrived.
    """
    b = np.asarray(backlog_totals, dtype=float)[warmup:]
    a = np.asarray(arrival_bits, dtype=float)[warmup:]
    if b.size == 0 or b.shape != a.shape:
        raise ContractViolation("latency needs aligned, nonempty backlog and arrival series")
    mean_arr = a.mean()
    if mean_arr <= 0:
        return None
    return float(b.mean() / mean_arr)


def min_cut_capacity(g: TopologyGraph, sink: int, sources: Sequence[int], dt: float = 1.0) -> float:
    """Max flow (bits/slot) from the sources to the sink.

    A node sends on one link per slot, so each node is split into in/out
    halves joined by its fastest outgoing rate.
    """
    d = nx.DiGraph()
    for u in range(g.n_nodes):
        if u != sink:
            fastest = max(g.rates[(u, v)] for v in g.out_neighbors(u))
            d.add_edge(("in", u), ("out", u), capacity=fastest * dt)
    for (u, v), r in g.rates.items():
        if u != sink:
            d.add_edge(("out", u), ("in", v), capacity=r * dt)
    for s in sources:
        d.add_edge("S", ("in", s))
    return float(nx.maximum_flow_value(d, "S", ("in", sink)))


def arrival_rate_for_load(g, sink, sources, cfg: RoutingConfig, load: float) -> float:
    """Per-source task rate giving total mean arrivals of ``load`` times the min cut."""
    cap = min_cut_capacity(g, sink, sources, cfg.delta_t)
    return load * cap / (len(sources) * cfg.d_max / 2.0)


class RoutingEnv:
    """Stateful wrapper for the trainers.

    Actions are per-node choice indices into ``node_choices``; observations
    are the raw node backlogs.
    """

    kind = "routing"

    def __init__(self, cfg: RoutingConfig, seed: int = 0, topology_seed: Optional[int] = None,
                 graph: Optional[TopologyGraph] = None):
        self.cfg = cfg
        topo_seed = seed if topology_seed is None else topology_seed
        self.g = graph if graph is not None else generate_topology(topo_seed, cfg)
        self.sink, self.sources = choose_endpoints(topo_seed, self.g, cfg.n_sources)
        self.choices = node_choices(self.g, self.sink)
        self.n_heads = self.g.n_nodes
        self.max_choices = max(len(c) for c in self.choices)
        self.mask = np.zeros((self.n_heads, self.max_choices), dtype=bool)
        for u, c in enumerate(self.choices):
            self.mask[u, : len(c)] = True
        self.obs_dim = self.g.n_nodes
        self.rng = np.random.default_rng([seed, 2])
        self.state = RoutingState(np.zeros(self.g.n_nodes), 0)
        mean_bits = cfg.lambda_r * cfg.d_max / 2
        self.reward_scale = 1.0 / (cfg.n_sources * max(mean_bits, 1e-12) ** 2)

    def reset(self) -> np.ndarray:
        self.state = RoutingState(np.zeros(self.g.n_nodes), 0)
        return self.state.queues.copy()

    def decode(self, idx) -> Tuple[int, ...]:
        return tuple(self.choices[u][int(i)] for u, i in enumerate(idx))

    def encode(self, pattern) -> np.ndarray:
        return np.array([self.choices[u].index(int(v)) for u, v in enumerate(pattern)])

    def step(self, idx):
        pattern = self.decode(idx)
        self.state, tr = routing_step(self.state, pattern, self.g, self.cfg, self.rng, self.sink, self.sources)
        return self.state.queues.copy(), tr

    def step_pattern(self, pattern):
        self.state, tr = routing_step(self.state, pattern, self.g, self.cfg, self.rng, self.sink, self.sources)
        return self.state.queues.copy(), tr

    def backpressure(self) -> Tuple[int, ...]:
        c = self.cfg
        return backpressure_step(self.g, self.state.queues, self.sink, c.V, c.eta1, c.eta2, c.delta_t)
