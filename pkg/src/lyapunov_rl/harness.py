"""Seeded experiment runs, sweeps, LERL weight calibration and CSV output."""
from __future__ import annotations

import csv
import io
import logging
import math
import os
import statistics
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .agents.dqn import DqnConfig
from .agents.ppo import PpoConfig
from .agents.train import EpisodeRecord, evaluate, train
from .checkpoint import save_checkpoint
from .config import field_key, from_kv, parse_kv, read_kv
from .errors import ConfigError, ContractViolation, TrainingError
from .mec import MecConfig, MecEnv
from .queues import RewardShaper, ShaperKind, mean_rate_stability_score
from .routing import RoutingConfig, RoutingEnv, arrival_rate_for_load, choose_endpoints, generate_topology

log = logging.getLogger(__name__)

BACKPRESSURE = "backpressure"
SUB_PREFIXES = ("mec", "routing", "ppo", "dqn")
PROFILES = {
    "desk": {"episodes": 200, "steps": 200, "mec.K": 5, "routing.n_nodes": 10},
    "paper": {"episodes": 1000, "steps": 500, "mec.K": 10, "routing.n_nodes": 20},
}
CURVE_COLUMNS = [f.name for f in fields(EpisodeRecord)]
METRIC_NAMES = ("mean_energy", "mean_queue", "queue_std", "latency")


class CalibrationError(TrainingError):
    pass


def _canonical(name: str) -> str:
    if name.lower() == BACKPRESSURE:
        return BACKPRESSURE
    try:
        return ShaperKind.parse(name).value
    except ContractViolation as exc:
        raise ConfigError(str(exc)) from exc


@dataclass
class ExperimentConfig:
    env: str = "mec"
    shaper: str = "LDPTRLQ"
    V: float = 1.0
    w: float = 1.0
    agent: str = "ppo"
    compare: Tuple[str, ...] = ()
    seeds: Tuple[int, ...] = (0, 1, 2)
    sweep_axis: Optional[str] = None
    sweep_values: Tuple[float, ...] = ()
    load: Optional[float] = None
    topology_seed: Optional[int] = None
    out_dir: str = "out"
    profile: str = "desk"
    episodes: Optional[int] = None
    steps: Optional[int] = None
    eval_slots: int = 2000
    stability_threshold: float = 0.05
    stability_window: int = 20
    workers: int = 1
    save_checkpoints: bool = False
    calib_w_min: float = 1e-2
    calib_decades: int = 4
    calib_per_decade: int = 10
    # prefixed keys ("mec.K", "ppo.lr", ...) are kept verbatim here
    overrides: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.shaper = _canonical(self.shaper)
        self.compare = tuple(_canonical(c) for c in self.compare)
        self.validate()

    def validate(self):
        if self.env not in ("mec", "routing"):
            raise ConfigError(f"env must be mec or routing, got {self.env!r}")
        if self.agent not in ("ppo", "dqn", BACKPRESSURE):
            raise ConfigError(f"agent must be ppo, dqn or backpressure, got {self.agent!r}")
        if BACKPRESSURE in self.algorithms() and self.env != "routing":
            raise ConfigError("the backpressure baseline needs env = routing")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if any(not 0 <= s < 2**64 for s in self.seeds):
            raise ConfigError("seeds must be unsigned 64-bit integers")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if self.sweep_axis not in (None, "V", "lambda", "load"):
            raise ConfigError(f"sweep_axis must be V, lambda or load, got {self.sweep_axis!r}")
        if self.sweep_axis and not self.sweep_values:
            raise ConfigError("sweep_axis is set but sweep_values is empty")
        if any(b <= a for a, b in zip(self.sweep_values, self.sweep_values[1:])):
            raise ConfigError("sweep values must be strictly increasing")
        if self.sweep_axis == "load" and self.env != "routing":
            raise ConfigError("a load sweep needs env = routing")
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {sorted(PROFILES)}")
        if self.eval_slots < 2 or self.workers < 1 or self.stability_window < 1:
            raise ConfigError("eval_slots >= 2, workers >= 1 and stability_window >= 1 required")
        if self.V < 0 or self.w < 0:
            raise ConfigError("V and w must be >= 0")
        for key in self.overrides:
            if key.split(".", 1)[0] not in SUB_PREFIXES:
                raise ConfigError(f"unknown config key {key!r}")
        # fail on bad sub-config keys now rather than inside a worker
        self.env_config(self.V, self.V)
        if self.agent != BACKPRESSURE:
            self.agent_config()

    @classmethod
    def from_mapping(cls, mapping: Dict[str, str]) -> "ExperimentConfig":
        plain = {k: v for k, v in mapping.items() if "." not in k}
        if "overrides" in plain:
            raise ConfigError("unknown config key 'overrides'")
        nested = {k: v for k, v in mapping.items() if "." in k}
        try:
            cfg = from_kv(cls, plain, strict=True)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        cfg.overrides = dict(nested)
        cfg.validate()
        return cfg

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        return cls.from_mapping(parse_kv(text))

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_mapping(read_kv(path))

    def algorithms(self) -> List[str]:
        main = BACKPRESSURE if self.agent == BACKPRESSURE else self.shaper
        return [main] + [c for c in self.compare if c != main]

    def _sub(self, prefix) -> Dict[str, str]:
        merged = {k: str(v) for k, v in PROFILES[self.profile].items()}
        merged.update(self.overrides)
        n = len(prefix) + 1
        return {k[n:]: v for k, v in merged.items() if k.startswith(prefix + ".")}

    def n_episodes(self) -> int:
        return self.episodes if self.episodes is not None else PROFILES[self.profile]["episodes"]

    def n_steps(self) -> int:
        return self.steps if self.steps is not None else PROFILES[self.profile]["steps"]

    def env_config(self, V, value=None):
        if self.env == "mec":
            cfg = from_kv(MecConfig, self._sub("mec"), strict=True)
            cfg = replace(cfg, V=V, eta_user=cfg.eta_user)
            if self.sweep_axis == "lambda" and value is not None:
                cfg = replace(cfg, lambda_=value)
            return cfg
        cfg = from_kv(RoutingConfig, self._sub("routing"), strict=True)
        cfg = replace(cfg, V=V)
        if self.sweep_axis == "lambda" and value is not None:
            cfg = replace(cfg, lambda_r=value)
        return cfg

    def agent_config(self, kind=None):
        kind = kind or self.agent
        cls = PpoConfig if kind == "ppo" else DqnConfig
        try:
            return from_kv(cls, self._sub(kind), strict=True)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class MetricsRow:
    algorithm: str
    agent: str
    V: float
    sweep_value: float
    seed: int
    mean_energy: float
    mean_queue: float
    queue_std: float
    latency: Optional[float]
    stability: float
    converge_episode: Optional[int]
    status: str = "ok"
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.9g}"
    return str(x)


def rounded(x: float) -> float:
    return float(f"{x:.9g}")


def episodes_to_convergence(rewards: Sequence[float], window: int = 20, tail: int = 100, tol: float = 0.05) -> Optional[int]:
    """First episode whose trailing moving average is within ``tol`` of the final-``tail`` mean."""
    r = np.asarray(rewards, dtype=float)
    if r.size < window:
        return None
    final = r[-tail:].mean()
    ma = np.convolve(r, np.ones(window) / window, mode="valid")
    hits = np.flatnonzero(np.abs(ma - final) <= tol * abs(final))
    return int(hits[0] + window - 1) if hits.size else None


def curve_stability(records: Sequence[EpisodeRecord], window: int) -> float:
    if len(records) < 2:
        return math.nan
    totals = [rounded(r.mean_backlog) for r in records]
    slots = [r.slot for r in records]
    return mean_rate_stability_score(totals, min(window, len(records) - 1), slots)


def seed_for(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1, np.uint64)[0])


def _build_routing(cfg: ExperimentConfig, rcfg: RoutingConfig, seed: int, load: Optional[float]):
    topo = seed if cfg.topology_seed is None else cfg.topology_seed
    if load is not None:
        g = generate_topology(topo, rcfg)
        sink, sources = choose_endpoints(topo, g, rcfg.n_sources)
        rcfg = replace(rcfg, lambda_r=arrival_rate_for_load(g, sink, sources, rcfg, load))
    return rcfg, topo


def _make_env(cfg: ExperimentConfig, env_cfg, seed: int, topo: Optional[int]):
    if cfg.env == "mec":
        return MecEnv(env_cfg, seed=seed)
    return RoutingEnv(env_cfg, seed=seed, topology_seed=topo)


@dataclass
class RunOutput:
    row: MetricsRow
    records: List[EpisodeRecord]
    tensors: Optional[list] = None
    arch: Optional[dict] = None


def run_one(cfg: ExperimentConfig, algorithm: str, value: Optional[float], seed: int) -> RunOutput:
    """Train and evaluate one (algorithm, sweep value, seed) cell."""
    V = value if cfg.sweep_axis == "V" else cfg.V
    env_cfg = cfg.env_config(V, value)
    topo = None
    if cfg.env == "routing":
        load = value if cfg.sweep_axis == "load" else cfg.load
        env_cfg, topo = _build_routing(cfg, env_cfg, seed, load)
    agent_kind = BACKPRESSURE if algorithm == BACKPRESSURE else (cfg.agent if cfg.agent != BACKPRESSURE else "ppo")
    sweep_value = value if value is not None else V
    eval_env = _make_env(cfg, env_cfg, seed_for(seed, 3), topo)

    if agent_kind == BACKPRESSURE:
        ev = evaluate(eval_env, lambda obs: eval_env.encode(eval_env.backpressure()), cfg.eval_slots)
        totals = [rounded(x) for x in ev.backlog_totals]
        stab = mean_rate_stability_score(totals, max(1, min(len(totals) // 10, len(totals) - 1)))
        row = MetricsRow(algorithm, agent_kind, V, sweep_value, seed, ev.mean_energy, ev.mean_queue,
                         ev.queue_std, ev.latency, stab, None)
        return RunOutput(row, [])

    shaper = RewardShaper(ShaperKind.parse(algorithm), V=V, w=cfg.w)
    train_env = _make_env(cfg, env_cfg, seed_for(seed, 1), topo)
    res = train(train_env, shaper, cfg.agent_config(agent_kind), seed_for(seed, 2), cfg.n_episodes(), cfg.n_steps())
    stab = curve_stability(res.records, cfg.stability_window)
    conv = episodes_to_convergence([r.mean_reward for r in res.records])
    if res.error is not None:
        nan = math.nan
        row = MetricsRow(algorithm, agent_kind, V, sweep_value, seed, nan, nan, nan, None, stab, conv,
                         status="failed", error=res.error)
        return RunOutput(row, res.records)
    ev = evaluate(eval_env, res.policy(), cfg.eval_slots)
    row = MetricsRow(algorithm, agent_kind, V, sweep_value, seed, ev.mean_energy, ev.mean_queue, ev.queue_std,
                     ev.latency, stab, conv)
    arch = {"obs_dim": int(train_env.obs_dim), "hidden": list(res.agent.cfg.hidden), "agent": agent_kind}
    return RunOutput(row, res.records, res.agent.tensors(), arch)


def _run_task(args):
    return run_one(*args)


def curve_name(cfg: ExperimentConfig, row: MetricsRow) -> str:
    name = f"{cfg.env}_{row.algorithm}_{row.agent}_V{row.V:g}_seed{row.seed}"
    if cfg.sweep_axis in ("lambda", "load"):
        name += f"_{cfg.sweep_axis}{row.sweep_value:g}"
    return name


def write_atomic(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def to_csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(x) for x in r])
    return buf.getvalue()


ROW_COLUMNS = [f.name for f in fields(MetricsRow)]


def metrics_csv(rows: Sequence[MetricsRow]) -> str:
    return to_csv(ROW_COLUMNS, [[getattr(r, c) for c in ROW_COLUMNS] for r in rows])


def read_metrics(path) -> List[MetricsRow]:
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            out.append(MetricsRow(
                rec["algorithm"], rec["agent"], float(rec["V"]), float(rec["sweep_value"]), int(rec["seed"]),
                float(rec["mean_energy"]), float(rec["mean_queue"]), float(rec["queue_std"]),
                float(rec["latency"]) if rec["latency"] else None, float(rec["stability"]),
                int(rec["converge_episode"]) if rec["converge_episode"] else None, rec["status"], rec["error"],
            ))
    return out


def read_curve(path) -> List[EpisodeRecord]:
    with open(path, newline="") as fh:
        return [EpisodeRecord(int(r["episode"]), int(r["slot"]), float(r["mean_reward"]), float(r["mean_backlog"]),
                              float(r["mean_penalty"]), float(r["backlog_std"])) for r in csv.DictReader(fh)]


def _mean_std(values):
    if not values:
        return math.nan, math.nan
    mean = statistics.fmean(values)
    return mean, (statistics.stdev(values) if len(values) > 1 else 0.0)


def aggregate(rows: Sequence[MetricsRow]) -> Tuple[List[str], List[list]]:
    """Per (algorithm, sweep value) mean and standard deviation over successful seeds."""
    header = ["algorithm", "sweep_value", "n_ok", "n_failed"]
    for m in METRIC_NAMES + ("stability",):
        header += [f"{m}_mean", f"{m}_std"]
    groups: Dict[Tuple[str, float], List[MetricsRow]] = {}
    for r in rows:
        groups.setdefault((r.algorithm, r.sweep_value), []).append(r)
    table = []
    for (alg, value), grp in groups.items():
        ok = sorted((r for r in grp if r.ok), key=lambda r: r.seed)
        line = [alg, value, len(ok), len(grp) - len(ok)]
        for m in METRIC_NAMES + ("stability",):
            vals = [getattr(r, m) for r in ok if getattr(r, m) is not None]
            line += list(_mean_std(vals)) if vals else [None, None]
        table.append(line)
    return header, table


def check_writable(out: Path) -> None:
    """Raise ``OSError`` unless ``out`` (and its curves directory) accept new files."""
    for d in (out, out / "curves"):
        d.mkdir(parents=True, exist_ok=True)
        fd, probe = tempfile.mkstemp(dir=d, prefix=".probe")
        os.close(fd)
        os.unlink(probe)


@dataclass
class ExperimentResult:
    rows: List[MetricsRow]
    out_dir: Path
    curve_files: List[Path]

    @property
    def failed(self) -> List[MetricsRow]:
        return [r for r in self.rows if not r.ok]


def run_experiment(cfg: ExperimentConfig, workers: Optional[int] = None) -> ExperimentResult:
    """Run every (algorithm, sweep value, seed) cell and write CSV outputs under ``cfg.out_dir``."""
    out = Path(cfg.out_dir)
    check_writable(out)
    values = list(cfg.sweep_values) if cfg.sweep_axis else [None]
    tasks = [(cfg, alg, v, s) for alg in cfg.algorithms() for v in values for s in cfg.seeds]
    workers = cfg.workers if workers is None else workers
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_task, tasks))
    else:
        results = [_run_task(t) for t in tasks]

    curves = []
    for res in results:
        if res.row.agent == BACKPRESSURE:
            continue
        name = curve_name(cfg, res.row)
        path = out / "curves" / f"{name}.csv"
        write_atomic(path, to_csv(CURVE_COLUMNS, [[getattr(r, c) for c in CURVE_COLUMNS] for r in res.records]))
        curves.append(path)
        if cfg.save_checkpoints and res.tensors is not None:
            (out / "checkpoints").mkdir(exist_ok=True)
            save_checkpoint(out / "checkpoints" / f"{name}.ckpt", res.tensors, seed=res.row.seed,
                            episodes=len(res.records), arch=res.arch)
        if not res.row.ok:
            log.warning("run %s failed: %s", name, res.row.error)

    rows = [r.row for r in results]
    write_atomic(out / "metrics.csv", metrics_csv(rows))
    header, table = aggregate(rows)
    write_atomic(out / "aggregate.csv", to_csv(header, table))
    if len(cfg.algorithms()) > 1:
        header, table = sweep_summary(rows)
        write_atomic(out / "summary.csv", to_csv(header, table))
    return ExperimentResult(rows, out, curves)


# --- comparison table -------------------------------------------------------

def sweep_summary(rows: Sequence[MetricsRow], reference: Optional[str] = None) -> Tuple[List[str], List[list]]:
    """Wide table: one line per sweep value, seed-averaged metrics per algorithm.

    With two or more algorithms, each non-reference algorithm gets one flag
    column per metric saying whether the reference wins (lower), loses or ties.
    """
    by_alg: Dict[str, Dict[float, List[MetricsRow]]] = {}
    for r in rows:
        if r.ok:
            by_alg.setdefault(r.algorithm, {}).setdefault(r.sweep_value, []).append(r)
    if not by_alg:
        raise ContractViolation("no successful rows to summarise")
    algs = sorted(by_alg)
    axes = {a: sorted(by_alg[a]) for a in algs}
    axis = axes[algs[0]]
    if any(axes[a] != axis for a in algs):
        raise ContractViolation(f"algorithms do not share a sweep axis: {axes}")
    ref = reference or (ShaperKind.LDPTRLQ.value if ShaperKind.LDPTRLQ.value in algs else algs[0])
    if ref not in by_alg:
        raise ContractViolation(f"reference algorithm {ref!r} has no rows")
    metrics = [m for m in METRIC_NAMES if any(getattr(r, m) is not None for r in rows if r.ok)]
    others = [a for a in algs if a != ref]
    ordered = [ref] + others

    header = ["sweep_value"] + [f"{a}_{m}" for a in ordered for m in metrics]
    if others:
        header += [f"{ref}_vs_{b}_{m}" for b in others for m in metrics]
    table = []
    for v in axis:
        means = {}
        for a in ordered:
            for m in metrics:
                vals = [getattr(r, m) for r in sorted(by_alg[a][v], key=lambda r: r.seed) if getattr(r, m) is not None]
                means[a, m] = statistics.fmean(vals) if vals else None
        line = [v] + [means[a, m] for a in ordered for m in metrics]
        for b in others:
            for m in metrics:
                line.append(_flag(means[ref, m], means[b, m]))
        table.append(line)
    return header, table


def _flag(ref_value, other_value) -> str:
    if ref_value is None or other_value is None:
        return "na"
    if math.isclose(ref_value, other_value, rel_tol=1e-12, abs_tol=0.0):
        return "tie"
    return "win" if ref_value < other_value else "loss"


# --- LERL weight calibration -------------------------------------------------

def weight_grid(w_min: float, decades: int, per_decade: int) -> np.ndarray:
    if decades <= 0 or per_decade <= 0 or w_min <= 0:
        raise ConfigError("calibration grid needs w_min > 0 and positive decade counts")
    lo = math.log10(w_min)
    return np.logspace(lo, lo + decades, decades * per_decade + 1)


@dataclass
class Calibration:
    weight: float
    grid: List[float]
    distances: List[float]
    stable: List[bool]


def normalized_distance(point, reference) -> float:
    terms = []
    for x, ref in zip(point, reference):
        scale = abs(ref) if ref != 0 else 1.0
        terms.append(((x - ref) / scale) ** 2)
    return math.sqrt(math.fsum(terms))


def calibrate_lerl_weight(cfg: ExperimentConfig, reference: Tuple[float, float], grid: Optional[Sequence[float]] = None,
                          measure: Optional[Callable[[float], Tuple[float, float, float]]] = None) -> Calibration:
    """Grid-search the LERL queue weight whose (energy, queue) is closest to ``reference``.

    ``measure(w)`` returns ``(mean_energy, mean_queue, stability)``; the default
    trains LERL over ``cfg.seeds`` and averages. Candidates whose stability
    exceeds ``cfg.stability_threshold`` are skipped.
    """
    if grid is None:
        grid = weight_grid(cfg.calib_w_min, cfg.calib_decades, cfg.calib_per_decade)
    grid = [float(w) for w in grid]
    if not grid:
        raise ConfigError("calibration grid is empty")
    measure = measure or (lambda w: measure_lerl(cfg, w))
    dists, stable = [], []
    for w in grid:
        energy, queue, stab = measure(w)
        ok = bool(np.isfinite(stab) and stab <= cfg.stability_threshold and np.isfinite(energy) and np.isfinite(queue))
        stable.append(ok)
        dists.append(normalized_distance((energy, queue), reference) if ok else math.inf)
    if not any(stable):
        raise CalibrationError("every candidate weight was unstable")
    best = int(np.argmin(dists))
    return Calibration(grid[best], grid, dists, stable)


def measure_lerl(cfg: ExperimentConfig, w: float) -> Tuple[float, float, float]:
    lerl = replace(cfg, shaper=ShaperKind.LERL.value, agent=cfg.agent if cfg.agent != BACKPRESSURE else "ppo",
                   w=w, compare=(), sweep_axis=None, sweep_values=())
    rows = [run_one(lerl, lerl.shaper, None, s).row for s in cfg.seeds]
    ok = [r for r in rows if r.ok]
    if not ok:
        return math.nan, math.nan, math.nan
    return (statistics.fmean(r.mean_energy for r in ok), statistics.fmean(r.mean_queue for r in ok),
            statistics.fmean(r.stability for r in ok))


def reference_metrics(cfg: ExperimentConfig) -> Tuple[float, float]:
    """LDPTRLQ mean (energy, queue) at V = 1 over ``cfg.seeds``."""
    ref = replace(cfg, shaper=ShaperKind.LDPTRLQ.value, agent=cfg.agent if cfg.agent != BACKPRESSURE else "ppo",
                  V=1.0, compare=(), sweep_axis=None, sweep_values=())
    rows = [run_one(ref, ref.shaper, None, s).row for s in cfg.seeds]
    ok = [r for r in rows if r.ok]
    if not ok:
        raise CalibrationError("reference LDPTRLQ runs all failed")
    return statistics.fmean(r.mean_energy for r in ok), statistics.fmean(r.mean_queue for r in ok)


def config_keys() -> List[str]:
    return [field_key(f) for f in fields(ExperimentConfig) if f.name != "overrides"]
