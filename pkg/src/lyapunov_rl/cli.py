"""Command-line entry point: ``lyapunov-rl {run,sweep,calibrate,topo-gen}``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .errors import ConfigError, ContractViolation, TrainingError
from .harness import (
    PROFILES, ExperimentConfig, calibrate_lerl_weight, check_writable, reference_metrics, run_experiment,
    to_csv, write_atomic,
)
from .routing import choose_endpoints, generate_topology

EXIT_OK, EXIT_CONFIG, EXIT_TRAINING = 0, 1, 2

log = logging.getLogger("lyapunov_rl")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="flat key = value config file")
    common.add_argument("--seed", type=int, help="run this single seed instead of the configured list")
    common.add_argument("--out", help="output directory (overrides out_dir)")
    common.add_argument("--profile", choices=sorted(PROFILES), help="episode/scale profile")
    common.add_argument("--workers", type=int, help="parallel runs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="lyapunov-rl", description="Queue-stable RL experiment runner.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="train and evaluate at the configured V (sweep ignored)")
    sub.add_parser("sweep", parents=[common], help="run over sweep_axis/sweep_values")
    sub.add_parser("calibrate", parents=[common], help="search the LERL weight matching LDPTRLQ at V=1")
    sub.add_parser("topo-gen", parents=[common], help="write the routing topology for a seed")
    return p


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config)
    kw = {}
    if args.seed is not None:
        kw["seeds"] = (args.seed,)
    if args.out is not None:
        kw["out_dir"] = args.out
    if args.profile is not None:
        kw["profile"] = args.profile
    if args.workers is not None:
        kw["workers"] = args.workers
    cfg = replace(cfg, **kw)
    cfg.overrides = dict(cfg.overrides)
    return cfg


def cmd_run(cfg: ExperimentConfig, sweep: bool) -> int:
    if sweep and not cfg.sweep_axis:
        raise ConfigError("sweep needs sweep_axis and sweep_values in the config")
    if not sweep:
        cfg = replace(cfg, sweep_axis=None, sweep_values=())
    result = run_experiment(cfg)
    for row in result.failed:
        log.error("%s seed %d value %g failed: %s", row.algorithm, row.seed, row.sweep_value, row.error)
    print(f"wrote {len(result.rows)} rows to {result.out_dir / 'metrics.csv'}")
    return EXIT_TRAINING if result.failed else EXIT_OK


def cmd_calibrate(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out_dir)
    check_writable(out)
    ref = reference_metrics(cfg)
    cal = calibrate_lerl_weight(cfg, ref)
    rows = [[w, d, int(s)] for w, d, s in zip(cal.grid, cal.distances, cal.stable)]
    write_atomic(out / "calibration.csv", to_csv(["w", "distance", "stable"], rows))
    print(f"reference energy={ref[0]:.6g} queue={ref[1]:.6g}; calibrated w={cal.weight:.6g}")
    return EXIT_OK


def cmd_topo_gen(cfg: ExperimentConfig) -> int:
    if cfg.env != "routing":
        raise ConfigError("topo-gen needs env = routing")
    out = Path(cfg.out_dir)
    check_writable(out)
    rcfg = cfg.env_config(cfg.V)
    for seed in cfg.seeds:
        g = generate_topology(seed, rcfg)
        sink, sources = choose_endpoints(seed, g, rcfg.n_sources)
        text = f"# sink {sink} sources {' '.join(map(str, sources))}\n" + g.to_text()
        write_atomic(out / f"topology_seed{seed}.txt", text)
    print(f"wrote {len(cfg.seeds)} topologies to {out}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args)
        if args.command == "topo-gen":
            return cmd_topo_gen(cfg)
        if args.command == "calibrate":
            return cmd_calibrate(cfg)
        return cmd_run(cfg, sweep=args.command == "sweep")
    except (ConfigError, ContractViolation, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
