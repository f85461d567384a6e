"""Command line entry point: ``adagamma <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, config_for_env, dump_config, load_config
from .envs import make_env
from .harness import (collapse_experiment, final_eval, gamma_analysis, load_snapshot,
                      run_sweep, save_snapshot, train)
from .theory import theory_check


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not serializable: {type(obj)}")


def _emit(payload: dict, out: Path | None = None) -> None:
    text = json.dumps(payload, indent=2, default=_json_default, allow_nan=True)
    print(text)
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}")


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(cfg))
    seed = cfg.run.seeds[0] if args.seed is None else args.seed
    res = train(cfg, seed=seed, log_path=out / f"seed_{seed}.csv")
    save_snapshot(res.agent, cfg, out / f"snapshot_seed_{seed}.npz")
    _emit({"seed": seed, "env_steps": res.env_steps, "episodes": res.episodes,
           "final_eval_return": final_eval(res.log),
           "final_mean_gamma": res.log.last("mean_gamma")})
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    summary = run_sweep(cfg, args.seeds, out_dir=args.out)
    _emit({"mean": summary.mean, "std": summary.std, "failed_seeds": summary.failed,
           "per_seed": [{"seed": r.seed, "final_return": r.final_return, "ok": r.ok}
                        for r in summary.results]})
    return 0 if not summary.failed else 1


def cmd_theory(args) -> int:
    report = theory_check(args.instances, args.states, args.actions, args.seed)
    _emit(report, Path(args.out) if args.out else None)
    return 0 if report["passed"] else 1


def cmd_collapse(args) -> int:
    cfg = load_config(args.config)
    report = collapse_experiment(cfg, args.seeds, out_dir=args.out)
    _emit(report.to_dict())
    return 0 if report.passed else 1


def cmd_gamma_dump(args) -> int:
    cfg = load_config(args.config)
    agent, cfg = load_snapshot(args.snapshot, cfg)
    env = make_env(cfg.run.env, **config_for_env(cfg))
    rng = np.random.default_rng(args.seed)
    dump = gamma_analysis(agent, env, rng, episodes=args.episodes,
                          min_per_zone=args.min_per_zone)
    out = Path(args.out)
    dump.write_csv(out / "gamma_dump.csv")
    dump.write_histogram(out / "gamma_histogram.csv")
    summary = dump.summary
    _emit({k: v for k, v in summary.items() if k != "edges"})
    return 0 if math.isfinite(summary["mean"]) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adagamma",
                                description="State-dependent discounting for SAC and PPO.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one seed, write log and snapshot")
    t.add_argument("config")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", default="runs/train")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="train several seeds and summarize")
    s.add_argument("config")
    s.add_argument("--seeds", type=_seeds)
    s.add_argument("--out", default="runs/sweep")
    s.set_defaults(func=cmd_sweep)

    th = sub.add_parser("theory-check", help="randomized tabular certificates (JSON report)")
    th.add_argument("--instances", type=int, default=1000)
    th.add_argument("--states", type=int, default=20)
    th.add_argument("--actions", type=int, default=5)
    th.add_argument("--seed", type=int, default=0)
    th.add_argument("--out", help="also write the report to this file")
    th.set_defaults(func=cmd_theory)

    c = sub.add_parser("collapse", help="naive-TD vs return-consistency on the corridor")
    c.add_argument("config")
    c.add_argument("--seeds", type=_seeds)
    c.add_argument("--out", default="runs/collapse")
    c.set_defaults(func=cmd_collapse)

    g = sub.add_parser("gamma-dump", help="per-state discounts of a saved agent")
    g.add_argument("snapshot")
    g.add_argument("config")
    g.add_argument("--episodes", type=int, default=10)
    g.add_argument("--min-per-zone", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="runs/gamma_dump")
    g.set_defaults(func=cmd_gamma_dump)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
