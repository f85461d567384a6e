"""Experiment orchestration: seed sweeps, learned-discount dumps, the
collapse experiment and snapshot persistence."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .config import RunConfig, config_for_env, dump_config, parse_config
from .envs import make_env
from .numerics import RngStreams
from .ppo import PpoAgent, ppo_train
from .runlog import RunLog, read_runlog
from .sac import SacAgent, sac_train

logger = logging.getLogger(__name__)

__all__ = [
    "RunLog", "read_runlog", "train", "final_eval", "SeedResult", "SweepSummary", "run_sweep",
    "GammaDump", "gamma_analysis", "CollapseReport", "collapse_experiment",
    "save_snapshot", "load_snapshot", "build_agent",
]


def train(config: RunConfig, seed: Optional[int] = None, log_path=None, callback=None):
    """Dispatch to the SAC or PPO trainer named by ``run.algorithm``."""
    fn = sac_train if config.run.algorithm == "sac" else ppo_train
    return fn(config, seed=seed, log_path=log_path, callback=callback)


def final_eval(log) -> float:
    """Last logged evaluation return (NaN when nothing was evaluated)."""
    rows = log.rows if isinstance(log, RunLog) else log
    for r in reversed(rows):
        if not math.isnan(r["eval_return_mean"]):
            return float(r["eval_return_mean"])
    return math.nan


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SeedResult:
    seed: int
    final_return: float = math.nan
    ok: bool = True
    error: str = ""


@dataclass
class SweepSummary:
    results: list
    mean: float
    std: float

    @property
    def failed(self) -> list:
        return [r.seed for r in self.results if not r.ok]

    def rows(self) -> list[dict]:
        out = [{"seed": r.seed, "final_return": r.final_return,
                "status": "ok" if r.ok else "failed", "error": r.error} for r in self.results]
        out.append({"seed": "mean", "final_return": self.mean, "status": "", "error": ""})
        out.append({"seed": "std", "final_return": self.std, "status": "", "error": ""})
        return out


def _default_runner(config: RunConfig, seed: int, log_path) -> float:
    return final_eval(train(config, seed=seed, log_path=log_path).log)


def run_sweep(config: RunConfig, seeds=None, out_dir=None,
              runner: Optional[Callable] = None) -> SweepSummary:
    """Run every seed and aggregate the final evaluation returns.

    ``runner(config, seed, log_path)`` returns a final return; it defaults to
    a full training run. A failing seed is recorded and the rest proceed. The
    std is the population std over successful seeds. With ``out_dir`` the
    effective config, one log per seed and ``summary.csv`` are written there.
    """
    seeds = list(config.run.seeds if seeds is None else seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    runner = runner or _default_runner
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(dump_config(config))
    results = []
    for seed in seeds:
        log_path = out / f"seed_{seed}.csv" if out is not None else None
        try:
            results.append(SeedResult(seed, float(runner(config, seed, log_path))))
        except Exception as exc:  # a failed seed must not sink the sweep
            logger.exception("seed %s failed", seed)
            results.append(SeedResult(seed, ok=False, error=f"{type(exc).__name__}: {exc}"))
    vals = np.array([r.final_return for r in results if r.ok], dtype=np.float64)
    mean = float(vals.mean()) if vals.size else math.nan
    std = float(np.sqrt(np.mean((vals - mean) ** 2))) if vals.size else math.nan
    summary = SweepSummary(results, mean, std)
    if out is not None:
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["seed", "final_return", "status", "error"])
            w.writeheader()
            for row in summary.rows():
                if isinstance(row["final_return"], float):
                    row = dict(row, final_return=format(row["final_return"], ".9g"))
                w.writerow(row)
    return summary


# ---------------------------------------------------------------------------
# learned discount analysis


@dataclass
class GammaDump:
    states: np.ndarray
    gammas: np.ndarray
    edges: np.ndarray
    counts: np.ndarray

    @property
    def summary(self) -> dict:
        return {"n": int(len(self.gammas)), "mean": float(self.gammas.mean()),
                "min": float(self.gammas.min()), "max": float(self.gammas.max()),
                "histogram": self.counts.tolist(), "edges": self.edges.tolist()}

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"s{i}" for i in range(self.states.shape[1])] + ["gamma"])
            for s, g in zip(self.states, self.gammas):
                w.writerow([format(v, ".9g") for v in s] + [format(g, ".9g")])

    def write_histogram(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "count"])
            for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
                w.writerow([format(lo, ".9g"), format(hi, ".9g"), int(c)])


def state_gammas(agent, states) -> np.ndarray:
    """Discount the agent would use at ``states``; the SAC uncertainty rule
    is evaluated at the policy's mean action."""
    states = np.atleast_2d(states)
    if isinstance(agent, SacAgent):
        return agent.discount(states, agent.policy.mean_action(states))
    return agent.discount(states)


def gamma_analysis(agent, env, rng: np.random.Generator, episodes: int = 10,
                   bins: int = 20, min_per_zone: int = 0, max_episodes: int = 1000) -> GammaDump:
    """Per-state discounts on states visited by the frozen (sampling) policy.

    Collects ``episodes`` episodes, then keeps going until every zone of a
    zoned environment has ``min_per_zone`` samples. The histogram spans
    ``[gamma_min, gamma_max]`` in ``bins`` equal bins.
    """
    states = []
    zones = np.zeros(2, dtype=int)
    n_ep = 0
    while n_ep < max_episodes:
        if n_ep >= episodes and (not hasattr(env, "zone") or zones.min() >= min_per_zone):
            break
        obs, done = env.reset(rng), False
        while not done:
            states.append(np.array(obs))
            if hasattr(env, "zone"):
                zones[int(env.zone(obs[0]))] += 1
            res = env.step(agent.act(obs, rng), rng)
            obs, done = res.next_state, res.terminal or res.truncated
        n_ep += 1
    S = np.array(states)
    g = state_gammas(agent, S)
    lo, hi = agent.gcfg.gamma_min, agent.gcfg.gamma_max
    if agent.variant == "fixed" or hi <= lo:
        lo, hi = float(g.min()) - 1e-6, float(g.max()) + 1e-6
    counts, edges = np.histogram(np.clip(g, lo, hi), bins=bins, range=(lo, hi))
    return GammaDump(S, g, edges, counts)


# ---------------------------------------------------------------------------
# collapse experiment


@dataclass
class CollapseReport:
    seeds: list
    gamma_min: float
    warmup: int
    naive: dict = field(default_factory=dict)   # seed -> [(step, mean_gamma)]
    rc: dict = field(default_factory=dict)
    naive_tol: float = 0.005
    rc_floor: float = 0.95

    def naive_final(self, seed) -> float:
        return self.naive[seed][-1][1]

    def rc_min(self, seed) -> float:
        vals = [g for s, g in self.rc[seed] if s >= self.warmup]
        return min(vals) if vals else math.nan

    def naive_pass(self, seed) -> bool:
        return self.naive_final(seed) <= self.gamma_min + self.naive_tol

    def rc_pass(self, seed) -> bool:
        return self.rc_min(seed) >= self.rc_floor

    @property
    def passed(self) -> bool:
        return all(self.naive_pass(s) and self.rc_pass(s) for s in self.seeds)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "gamma_min": self.gamma_min,
                "per_seed": [{"seed": s, "naive_final_gamma": self.naive_final(s),
                              "naive_pass": self.naive_pass(s), "rc_min_gamma": self.rc_min(s),
                              "rc_pass": self.rc_pass(s)} for s in self.seeds]}


def _config_diff(a: RunConfig, b: RunConfig) -> list[str]:
    out = []
    for name in ("run", "env", "sac", "ppo", "gamma"):
        da, db = dataclasses.asdict(getattr(a, name)), dataclasses.asdict(getattr(b, name))
        out += [f"{name}.{k}" for k in da if da[k] != db[k]]
    return out


def collapse_experiment(config: RunConfig, seeds=None, out_dir=None) -> CollapseReport:
    """Matched naive-TD and return-consistency SAC runs on the corridor.

    Both arms share every setting except ``gamma.variant``. The naive arm
    passes when its final batch-mean discount is within 0.005 of
    ``gamma_min``; the RC arm passes when its batch-mean discount never drops
    below 0.95 after warmup.
    """
    base = config.replace(run={"algorithm": "sac", "env": "corridor"})
    naive_cfg = base.replace(gamma={"variant": "naive-td"})
    rc_cfg = base.replace(gamma={"variant": "adagamma-rc"})
    diff = _config_diff(naive_cfg, rc_cfg)
    if diff != ["gamma.variant"]:
        raise AssertionError(f"collapse arms differ beyond the gamma objective: {diff}")
    seeds = list(base.run.seeds if seeds is None else seeds)
    report = CollapseReport(seeds, base.gamma.gamma_min, base.gamma.warmup)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(dump_config(rc_cfg))
    for seed in seeds:
        for arm, cfg in (("naive", naive_cfg), ("rc", rc_cfg)):
            path = out / f"{arm}_seed_{seed}.csv" if out is not None else None
            res = sac_train(cfg, seed=seed, log_path=path)
            getattr(report, arm)[seed] = [(r["step"], r["mean_gamma"]) for r in res.log.rows]
            logger.info("collapse %s seed %s final mean gamma %.4f", arm, seed,
                        res.log.rows[-1]["mean_gamma"])
    if out is not None:
        with open(out / "collapse.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["arm", "seed", "step", "mean_gamma"])
            for arm in ("naive", "rc"):
                for seed, traj in getattr(report, arm).items():
                    for step, g in traj:
                        w.writerow([arm, seed, step, format(g, ".9g")])
    return report


# ---------------------------------------------------------------------------
# snapshots


def build_agent(config: RunConfig, seed: Optional[int] = None):
    env = make_env(config.run.env, **config_for_env(config))
    streams = RngStreams(config.run.seeds[0] if seed is None else seed)
    if config.run.algorithm == "sac":
        return SacAgent(env.obs_dim, env.action_dim, config.sac, config.gamma,
                        streams.init, env.action_high)
    return PpoAgent(env.obs_dim, env.action_dim, config.ppo, config.gamma,
                    streams.init, env.action_high)


def save_snapshot(agent, config: RunConfig, path) -> Path:
    """Write all agent arrays and the effective config to one ``.npz`` file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: np.asarray(v) for k, v in agent.state_dict().items()}
    arrays["__config__"] = np.array(dump_config(config))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_snapshot(path, config: Optional[RunConfig] = None):
    """Rebuild ``(agent, config)``; the stored config is used unless one is given."""
    with np.load(Path(path), allow_pickle=False) as data:
        state = {k: data[k] for k in data.files}
    stored = parse_config(str(state.pop("__config__")), environ={})
    config = stored if config is None else config
    agent = build_agent(config)
    agent.load_state_dict(state)
    return agent, config
