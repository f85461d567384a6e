import json
import math

import numpy as np
import pytest

from adagamma.cli import main
from adagamma.config import RunConfig, config_for_env
from adagamma.envs import make_env
from adagamma.harness import (CollapseReport, _config_diff, build_agent, final_eval,
                              gamma_analysis, load_snapshot, run_sweep, save_snapshot, train)
from adagamma.runlog import COLUMNS, RunLog, read_runlog


def _tiny(algorithm="sac", variant="adagamma-rc", steps=300):
    return RunConfig().replace(
        run={"algorithm": algorithm, "env": "corridor", "max_steps": steps, "eval_interval": 150,
             "log_interval": 150, "eval_episodes": 1, "seeds": [0, 1]},
        env={"horizon": 50},
        sac={"hidden": 8, "batch_size": 16, "learning_starts": 32, "buffer_size": 1000},
        ppo={"hidden": 8, "rollout": 64, "minibatch": 16, "epochs": 1},
        gamma={"variant": variant, "hidden": 8, "warmup": 50 if algorithm == "sac" else 1})


# --- run log --------------------------------------------------------------


def test_runlog_rejects_non_increasing_steps(tmp_path):
    log = RunLog(tmp_path / "log.csv")
    log.append(step=1, episode=0)
    with pytest.raises(ValueError):
        log.append(step=1, episode=0)
    with pytest.raises(KeyError):
        log.append(step=2, bogus=1.0)
    log.close()


def test_runlog_partial_file_parses_to_last_full_row(tmp_path):
    p = tmp_path / "log.csv"
    log = RunLog(p)
    log.append(step=10, episode=1, mean_gamma=0.98123456789)
    log.append(step=20, episode=2, mean_gamma=0.5)
    log.close()
    lines = p.read_text().splitlines()
    assert lines[0] == ",".join(COLUMNS)
    assert "0.981234568" in lines[1]
    p.write_text(p.read_text() + "30,3,1.5")
    rows = read_runlog(p)
    assert [r["step"] for r in rows] == [10, 20]
    assert rows[1]["mean_gamma"] == 0.5
    assert math.isnan(rows[0]["alpha"])


# --- sweeps ---------------------------------------------------------------


def test_sweep_aggregation_matches_hand_values(tmp_path):
    cfg = _tiny()
    returns = {0: -3.0, 1: 1.0, 2: 2.0, 3: 5.0, 4: 0.0}
    summary = run_sweep(cfg, list(returns), tmp_path, runner=lambda c, s, p: returns[s])
    vals = np.array(list(returns.values()))
    assert summary.mean == pytest.approx(vals.mean())
    assert summary.std == pytest.approx(np.sqrt(((vals - vals.mean()) ** 2).mean()))
    assert (tmp_path / "config.ini").exists() and (tmp_path / "summary.csv").exists()
    assert "std" in (tmp_path / "summary.csv").read_text()


def test_sweep_single_seed_has_zero_std():
    summary = run_sweep(_tiny(), [7], runner=lambda c, s, p: 4.0)
    assert summary.std == 0.0 and summary.mean == 4.0


def test_sweep_marks_failed_seed_and_continues():
    def runner(c, s, p):
        if s == 1:
            raise RuntimeError("boom")
        return float(s)

    summary = run_sweep(_tiny(), [0, 1, 2], runner=runner)
    assert summary.failed == [1]
    assert summary.mean == 1.0
    assert "boom" in summary.results[1].error
    with pytest.raises(ValueError):
        run_sweep(_tiny(), [], runner=runner)


def test_real_sweep_reruns_byte_identical(tmp_path):
    cfg = _tiny()
    a = run_sweep(cfg, [0], tmp_path / "a")
    b = run_sweep(cfg, [0], tmp_path / "b")
    assert a.mean == b.mean
    for name in ("seed_0.csv", "summary.csv", "config.ini"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_final_eval_skips_nan_rows():
    rows = [{"eval_return_mean": 1.0}, {"eval_return_mean": math.nan}]
    assert final_eval(rows) == 1.0
    assert math.isnan(final_eval([]))


# --- gamma analysis -------------------------------------------------------


def test_gamma_dump_at_initialization_is_single_bin():
    cfg = _tiny()
    agent = build_agent(cfg, 0)
    env = make_env("corridor", **config_for_env(cfg))
    dump = gamma_analysis(agent, env, np.random.default_rng(0), episodes=2)
    assert np.max(np.abs(dump.gammas - 0.98)) <= 1e-9
    assert np.count_nonzero(dump.counts) == 1 and dump.counts.sum() == len(dump.gammas)
    assert len(dump.counts) == 20


def test_gamma_dump_covers_both_corridor_zones(tmp_path):
    cfg = _tiny()
    agent = build_agent(cfg, 0)
    env = make_env("corridor", **config_for_env(cfg))
    dump = gamma_analysis(agent, env, np.random.default_rng(1), episodes=1, min_per_zone=100)
    zones = np.array([env.zone(x) for x in dump.states[:, 0]])
    assert (zones == 0).sum() >= 100 and (zones == 1).sum() >= 100
    dump.write_csv(tmp_path / "g.csv")
    dump.write_histogram(tmp_path / "h.csv")
    assert len((tmp_path / "g.csv").read_text().splitlines()) == len(dump.gammas) + 1


def test_gamma_dump_mean_matches_log():
    cfg = _tiny(steps=600)
    res = train(cfg, seed=0)
    env = make_env("corridor", **config_for_env(cfg))
    dump = gamma_analysis(res.agent, env, np.random.default_rng(0), episodes=5)
    assert abs(dump.summary["mean"] - res.log.rows[-1]["mean_gamma"]) <= 0.01


# --- collapse report ------------------------------------------------------


def test_collapse_verdicts():
    rep = CollapseReport([0], 0.9, 100)
    rep.naive[0] = [(50, 0.98), (200, 0.904)]
    rep.rc[0] = [(50, 0.93), (150, 0.96), (200, 0.97)]
    assert rep.naive_pass(0) and rep.rc_pass(0) and rep.passed
    rep.rc[0].append((250, 0.949))
    assert not rep.passed
    assert rep.to_dict()["per_seed"][0]["rc_min_gamma"] == 0.949


def test_collapse_arms_differ_only_in_variant():
    cfg = _tiny()
    a = cfg.replace(gamma={"variant": "naive-td"})
    assert _config_diff(a, cfg) == ["gamma.variant"]


# --- snapshots ------------------------------------------------------------


@pytest.mark.parametrize("algorithm,variant", [("sac", "adagamma-rc"), ("ppo", "adagamma-rc"),
                                               ("sac", "uncertainty"), ("ppo", "uncertainty")])
def test_snapshot_round_trip(tmp_path, algorithm, variant):
    cfg = _tiny(algorithm, variant)
    res = train(cfg, seed=0)
    path = save_snapshot(res.agent, cfg, tmp_path / "snap.npz")
    agent, cfg2 = load_snapshot(path)
    assert cfg2 == cfg
    obs = np.random.default_rng(0).uniform(0, 10, (5, 1))
    for x in obs:
        np.testing.assert_array_equal(agent.act(x, deterministic=True),
                                      res.agent.act(x, deterministic=True))
    for k, v in res.agent.state_dict().items():
        np.testing.assert_array_equal(agent.state_dict()[k], v)


# --- command line ---------------------------------------------------------


def test_cli_theory_check(tmp_path, capsys):
    out = tmp_path / "report.json"
    code = main(["theory-check", "--instances", "10", "--states", "4", "--actions", "2",
                 "--out", str(out)])
    assert code == 0
    report = json.loads(out.read_text())
    assert report["passed"] is True
    assert json.loads(capsys.readouterr().out)["passed"] is True


def test_cli_train_and_gamma_dump(tmp_path, capsys):
    from adagamma.config import dump_config
    cfg_path = tmp_path / "cfg.ini"
    cfg_path.write_text(dump_config(_tiny()))
    assert main(["train", str(cfg_path), "--out", str(tmp_path / "run")]) == 0
    snap = tmp_path / "run" / "snapshot_seed_0.npz"
    assert snap.exists() and (tmp_path / "run" / "seed_0.csv").exists()
    capsys.readouterr()
    assert main(["gamma-dump", str(snap), str(cfg_path), "--episodes", "2",
                 "--min-per-zone", "10", "--out", str(tmp_path / "dump")]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert 0.9 <= payload["mean"] <= 0.999
    assert (tmp_path / "dump" / "gamma_histogram.csv").exists()


def test_cli_sweep_and_config_error(tmp_path, capsys):
    from adagamma.config import dump_config
    cfg_path = tmp_path / "cfg.ini"
    cfg_path.write_text(dump_config(_tiny(steps=150)))
    assert main(["sweep", str(cfg_path), "--seeds", "0,1", "--out", str(tmp_path / "sw")]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert [r["seed"] for r in payload["per_seed"]] == [0, 1]
    bad = tmp_path / "bad.ini"
    bad.write_text("[gamma]\ngamma_max = 1.0\n")
    assert main(["train", str(bad)]) == 2
