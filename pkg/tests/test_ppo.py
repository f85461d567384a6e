import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adagamma.config import RunConfig
from adagamma.envs import CorridorEnv
from adagamma.numerics import grad_check, make_rng
from adagamma.ppo import (PpoAgent, _Collector, action_std, gae_adaptive, gae_expansion,
                          normalize_advantages, nstep_value_target, ppo_gamma_update,
                          ppo_policy_loss, ppo_train, ppo_update, prepare_rollout,
                          rollout_windows, td_residuals, value_loss)


def _cfg(variant="adagamma-rc", **ppo):
    base = dict(hidden=8, rollout=64, minibatch=16, epochs=2)
    base.update(ppo)
    return RunConfig().replace(run={"algorithm": "ppo", "env": "corridor"},
                               ppo=base, gamma={"variant": variant, "hidden": 8})


def _agent(variant="adagamma-rc", seed=0, **ppo):
    cfg = _cfg(variant, **ppo)
    return PpoAgent(1, 1, cfg.ppo, cfg.gamma, make_rng(seed)), cfg


def _rollout(agent, T=64, seed=0):
    col = _Collector(CorridorEnv(horizon=20), make_rng(seed))
    return col.collect(agent, T, make_rng(seed + 1))


# --- residuals and advantages ---------------------------------------------


def test_td_residuals_zero_value_is_reward():
    r = np.array([1.0, -2.0, 0.5])
    np.testing.assert_array_equal(td_residuals(r, np.zeros(3), np.zeros(3), np.full(3, 0.9),
                                               np.zeros(3)), r)


def test_td_residuals_terminal_masks_bootstrap():
    d = td_residuals([1.0, 1.0], [0.5, 0.5], [4.0, 4.0], [0.9, 0.9], [0.0, 1.0])
    np.testing.assert_allclose(d, [1.0 + 3.6 - 0.5, 0.5])


def test_gae_lambda_zero_is_delta():
    rng = make_rng(0)
    d = rng.standard_normal(20)
    np.testing.assert_array_equal(gae_adaptive(d, rng.random(20), 0.0), d)


def test_gae_constant_gamma_is_standard_gae():
    rng = make_rng(1)
    d = rng.standard_normal(30)
    g, lam = 0.97, 0.9
    ref = [sum((g * lam) ** l * d[t + l] for l in range(30 - t)) for t in range(30)]
    np.testing.assert_allclose(gae_adaptive(d, np.full(30, g), lam), ref, rtol=1e-12)


@settings(max_examples=200, deadline=None)
@given(T=st.integers(1, 64), seed=st.integers(0, 2**31), lam=st.floats(0.0, 1.0))
def test_recursion_equals_expansion(T, seed, lam):
    rng = np.random.default_rng(seed)
    d = rng.standard_normal(T)
    g = rng.random(T)
    rec = gae_adaptive(d, g, lam)
    for t in range(T):
        exp = gae_expansion(d, g, lam, t)
        assert abs(rec[t] - exp) <= 1e-12 * max(1.0, abs(exp))


def test_expansion_base_case():
    assert gae_expansion(np.array([3.0, 2.0]), np.array([0.5, 0.5]), 0.9, 1) == 2.0


def test_low_interior_gamma_scales_later_contributions():
    T, lam = 10, 0.95
    d = np.zeros(T)
    d[7] = 1.0
    hi = np.full(T, 0.999)
    lo = hi.copy()
    lo[3] = 0.9
    a_hi = gae_expansion(d, hi, lam, 0)
    a_lo = gae_expansion(d, lo, lam, 0)
    assert a_lo == pytest.approx(a_hi * 0.9 / 0.999, rel=1e-12)
    # contributions before the cut are untouched
    d2 = np.zeros(T)
    d2[2] = 1.0
    assert gae_expansion(d2, lo, lam, 0) == gae_expansion(d2, hi, lam, 0)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31), j=st.integers(0, 14), shrink=st.floats(0.0, 1.0))
def test_segmentation_monotone(seed, j, shrink):
    rng = np.random.default_rng(seed)
    T, lam = 16, 0.9
    g = rng.random(T)
    lowered = g.copy()
    lowered[j] *= shrink
    for l in range(j + 1, T):
        d = np.zeros(T)
        d[l] = rng.standard_normal()
        assert abs(gae_expansion(d, lowered, lam, 0)) <= abs(gae_expansion(d, g, lam, 0)) + 1e-15


def test_gae_restarts_at_segment_ends():
    d = np.ones(6)
    g = np.full(6, 0.5)
    ends = np.array([False, False, True, False, False, True])
    out = gae_adaptive(d, g, 1.0, ends)
    np.testing.assert_allclose(out[:3], gae_adaptive(d[:3], g[:3], 1.0))
    np.testing.assert_allclose(out[3:], gae_adaptive(d[3:], g[3:], 1.0))


# --- n-step targets -------------------------------------------------------


def test_nstep_one_step():
    r, g, v = np.array([1.0, 2.0]), np.array([0.9, 0.8]), np.array([5.0, 7.0])
    ends = np.array([False, True])
    assert nstep_value_target(r, g, v, np.zeros(2), ends, 0, 1) == pytest.approx(1.0 + 0.9 * 5.0)


def test_nstep_equal_gammas_is_standard():
    r = np.arange(1.0, 6.0)
    g = np.full(5, 0.9)
    v = np.full(5, 10.0)
    ends = np.array([False] * 4 + [True])
    expected = sum(0.9 ** k * r[k] for k in range(3)) + 0.9 ** 3 * 10.0
    assert nstep_value_target(r, g, v, np.zeros(5), ends, 0, 3) == pytest.approx(expected)


def test_nstep_random_against_straight_line():
    rng = make_rng(3)
    T, n = 12, 4
    r, g, v = rng.standard_normal(T), rng.random(T), rng.standard_normal(T)
    term = np.zeros(T)
    term[5] = 1.0
    ends = np.zeros(T, dtype=bool)
    ends[[5, 11]] = True
    for t in range(T):
        seg_end = 5 if t <= 5 else 11
        L = min(n, seg_end - t + 1)
        ref, w = 0.0, 1.0
        for k in range(L):
            ref += w * r[t + k]
            w *= g[t + k]
        if not term[t + L - 1]:
            ref += w * v[t + L - 1]
        assert nstep_value_target(r, g, v, term, ends, t, n) == pytest.approx(ref, rel=1e-12)


def test_nstep_rejects_zero_horizon():
    with pytest.raises(ValueError):
        nstep_value_target(np.ones(2), np.ones(2), np.ones(2), np.zeros(2), [False, True], 0, 0)


# --- normalization --------------------------------------------------------


def test_normalize_examples():
    np.testing.assert_array_equal(normalize_advantages([1.0, -1.0]), [1.0, -1.0])
    np.testing.assert_array_equal(normalize_advantages(np.full(5, 3.0)), np.zeros(5))
    with pytest.raises(ValueError):
        normalize_advantages([1.0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=200))
def test_normalize_property(xs):
    out = normalize_advantages(xs)
    if np.all(out == 0):
        return
    assert abs(out.mean()) <= 1e-12
    assert abs(out.std() - 1.0) <= 1e-9


# --- losses ---------------------------------------------------------------


def _policy_batch(agent, seed=0, B=16):
    rng = make_rng(seed)
    s = rng.uniform(0, 10, (B, 1))
    a = rng.standard_normal((B, 1))
    adv = rng.standard_normal(B)
    return s, a, adv


def test_surrogate_gradient_matches_fd():
    agent, _ = _agent()
    s, a, adv = _policy_batch(agent)
    # an old policy a little off the current one so clipping is active on some samples
    old = agent.log_prob(agent.actor.forward(s), a) + make_rng(5).normal(0, 0.3, len(adv))

    def lg():
        return ppo_policy_loss(agent, s, a, old, adv, 0.2, 0.01)

    assert grad_check(lg, agent.actor.params) < 1e-4


def test_ratio_one_gives_vanilla_policy_gradient():
    agent, _ = _agent()
    s, a, adv = _policy_batch(agent, 1)
    old = agent.log_prob(agent.actor.forward(s), a)
    _, grads = ppo_policy_loss(agent, s, a, old, adv, 0.2)

    def vanilla():
        return float(-np.mean(adv * agent.log_prob(agent.actor.forward(s), a)))

    h = 1e-6
    for p, g in zip(agent.actor.params, grads):
        flat, gf = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = vanilla()
            flat[i] = orig - h
            fm = vanilla()
            flat[i] = orig
            assert abs((fp - fm) / (2 * h) - gf[i]) <= 1e-6 * max(1.0, abs(gf[i]))


def test_zero_advantage_leaves_entropy_only():
    agent, _ = _agent()
    s, a, _ = _policy_batch(agent, 2)
    old = agent.log_prob(agent.actor.forward(s), a)
    loss, grads = ppo_policy_loss(agent, s, a, old, np.zeros(len(s)), 0.2, 0.01)
    assert loss == pytest.approx(-0.01 * agent.entropy())
    assert all(np.all(g == 0) for g in grads)


def test_value_loss_gradient_matches_fd():
    agent, _ = _agent()
    rng = make_rng(4)
    s, y = rng.uniform(0, 10, (12, 1)), rng.standard_normal(12)
    assert grad_check(lambda: value_loss(agent.critic, s, y), agent.critic.params) < 1e-4


def test_action_std_schedule():
    cfg = _cfg().ppo
    assert action_std(cfg, 0) == 0.5
    assert action_std(cfg, 200_000) == pytest.approx(0.45)
    assert action_std(cfg, 10**9) == cfg.std_floor


# --- rollouts and updates -------------------------------------------------


def test_rollout_windows_cut_at_segment_ends():
    agent, _ = _agent()
    ro = _rollout(agent)
    w = rollout_windows(ro, 10)
    ends = np.flatnonzero(ro.ends)
    for t in range(len(ro)):
        seg_end = ends[ends >= t][0]
        assert w.lengths[t] == min(10, seg_end - t + 1)
    assert ro.ends[-1]


def test_update_keeps_discounts_frozen():
    agent, _ = _agent()
    ro = prepare_rollout(agent, _rollout(agent))
    before = ro.gammas.tobytes()
    ppo_update(agent, ro, make_rng(0))
    assert ro.gammas.tobytes() == before


def test_gamma_update_touches_only_gamma_net():
    agent, _ = _agent()
    ro = prepare_rollout(agent, _rollout(agent))
    nets = [agent.actor, agent.critic]
    before = [p.copy() for n in nets for p in n.params]
    g_before = [p.copy() for p in agent.gamma_net.params]
    ppo_gamma_update(agent, ro)
    after = [p for n in nets for p in n.params]
    assert all(np.array_equal(a, b) for a, b in zip(before, after))
    assert any(not np.array_equal(a, b) for a, b in zip(g_before, agent.gamma_net.params))


def test_advantages_normalized_and_targets_unnormalized():
    agent, _ = _agent()
    ro = prepare_rollout(agent, _rollout(agent))
    assert abs(ro.advantages.mean()) < 1e-12
    raw = gae_adaptive(ro.deltas, ro.gammas, agent.cfg.gae_lambda, ro.ends)
    np.testing.assert_allclose(ro.targets, raw + ro.values)


def test_sac_only_variants_rejected():
    for v in ("cross-validated", "naive-td"):
        with pytest.raises(ValueError):
            _agent(v)


@pytest.mark.parametrize("variant", ["adagamma-rc", "fixed", "uncertainty"])
def test_smoke_train_on_corridor(variant):
    cfg = _cfg(variant).replace(run={"max_steps": 640, "eval_interval": 320, "log_interval": 320,
                                     "eval_episodes": 1},
                                env={"horizon": 50}, gamma={"warmup": 1})
    res = ppo_train(cfg, seed=0)
    assert res.env_steps == 640
    assert len(res.log.rows) == 2
    g = res.log.rows[-1]["mean_gamma"]
    assert 0.9 <= g <= 0.999
    assert np.isfinite(res.log.rows[-1]["eval_return_mean"])


def test_constant_gamma_reduces_to_fixed_bitwise():
    common = dict(run={"max_steps": 640, "eval_interval": 320, "log_interval": 320,
                       "eval_episodes": 1}, env={"horizon": 50})
    ada = _cfg("adagamma-rc").replace(gamma={"gamma_min": 0.99, "gamma_max": 0.99, "warmup": 1},
                                      **common)
    fix = _cfg("fixed").replace(gamma={"fixed_gamma": 0.99}, **common)
    a, f = ppo_train(ada, seed=3), ppo_train(fix, seed=3)
    for name in ("actor", "critic"):
        for pa, pf in zip(getattr(a.agent, name).params, getattr(f.agent, name).params):
            assert pa.tobytes() == pf.tobytes()
    assert [r["eval_return_mean"] for r in a.log.rows] == [r["eval_return_mean"] for r in f.log.rows]
