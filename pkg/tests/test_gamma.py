import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adagamma.gamma import (GammaLossWeights, GammaNet, InvalidHorizonError, InvalidSplitError,
                            NStepBatch, ReferenceDiscount, TdBatch, UncertaintyGamma,
                            cross_validated_loss, full_gamma_loss, gamma_of,
                            naive_td_gamma_loss, nstep_reference_return,
                            return_consistency_loss, split_batch)
from adagamma.numerics import Mlp, grad_check, make_rng


def _random_net(seed=0, hidden=8, obs=2, scale=1.0):
    net = GammaNet(obs, hidden, rng=make_rng(seed))
    rng = make_rng(seed + 100)
    for p in net.params:
        p[...] = scale * rng.standard_normal(p.shape)
    return net


def _nstep_batch(rng, B=12, n=4, obs=2):
    lengths = rng.integers(1, n + 1, size=B)
    rewards = rng.standard_normal((B, n)) * (np.arange(n)[None, :] < lengths[:, None])
    return NStepBatch(states=rng.standard_normal((B, obs)), rewards=rewards, lengths=lengths,
                      next_states=rng.standard_normal((B, obs)),
                      boot_states=rng.standard_normal((B, obs)),
                      boot_mask=(rng.random(B) > 0.3).astype(float),
                      terminal=(rng.random(B) > 0.8).astype(float))


def _value_fn(seed=5, obs=2):
    v = Mlp([obs, 8, 1], make_rng(seed))
    return lambda s: 5.0 + v.forward(s)[:, 0]


def test_init_bias_gives_098():
    net = GammaNet(3, 16, rng=make_rng(0))
    g = net(make_rng(1).standard_normal((50, 3)))
    np.testing.assert_allclose(g, 0.98, atol=1e-12)


def test_zero_logit_net_is_midpoint():
    net = GammaNet(3, 16, init_gamma=None, zero=True)
    assert gamma_of(net, np.zeros(3)) == pytest.approx(0.9495, abs=1e-15)


def test_bounds_on_1e5_states_and_adversarial_inputs():
    net = _random_net(0, hidden=32, obs=3, scale=3.0)
    rng = make_rng(2)
    g = net(rng.standard_normal((100_000, 3)))
    assert g.min() >= 0.9 and g.max() <= 0.999
    huge = net(np.array([[1e300, -1e300, 1e300], [-1e12, 0, 1e12], [0, 0, 0]]))
    assert np.all((huge >= 0.9) & (huge <= 0.999))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=2))
def test_bounds_property(s):
    net = _random_net(1, scale=5.0)
    g = gamma_of(net, np.array(s))
    assert 0.9 <= g <= 0.999


def test_nstep_reference_return_hand_values():
    batch = NStepBatch(states=np.zeros((2, 1)), rewards=np.array([[1.0, 2.0, 3.0], [1.0, 0.0, 0.0]]),
                       lengths=np.array([3, 1]), next_states=np.zeros((2, 1)),
                       boot_states=np.zeros((2, 1)), boot_mask=np.array([1.0, 0.0]),
                       terminal=np.zeros(2))
    out = nstep_reference_return(batch, np.array([10.0, 99.0]), 0.5)
    # 1 + .5*2 + .25*3 + .125*10 ; terminal window drops the bootstrap
    np.testing.assert_allclose(out, [4.0, 1.0])


def test_rc_rejects_bad_horizon():
    rng = make_rng(0)
    batch = _nstep_batch(rng, n=4)
    net = _random_net()
    with pytest.raises(InvalidHorizonError):
        return_consistency_loss(net, batch, _value_fn(), 0.98, 0)
    with pytest.raises(InvalidHorizonError):
        return_consistency_loss(net, batch, _value_fn(), 0.98, 2)


def test_rc_gradient_matches_fd():
    rng = make_rng(3)
    batch = _nstep_batch(rng)
    net = _random_net(3)
    vf = _value_fn()

    def lg():
        r = return_consistency_loss(net, batch, vf, 0.97, 4)
        return r.total, r.grads

    assert grad_check(lg, net.params) < 1e-4


@pytest.mark.parametrize("term", ["rc", "dev", "var", "bound"])
def test_each_full_loss_term_matches_fd(term):
    rng = make_rng(4)
    batch = _nstep_batch(rng)
    # wide logits so the boundary penalty is active on some states
    net = _random_net(4, scale=2.0)
    vf = _value_fn()
    w = {k: 0.0 for k in ("rc", "dev", "var", "bound")}
    w[term] = 1.0
    weights = GammaLossWeights(**w)
    ref = ReferenceDiscount(0.96)

    def lg():
        r = full_gamma_loss(net, batch, vf, ref, weights, 4)
        return r.total, r.grads

    # losses here are O(10); a wider step keeps roundoff out of the difference
    assert grad_check(lg, net.params, h=1e-4) < 1e-4


def test_full_loss_terms_reported():
    rng = make_rng(5)
    batch = _nstep_batch(rng)
    res = full_gamma_loss(_random_net(5), batch, _value_fn(), ReferenceDiscount(0.98),
                          GammaLossWeights(), 4)
    assert set(res.terms) == {"rc", "dev", "var", "bound"}
    w = GammaLossWeights()
    expected = sum(getattr(w, k) * res.terms[k] for k in res.terms)
    assert res.total == pytest.approx(expected, rel=1e-12)


def test_full_loss_leaves_value_params_untouched():
    rng = make_rng(6)
    batch = _nstep_batch(rng)
    value_net = Mlp([2, 8, 1], make_rng(7))
    before = [p.copy() for p in value_net.params]
    res = full_gamma_loss(_random_net(6), batch, lambda s: value_net.forward(s)[:, 0],
                          ReferenceDiscount(0.98), GammaLossWeights(), 4)
    assert len(res.grads) == 6
    for b, p in zip(before, value_net.params):
        np.testing.assert_array_equal(b, p)


def test_rc_penalizes_collapse():
    # collapsing gamma to the floor must not minimize the return-consistency term
    rng = make_rng(8)
    batch = _nstep_batch(rng, B=64)
    batch.terminal[:] = 0.0
    batch.boot_mask[:] = 1.0
    batch.lengths[:] = 4
    batch.rewards[:] = 0.1
    vf = lambda s: np.full(len(s), 10.0)
    ref = ReferenceDiscount(0.98)
    lo = GammaNet(2, 8, init_gamma=0.9001, rng=make_rng(0))
    mid = GammaNet(2, 8, init_gamma=0.98, rng=make_rng(0))
    loss = lambda net: return_consistency_loss(net, batch, vf, ref.value, 4).total
    assert loss(mid) < loss(lo)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5.0, 5.0), min_size=1, max_size=50), st.floats(0.0, 1.0),
       st.floats(-1.0, 2.0))
def test_reference_discount_stays_in_bounds(means, tau, init):
    ref = ReferenceDiscount(value=init, tau=tau)
    assert 0.9 <= ref.value <= 0.999
    for m in means:
        ref.update(m, warm=True)
        assert 0.9 <= ref.value <= 0.999


def test_reference_discount_respects_warmup_and_adaptive_flag():
    ref = ReferenceDiscount(0.98, tau=0.5)
    assert ref.update(0.9, warm=False) == 0.98
    assert ref.update(0.9, warm=True) == pytest.approx(0.94)
    frozen = ReferenceDiscount(0.98, adaptive=False)
    assert frozen.update(0.9) == 0.98


def _td_batch(rng, B=10, obs=2):
    return TdBatch(states=rng.standard_normal((B, obs)), actions=rng.standard_normal((B, 1)),
                   rewards=rng.standard_normal(B), next_states=rng.standard_normal((B, obs)),
                   terminal=(rng.random(B) > 0.8).astype(float))


def test_naive_td_pushes_gamma_down_on_positive_error():
    net = GammaNet(1, 8, rng=make_rng(0))
    batch = TdBatch(np.zeros((4, 1)), np.zeros((4, 1)), np.zeros(4), np.zeros((4, 1)), np.zeros(4))
    res = naive_td_gamma_loss(net, batch, lambda b: (np.zeros(len(b)), np.ones(len(b))))
    # output bias gradient is positive, so a descent step lowers every gamma
    assert res.grads[-1][0] > 0
    stepped = net.params[-1] - 1e-3 * res.grads[-1]
    assert stepped[0] < net.params[-1][0]


def test_naive_td_zero_error_zero_gradient():
    net = _random_net(2, obs=1)
    rng = make_rng(1)
    batch = _td_batch(rng, obs=1)
    gam = net(batch.states)
    v_next = rng.standard_normal(len(batch))
    values = batch.rewards + gam * (1 - batch.terminal) * v_next
    res = naive_td_gamma_loss(net, batch, lambda b: (values, v_next))
    assert res.total == pytest.approx(0.0, abs=1e-25)
    for g in res.grads:
        assert np.max(np.abs(g)) < 1e-12


def test_naive_td_gradient_matches_fd():
    net = _random_net(3)
    rng = make_rng(2)
    batch = _td_batch(rng)
    v, vn = rng.standard_normal(len(batch)), 3 + rng.standard_normal(len(batch))

    def lg():
        r = naive_td_gamma_loss(net, batch, lambda b: (v, vn))
        return r.total, r.grads

    assert grad_check(lg, net.params) < 1e-4


def test_split_batch_is_a_partition():
    a, b = split_batch(11, np.random.default_rng(0))
    assert sorted(np.concatenate([a, b]).tolist()) == list(range(11))
    assert abs(len(a) - len(b)) <= 1
    with pytest.raises(InvalidSplitError):
        split_batch(1, np.random.default_rng(0))


def test_cross_validated_uses_half_b():
    net = _random_net(4)
    rng = make_rng(3)
    a, b = _td_batch(rng, 6), _td_batch(rng, 6)
    seen = []

    def vf(batch):
        seen.append(batch)
        return np.zeros(len(batch)), np.ones(len(batch))

    cross_validated_loss(net, a, b, vf)
    assert seen[0] is b
    empty = TdBatch(*(np.zeros((0,) + x.shape[1:]) for x in (a.states, a.actions, a.rewards,
                                                             a.next_states, a.terminal)))
    with pytest.raises(InvalidSplitError):
        cross_validated_loss(net, empty, b, vf)


def test_uncertainty_rule_examples():
    u = UncertaintyGamma()
    assert u(np.array([0.0]))[0] == pytest.approx(0.9495, abs=1e-15)
    assert u(np.array([1e6]))[0] == pytest.approx(0.9, abs=1e-12)
    with pytest.raises(ValueError):
        u(np.array([-1.0]))


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1e3), st.floats(0, 1e3), st.floats(0.01, 10))
def test_uncertainty_monotone_non_increasing(d1, d2, beta):
    u = UncertaintyGamma(beta=beta)
    lo, hi = sorted([d1, d2])
    g = u(np.array([lo, hi]))
    assert g[1] <= g[0]


def test_uncertainty_beta_gradient_matches_fd():
    u = UncertaintyGamma(beta=1.3)
    d = np.array([0.1, 0.5, 2.0])
    w = np.array([0.3, -1.0, 0.7])
    ga = u.grad_beta(d, w)
    h = 1e-6
    u.beta[0] += h
    fp = float(w @ u(d))
    u.beta[0] -= 2 * h
    fm = float(w @ u(d))
    assert ga == pytest.approx((fp - fm) / (2 * h), rel=1e-6)
