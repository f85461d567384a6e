"""Soft Actor-Critic with a state-dependent discount in the critic target."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import GammaSection, RunConfig, SacSection, config_for_env
from .envs import make_env
from .gamma import (GammaLossWeights, GammaNet, NStepBatch, ReferenceDiscount,
                    TdBatch, UncertaintyGamma, cross_validated_loss,
                    full_gamma_loss, naive_td_gamma_loss, split_batch)
from .numerics import (LOG_STD_MAX, LOG_STD_MIN, Adam, Mlp, NonFiniteGradientError,
                       RngStreams, clip_grad_norm, softplus, soft_update)
from .runlog import RunLog

logger = logging.getLogger(__name__)

LOG2 = math.log(2.0)
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
LEARNED_VARIANTS = ("adagamma-rc", "cross-validated", "naive-td")


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    terminal: bool
    episode: int
    step: int


class ReplayBuffer:
    """Ring buffer that remembers episode ids and step indices so that windows
    of consecutive transitions can be cut without crossing episodes."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        self.capacity = int(capacity)
        self.states = np.zeros((self.capacity, obs_dim))
        self.actions = np.zeros((self.capacity, act_dim))
        self.rewards = np.zeros(self.capacity)
        self.next_states = np.zeros((self.capacity, obs_dim))
        self.terminal = np.zeros(self.capacity)
        self.episode = np.full(self.capacity, -1, dtype=np.int64)
        self.step = np.full(self.capacity, -1, dtype=np.int64)
        self.ptr = 0
        self.size = 0

    def __len__(self):
        return self.size

    def add(self, state, action, reward, next_state, terminal, episode, step):
        i = self.ptr
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self.terminal[i] = float(terminal)
        self.episode[i] = episode
        self.step[i] = step
        self.ptr = (self.ptr + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def add_transition(self, t: Transition):
        self.add(t.state, t.action, t.reward, t.next_state, t.terminal, t.episode, t.step)

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(0, self.size, size=batch_size)

    def batch(self, idx) -> TdBatch:
        return TdBatch(self.states[idx], self.actions[idx], self.rewards[idx],
                       self.next_states[idx], self.terminal[idx])

    def sample(self, batch_size: int, rng: np.random.Generator) -> TdBatch:
        return self.batch(self.sample_indices(batch_size, rng))

    def windows(self, idx, n: int) -> NStepBatch:
        """Windows of up to ``n`` transitions starting at buffer slots ``idx``.

        A window stops after a true terminal, at an episode change, or at the
        newest stored transition.
        """
        idx = np.asarray(idx)
        k = np.arange(n)
        slots = (idx[:, None] + k[None, :]) % self.capacity
        # slots not yet written (or older than the write pointer wraps to) never match
        ok = (self.episode[slots] == self.episode[idx][:, None]) & \
             (self.step[slots] == self.step[idx][:, None] + k[None, :])
        if self.size < self.capacity:
            ok &= (idx[:, None] + k[None, :]) < self.size
        # no transition after a terminal belongs to the window
        term_before = np.zeros_like(ok)
        term_before[:, 1:] = np.cumsum(self.terminal[slots][:, :-1], axis=1) > 0
        ok &= ~term_before
        ok = np.cumprod(ok, axis=1).astype(bool)
        lengths = ok.sum(axis=1)
        last = slots[np.arange(len(idx)), lengths - 1]
        rewards = np.where(ok, self.rewards[slots], 0.0)
        return NStepBatch(
            states=self.states[idx],
            rewards=rewards,
            lengths=lengths,
            next_states=self.next_states[idx],
            boot_states=self.next_states[last],
            boot_mask=1.0 - self.terminal[last],
            terminal=self.terminal[idx],
        )

    def sample_nstep(self, batch_size: int, n: int, rng: np.random.Generator) -> NStepBatch:
        return self.windows(self.sample_indices(batch_size, rng), n)


# ---------------------------------------------------------------------------
# squashed Gaussian policy


def squash_log_correction(u):
    """``log(1 - tanh(u)^2)`` evaluated stably."""
    return 2.0 * (LOG2 - u - softplus(-2.0 * u))


class SquashedGaussianPolicy:
    """tanh-squashed diagonal Gaussian; actions live in ``[-1, 1]``."""

    def __init__(self, obs_dim: int, act_dim: int, hidden: int, rng):
        self.act_dim = act_dim
        self.net = Mlp([obs_dim, hidden, hidden, 2 * act_dim], rng)

    @property
    def params(self):
        return self.net.params

    def head(self, states, return_cache=False):
        out = self.net.forward(np.atleast_2d(states), return_cache=return_cache)
        out, cache = out if return_cache else (out, None)
        mu, raw = out[:, :self.act_dim], out[:, self.act_dim:]
        return mu, raw, np.clip(raw, LOG_STD_MIN, LOG_STD_MAX), cache

    def sample(self, states, eps):
        mu, _, log_std, _ = self.head(states)
        u = mu + np.exp(log_std) * eps
        a = np.tanh(u)
        logp = np.sum(-0.5 * eps ** 2 - log_std - HALF_LOG_2PI - squash_log_correction(u), axis=1)
        return a, logp

    def mean_action(self, states):
        mu, _, _, _ = self.head(states)
        return np.tanh(mu)


# ---------------------------------------------------------------------------
# agent


class SacAgent:
    """Actor, twin critics with targets, temperature and the discount module.

    The discount module depends on ``gamma_cfg.variant``: a constant for
    ``fixed``, a :class:`GammaNet` for the learned variants, or an
    :class:`UncertaintyGamma` driven by twin-critic disagreement.
    """

    def __init__(self, obs_dim: int, act_dim: int, sac_cfg: SacSection,
                 gamma_cfg: GammaSection, rng: np.random.Generator, action_high: float = 1.0):
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.cfg, self.gcfg = sac_cfg, gamma_cfg
        self.action_high = float(action_high)
        h = sac_cfg.hidden
        self.policy = SquashedGaussianPolicy(obs_dim, act_dim, h, rng)
        self.q1 = Mlp([obs_dim + act_dim, h, h, 1], rng)
        self.q2 = Mlp([obs_dim + act_dim, h, h, 1], rng)
        self.q1_targ = self.q1.copy()
        self.q2_targ = self.q2.copy()
        self.log_alpha = np.array([math.log(sac_cfg.alpha_init)])
        self.target_entropy = -float(act_dim)
        self.actor_opt = Adam(self.policy.params, lr=sac_cfg.actor_lr)
        self.critic_opt = Adam(self.q1.params + self.q2.params, lr=sac_cfg.critic_lr)
        self.alpha_opt = Adam([self.log_alpha], lr=sac_cfg.alpha_lr)
        self.variant = gamma_cfg.variant
        self.gamma_net: Optional[GammaNet] = None
        self.gamma_opt: Optional[Adam] = None
        self.ref: Optional[ReferenceDiscount] = None
        self.uncertainty: Optional[UncertaintyGamma] = None
        if self.variant in LEARNED_VARIANTS:
            self.gamma_net = GammaNet(obs_dim, gamma_cfg.hidden, gamma_cfg.gamma_min,
                                      gamma_cfg.gamma_max, gamma_cfg.gamma_init,
                                      gamma_cfg.boundary_margin, rng)
            self.gamma_opt = Adam(self.gamma_net.params, lr=gamma_cfg.lr)
            self.ref = ReferenceDiscount(gamma_cfg.ref_init, gamma_cfg.ref_tau,
                                         gamma_cfg.ref_period, gamma_cfg.ref_adaptive,
                                         gamma_cfg.ref_after_warmup, gamma_cfg.gamma_min,
                                         gamma_cfg.gamma_max)
            self.weights = GammaLossWeights(gamma_cfg.lambda_rc, gamma_cfg.lambda_dev,
                                            gamma_cfg.lambda_var, gamma_cfg.lambda_bound,
                                            gamma_cfg.gamma_target)
        elif self.variant == "uncertainty":
            self.uncertainty = UncertaintyGamma(gamma_cfg.gamma_min, gamma_cfg.gamma_max,
                                                gamma_cfg.uncertainty_beta,
                                                gamma_cfg.uncertainty_eta,
                                                gamma_cfg.uncertainty_lr)
        self.skipped_updates = 0
        self.last_gamma_terms = {"rc": math.nan, "dev": math.nan, "var": math.nan, "bound": math.nan}

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha[0]))

    # -- evaluation helpers (no gradients) ---------------------------------

    def critic_values(self, states, actions, target=False):
        q1, q2 = (self.q1_targ, self.q2_targ) if target else (self.q1, self.q2)
        x = np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=1)
        return q1.forward(x)[:, 0], q2.forward(x)[:, 0]

    def soft_value(self, states, eps, target=True):
        """``min_i Q_i(s, a') - alpha * log pi(a'|s)`` with ``a'`` drawn via ``eps``."""
        a, logp = self.policy.sample(states, eps)
        q1, q2 = self.critic_values(states, a, target=target)
        return np.minimum(q1, q2) - self.alpha * logp

    def disagreement(self, states, actions):
        q1, q2 = self.critic_values(states, actions)
        return np.abs(q1 - q2)

    def discount(self, states, actions=None) -> np.ndarray:
        states = np.atleast_2d(states)
        if self.variant == "fixed":
            return np.full(len(states), self.gcfg.fixed_gamma)
        if self.uncertainty is not None:
            return self.uncertainty(self.disagreement(states, actions))
        return self.gamma_net(states)

    def act(self, obs, rng: Optional[np.random.Generator] = None, deterministic=False):
        """Action in environment units for a single observation."""
        obs = np.atleast_2d(obs)
        if deterministic:
            a = self.policy.mean_action(obs)
        else:
            a, _ = self.policy.sample(obs, rng.standard_normal((1, self.act_dim)))
        return a[0] * self.action_high

    # -- snapshots -----------------------------------------------------------

    def state_dict(self) -> dict:
        out = {}
        for name, net in (("policy", self.policy.net), ("q1", self.q1), ("q2", self.q2),
                          ("q1_targ", self.q1_targ), ("q2_targ", self.q2_targ)):
            for i, p in enumerate(net.params):
                out[f"{name}.{i}"] = p
        out["log_alpha"] = self.log_alpha
        if self.gamma_net is not None:
            for i, p in enumerate(self.gamma_net.params):
                out[f"gamma.{i}"] = p
            out["gamma_ref"] = np.array([self.ref.value])
        if self.uncertainty is not None:
            out["uncertainty_beta"] = self.uncertainty.beta
        return out

    def load_state_dict(self, state: dict) -> None:
        for name, net in (("policy", self.policy.net), ("q1", self.q1), ("q2", self.q2),
                          ("q1_targ", self.q1_targ), ("q2_targ", self.q2_targ)):
            net.load([state[f"{name}.{i}"] for i in range(len(net.params))])
        self.log_alpha[...] = state["log_alpha"]
        if self.gamma_net is not None:
            self.gamma_net.mlp.load([state[f"gamma.{i}"] for i in range(len(self.gamma_net.params))])
            self.ref.value = float(np.asarray(state["gamma_ref"])[0])
        if self.uncertainty is not None:
            self.uncertainty.beta[...] = state["uncertainty_beta"]


# ---------------------------------------------------------------------------
# losses


def sac_target(agent: SacAgent, batch: TdBatch, eps, gammas=None) -> np.ndarray:
    """Critic target ``r + gamma(s_t) (1 - d) [min_i Qbar_i(s', a') - alpha log pi(a'|s')]``.

    The discount is evaluated at the current state ``s_t`` and carries no
    gradient. ``eps`` are the standard-normal draws that generate ``a'``.
    """
    if gammas is None:
        gammas = agent.discount(batch.states, batch.actions)
    v_next = agent.soft_value(batch.next_states, eps, target=True)
    return batch.rewards + gammas * (1.0 - batch.terminal) * v_next


def critic_loss(agent: SacAgent, batch: TdBatch, targets):
    """Twin-critic squared error; returns ``(loss, grads)`` for ``q1 + q2`` params."""
    x = np.concatenate([batch.states, batch.actions], axis=1)
    B = len(batch)
    q1, c1 = agent.q1.forward(x, return_cache=True)
    q2, c2 = agent.q2.forward(x, return_cache=True)
    e1, e2 = q1[:, 0] - targets, q2[:, 0] - targets
    loss = float(np.mean(e1 ** 2) + np.mean(e2 ** 2))
    g1, _ = agent.q1.backward(c1, (2.0 * e1 / B)[:, None], input_grad=False)
    g2, _ = agent.q2.backward(c2, (2.0 * e2 / B)[:, None], input_grad=False)
    return loss, g1 + g2


def policy_loss(agent: SacAgent, states, eps, alpha: Optional[float] = None):
    """Reparameterized ``mean(alpha log pi(a|s) - min_i Q_i(s, a))``.

    Returns ``(loss, actor_grads, logp)``.
    """
    alpha = agent.alpha if alpha is None else alpha
    pol = agent.policy
    states = np.atleast_2d(states)
    B, A = len(states), agent.act_dim
    mu, raw, log_std, cache = pol.head(states, return_cache=True)
    std = np.exp(log_std)
    u = mu + std * eps
    a = np.tanh(u)
    logp = np.sum(-0.5 * eps ** 2 - log_std - HALF_LOG_2PI - squash_log_correction(u), axis=1)
    x = np.concatenate([states, a], axis=1)
    q1, c1 = agent.q1.forward(x, return_cache=True)
    q2, c2 = agent.q2.forward(x, return_cache=True)
    use1 = q1[:, 0] <= q2[:, 0]
    qmin = np.where(use1, q1[:, 0], q2[:, 0])
    loss = float(np.mean(alpha * logp - qmin))
    ones = np.ones((B, 1))
    _, gx1 = agent.q1.backward(c1, ones)
    _, gx2 = agent.q2.backward(c2, ones)
    dq_da = np.where(use1[:, None], gx1[:, -A:], gx2[:, -A:])
    dl_du = (alpha * 2.0 * a - dq_da * (1.0 - a * a)) / B
    dl_dlogstd = dl_du * std * eps - alpha / B
    dl_draw = dl_dlogstd * ((raw > LOG_STD_MIN) & (raw < LOG_STD_MAX))
    grads, _ = pol.net.backward(cache, np.concatenate([dl_du, dl_draw], axis=1), input_grad=False)
    return loss, grads, logp


def alpha_loss(agent: SacAgent, logp):
    """``mean(-alpha (log pi + target_entropy))`` and its gradient in ``log alpha``."""
    alpha = agent.alpha
    m = float(np.mean(logp + agent.target_entropy))
    return -alpha * m, [np.array([-alpha * m])]


def _apply(opt: Adam, grads, max_norm, agent: SacAgent, what: str) -> bool:
    grads, _ = clip_grad_norm(grads, max_norm)
    try:
        opt.step(grads)
    except NonFiniteGradientError:
        agent.skipped_updates += 1
        logger.warning("non-finite %s gradient; update skipped", what)
        return False
    return True


def sac_critic_update(agent: SacAgent, batch: TdBatch, rng: np.random.Generator) -> float:
    eps = rng.standard_normal((len(batch), agent.act_dim))
    gammas = agent.discount(batch.states, batch.actions)
    targets = sac_target(agent, batch, eps, gammas)
    if agent.uncertainty is not None:
        _uncertainty_beta_step(agent, batch, targets, eps)
    loss, grads = critic_loss(agent, batch, targets)
    if not np.isfinite(loss):
        agent.skipped_updates += 1
        logger.warning("non-finite critic loss; update skipped")
        return loss
    _apply(agent.critic_opt, grads, agent.cfg.max_grad_norm, agent, "critic")
    return loss


def _uncertainty_beta_step(agent: SacAgent, batch: TdBatch, targets, eps):
    # d(critic loss)/d(gamma) through the target, then chain to beta
    q1, q2 = agent.critic_values(batch.states, batch.actions)
    v_next = agent.soft_value(batch.next_states, eps, target=True)
    B = len(batch)
    dl_dy = -2.0 * ((q1 - targets) + (q2 - targets)) / B
    dl_dgamma = dl_dy * (1.0 - batch.terminal) * v_next
    d = np.abs(q1 - q2)
    try:
        agent.uncertainty.step(d, dl_dgamma)
    except NonFiniteGradientError:
        agent.skipped_updates += 1


def sac_policy_update(agent: SacAgent, batch: TdBatch, rng: np.random.Generator):
    eps = rng.standard_normal((len(batch), agent.act_dim))
    loss, grads, logp = policy_loss(agent, batch.states, eps)
    if np.isfinite(loss):
        _apply(agent.actor_opt, grads, agent.cfg.max_grad_norm, agent, "policy")
    else:
        agent.skipped_updates += 1
    return loss, logp


def sac_alpha_update(agent: SacAgent, logp) -> float:
    if not agent.cfg.autotune_alpha:
        return 0.0
    loss, grads = alpha_loss(agent, logp)
    _apply(agent.alpha_opt, grads, None, agent, "alpha")
    return loss


def gamma_update(agent: SacAgent, buffer: ReplayBuffer, rng: np.random.Generator):
    """One gradient step on the discount network with the configured objective."""
    if agent.gamma_net is None:
        return None
    B, A = agent.cfg.batch_size, agent.act_dim
    net = agent.gamma_net
    if agent.variant == "adagamma-rc":
        n = agent.gcfg.n_step
        batch = buffer.sample_nstep(B, n, rng)

        def value_fn(states):
            return agent.soft_value(states, rng.standard_normal((len(states), A)), target=True)

        res = full_gamma_loss(net, batch, value_fn, agent.ref, agent.weights, n)
    elif agent.variant == "naive-td":
        batch = buffer.sample(B, rng)

        def value_fn(b):
            q1, q2 = agent.critic_values(b.states, b.actions)
            eps = rng.standard_normal((len(b), A))
            return 0.5 * (q1 + q2), agent.soft_value(b.next_states, eps, target=True)

        res = naive_td_gamma_loss(net, batch, value_fn)
    else:
        batch = buffer.sample(B, rng)
        ia, ib = split_batch(len(batch), rng)
        half_a, half_b = batch.subset(ia), batch.subset(ib)
        snap = _critic_snapshot_after_step(agent, half_a, rng)

        def value_fn(b):
            x = np.concatenate([b.states, b.actions], axis=1)
            v = 0.5 * (snap[0].forward(x)[:, 0] + snap[1].forward(x)[:, 0])
            eps = rng.standard_normal((len(b), A))
            return v, agent.soft_value(b.next_states, eps, target=True)

        res = cross_validated_loss(net, half_a, half_b, value_fn)
    agent.last_gamma_terms = {k: res.terms.get(k, math.nan) for k in ("rc", "dev", "var", "bound")}
    if "td" in res.terms:
        agent.last_gamma_terms["rc"] = res.terms["td"]
    if np.isfinite(res.total):
        _apply(agent.gamma_opt, res.grads, agent.cfg.max_grad_norm, agent, "gamma")
    return res


def _critic_snapshot_after_step(agent: SacAgent, half: TdBatch, rng):
    """Copies of the critics after one optimizer step on ``half`` only."""
    eps = rng.standard_normal((len(half), agent.act_dim))
    targets = sac_target(agent, half, eps)
    q1, q2 = agent.q1.copy(), agent.q2.copy()
    shadow = SacAgent.__new__(SacAgent)
    shadow.q1, shadow.q2 = q1, q2
    _, grads = critic_loss(shadow, half, targets)
    opt = agent.critic_opt.copy_for(q1.params + q2.params)
    grads, _ = clip_grad_norm(grads, agent.cfg.max_grad_norm)
    try:
        opt.step(grads)
    except NonFiniteGradientError:
        pass
    return q1, q2


def sac_train_step(agent: SacAgent, buffer: ReplayBuffer, rng: np.random.Generator,
                   gamma_rng: Optional[np.random.Generator] = None, gamma_due: bool = False) -> dict:
    """Critic, actor and temperature updates, an optional gamma update, then
    the target-network soft update."""
    batch = buffer.sample(agent.cfg.batch_size, rng)
    c_loss = sac_critic_update(agent, batch, rng)
    p_loss, logp = sac_policy_update(agent, batch, rng)
    sac_alpha_update(agent, logp)
    if gamma_due:
        gamma_update(agent, buffer, gamma_rng)
    soft_update(agent.q1_targ, agent.q1, agent.cfg.tau)
    soft_update(agent.q2_targ, agent.q2, agent.cfg.tau)
    return {"critic_loss": c_loss, "policy_loss": p_loss}


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    log: RunLog
    agent: object
    env_steps: int = 0
    episodes: int = 0
    extra: dict = field(default_factory=dict)


def evaluate(agent, env, episodes: int, rng: np.random.Generator):
    """Mean and std of undiscounted returns under the deterministic policy."""
    returns = []
    for _ in range(episodes):
        obs = env.reset(rng)
        total, done = 0.0, False
        while not done:
            res = env.step(agent.act(obs, deterministic=True), rng)
            total += res.reward
            obs = res.next_state
            done = res.terminal or res.truncated
        returns.append(total)
    return float(np.mean(returns)), float(np.std(returns))


def gamma_stats(agent: SacAgent, buffer: ReplayBuffer, rng) -> tuple[float, float, float]:
    if agent.variant == "fixed":
        g = agent.gcfg.fixed_gamma
        return g, g, g
    idx = buffer.sample_indices(agent.cfg.batch_size, rng)
    gam = agent.discount(buffer.states[idx], buffer.actions[idx])
    return float(gam.mean()), float(gam.min()), float(gam.max())


def sac_train(config: RunConfig, env=None, seed: Optional[int] = None,
              log_path: Optional[Path] = None, callback=None) -> TrainResult:
    """Full SAC loop with the discount module chosen by ``config.gamma.variant``.

    One gradient step per environment step once ``learning_starts``
    transitions are stored (uniform random actions before that). Learned
    discount networks train every ``gamma.update_freq`` steps once
    ``gamma.warmup`` steps have elapsed; the reference discount is updated
    every ``gamma.ref_period`` episodes after warmup.
    """
    if config.run.algorithm != "sac":
        raise ValueError("sac_train needs run.algorithm = sac")
    if config.run.env == "tabular":
        raise ValueError("the tabular environment is for theory checks only")
    seed = config.run.seeds[0] if seed is None else seed
    streams = RngStreams(seed)
    env = env if env is not None else make_env(config.run.env, **config_for_env(config))
    eval_env = make_env(config.run.env, **config_for_env(config))
    sc, gc, rc = config.sac, config.gamma, config.run
    agent = SacAgent(env.obs_dim, env.action_dim, sc, gc, streams.init, env.action_high)
    buffer = ReplayBuffer(min(sc.buffer_size, rc.max_steps), env.obs_dim, env.action_dim)
    log = RunLog(log_path)
    obs = env.reset(streams.env)
    episode, ep_step = 0, 0
    c_losses, p_losses = [], []
    last_eval = (math.nan, math.nan)
    trainable = agent.gamma_net is not None
    try:
        for step in range(1, rc.max_steps + 1):
            if len(buffer) < sc.learning_starts:
                a = streams.agent.uniform(-1.0, 1.0, size=env.action_dim)
            else:
                a, _ = agent.policy.sample(obs[None, :], streams.agent.standard_normal((1, env.action_dim)))
                a = a[0]
            res = env.step(a * env.action_high, streams.env)
            buffer.add(obs, a, res.reward, res.next_state, res.terminal, episode, ep_step)
            obs, ep_step = res.next_state, ep_step + 1
            warm = step >= gc.warmup
            if res.terminal or res.truncated:
                episode += 1
                obs, ep_step = env.reset(streams.env), 0
                if trainable and episode % gc.ref_period == 0 and len(buffer) > 0:
                    idx = buffer.sample_indices(sc.batch_size, streams.gamma)
                    agent.ref.update(float(agent.gamma_net(buffer.states[idx]).mean()), warm)
            if len(buffer) >= sc.learning_starts:
                for g in range(sc.grad_steps):
                    due = trainable and warm and g == 0 and step % gc.update_freq == 0
                    out = sac_train_step(agent, buffer, streams.agent, streams.gamma, due)
                    c_losses.append(out["critic_loss"])
                    p_losses.append(out["policy_loss"])
            do_eval = step % rc.eval_interval == 0
            if do_eval:
                last_eval = evaluate(agent, eval_env, rc.eval_episodes, streams.eval)
            if do_eval or step % rc.log_interval == 0:
                mg = gamma_stats(agent, buffer, streams.gamma)
                t = agent.last_gamma_terms
                log.append(step=step, episode=episode,
                           eval_return_mean=last_eval[0] if do_eval else math.nan,
                           eval_return_std=last_eval[1] if do_eval else math.nan,
                           mean_gamma=mg[0], min_gamma=mg[1], max_gamma=mg[2],
                           gamma_loss_rc=t["rc"], gamma_loss_dev=t["dev"],
                           gamma_loss_var=t["var"], gamma_loss_bound=t["bound"],
                           critic_loss=np.mean(c_losses) if c_losses else math.nan,
                           policy_loss=np.mean(p_losses) if p_losses else math.nan,
                           alpha=agent.alpha,
                           gamma_ref=agent.ref.value if agent.ref is not None else math.nan)
                c_losses, p_losses = [], []
                if callback is not None:
                    callback(log.rows[-1], agent)
                if (do_eval and rc.stop_at_return is not None
                        and last_eval[0] >= rc.stop_at_return):
                    break
    finally:
        log.close()
    return TrainResult(log, agent, step, episode, {"buffer": buffer})
