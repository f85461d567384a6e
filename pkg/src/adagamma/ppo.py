"""PPO with per-rollout frozen state-dependent discounts."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .config import GammaSection, PpoSection, RunConfig, config_for_env
from .envs import make_env
from .gamma import (GammaLossWeights, GammaNet, NStepBatch, ReferenceDiscount,
                    UncertaintyGamma, full_gamma_loss)
from .numerics import Adam, Mlp, NonFiniteGradientError, RngStreams, clip_grad_norm
from .runlog import RunLog
from .sac import TrainResult, evaluate

logger = logging.getLogger(__name__)

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
LEARNED_VARIANTS = ("adagamma-rc",)


# ---------------------------------------------------------------------------
# rollout arithmetic


@dataclass
class Rollout:
    """One batch of on-policy experience.

    ``ends[t]`` marks the last step of an episode segment inside the rollout
    (terminal, horizon truncation, or the final rollout step). ``next_values``
    holds ``V(s_{t+1})`` for every step, so truncated steps and the rollout end
    bootstrap from the value of the observed successor; terminal steps are
    masked in :func:`td_residuals`. ``gammas`` are computed once and never
    change during the update.
    """

    states: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    next_states: np.ndarray
    next_values: np.ndarray
    gammas: np.ndarray
    terminal: np.ndarray
    ends: np.ndarray
    deltas: Optional[np.ndarray] = None
    advantages: Optional[np.ndarray] = None
    targets: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.rewards)


def td_residuals(rewards, values, next_values, gammas, terminal) -> np.ndarray:
    """``delta_t = r_t + gamma_t (1 - d_t) V(s_{t+1}) - V(s_t)``."""
    live = 1.0 - np.asarray(terminal, dtype=np.float64)
    return np.asarray(rewards) + np.asarray(gammas) * live * np.asarray(next_values) - np.asarray(values)


def gae_adaptive(deltas, gammas, lam: float, ends=None) -> np.ndarray:
    """Backward recursion ``A_t = delta_t + gamma_t lam A_{t+1}``, restarted
    after every step flagged in ``ends``."""
    deltas = np.asarray(deltas, dtype=np.float64)
    gammas = np.asarray(gammas, dtype=np.float64)
    T = len(deltas)
    ends = np.zeros(T, dtype=bool) if ends is None else np.asarray(ends, dtype=bool)
    adv = np.empty(T)
    nxt = 0.0
    for t in range(T - 1, -1, -1):
        if ends[t]:
            nxt = 0.0
        nxt = deltas[t] + gammas[t] * lam * nxt
        adv[t] = nxt
    return adv


def gae_expansion(deltas, gammas, lam: float, t: int) -> float:
    """Direct sum ``delta_t + sum_l (prod_{k<l} gamma_{t+k}) lam^l delta_{t+l}``
    over one episode segment. Kept as an independent check of the recursion."""
    total = float(deltas[t])
    weight = 1.0
    for l in range(1, len(deltas) - t):
        weight *= gammas[t + l - 1] * lam
        total += weight * deltas[t + l]
    return total


def _segment_end(ends, t: int) -> int:
    j = t
    while not ends[j]:
        j += 1
    return j


def nstep_value_target(rewards, gammas, next_values, terminal, ends, t: int, n: int) -> float:
    """``sum_k (prod_{j<k} gamma_{t+j}) r_{t+k} + (prod_{j<L} gamma_{t+j}) V(s_{t+L})``.

    ``L = min(n, steps left in the segment)``; the bootstrap is dropped when
    the window ends on a terminal.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    stop = min(t + n, _segment_end(ends, t) + 1)
    total, weight = 0.0, 1.0
    for k in range(t, stop):
        total += weight * rewards[k]
        weight *= gammas[k]
    last = stop - 1
    if not terminal[last]:
        total += weight * next_values[last]
    return total


def nstep_value_targets(rollout: Rollout, n: int) -> np.ndarray:
    ends = rollout.ends
    return np.array([nstep_value_target(rollout.rewards, rollout.gammas, rollout.next_values,
                                        rollout.terminal, ends, t, n) for t in range(len(rollout))])


def normalize_advantages(adv, floor: float = 1e-8) -> np.ndarray:
    """Zero mean, unit (population) std. Constant input returns zeros."""
    adv = np.asarray(adv, dtype=np.float64)
    if adv.size < 2:
        raise ValueError("need at least two advantages to normalize")
    centered = adv - adv.mean()
    std = float(np.sqrt(np.mean(centered ** 2)))
    if std < floor:
        logger.info("advantages are constant; normalized to zeros")
        return np.zeros_like(adv)
    return centered / std


def rollout_windows(rollout: Rollout, n: int) -> NStepBatch:
    """n-step windows starting at every rollout step, cut at segment ends."""
    T = len(rollout)
    k = np.arange(n)
    # distance from each step to the end of its segment
    seg_end = np.empty(T, dtype=np.int64)
    nxt = T - 1
    for t in range(T - 1, -1, -1):
        if rollout.ends[t]:
            nxt = t
        seg_end[t] = nxt
    lengths = np.minimum(n, seg_end - np.arange(T) + 1)
    slots = np.minimum(np.arange(T)[:, None] + k[None, :], T - 1)
    valid = k[None, :] < lengths[:, None]
    last = np.arange(T) + lengths - 1
    return NStepBatch(
        states=rollout.states,
        rewards=np.where(valid, rollout.rewards[slots], 0.0),
        lengths=lengths,
        next_states=rollout.next_states,
        boot_states=rollout.next_states[last],
        boot_mask=1.0 - rollout.terminal[last],
        terminal=rollout.terminal.astype(np.float64),
    )


# ---------------------------------------------------------------------------
# agent


def action_std(cfg: PpoSection, env_steps: int) -> float:
    """Stepwise decayed, floored exploration std in normalized action units."""
    return max(cfg.std_floor, cfg.std_init - cfg.std_decay * (env_steps // cfg.std_decay_period))


class PpoAgent:
    """Gaussian policy with a scheduled state-independent std, value network
    and the discount module selected by ``gamma_cfg.variant``.

    The ``uncertainty`` variant adds an auxiliary value network whose
    disagreement with the primary one drives the discount.
    """

    def __init__(self, obs_dim: int, act_dim: int, ppo_cfg: PpoSection,
                 gamma_cfg: GammaSection, rng: np.random.Generator, action_high: float = 1.0):
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.cfg, self.gcfg = ppo_cfg, gamma_cfg
        self.action_high = float(action_high)
        h = ppo_cfg.hidden
        self.actor = Mlp([obs_dim, h, h, act_dim], rng)
        self.critic = Mlp([obs_dim, h, h, 1], rng)
        self.actor_opt = Adam(self.actor.params, lr=ppo_cfg.actor_lr)
        self.critic_opt = Adam(self.critic.params, lr=ppo_cfg.critic_lr)
        self.std = ppo_cfg.std_init
        self.variant = gamma_cfg.variant
        self.gamma_net: Optional[GammaNet] = None
        self.gamma_opt: Optional[Adam] = None
        self.ref: Optional[ReferenceDiscount] = None
        self.uncertainty: Optional[UncertaintyGamma] = None
        self.critic2: Optional[Mlp] = None
        if self.variant in ("cross-validated", "naive-td"):
            raise ValueError(f"gamma variant {self.variant!r} is only wired for SAC")
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
            self.critic2 = Mlp([obs_dim, h, h, 1], rng)
            self.critic2_opt = Adam(self.critic2.params, lr=ppo_cfg.critic_lr)
            self.uncertainty = UncertaintyGamma(gamma_cfg.gamma_min, gamma_cfg.gamma_max,
                                                gamma_cfg.uncertainty_beta,
                                                gamma_cfg.uncertainty_eta,
                                                gamma_cfg.uncertainty_lr)
        self.skipped_updates = 0
        self.last_gamma_terms = {"rc": math.nan, "dev": math.nan, "var": math.nan, "bound": math.nan}

    def value(self, states) -> np.ndarray:
        return self.critic.forward(np.atleast_2d(states))[:, 0]

    def discount(self, states) -> np.ndarray:
        states = np.atleast_2d(states)
        if self.variant == "fixed":
            return np.full(len(states), self.gcfg.fixed_gamma)
        if self.uncertainty is not None:
            return self.uncertainty(self.disagreement(states))
        return self.gamma_net(states)

    def disagreement(self, states) -> np.ndarray:
        return np.abs(self.value(states) - self.critic2.forward(np.atleast_2d(states))[:, 0])

    def log_prob(self, mu, actions) -> np.ndarray:
        z = (actions - mu) / self.std
        return np.sum(-0.5 * z * z - math.log(self.std) - HALF_LOG_2PI, axis=1)

    def entropy(self) -> float:
        return self.act_dim * (0.5 + HALF_LOG_2PI + math.log(self.std))

    def act(self, obs, rng: Optional[np.random.Generator] = None, deterministic=False):
        """Action in environment units for a single observation."""
        mu = self.actor.forward(np.asarray(obs, dtype=np.float64))
        a = mu if deterministic else mu + self.std * rng.standard_normal(self.act_dim)
        return np.clip(a, -1.0, 1.0) * self.action_high

    def state_dict(self) -> dict:
        out = {}
        nets = [("actor", self.actor), ("critic", self.critic)]
        if self.critic2 is not None:
            nets.append(("critic2", self.critic2))
        for name, net in nets:
            for i, p in enumerate(net.params):
                out[f"{name}.{i}"] = p
        out["std"] = np.array([self.std])
        if self.gamma_net is not None:
            for i, p in enumerate(self.gamma_net.params):
                out[f"gamma.{i}"] = p
            out["gamma_ref"] = np.array([self.ref.value])
        if self.uncertainty is not None:
            out["uncertainty_beta"] = self.uncertainty.beta
        return out

    def load_state_dict(self, state: dict) -> None:
        nets = [("actor", self.actor), ("critic", self.critic)]
        if self.critic2 is not None:
            nets.append(("critic2", self.critic2))
        for name, net in nets:
            net.load([state[f"{name}.{i}"] for i in range(len(net.params))])
        self.std = float(np.asarray(state["std"])[0])
        if self.gamma_net is not None:
            self.gamma_net.mlp.load([state[f"gamma.{i}"] for i in range(len(self.gamma_net.params))])
            self.ref.value = float(np.asarray(state["gamma_ref"])[0])
        if self.uncertainty is not None:
            self.uncertainty.beta[...] = state["uncertainty_beta"]


# ---------------------------------------------------------------------------
# losses


def ppo_policy_loss(agent: PpoAgent, states, actions, old_logp, adv, clip: float,
                    ent_coef: float = 0.0):
    """Negative clipped surrogate minus the entropy bonus; returns ``(loss, grads)``.

    The std is scheduled rather than learned, so the entropy bonus shifts the
    loss but contributes no gradient.
    """
    mu, cache = agent.actor.forward(np.atleast_2d(states), return_cache=True)
    logp = agent.log_prob(mu, actions)
    ratio = np.exp(logp - old_logp)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    use = unclipped <= clipped
    B = len(adv)
    loss = float(-np.mean(np.minimum(unclipped, clipped)) - ent_coef * agent.entropy())
    dl_dlogp = -np.where(use, unclipped, 0.0) / B
    dl_dmu = dl_dlogp[:, None] * (actions - mu) / agent.std ** 2
    grads, _ = agent.actor.backward(cache, dl_dmu, input_grad=False)
    return loss, grads


def value_loss(net: Mlp, states, targets):
    """``mean((V(s) - target)^2)`` and its parameter gradients."""
    v, cache = net.forward(np.atleast_2d(states), return_cache=True)
    err = v[:, 0] - targets
    grads, _ = net.backward(cache, (2.0 * err / len(err))[:, None], input_grad=False)
    return float(np.mean(err ** 2)), grads


def _apply(opt: Adam, grads, max_norm, agent: PpoAgent, what: str) -> bool:
    grads, _ = clip_grad_norm(grads, max_norm)
    try:
        opt.step(grads)
    except NonFiniteGradientError:
        agent.skipped_updates += 1
        logger.warning("non-finite %s gradient; minibatch skipped", what)
        return False
    return True


def prepare_rollout(agent: PpoAgent, rollout: Rollout) -> Rollout:
    """Residuals, advantages and value targets under the frozen discounts."""
    cfg = agent.cfg
    rollout.deltas = td_residuals(rollout.rewards, rollout.values, rollout.next_values,
                                  rollout.gammas, rollout.terminal)
    adv = gae_adaptive(rollout.deltas, rollout.gammas, cfg.gae_lambda, rollout.ends)
    norm = normalize_advantages(adv)
    if cfg.value_target == "nstep":
        rollout.targets = nstep_value_targets(rollout, cfg.value_nstep)
    elif cfg.normalize_before_targets:
        rollout.targets = norm + rollout.values
    else:
        rollout.targets = adv + rollout.values
    rollout.advantages = norm
    return rollout


def ppo_update(agent: PpoAgent, rollout: Rollout, rng: np.random.Generator) -> dict:
    """K epochs of shuffled minibatch updates on policy and value networks."""
    cfg = agent.cfg
    if rollout.advantages is None:
        prepare_rollout(agent, rollout)
    T = len(rollout)
    p_losses, v_losses = [], []
    for _ in range(cfg.epochs):
        perm = rng.permutation(T)
        for start in range(0, T, cfg.minibatch):
            idx = perm[start:start + cfg.minibatch]
            s = rollout.states[idx]
            pl, pg = ppo_policy_loss(agent, s, rollout.actions[idx], rollout.logp[idx],
                                     rollout.advantages[idx], cfg.clip, cfg.ent_coef)
            vl, vg = value_loss(agent.critic, s, rollout.targets[idx])
            if np.isfinite(pl):
                _apply(agent.actor_opt, pg, cfg.max_grad_norm, agent, "policy")
                p_losses.append(pl)
            else:
                agent.skipped_updates += 1
            if np.isfinite(vl):
                _apply(agent.critic_opt, vg, cfg.max_grad_norm, agent, "value")
                v_losses.append(vl)
            else:
                agent.skipped_updates += 1
            if agent.critic2 is not None:
                _, vg2 = value_loss(agent.critic2, s, rollout.targets[idx])
                _apply(agent.critic2_opt, vg2, cfg.max_grad_norm, agent, "aux value")
    return {"policy_loss": float(np.mean(p_losses)) if p_losses else math.nan,
            "critic_loss": float(np.mean(v_losses)) if v_losses else math.nan}


def ppo_gamma_update(agent: PpoAgent, rollout: Rollout):
    """One gradient step of the discount module on the whole rollout."""
    if agent.gamma_net is not None:
        n = agent.gcfg.n_step
        batch = rollout_windows(rollout, n)
        res = full_gamma_loss(agent.gamma_net, batch, agent.value, agent.ref, agent.weights, n)
        agent.last_gamma_terms = dict(res.terms)
        if np.isfinite(res.total):
            _apply(agent.gamma_opt, res.grads, agent.cfg.max_grad_norm, agent, "gamma")
        return res
    if agent.uncertainty is not None:
        # squared TD residual through the discount, chained to beta
        live = 1.0 - rollout.terminal
        v = agent.value(rollout.states)
        v_next = agent.value(rollout.next_states) * live
        d = agent.disagreement(rollout.states)
        delta = rollout.rewards + agent.uncertainty(d) * v_next - v
        try:
            agent.uncertainty.step(d, 2.0 * delta * v_next / len(delta))
        except NonFiniteGradientError:
            agent.skipped_updates += 1
    return None


# ---------------------------------------------------------------------------
# training loop


class _Collector:
    """Steps one environment across rollouts, keeping episode bookkeeping."""

    def __init__(self, env, rng, reward_scale: float = 1.0):
        self.env, self.rng, self.reward_scale = env, rng, reward_scale
        self.obs = env.reset(rng)
        self.episodes = 0
        self.steps = 0

    def collect(self, agent: PpoAgent, T: int, act_rng, on_step=None) -> Rollout:
        env = self.env
        S, A = agent.obs_dim, agent.act_dim
        states = np.empty((T, S))
        next_states = np.empty((T, S))
        actions = np.empty((T, A))
        rewards = np.empty(T)
        terminal = np.zeros(T)
        ends = np.zeros(T, dtype=bool)
        for t in range(T):
            mu = agent.actor.forward(self.obs)
            a = mu + agent.std * act_rng.standard_normal(A)
            res = env.step(np.clip(a, -1.0, 1.0) * agent.action_high, self.rng)
            states[t], actions[t], rewards[t] = self.obs, a, self.reward_scale * res.reward
            next_states[t] = res.next_state
            terminal[t] = float(res.terminal)
            self.steps += 1
            if res.terminal or res.truncated:
                ends[t] = True
                self.episodes += 1
                self.obs = env.reset(self.rng)
            else:
                self.obs = res.next_state
            if on_step is not None:
                on_step(self.steps)
        ends[-1] = True
        mu = agent.actor.forward(states)
        logp = agent.log_prob(mu, actions)
        values = agent.value(states)
        next_values = agent.value(next_states)
        gammas = agent.discount(states)
        return Rollout(states, actions, logp, rewards, values, next_states, next_values,
                       gammas, terminal, ends)


def ppo_train(config: RunConfig, env=None, seed: Optional[int] = None,
              log_path: Optional[Path] = None, callback=None) -> TrainResult:
    """Collect, freeze discounts, compute advantages, run the PPO epochs, then
    update the discount module once; repeat until ``run.max_steps``.

    The gamma network trains only after ``gamma.warmup`` episodes and the
    reference discount moves every ``gamma.ref_period`` updates after that.
    """
    if config.run.algorithm != "ppo":
        raise ValueError("ppo_train needs run.algorithm = ppo")
    if config.run.env == "tabular":
        raise ValueError("the tabular environment is for theory checks only")
    seed = config.run.seeds[0] if seed is None else seed
    streams = RngStreams(seed)
    env = env if env is not None else make_env(config.run.env, **config_for_env(config))
    eval_env = make_env(config.run.env, **config_for_env(config))
    pc, gc, rc = config.ppo, config.gamma, config.run
    agent = PpoAgent(env.obs_dim, env.action_dim, pc, gc, streams.init, env.action_high)
    log = RunLog(log_path)
    collector = _Collector(env, streams.env, pc.reward_scale)
    losses = {"policy_loss": math.nan, "critic_loss": math.nan}
    updates = 0
    stop = False

    def on_step(step):
        nonlocal stop
        do_eval = step % rc.eval_interval == 0
        if not (do_eval or step % rc.log_interval == 0):
            return
        ev = evaluate(agent, eval_env, rc.eval_episodes, streams.eval) if do_eval else (math.nan, math.nan)
        g = agent.discount(collector.obs[None, :]) if agent.variant == "fixed" else None
        mg = _gamma_summary(agent, last_states, g)
        t = agent.last_gamma_terms
        log.append(step=step, episode=collector.episodes,
                   eval_return_mean=ev[0], eval_return_std=ev[1],
                   mean_gamma=mg[0], min_gamma=mg[1], max_gamma=mg[2],
                   gamma_loss_rc=t.get("rc"), gamma_loss_dev=t.get("dev"),
                   gamma_loss_var=t.get("var"), gamma_loss_bound=t.get("bound"),
                   critic_loss=losses["critic_loss"], policy_loss=losses["policy_loss"],
                   alpha=math.nan,
                   gamma_ref=agent.ref.value if agent.ref is not None else math.nan)
        if callback is not None:
            callback(log.rows[-1], agent)
        if do_eval and rc.stop_at_return is not None and ev[0] >= rc.stop_at_return:
            stop = True

    last_states = np.asarray(collector.obs)[None, :]
    try:
        while collector.steps < rc.max_steps and not stop:
            T = min(pc.rollout, rc.max_steps - collector.steps)
            if T < 2:
                break
            agent.std = action_std(pc, collector.steps)
            rollout = collector.collect(agent, T, streams.agent, on_step)
            last_states = rollout.states
            prepare_rollout(agent, rollout)
            frozen = rollout.gammas.copy()
            losses = ppo_update(agent, rollout, streams.agent)
            if not np.array_equal(frozen, rollout.gammas):
                raise RuntimeError("rollout discounts changed during the PPO epochs")
            updates += 1
            warm = collector.episodes >= gc.warmup
            if agent.gamma_net is not None:
                if warm:
                    ppo_gamma_update(agent, rollout)
                if updates % gc.ref_period == 0:
                    agent.ref.update(float(agent.gamma_net(rollout.states).mean()), warm)
            elif agent.uncertainty is not None and warm:
                ppo_gamma_update(agent, rollout)
    finally:
        log.close()
    return TrainResult(log, agent, collector.steps, collector.episodes, {"updates": updates})


def _gamma_summary(agent: PpoAgent, states, fixed=None):
    if fixed is not None:
        g = float(fixed[0])
        return g, g, g
    gam = agent.discount(states)
    return float(gam.mean()), float(gam.min()), float(gam.max())
