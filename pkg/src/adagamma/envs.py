"""Desk-scale environments and the random tabular MDP generator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InvalidRangeError(ValueError):
    pass


@dataclass
class EnvStep:
    next_state: np.ndarray
    reward: float
    terminal: bool
    truncated: bool


def angle_normalize(x):
    return ((x + np.pi) % (2 * np.pi)) - np.pi


class PendulumEnv:
    """Torque-limited inverted pendulum (the conventional swing-up task).

    Observation is ``[cos(theta), sin(theta), theta_dot]`` with ``theta = 0``
    upright. Episodes never terminate; they are truncated at ``horizon``.
    """

    name = "pendulum"
    obs_dim = 3
    action_dim = 1

    def __init__(self, max_torque=2.0, dt=0.05, g=10.0, m=1.0, length=1.0,
                 max_speed=8.0, horizon=200):
        self.max_torque = float(max_torque)
        self.dt = float(dt)
        self.g = float(g)
        self.m = float(m)
        self.length = float(length)
        self.max_speed = float(max_speed)
        self.horizon = int(horizon)
        self.action_high = self.max_torque
        self.theta = 0.0
        self.theta_dot = 0.0
        self.t = 0

    def observation(self):
        return np.array([np.cos(self.theta), np.sin(self.theta), self.theta_dot])

    def reset(self, rng: np.random.Generator):
        self.theta = float(rng.uniform(-np.pi, np.pi))
        self.theta_dot = float(rng.uniform(-1.0, 1.0))
        self.t = 0
        return self.observation()

    def set_state(self, theta, theta_dot):
        self.theta, self.theta_dot = float(theta), float(theta_dot)

    def step(self, action, rng: np.random.Generator | None = None) -> EnvStep:
        u = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0],
                          -self.max_torque, self.max_torque))
        th, thdot = self.theta, self.theta_dot
        cost = angle_normalize(th) ** 2 + 0.1 * thdot ** 2 + 0.001 * u ** 2
        # semi-implicit Euler: velocity first, then position with the new velocity
        new_thdot = thdot + (3.0 * self.g / (2.0 * self.length) * np.sin(th)
                             + 3.0 / (self.m * self.length ** 2) * u) * self.dt
        new_thdot = float(np.clip(new_thdot, -self.max_speed, self.max_speed))
        self.theta = th + new_thdot * self.dt
        self.theta_dot = new_thdot
        self.t += 1
        return EnvStep(self.observation(), float(-cost), False, self.t >= self.horizon)


class CorridorEnv:
    """One-dimensional corridor with a noisy zone and a deterministic zone.

    On ``[0, noisy_end)`` every move carries Gaussian noise and earns a small
    progress reward ``shaping * (x' - x)``. On ``[noisy_end, length]`` moves are
    exact and pay nothing until the agent stands at ``x >= goal``; the next
    step then pays ``goal_reward`` and terminates the episode.
    """

    name = "corridor"
    obs_dim = 1
    action_dim = 1

    def __init__(self, length=10.0, noisy_end=5.0, noise_std=0.5, goal=9.5,
                 goal_reward=10.0, shaping=0.1, step_cost=0.0, horizon=100):
        self.length = float(length)
        self.noisy_end = float(noisy_end)
        self.noise_std = float(noise_std)
        self.goal = float(goal)
        self.goal_reward = float(goal_reward)
        self.shaping = float(shaping)
        self.step_cost = float(step_cost)
        self.horizon = int(horizon)
        self.action_high = 1.0
        self.x = 0.0
        self.t = 0

    def zone(self, x) -> np.ndarray:
        """0 for the noisy zone, 1 for the deterministic zone."""
        return (np.asarray(x, dtype=np.float64) >= self.noisy_end).astype(int)

    def reset(self, rng: np.random.Generator | None = None):
        self.x = 0.0
        self.t = 0
        return np.array([self.x])

    def step(self, action, rng: np.random.Generator) -> EnvStep:
        v = float(np.clip(np.asarray(action, dtype=np.float64).reshape(-1)[0], -1.0, 1.0))
        x = self.x
        self.t += 1
        if x >= self.goal:
            return EnvStep(np.array([x]), self.goal_reward, True, False)
        if x < self.noisy_end:
            nx = x + v + self.noise_std * float(rng.standard_normal())
            nx = min(max(nx, 0.0), self.length)
            reward = self.shaping * (nx - x) - self.step_cost
        else:
            nx = min(max(x + v, 0.0), self.length)
            reward = 0.0
        self.x = nx
        return EnvStep(np.array([nx]), float(reward), False, self.t >= self.horizon)


ENVIRONMENTS = {"pendulum": PendulumEnv, "corridor": CorridorEnv}


def make_env(name: str, **kwargs):
    try:
        return ENVIRONMENTS[name](**kwargs)
    except KeyError:
        raise ValueError(f"unknown environment {name!r}") from None


@dataclass
class TabularMdp:
    """Finite MDP with a per-state discount vector.

    ``P[s, a, s']`` transition probabilities, ``r[s, a]`` rewards and
    ``gamma[s]`` discounts with ``max(gamma) < 1``.
    """

    P: np.ndarray
    r: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.r = np.asarray(self.r, dtype=np.float64)
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        S, A = self.r.shape
        if self.P.shape != (S, A, S) or self.gamma.shape != (S,):
            raise ValueError("inconsistent MDP shapes")
        if np.any(self.P < 0) or np.max(np.abs(self.P.sum(axis=2) - 1.0)) > 1e-12:
            raise ValueError("transition rows must be probability distributions")
        if np.any(self.gamma < 0) or self.beta >= 1.0:
            raise InvalidRangeError("discounts must lie in [0, 1)")

    @property
    def n_states(self) -> int:
        return self.r.shape[0]

    @property
    def n_actions(self) -> int:
        return self.r.shape[1]

    @property
    def beta(self) -> float:
        return float(self.gamma.max())

    def with_gamma(self, gamma) -> "TabularMdp":
        gamma = np.broadcast_to(np.asarray(gamma, dtype=np.float64), self.gamma.shape)
        return TabularMdp(self.P, self.r, gamma.copy())


def random_mdp(n_states: int, n_actions: int, sparsity: float = 0.0,
               reward_range=(-1.0, 1.0), gamma_range=(0.0, 0.95),
               rng: np.random.Generator | None = None) -> TabularMdp:
    """Random finite MDP.

    Transition rows are normalized exponential draws (a flat Dirichlet) with a
    ``sparsity`` fraction of entries zeroed; at least one entry per row always
    survives. Rewards and discounts are uniform on their ranges.
    """
    if n_states < 1 or n_actions < 1:
        raise ValueError("need at least one state and one action")
    lo, hi = float(gamma_range[0]), float(gamma_range[1])
    if not (0.0 <= lo <= hi < 1.0):
        raise InvalidRangeError(f"gamma_range {gamma_range} must lie inside [0, 1)")
    if not 0.0 <= sparsity < 1.0:
        raise InvalidRangeError("sparsity must lie in [0, 1)")
    if rng is None:
        rng = np.random.default_rng()
    w = rng.exponential(1.0, size=(n_states, n_actions, n_states))
    if sparsity > 0:
        keep = rng.random(w.shape) >= sparsity
        forced = rng.integers(n_states, size=(n_states, n_actions))
        keep[np.arange(n_states)[:, None], np.arange(n_actions)[None, :], forced] = True
        w = np.where(keep, w, 0.0)
    P = w / w.sum(axis=2, keepdims=True)
    r = rng.uniform(reward_range[0], reward_range[1], size=(n_states, n_actions))
    gamma = rng.uniform(lo, hi, size=n_states)
    return TabularMdp(P, r, gamma)
