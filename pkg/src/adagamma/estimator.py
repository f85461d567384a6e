"""scikit-learn style wrapper around the trainers.

Reinforcement learning has no ``(X, y)`` training set, so ``fit`` ignores its
arguments and trains on the configured environment; ``predict`` maps
observations to deterministic actions and ``discount`` to per-state gammas.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .config import RunConfig
from .harness import final_eval, state_gammas, train


class AdaGammaAgent(BaseEstimator):
    """Train a SAC or PPO agent with a configurable discount module.

    Every constructor argument is a plain hyperparameter so ``get_params`` /
    ``set_params`` / ``clone`` behave as for any estimator. ``config``
    optionally supplies every other setting; the explicit arguments override
    its corresponding fields.
    """

    def __init__(self, algorithm: str = "sac", env: str = "pendulum",
                 variant: str = "adagamma-rc", max_steps: int = 10_000, seed: int = 0,
                 hidden: int = 64, gamma_min: float = 0.9, gamma_max: float = 0.999,
                 config: Optional[RunConfig] = None):
        self.algorithm = algorithm
        self.env = env
        self.variant = variant
        self.max_steps = max_steps
        self.seed = seed
        self.hidden = hidden
        self.gamma_min = gamma_min
        self.gamma_max = gamma_max
        self.config = config

    def _effective_config(self) -> RunConfig:
        base = self.config if self.config is not None else RunConfig()
        section = "sac" if self.algorithm == "sac" else "ppo"
        return base.replace(
            run={"algorithm": self.algorithm, "env": self.env, "max_steps": self.max_steps,
                 "seeds": [self.seed]},
            gamma={"variant": self.variant, "gamma_min": self.gamma_min,
                   "gamma_max": self.gamma_max, "hidden": self.hidden},
            **{section: {"hidden": self.hidden}})

    def fit(self, X=None, y=None):
        cfg = self._effective_config()
        res = train(cfg, seed=self.seed)
        self.config_ = cfg
        self.agent_ = res.agent
        self.log_ = res.log
        self.n_features_in_ = res.agent.obs_dim
        self.final_return_ = final_eval(res.log)
        return self

    def _check_obs(self, X):
        check_is_fitted(self, "agent_")
        X = check_array(X, dtype=np.float64, ensure_2d=True)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def predict(self, X) -> np.ndarray:
        """Deterministic actions in environment units, one row per observation."""
        X = self._check_obs(X)
        return np.stack([self.agent_.act(x, deterministic=True) for x in X])

    def discount(self, X) -> np.ndarray:
        """Discount the trained agent applies at each observation."""
        return state_gammas(self.agent_, self._check_obs(X))

    def score(self, X=None, y=None) -> float:
        """Last logged evaluation return."""
        check_is_fitted(self, "agent_")
        return self.final_return_
