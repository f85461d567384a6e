"""State-dependent discount network and its training objectives."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .numerics import Adam, Mlp, sigmoid


class InvalidHorizonError(ValueError):
    pass


class InvalidSplitError(ValueError):
    pass


def logit(p: float) -> float:
    return float(np.log(p) - np.log1p(-p))


class GammaNet:
    """Bounded discount function ``gamma(s) = lo + (hi - lo) * sigmoid(g(s))``.

    ``g`` is a tanh MLP with two hidden layers. Its output layer starts with
    zero weights and a bias chosen so that every state maps to ``init_gamma``;
    pass ``init_gamma=None`` for a zero output bias (midpoint discount).
    """

    def __init__(self, obs_dim: int, hidden: int = 256, gamma_min: float = 0.9,
                 gamma_max: float = 0.999, init_gamma: Optional[float] = 0.98,
                 boundary_margin: float = 0.005, rng: np.random.Generator | None = None,
                 zero: bool = False):
        if not 0.0 <= gamma_min <= gamma_max < 1.0:
            raise ValueError(f"need 0 <= gamma_min <= gamma_max < 1, got {gamma_min}, {gamma_max}")
        self.gamma_min = float(gamma_min)
        self.gamma_max = float(gamma_max)
        self.boundary_margin = float(boundary_margin)
        self.mlp = Mlp([obs_dim, hidden, hidden, 1], rng, zero=zero)
        self.mlp.params[-2][...] = 0.0
        if init_gamma is not None and self.gamma_min < init_gamma < self.gamma_max:
            frac = (init_gamma - self.gamma_min) / (self.gamma_max - self.gamma_min)
            self.mlp.params[-1][...] = logit(frac)

    @property
    def params(self):
        return self.mlp.params

    @property
    def span(self) -> float:
        return self.gamma_max - self.gamma_min

    def logits(self, states) -> np.ndarray:
        return np.atleast_2d(self.mlp.forward(np.atleast_2d(states)))[:, 0]

    def __call__(self, states) -> np.ndarray:
        return self.gamma_min + self.span * sigmoid(self.logits(states))

    def forward(self, states):
        z, cache = self.mlp.forward(np.atleast_2d(states), return_cache=True)
        sig = sigmoid(z[:, 0])
        return self.gamma_min + self.span * sig, (cache, sig)

    def backward(self, cache, grad_gamma):
        """Parameter gradients given ``dL/dgamma`` per batch element."""
        mlp_cache, sig = cache
        dz = (np.asarray(grad_gamma) * self.span * sig * (1.0 - sig))[:, None]
        grads, _ = self.mlp.backward(mlp_cache, dz, input_grad=False)
        return grads


def gamma_of(net: GammaNet, s) -> np.ndarray | float:
    out = net(s)
    return float(out[0]) if np.ndim(s) == 1 else out


# ---------------------------------------------------------------------------
# batches


@dataclass
class NStepBatch:
    """Windows of up to ``n`` consecutive transitions from single episodes.

    ``rewards[i, k]`` is valid for ``k < lengths[i]``. ``boot_states`` holds the
    state after the last valid transition and ``boot_mask`` is 0 when that
    transition was a true terminal. ``terminal`` flags the first transition.
    """

    states: np.ndarray
    rewards: np.ndarray
    lengths: np.ndarray
    next_states: np.ndarray
    boot_states: np.ndarray
    boot_mask: np.ndarray
    terminal: np.ndarray

    def __len__(self):
        return len(self.states)

    def subset(self, idx) -> "NStepBatch":
        return NStepBatch(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


@dataclass
class TdBatch:
    """One-step transitions for the TD-error based gamma objectives."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminal: np.ndarray

    def __len__(self):
        return len(self.states)

    def subset(self, idx) -> "TdBatch":
        return TdBatch(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


def nstep_reference_return(batch: NStepBatch, boot_values, gamma_ref: float) -> np.ndarray:
    """Reference-discounted n-step return; the bootstrap is dropped at terminals."""
    n = batch.rewards.shape[1]
    k = np.arange(n)
    valid = k[None, :] < batch.lengths[:, None]
    ret = (batch.rewards * valid * gamma_ref ** k[None, :]).sum(axis=1)
    return ret + gamma_ref ** batch.lengths * batch.boot_mask * boot_values


# ---------------------------------------------------------------------------
# objectives


@dataclass
class GammaLoss:
    total: float
    grads: list
    terms: dict = field(default_factory=dict)
    gammas: Optional[np.ndarray] = None


def _rc_pieces(net, batch, value_fn, gamma_ref, n):
    if n < 1:
        raise InvalidHorizonError(f"n-step horizon must be >= 1, got {n}")
    if batch.rewards.shape[1] < n or np.any(batch.lengths > n):
        raise InvalidHorizonError("batch windows are longer than the requested horizon")
    B = len(batch)
    v_all = np.asarray(value_fn(np.concatenate([batch.next_states, batch.boot_states])))
    v_next, v_boot = v_all[:B], v_all[B:]
    target = nstep_reference_return(batch, v_boot, gamma_ref)
    gammas, cache = net.forward(batch.states)
    live = 1.0 - batch.terminal
    resid = batch.rewards[:, 0] + gammas * live * v_next - target
    return gammas, cache, resid, live * v_next


def return_consistency_loss(net: GammaNet, batch: NStepBatch, value_fn: Callable,
                            gamma_ref: float, n: int) -> GammaLoss:
    """Squared gap between the one-step bootstrap under ``gamma(s)`` and the
    n-step return under the reference discount.

    ``value_fn(states)`` returns state values and is treated as a constant, so
    gradients reach only the gamma network.
    """
    gammas, cache, resid, dres = _rc_pieces(net, batch, value_fn, gamma_ref, n)
    B = len(batch)
    loss = float(np.mean(resid ** 2))
    grads = net.backward(cache, 2.0 * resid * dres / B)
    return GammaLoss(loss, grads, {"rc": loss}, gammas)


@dataclass
class GammaLossWeights:
    rc: float = 1.0
    dev: float = 0.005
    var: float = 0.012
    bound: float = 0.05
    gamma_target: Optional[float] = None  # None: track the live reference discount

    def __post_init__(self):
        for name in ("rc", "dev", "var", "bound"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


@dataclass
class ReferenceDiscount:
    """Slowly adapted reference discount used inside the n-step target."""

    value: float = 0.98
    tau: float = 0.1
    period: int = 5
    adaptive: bool = True
    after_warmup: bool = True
    gamma_min: float = 0.9
    gamma_max: float = 0.999

    def __post_init__(self):
        self.value = float(np.clip(self.value, self.gamma_min, self.gamma_max))

    def update(self, replay_mean_gamma: float, warm: bool = True) -> float:
        if not self.adaptive or (self.after_warmup and not warm):
            return self.value
        m = float(np.clip(replay_mean_gamma, self.gamma_min, self.gamma_max))
        new = (1.0 - self.tau) * self.value + self.tau * m
        self.value = float(np.clip(new, self.gamma_min, self.gamma_max))
        return self.value


def update_reference(ref: ReferenceDiscount, replay_mean_gamma: float, warm: bool = True) -> float:
    return ref.update(replay_mean_gamma, warm)


def regularizer_terms(net: GammaNet, gammas: np.ndarray, gamma_target: float):
    """Deviation, variance and boundary penalties with their ``dL/dgamma``."""
    B = len(gammas)
    eps = net.boundary_margin
    dev = float(np.mean((gammas - gamma_target) ** 2))
    d_dev = 2.0 * (gammas - gamma_target) / B
    mean = gammas.mean()
    var = float(np.mean((gammas - mean) ** 2))
    d_var = 2.0 * (gammas - mean) / B
    low = net.gamma_min + eps - gammas
    high = gammas - net.gamma_max + eps
    bound = float(np.mean(np.maximum(low, 0.0) + np.maximum(high, 0.0)))
    d_bound = ((high > 0).astype(float) - (low > 0).astype(float)) / B
    return (dev, var, bound), (d_dev, d_var, d_bound)


def full_gamma_loss(net: GammaNet, batch: NStepBatch, value_fn: Callable,
                    ref: ReferenceDiscount, weights: GammaLossWeights, n: int) -> GammaLoss:
    """Return consistency plus deviation, batch-variance and boundary penalties."""
    if len(batch) == 0:
        raise ValueError("empty gamma batch")
    gammas, cache, resid, dres = _rc_pieces(net, batch, value_fn, ref.value, n)
    B = len(batch)
    target = ref.value if weights.gamma_target is None else weights.gamma_target
    rc = float(np.mean(resid ** 2))
    (dev, var, bound), (d_dev, d_var, d_bound) = regularizer_terms(net, gammas, target)
    total = weights.rc * rc + weights.dev * dev + weights.var * var + weights.bound * bound
    dgamma = (weights.rc * 2.0 * resid * dres / B + weights.dev * d_dev
              + weights.var * d_var + weights.bound * d_bound)
    grads = net.backward(cache, dgamma)
    terms = {"rc": rc, "dev": dev, "var": var, "bound": bound}
    return GammaLoss(float(total), grads, terms, gammas)


def _td_loss(net, batch: TdBatch, value_fn):
    values, next_values = value_fn(batch)
    gammas, cache = net.forward(batch.states)
    live = 1.0 - batch.terminal
    delta = batch.rewards + gammas * live * next_values - values
    B = len(batch)
    loss = float(np.mean(delta ** 2))
    grads = net.backward(cache, 2.0 * delta * live * next_values / B)
    return GammaLoss(loss, grads, {"td": loss}, gammas)


def naive_td_gamma_loss(net: GammaNet, batch: TdBatch, value_fn: Callable) -> GammaLoss:
    """Mean squared TD error with the gradient flowing through ``gamma(s_t)``.

    Minimizing this drives the discount toward its lower bound; it exists to
    demonstrate that failure mode. ``value_fn(batch)`` returns
    ``(values, next_values)``.
    """
    return _td_loss(net, batch, value_fn)


def split_batch(n: int, rng: np.random.Generator):
    """Random half/half split of ``range(n)``."""
    perm = rng.permutation(n)
    a, b = perm[: n // 2], perm[n // 2:]
    if len(a) == 0 or len(b) == 0:
        raise InvalidSplitError(f"cannot split a batch of {n} into two non-empty halves")
    return np.sort(a), np.sort(b)


def cross_validated_loss(net: GammaNet, batch_a: TdBatch, batch_b: TdBatch,
                         value_fn_snapshot: Callable) -> GammaLoss:
    """Squared TD errors on ``batch_b`` under a value function that took one
    gradient step on ``batch_a`` only (``value_fn_snapshot``)."""
    if len(batch_a) == 0 or len(batch_b) == 0:
        raise InvalidSplitError("both halves of the split must be non-empty")
    return _td_loss(net, batch_b, value_fn_snapshot)


# ---------------------------------------------------------------------------
# uncertainty-rule baseline


class UncertaintyGamma:
    """``gamma(s) = hi - (hi - lo) * sigmoid(eta * beta * d(s))`` with learnable
    ``beta``; ``d(s)`` is a non-negative critic disagreement."""

    def __init__(self, gamma_min=0.9, gamma_max=0.999, beta=2.0, eta=1.0, lr=1e-3):
        self.gamma_min = float(gamma_min)
        self.gamma_max = float(gamma_max)
        self.eta = float(eta)
        self.beta = np.array([float(beta)])
        self.opt = Adam([self.beta], lr=lr)

    @property
    def params(self):
        return [self.beta]

    def __call__(self, d) -> np.ndarray:
        d = np.asarray(d, dtype=np.float64)
        if np.any(d < 0):
            raise ValueError("disagreement must be non-negative")
        return self.gamma_max - (self.gamma_max - self.gamma_min) * sigmoid(self.eta * self.beta[0] * d)

    def grad_beta(self, d, grad_gamma) -> float:
        d = np.asarray(d, dtype=np.float64)
        s = sigmoid(self.eta * self.beta[0] * d)
        dgamma_dbeta = -(self.gamma_max - self.gamma_min) * s * (1.0 - s) * self.eta * d
        return float(np.sum(np.asarray(grad_gamma) * dgamma_dbeta))

    def step(self, d, grad_gamma) -> None:
        self.opt.step([np.array([self.grad_beta(d, grad_gamma)])])


def uncertainty_gamma(u: UncertaintyGamma, d):
    return u(d)
