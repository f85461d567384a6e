"""Small dense-math substrate: MLPs with analytic gradients, Adam, a pivoting
linear solver, seeded RNG streams and finite-difference gradient checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0


class InputShapeError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


class SingularMatrixError(np.linalg.LinAlgError):
    pass


# ---------------------------------------------------------------------------
# RNG


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; identical seeds give identical draws on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed)))


@dataclass
class RngStreams:
    """Independent named generators derived from one run seed.

    Separate streams keep, e.g., gamma-network batch sampling from shifting
    the draws seen by the critic updates.
    """

    seed: int
    env: np.random.Generator = field(init=False)
    agent: np.random.Generator = field(init=False)
    gamma: np.random.Generator = field(init=False)
    eval: np.random.Generator = field(init=False)
    init: np.random.Generator = field(init=False)

    def __post_init__(self):
        children = np.random.SeedSequence(int(self.seed)).spawn(5)
        gens = [np.random.Generator(np.random.PCG64(c)) for c in children]
        self.env, self.agent, self.gamma, self.eval, self.init = gens


# ---------------------------------------------------------------------------
# MLP


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class MlpCache:
    inputs: list
    hiddens: list


class Mlp:
    """Fully connected net with tanh hidden layers and a linear output.

    Parameters are stored as ``[W0, b0, W1, b1, ...]`` with ``W`` of shape
    ``(fan_in, fan_out)``. Inputs may be a single vector or a batch of rows.
    """

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator | None = None,
                 zero: bool = False):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        self.sizes = [int(s) for s in sizes]
        self.params: list[np.ndarray] = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            if zero or rng is None:
                w = np.zeros((fan_in, fan_out))
            else:
                w = glorot_uniform(rng, fan_in, fan_out)
            self.params += [w, np.zeros(fan_out)]

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "Mlp":
        other = Mlp.__new__(Mlp)
        other.sizes = list(self.sizes)
        other.params = [p.copy() for p in self.params]
        return other

    def load(self, params: Sequence[np.ndarray]) -> None:
        for dst, src in zip(self.params, params):
            dst[...] = src

    def forward(self, x, return_cache: bool = False):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.ndim != 2 or h.shape[1] != self.sizes[0]:
            raise InputShapeError(
                f"expected input of size {self.sizes[0]}, got shape {x.shape}")
        inputs, hiddens = [], []
        last = len(self.sizes) - 2
        for i in range(last + 1):
            w, b = self.params[2 * i], self.params[2 * i + 1]
            inputs.append(h)
            z = h @ w
            z += b
            if i < last:
                h = np.tanh(z, out=z)
                hiddens.append(h)
            else:
                h = z
        out = h[0] if single else h
        if return_cache:
            return out, MlpCache(inputs, hiddens)
        return out

    __call__ = forward

    def backward(self, cache: MlpCache | None, grad_out, input_grad: bool = True):
        """Gradients of a scalar loss given ``dL/d(output)``.

        Returns ``(param_grads, grad_input)``; ``param_grads`` follows the
        layout of ``params``. ``grad_input`` is None when ``input_grad`` is off.
        """
        if cache is None:
            raise UsageError("backward() needs the cache from forward(..., return_cache=True)")
        g = np.asarray(grad_out, dtype=np.float64)
        single = g.ndim == 1
        if single:
            g = g[None, :]
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        last = len(self.sizes) - 2
        for i in range(last, -1, -1):
            if i < last:
                h = cache.hiddens[i]
                g = g * (1.0 - h * h)
            grads[2 * i] = cache.inputs[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0 or input_grad:
                g = g @ self.params[2 * i].T
        if not input_grad:
            return grads, None
        return grads, (g[0] if single else g)


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    """Bias-corrected Adam acting in place on a list of arrays.

    Moments are kept as flat vectors so one update costs a handful of
    vectorized operations regardless of how many arrays are optimized.
    """

    def __init__(self, params: list[np.ndarray], lr: float = 3e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self._sizes = [p.size for p in params]
        self._offsets = np.cumsum([0] + self._sizes)
        n = int(self._offsets[-1])
        self.state = AdamState(m=np.zeros(n), v=np.zeros(n),
                               lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def _flat(self, grads: Sequence[np.ndarray]) -> np.ndarray:
        if len(grads) != len(self.params):
            raise InputShapeError("gradient list does not match parameter list")
        for p, g in zip(self.params, grads):
            if np.shape(g) != p.shape:
                raise InputShapeError(f"gradient shape {np.shape(g)} != {p.shape}")
        return np.concatenate([np.ravel(g) for g in grads])

    def step(self, grads: Sequence[np.ndarray]) -> None:
        g = self._flat(grads)
        if not np.isfinite(g).all():
            raise NonFiniteGradientError("non-finite gradient; update skipped")
        s = self.state
        s.step += 1
        c1 = 1.0 - s.beta1 ** s.step
        c2 = 1.0 - s.beta2 ** s.step
        s.m *= s.beta1
        s.m += (1.0 - s.beta1) * g
        s.v *= s.beta2
        s.v += (1.0 - s.beta2) * (g * g)
        upd = (s.lr / c1) * s.m / (np.sqrt(s.v / c2) + s.eps)
        off = self._offsets
        for i, p in enumerate(self.params):
            p -= upd[off[i]:off[i + 1]].reshape(p.shape)

    def copy_for(self, params: list[np.ndarray]) -> "Adam":
        other = Adam(params, self.state.lr, (self.state.beta1, self.state.beta2), self.state.eps)
        other.state.m = self.state.m.copy()
        other.state.v = self.state.v.copy()
        other.state.step = self.state.step
        return other


def adam_step(params, grads, state: AdamState) -> None:
    """Functional form of one Adam update on ``params`` using ``state``."""
    opt = Adam(params)
    opt.state = state
    opt.step(grads)


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float):
    """Scale ``grads`` so their joint L2 norm is at most ``max_norm``."""
    flat = np.concatenate([np.ravel(g) for g in grads])
    norm = float(np.sqrt(flat @ flat))
    if max_norm is None or max_norm <= 0 or not np.isfinite(norm) or norm <= max_norm:
        return list(grads), norm
    scale = max_norm / (norm + 1e-12)
    return [g * scale for g in grads], norm


def soft_update(target: Mlp, online: Mlp, tau: float) -> None:
    for pt, po in zip(target.params, online.params):
        pt *= 1.0 - tau
        pt += tau * po


# ---------------------------------------------------------------------------
# Linear algebra


def solve_linear(a, b, pivot_tol: float = 1e-12) -> np.ndarray:
    """Solve ``A x = b`` by Gaussian elimination with partial pivoting.

    ``b`` may be a vector or a matrix of right-hand sides. Raises
    :class:`SingularMatrixError` when no pivot exceeds ``pivot_tol`` times the
    largest absolute entry of ``A``.
    """
    a = np.array(a, dtype=np.float64)
    b = np.array(b, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InputShapeError(f"A must be square, got {a.shape}")
    n = a.shape[0]
    vector = b.ndim == 1
    if vector:
        b = b[:, None]
    if b.shape[0] != n:
        raise InputShapeError(f"b has {b.shape[0]} rows, A has {n}")
    scale = max(np.abs(a).max(initial=0.0), 1.0)
    for k in range(n):
        p = k + int(np.argmax(np.abs(a[k:, k])))
        if abs(a[p, k]) <= pivot_tol * scale:
            raise SingularMatrixError(f"matrix is singular to working precision (column {k})")
        if p != k:
            a[[k, p]] = a[[p, k]]
            b[[k, p]] = b[[p, k]]
        f = a[k + 1:, k] / a[k, k]
        a[k + 1:, k:] -= np.outer(f, a[k, k:])
        b[k + 1:] -= np.outer(f, b[k])
    x = np.empty_like(b)
    for k in range(n - 1, -1, -1):
        x[k] = (b[k] - a[k, k + 1:] @ x[k + 1:]) / a[k, k]
    return x[:, 0] if vector else x


# ---------------------------------------------------------------------------
# Gradient verification


def grad_check(loss_and_grad: Callable[[], tuple[float, Sequence[np.ndarray]]],
               params: Sequence[np.ndarray], h: float = 1e-5,
               floor: float = 1e-6) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_and_grad()`` evaluates the loss and its analytic gradients at the
    current contents of ``params``; entries of ``params`` are perturbed in place
    and restored. The relative error of one entry is
    ``|g_a - g_fd| / max(|g_a|, |g_fd|, floor)``.
    """
    _, analytic = loss_and_grad()
    analytic = [np.array(g, dtype=np.float64, copy=True) for g in analytic]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_and_grad()[0]
            flat[i] = orig - h
            fm = loss_and_grad()[0]
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            denom = max(abs(gflat[i]), abs(fd), floor)
            worst = max(worst, abs(gflat[i] - fd) / denom)
    return worst


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
