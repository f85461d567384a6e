"""Exact tabular analysis of the soft Bellman operator with a per-state
discount: evaluation by linear solves, contraction measurement, Boltzmann
policy improvement, soft policy iteration and the discount-gap bound."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .envs import TabularMdp, random_mdp
from .numerics import solve_linear


class ConvergenceError(RuntimeError):
    """Soft policy iteration ran out of iterations; ``history`` holds the
    sup-norm Q change of every iteration."""

    def __init__(self, message: str, history: list):
        super().__init__(message)
        self.history = history


class MonotonicityError(AssertionError):
    pass


@dataclass
class SoftPolicy:
    """Tabular stochastic policy stored through its log-probabilities."""

    log_probs: np.ndarray
    alpha: float = 1.0

    def __post_init__(self):
        self.log_probs = np.asarray(self.log_probs, dtype=np.float64)
        if self.log_probs.ndim != 2:
            raise ValueError("policy table must be (states, actions)")
        if not self.alpha > 0:
            raise ValueError("temperature must be positive")
        if not np.all(np.isfinite(self.log_probs)):
            raise ValueError("policy probabilities must be strictly positive")
        if np.max(np.abs(self.probs.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("policy rows must sum to one")

    @classmethod
    def from_probs(cls, probs, alpha: float = 1.0) -> "SoftPolicy":
        probs = np.asarray(probs, dtype=np.float64)
        if np.any(probs <= 0):
            raise ValueError("policy probabilities must be strictly positive")
        return cls(np.log(probs), alpha)

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    @property
    def epsilon(self) -> float:
        return float(self.probs.min())

    def entropy_bonus(self) -> np.ndarray:
        """``-alpha * sum_a pi log pi`` per state."""
        return -self.alpha * np.sum(self.probs * self.log_probs, axis=1)


def random_policy(n_states: int, n_actions: int, rng: np.random.Generator,
                  alpha: float = 1.0, floor: float = 1e-4) -> SoftPolicy:
    """Flat-Dirichlet rows mixed so that every probability is at least ``floor``."""
    if floor * n_actions > 1.0:
        raise ValueError("floor too large for the number of actions")
    w = rng.exponential(1.0, size=(n_states, n_actions))
    p = w / w.sum(axis=1, keepdims=True)
    p = floor + (1.0 - floor * n_actions) * p
    p /= p.sum(axis=1, keepdims=True)
    return SoftPolicy.from_probs(p, alpha)


# ---------------------------------------------------------------------------
# operator and exact evaluation


def soft_state_value(pi: SoftPolicy, Q) -> np.ndarray:
    """``V(s) = sum_a pi(a|s) (Q(s,a) - alpha log pi(a|s))``."""
    return np.sum(pi.probs * (np.asarray(Q) - pi.alpha * pi.log_probs), axis=1)


def soft_backup(mdp: TabularMdp, pi: SoftPolicy, Q) -> np.ndarray:
    """``r(s,a) + gamma(s) E_{s'}[V(s')]``."""
    Q = np.asarray(Q, dtype=np.float64)
    if Q.shape != mdp.r.shape or pi.log_probs.shape != mdp.r.shape:
        raise ValueError("Q, policy and MDP shapes differ")
    return mdp.r + mdp.gamma[:, None] * (mdp.P @ soft_state_value(pi, Q))


def _policy_transition(mdp: TabularMdp, pi: SoftPolicy) -> np.ndarray:
    """``(s,a) -> (s',a')`` matrix ``P(s'|s,a) pi(a'|s')``."""
    S, A = mdp.r.shape
    return (mdp.P[:, :, :, None] * pi.probs[None, None, :, :]).reshape(S * A, S * A)


def exact_soft_eval(mdp: TabularMdp, pi: SoftPolicy, form: str = "lemma") -> np.ndarray:
    """Exact soft action values by one linear solve.

    ``form`` selects the assembly:

    * ``"lemma"``: entropy folded into the reward, ``r + gamma(s) E[H(s')]``,
      then ``(I - Gamma P_pi) Q = r_aug`` over state-action pairs.
    * ``"shifted"``: solve for ``Q - alpha log pi`` with reward
      ``r - alpha log pi``, then shift back.
    * ``"vspace"``: solve ``(I - diag(gamma) P^pi) V = r_pi + H`` over states
      and recover ``Q = r + gamma P V``.
    """
    S, A = mdp.r.shape
    if mdp.beta >= 1.0:
        raise ValueError("exact evaluation needs max gamma < 1")
    H = pi.entropy_bonus()
    if form == "vspace":
        Ppi = np.einsum("sa,sat->st", pi.probs, mdp.P)
        rhs = np.sum(pi.probs * mdp.r, axis=1) + H
        V = solve_linear(np.eye(S) - mdp.gamma[:, None] * Ppi, rhs)
        return mdp.r + mdp.gamma[:, None] * (mdp.P @ V)
    M = np.eye(S * A) - np.repeat(mdp.gamma, A)[:, None] * _policy_transition(mdp, pi)
    if form == "lemma":
        rhs = mdp.r + mdp.gamma[:, None] * (mdp.P @ H)
        return solve_linear(M, rhs.reshape(-1)).reshape(S, A)
    if form == "shifted":
        shift = pi.alpha * pi.log_probs
        return solve_linear(M, (mdp.r - shift).reshape(-1)).reshape(S, A) + shift
    raise ValueError(f"unknown assembly {form!r}")


def iterate_backup(mdp: TabularMdp, pi: SoftPolicy, Q0=None, iters: int = 500):
    """Repeated :func:`soft_backup`; returns the final table and the list of iterates' sup-norm changes."""
    Q = np.zeros_like(mdp.r) if Q0 is None else np.array(Q0, dtype=np.float64)
    changes = []
    for _ in range(iters):
        nxt = soft_backup(mdp, pi, Q)
        changes.append(float(np.max(np.abs(nxt - Q))))
        Q = nxt
    return Q, changes


def contraction_certificate(mdp: TabularMdp, pi: SoftPolicy, trials: int,
                            rng: np.random.Generator, scale: float = 10.0) -> float:
    """Largest observed ``||T Q1 - T Q2|| / ||Q1 - Q2||`` over random pairs."""
    if trials < 1:
        raise ValueError("need at least one trial")
    worst = 0.0
    for _ in range(trials):
        Q1 = rng.uniform(-scale, scale, size=mdp.r.shape)
        D = rng.uniform(-scale, scale, size=mdp.r.shape)
        D.flat[rng.integers(D.size)] = scale  # never the zero difference
        Q2 = Q1 + D
        num = np.max(np.abs(soft_backup(mdp, pi, Q1) - soft_backup(mdp, pi, Q2)))
        den = np.max(np.abs(Q1 - Q2))
        worst = max(worst, float(num / den))
    return worst


# ---------------------------------------------------------------------------
# improvement and iteration


def soft_policy_improve(Q, alpha: float) -> SoftPolicy:
    """Boltzmann policy ``pi(a|s) propto exp(Q(s,a) / alpha)`` in log space."""
    if not alpha > 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(Q, dtype=np.float64) / alpha
    m = z.max(axis=1, keepdims=True)
    log_z = m + np.log(np.sum(np.exp(z - m), axis=1, keepdims=True))
    return SoftPolicy(z - log_z, alpha)


@dataclass
class IterationResult:
    policy: SoftPolicy
    Q: np.ndarray
    history: list = field(default_factory=list)
    iterations: int = 0


def soft_policy_iteration(mdp: TabularMdp, pi0: SoftPolicy, max_iters: int = 200,
                          tol: float = 1e-8, mono_tol: float = 1e-9) -> IterationResult:
    """Alternate exact evaluation and Boltzmann improvement until the sup-norm
    change of ``Q`` drops below ``tol``.

    Raises :class:`MonotonicityError` if some ``Q`` decreases by more than
    ``mono_tol`` and :class:`ConvergenceError` after ``max_iters``.
    """
    pi = pi0
    Q = exact_soft_eval(mdp, pi)
    history = []
    for it in range(1, max_iters + 1):
        pi = soft_policy_improve(Q, pi.alpha)
        Q_new = exact_soft_eval(mdp, pi)
        drop = float(np.max(Q - Q_new))
        if drop > mono_tol:
            raise MonotonicityError(f"Q decreased by {drop:.3e} at iteration {it}")
        gap = float(np.max(np.abs(Q_new - Q)))
        history.append(gap)
        Q = Q_new
        if gap < tol:
            return IterationResult(soft_policy_improve(Q, pi.alpha), Q, history, it)
    raise ConvergenceError(f"no convergence within {max_iters} iterations", history)


# ---------------------------------------------------------------------------
# discount-gap bound


def error_gap_bound(gamma_vec, gamma: float, R: float, alpha: float, eps: float) -> float:
    """``max|gamma(s) - gamma| (R + alpha log(1/eps)) / ((1 - beta)(1 - gamma))``."""
    gamma_vec = np.asarray(gamma_vec, dtype=np.float64)
    beta = float(gamma_vec.max())
    dev = float(np.max(np.abs(gamma_vec - gamma)))
    return dev * (R + alpha * math.log(1.0 / eps)) / ((1.0 - beta) * (1.0 - gamma))


def error_gap_certificate(mdp: TabularMdp, gamma: float, pi: SoftPolicy):
    """``(lhs, rhs)``: the exact sup-norm gap between soft values under the
    per-state discount and under the constant ``gamma``, and its bound."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError("constant discount must lie in [0, 1)")
    q_var = exact_soft_eval(mdp, pi)
    q_const = exact_soft_eval(mdp.with_gamma(gamma), pi)
    lhs = float(np.max(np.abs(q_var - q_const)))
    R = float(np.max(np.abs(mdp.r)))
    rhs = error_gap_bound(mdp.gamma, gamma, R, pi.alpha, pi.epsilon)
    return lhs, rhs


# ---------------------------------------------------------------------------
# randomized campaigns


@dataclass
class Instance:
    mdp: TabularMdp
    policy: SoftPolicy


def random_instance(rng: np.random.Generator, max_states: int = 20, max_actions: int = 5,
                    gamma_range=(0.0, 0.95), alpha_range=(0.05, 2.0)) -> Instance:
    S = int(rng.integers(1, max_states + 1))
    A = int(rng.integers(1, max_actions + 1))
    sparsity = float(rng.choice([0.0, 0.5, 0.8]))
    mdp = random_mdp(S, A, sparsity, (-1.0, 1.0), gamma_range, rng)
    alpha = float(rng.uniform(*alpha_range))
    return Instance(mdp, random_policy(S, A, rng, alpha))


def _quantiles(x) -> dict:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return {}
    q = np.quantile(x, [0.0, 0.25, 0.5, 0.75, 1.0])
    return {"min": q[0], "q25": q[1], "median": q[2], "q75": q[3], "max": q[4],
            "mean": float(x.mean())}


def lemma1_campaign(instances: int, rng: np.random.Generator, max_states=20, max_actions=5,
                    pairs: int = 100, iters: int = 2000, tol: float = 1e-9) -> dict:
    """Measured contraction moduli against ``beta``, agreement between the
    iterated backup and the exact solve, and geometric decay of the error."""
    violations, mismatch, slow, forms = 0, 0, 0, 0
    worst_margin, worst_gap = -math.inf, 0.0
    for _ in range(instances):
        inst = random_instance(rng, max_states, max_actions)
        mdp, pi = inst.mdp, inst.policy
        beta = mdp.beta
        modulus = contraction_certificate(mdp, pi, pairs, rng)
        worst_margin = max(worst_margin, modulus - beta)
        violations += modulus > beta + 1e-12
        Q = exact_soft_eval(mdp, pi)
        for form in ("shifted", "vspace"):
            forms += float(np.max(np.abs(exact_soft_eval(mdp, pi, form) - Q))) > tol
        Qk = np.zeros_like(Q)
        err0 = float(np.max(np.abs(Q)))
        bound = err0
        for _k in range(iters):
            Qk = soft_backup(mdp, pi, Qk)
            bound *= beta
            err = float(np.max(np.abs(Qk - Q)))
            slow += err > bound + 1e-10
            if err < tol * 1e-2:
                break
        gap = float(np.max(np.abs(Qk - Q)))
        worst_gap = max(worst_gap, gap)
        mismatch += gap > tol
    return {"passed": violations == 0 and mismatch == 0 and slow == 0 and forms == 0,
            "instances": instances, "modulus_violations": int(violations),
            "max_modulus_minus_beta": worst_margin, "iteration_mismatches": int(mismatch),
            "max_iteration_gap": worst_gap, "geometric_decay_violations": int(slow),
            "assembly_mismatches": int(forms)}


def lemma2_campaign(instances: int, rng: np.random.Generator, max_states=20, max_actions=5,
                    tol: float = 1e-9) -> dict:
    """Elementwise improvement ``Q^{pi_new} >= Q^{pi_old}`` after one Boltzmann step."""
    failures, worst = 0, -math.inf
    for _ in range(instances):
        inst = random_instance(rng, max_states, max_actions)
        q_old = exact_soft_eval(inst.mdp, inst.policy)
        q_new = exact_soft_eval(inst.mdp, soft_policy_improve(q_old, inst.policy.alpha))
        drop = float(np.max(q_old - q_new))
        worst = max(worst, drop)
        failures += drop > tol
    return {"passed": failures == 0, "instances": instances, "failures": int(failures),
            "max_decrease": worst}


def theorem1_campaign(instances: int, rng: np.random.Generator, max_states=20, max_actions=5,
                      comparisons: int = 50, tol: float = 1e-8) -> dict:
    """Soft policy iteration convergence, monotonicity and dominance over
    random comparison policies."""
    failures, dominance, iters = 0, 0, []
    worst_dom = -math.inf
    for _ in range(instances):
        inst = random_instance(rng, max_states, max_actions)
        try:
            res = soft_policy_iteration(inst.mdp, inst.policy, tol=tol)
        except (ConvergenceError, MonotonicityError):
            failures += 1
            continue
        iters.append(res.iterations)
        S, A = inst.mdp.r.shape
        for _c in range(comparisons):
            other = random_policy(S, A, rng, inst.policy.alpha)
            excess = float(np.max(exact_soft_eval(inst.mdp, other) - res.Q))
            worst_dom = max(worst_dom, excess)
            dominance += excess > tol
    return {"passed": failures == 0 and dominance == 0, "instances": instances,
            "failures": int(failures), "dominance_violations": int(dominance),
            "max_excess_over_limit": worst_dom, "iterations": _quantiles(iters)}


def theorem2_campaign(instances: int, rng: np.random.Generator, max_states=20, max_actions=5,
                      tol: float = 1e-9) -> dict:
    """The discount-gap inequality on random (gamma(s), gamma, pi) triples."""
    violations, ratios = 0, []
    for _ in range(instances):
        inst = random_instance(rng, max_states, max_actions)
        gamma = float(rng.uniform(0.0, 0.95))
        lhs, rhs = error_gap_certificate(inst.mdp, gamma, inst.policy)
        violations += lhs > rhs + tol
        if rhs > 0:
            ratios.append(lhs / rhs)
    return {"passed": violations == 0, "instances": instances, "violations": int(violations),
            "tightness": _quantiles(ratios)}


def theory_check(instances: int = 1000, max_states: int = 20, max_actions: int = 5,
                 seed: int = 0, pi_instances: Optional[int] = None) -> dict:
    """Run every campaign; ``pi_instances`` defaults to ``instances // 5``
    because each policy-iteration instance also evaluates 50 comparisons."""
    rng = np.random.default_rng(seed)
    pi_instances = max(1, instances // 5) if pi_instances is None else pi_instances
    report = {
        "seed": seed, "max_states": max_states, "max_actions": max_actions,
        "lemma1_contraction": lemma1_campaign(instances, rng, max_states, max_actions),
        "lemma2_improvement": lemma2_campaign(instances, rng, max_states, max_actions),
        "theorem1_policy_iteration": theorem1_campaign(pi_instances, rng, max_states, max_actions),
        "theorem2_error_gap": theorem2_campaign(instances, rng, max_states, max_actions),
    }
    report["passed"] = all(v["passed"] for v in report.values() if isinstance(v, dict))
    return report
