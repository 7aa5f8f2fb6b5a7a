"""FTRL with Shannon entropy over linear loss estimates (the main policy).

Each round: softmax of cumulative estimated losses at the realized context,
mixed with a uniform-exploration floor gamma_t/K; the chosen arm's parameter
estimate applies a fresh matrix-geometric-resampling approximation of
``Sigma_{t,a}^{-1}`` to the context, scaled by the observed loss. The rate
schedule is entropy-adaptive:

    beta'_{t+1} = beta'_t + c'_1 / sqrt(1 + entropy_sum_t / ln K)
    beta_t      = max{2, c'_2 ln T, beta'_t},    eta_t = 1/beta_t
    alpha_t     = 4 K ln(t) / lambda_min,        gamma_t = alpha_t eta_t
    M_t         = ceil((4K / (gamma_t lambda_min)) ln t)   (M_1 = 1)

with c'_1 = sqrt((3Kd + 2K ln T/lambda_min) ln T / ln K) and
c'_2 = 8K/lambda_min. These choices keep eta_t <= 1/2, gamma_t <= 1/2,
|eta_t <x, theta_tilde>| <= 1 and the resampling bias below t^{-2}; all four
are asserted every round rather than assumed.

Scale knobs (default 1.0 leaves every formula above untouched) trade
exploration and resampling compute against estimator bias for fixed-budget
studies: ``exploration_scale`` multiplies alpha_t and c'_2 jointly, which
preserves gamma_t <= 1/2; ``m_scale`` multiplies the resampling depth and
relaxes the asserted bias bound to t^{-2 m_scale}; ``c1_scale`` and
``c2_scale`` multiply the respective constants.

Only the chosen arm's estimate is nonzero, so the per-round engine draws the
full K * M_t resample budget (counted in diagnostics) but runs the product
scan only for the chosen arm. On a finite context support the per-arm hit
indicators are Bernoulli draws against a once-per-round probability table,
which has the same law as sampling full resample actions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np

from . import env
from .estimators import _estimate_apply

#: probabilities below this are flushed to exact zero after the softmax
PROB_FLUSH = 1e-300


@dataclass(frozen=True)
class FtrlLcConstants:
    n_arms: int
    dim: int
    horizon: float
    lambda_min: float
    c1_prime: float
    c2_prime: float
    c1_scale: float = 1.0
    c2_scale: float = 1.0
    exploration_scale: float = 1.0
    m_scale: float = 1.0


@dataclass(frozen=True)
class PolicyDistribution:
    probs: np.ndarray
    context_tag: Optional[int] = None

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=float)
        if np.any(p < 0.0):
            raise ValueError("probabilities must be non-negative")
        if abs(float(p.sum()) - 1.0) > 1e-12:
            raise ValueError("probabilities must sum to one within 1e-12")


@dataclass
class FtrlLcState:
    """Mutable per-run state; one instance per simulation run."""

    constants: FtrlLcConstants
    cum_theta: np.ndarray
    entropy_sum: float
    beta_prime: float
    beta: float
    eta: float
    gamma: float
    m_iters: int
    t: int


def ftrl_lc_constants(n_arms: int, dim: int, horizon: float, lambda_min: float, *,
                      c1_scale: float = 1.0, c2_scale: float = 1.0,
                      exploration_scale: float = 1.0, m_scale: float = 1.0) -> FtrlLcConstants:
    if n_arms < 2:
        raise ValueError("need at least two arms")
    if dim < 1:
        raise ValueError("context dimension must be positive")
    if horizon <= 1:
        raise ValueError("horizon must exceed 1")
    if not 0.0 < lambda_min <= 1.0:
        raise ValueError("lambda_min must lie in (0, 1]")
    if min(c1_scale, c2_scale, exploration_scale, m_scale) <= 0.0:
        raise ValueError("scale knobs must be positive")
    log_t = math.log(horizon)
    c1 = c1_scale * math.sqrt((3.0 * n_arms * dim + 2.0 * n_arms * log_t / lambda_min)
                              * log_t / math.log(n_arms))
    c2 = c2_scale * exploration_scale * 8.0 * n_arms / lambda_min
    return FtrlLcConstants(n_arms, dim, float(horizon), float(lambda_min), c1, c2,
                           c1_scale, c2_scale, exploration_scale, m_scale)


def init_state(constants: FtrlLcConstants) -> FtrlLcState:
    beta_prime = constants.c1_prime
    beta = max(2.0, constants.c2_prime * math.log(constants.horizon), beta_prime)
    return FtrlLcState(
        constants=constants,
        cum_theta=np.zeros((constants.n_arms, constants.dim)),
        entropy_sum=0.0,
        beta_prime=beta_prime,
        beta=beta,
        eta=1.0 / beta,
        gamma=0.0,  # alpha_1 = 4K ln(1)/lambda = 0
        m_iters=1,
        t=1,
    )


# ---------------------------------------------------------------------------
# softmax machinery


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    w = np.exp(z)
    p = w / w.sum(axis=-1, keepdims=True)
    if np.any(p < PROB_FLUSH):
        p = np.where(p < PROB_FLUSH, 0.0, p)
        p /= p.sum(axis=-1, keepdims=True)
    return p


def ftrl_probabilities(x: np.ndarray, cum_theta: np.ndarray, eta: float) -> PolicyDistribution:
    """Softmax of minus eta times cumulative estimated losses at ``x``."""
    if eta <= 0.0:
        raise ValueError("learning rate must be positive")
    logits = -eta * (np.asarray(cum_theta, dtype=float) @ np.asarray(x, dtype=float))
    return PolicyDistribution(_softmax_rows(logits))


def mix_with_uniform(p, gamma: float) -> PolicyDistribution:
    """(1 - gamma) p + gamma/K, giving every arm at least gamma/K."""
    if not 0.0 <= gamma <= 0.5:
        raise ValueError("mixture rate must lie in [0, 1/2]")
    probs = p.probs if isinstance(p, PolicyDistribution) else np.asarray(p, dtype=float)
    return PolicyDistribution((1.0 - gamma) * probs + gamma / probs.shape[0])


def shannon_entropy(p) -> float:
    probs = p.probs if isinstance(p, PolicyDistribution) else np.asarray(p, dtype=float)
    mask = probs > 0.0
    return float(-np.sum(probs[mask] * np.log(probs[mask])))


# ---------------------------------------------------------------------------
# rate schedule


def update_rates(state: FtrlLcState, h_t: float) -> FtrlLcState:
    """Fold the realized-round entropy into the schedule and advance t.

    The entropy accumulator includes the current round before the beta'
    increment, matching the 1..t index range of the recursion.
    """
    c = state.constants
    log_k = math.log(c.n_arms)
    if not -1e-12 <= h_t <= log_k + 1e-9:
        raise ValueError("round entropy outside [0, ln K]")
    state.entropy_sum += max(0.0, float(h_t))
    state.beta_prime += c.c1_prime / math.sqrt(1.0 + state.entropy_sum / log_k)
    state.beta = max(2.0, c.c2_prime * math.log(c.horizon), state.beta_prime)
    state.eta = 1.0 / state.beta
    state.t += 1
    alpha = c.exploration_scale * 4.0 * c.n_arms * math.log(state.t) / c.lambda_min
    state.gamma = alpha * state.eta
    return state


def mgr_iterations(gamma: float, t: int, n_arms: int, lambda_min: float,
                   m_scale: float = 1.0) -> int:
    """Resampling depth keeping the truncated-series bias below t^(-2 m_scale)."""
    if t < 1:
        raise ValueError("round index must be >= 1")
    if t == 1 or gamma == 0.0:
        return 1
    return int(math.ceil(m_scale * (4.0 * n_arms / (gamma * lambda_min)) * math.log(t)))


def _check_round_invariants(state: FtrlLcState) -> None:
    c = state.constants
    if not 0.0 < state.eta <= 0.5 + 1e-12:
        raise RuntimeError(f"learning rate out of range at t={state.t}: {state.eta}")
    if not -1e-12 <= state.gamma <= 0.5 + 1e-12:
        raise RuntimeError(f"mixture rate out of range at t={state.t}: {state.gamma}")
    if state.m_iters < 1:
        raise RuntimeError(f"resampling depth below 1 at t={state.t}")
    if state.t >= 2:
        decay = math.exp(-state.gamma * c.lambda_min * state.m_iters / (2.0 * c.n_arms))
        cap = state.t ** (-2.0 * c.m_scale)
        if decay > cap * (1.0 + 1e-9):
            raise RuntimeError(f"resampling bias bound violated at t={state.t}: "
                               f"{decay} > {cap}")


# ---------------------------------------------------------------------------
# per-round engine


def _multiplicities(pos: np.ndarray, m_iters: int) -> Tuple[np.ndarray, float]:
    """Multiplicities of distinct hit prefixes among the M partial products."""
    counts = np.empty(pos.size)
    counts[:-1] = np.diff(pos)
    counts[-1] = m_iters - pos[-1]
    return counts, float(pos[0])


def step(state: FtrlLcState, x: np.ndarray, loss_fn: Callable[[int], float],
         dist: env.ContextDistribution, rng: np.random.Generator):
    """Run one round; returns (action, state, diagnostics).

    ``loss_fn(action)`` supplies the observed loss for the realized context.
    ``dist`` drives the fresh resamples; the full K * M_t budget is drawn.
    """
    c = state.constants
    n_arms = c.n_arms
    x = np.asarray(x, dtype=float)
    _check_round_invariants(state)

    p = _softmax_rows(-state.eta * (state.cum_theta @ x))
    pi = (1.0 - state.gamma) * p + state.gamma / n_arms
    cdf = np.cumsum(pi)
    cdf /= cdf[-1]
    action = int((rng.random() < cdf).argmax())

    loss = float(loss_fn(action))
    if abs(loss) > 1.0 + 1e-9:
        raise RuntimeError(f"observed loss outside [-1, 1] at t={state.t}: {loss}")

    m_iters = state.m_iters
    finite = dist.kind == env.FINITE_UNIFORM
    if finite:
        support = dist.support
        table = _softmax_rows(-state.eta * (support @ state.cum_theta.T))
        table = (1.0 - state.gamma) * table + state.gamma / n_arms

    theta_vec = np.zeros(c.dim)
    for arm in range(n_arms):
        if finite:
            idx = rng.integers(0, support.shape[0], size=m_iters)
            u = rng.random(m_iters)
            if arm != action:
                continue
            pos = np.flatnonzero(u < table[idx, arm])
            hit_contexts = support[idx[pos]]
        else:
            xs = env.sample_contexts(dist, m_iters, rng)
            u = rng.random(m_iters)
            if arm != action:
                continue
            probs = _softmax_rows(-state.eta * (xs @ state.cum_theta.T))
            col = (1.0 - state.gamma) * probs[:, arm] + state.gamma / n_arms
            pos = np.flatnonzero(u < col)
            hit_contexts = xs[pos]
        if pos.size == 0:
            theta_vec = 0.5 * (1.0 + m_iters) * x * loss
        else:
            counts, c0 = _multiplicities(pos, m_iters)
            theta_vec = _estimate_apply(hit_contexts, counts, c0, x) * loss

    bound = abs(state.eta * float(x @ theta_vec))
    if bound > 1.0 + 1e-9:
        raise RuntimeError(f"per-round estimate bound violated at t={state.t}: {bound}")
    state.cum_theta[action] += theta_vec

    h = shannon_entropy(p)
    diagnostics = {
        "entropy": h,
        "eta": state.eta,
        "gamma": state.gamma,
        "m_iters": m_iters,
        "bound_check": bound,
        "resamples": n_arms * m_iters,
        "loss": loss,
    }
    update_rates(state, h)
    state.m_iters = mgr_iterations(state.gamma, state.t, n_arms, c.lambda_min, c.m_scale)
    return action, state, diagnostics
