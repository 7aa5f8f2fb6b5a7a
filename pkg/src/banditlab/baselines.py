"""Comparison policies.

* An adaptive exponential-weights learner for linear losses (RealLinExp3
  style) whose feedback arrives only with probability ``q_t``: the learning
  rate adapts to both the accumulated inverse feedback probabilities and
  their running minimum, and the parameter estimate is the importance
  weighted unbiased estimator against the exact per-arm covariance of the
  current policy (finite context supports only).
* A per-arm optimistic ridge-regression baseline (OFUL style): disjoint
  linear models with an ellipsoidal confidence radius, choosing the arm of
  smallest optimistic loss.
* Uniform random play.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from . import env
from .estimators import unbiased_theta
from .ftrl_lc import _softmax_rows


# ---------------------------------------------------------------------------
# adaptive exponential weights with importance-weighted feedback


@dataclass
class RealLinExp3State:
    dist: env.ContextDistribution
    n_arms: int
    lambda_min: float
    c: float
    cum_theta_hat: np.ndarray
    q_history: List[float] = field(default_factory=list)
    inv_q_sum: float = 0.0
    min_q: float = 1.0
    eta: float = 0.0
    gamma: float = 0.0


def reallinexp3_init(dist: env.ContextDistribution, n_arms: int) -> RealLinExp3State:
    """The learner needs exact per-arm covariances, hence a finite support."""
    if dist.kind != env.FINITE_UNIFORM:
        raise ValueError("this learner requires a finite context support")
    lam = env.second_moment(dist).lambda_min
    return RealLinExp3State(
        dist=dist,
        n_arms=n_arms,
        lambda_min=lam,
        c=n_arms / lam,
        cum_theta_hat=np.zeros((n_arms, dist.dim)),
    )


def reallinexp3_rates(state: RealLinExp3State):
    """min{sqrt(ln K / sum 1/q_s), min_q/(2c)} and gamma = c eta / q_t."""
    if not state.q_history:
        raise ValueError("rates are defined only after a feedback probability arrives")
    eta = min(math.sqrt(math.log(state.n_arms) / state.inv_q_sum),
              state.min_q / (2.0 * state.c))
    gamma = state.c * eta / state.q_history[-1]
    return eta, gamma


def _policy_table(state: RealLinExp3State, eta: float, gamma: float) -> np.ndarray:
    logits = -eta * (state.dist.support @ state.cum_theta_hat.T)
    p = _softmax_rows(logits)
    return (1.0 - gamma) * p + gamma / state.n_arms


def _exact_sigma_inv(support: np.ndarray, col: np.ndarray) -> np.ndarray:
    sigma = np.einsum("i,ij,ik->jk", col, support, support) / support.shape[0]
    sigma = (sigma + sigma.T) / 2.0
    if np.linalg.eigvalsh(sigma)[0] <= 1e-12:
        raise np.linalg.LinAlgError("arm covariance is numerically singular")
    return np.linalg.inv(sigma)


def reallinexp3_begin(state: RealLinExp3State, q_t: float):
    """Record this round's feedback probability and refresh the rates."""
    if not 0.0 < q_t <= 1.0:
        raise ValueError("feedback probability must lie in (0, 1]")
    state.q_history.append(q_t)
    state.inv_q_sum += 1.0 / q_t
    state.min_q = min(state.min_q, q_t)
    state.eta, state.gamma = reallinexp3_rates(state)
    return state.eta, state.gamma


def reallinexp3_propose(state: RealLinExp3State, x: np.ndarray,
                        rng: np.random.Generator) -> int:
    """Sample an action from the current mixed exponential-weights policy."""
    if not state.q_history:
        raise ValueError("begin the round (record q_t) before proposing")
    x = np.asarray(x, dtype=float)
    p = _softmax_rows(-state.eta * (state.cum_theta_hat @ x))
    pi = (1.0 - state.gamma) * p + state.gamma / state.n_arms
    cdf = np.cumsum(pi)
    cdf /= cdf[-1]
    return int((rng.random() < cdf).argmax())


def reallinexp3_feedback(state: RealLinExp3State, x: np.ndarray, action: int,
                         loss: float) -> RealLinExp3State:
    """Fold a revealed loss into the importance-weighted estimate."""
    if abs(loss) > 1.0 + 1e-9:
        raise RuntimeError(f"observed loss outside [-1, 1]: {loss}")
    x = np.asarray(x, dtype=float)
    q_t = state.q_history[-1]
    table = _policy_table(state, state.eta, state.gamma)
    sigma_inv = _exact_sigma_inv(state.dist.support, table[:, action])
    est = unbiased_theta(sigma_inv, x, loss, action, action, 1, q_t)
    state.cum_theta_hat[action] += est.vector
    return state


def reallinexp3_step(state: RealLinExp3State, x: np.ndarray, q_t: float,
                     loss_fn: Callable[[int], float], rng: np.random.Generator,
                     upd: Optional[int] = None):
    """One standalone round; returns (action, state).

    ``q_t`` is the probability that this round's feedback is revealed. When
    ``upd`` is None the reveal event is drawn here (Bernoulli(q_t), never
    drawn when q_t == 1); a wrapper that controls the reveal event passes
    the realized indicator explicitly. ``loss_fn`` is consulted only on
    revealed rounds.
    """
    reallinexp3_begin(state, q_t)
    action = reallinexp3_propose(state, x, rng)
    if upd is None:
        upd = 1 if q_t >= 1.0 else int(rng.random() < q_t)
    if upd:
        reallinexp3_feedback(state, x, action, float(loss_fn(action)))
    return action, state


# ---------------------------------------------------------------------------
# optimistic per-arm ridge regression


@dataclass
class OfulState:
    cov: np.ndarray
    cum_b: np.ndarray
    theta_hat: np.ndarray
    lambda_reg: float
    delta: float
    dim: int
    t: int


def oful_init(n_arms: int, dim: int, lambda_reg: float = 1.0,
              delta: float = 0.05) -> OfulState:
    if lambda_reg <= 0.0:
        raise ValueError("ridge parameter must be positive")
    if not 0.0 < delta < 1.0:
        raise ValueError("confidence parameter must lie in (0, 1)")
    cov = np.tile(lambda_reg * np.eye(dim), (n_arms, 1, 1))
    return OfulState(cov, np.zeros((n_arms, dim)), np.zeros((n_arms, dim)),
                     lambda_reg, delta, dim, 0)


def oful_radius(state: OfulState) -> float:
    return math.sqrt(state.dim * math.log((1.0 + state.t / state.lambda_reg)
                                          / state.delta)) + math.sqrt(state.lambda_reg)


def oful_predict(state: OfulState, x: np.ndarray) -> int:
    """Arm of smallest optimistic loss; ties go to the lowest index."""
    x = np.asarray(x, dtype=float)
    rad = oful_radius(state)
    rhs = np.broadcast_to(x, (state.cov.shape[0], state.dim))[..., None]
    solved = np.linalg.solve(state.cov, rhs)[..., 0]
    scores = state.theta_hat @ x - rad * np.sqrt(solved @ x)
    return int(np.argmin(scores))


def oful_update(state: OfulState, x: np.ndarray, action: int, loss: float) -> OfulState:
    if abs(loss) > 1.0 + 1e-9:
        raise ValueError("losses are bounded by 1 in magnitude")
    x = np.asarray(x, dtype=float)
    state.cov[action] += np.outer(x, x)
    state.cum_b[action] += loss * x
    state.theta_hat[action] = np.linalg.solve(state.cov[action], state.cum_b[action])
    state.t += 1
    return state


# ---------------------------------------------------------------------------
# uniform play


def uniform_action(n_arms: int, rng: np.random.Generator) -> int:
    return int(rng.integers(n_arms))
