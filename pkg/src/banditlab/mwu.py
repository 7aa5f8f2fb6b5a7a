"""Continuous exponential weights over the simplex with optimistic estimates.

The learner keeps one weight vector per arm and plays a point of the
probability simplex drawn from a density proportional to exp(<c, r>),
where c aggregates cumulative loss estimates and the current loss
predictors. The pieces, each usable on its own:

* a hit-and-run sampler for linear-exponent densities on the simplex,
  batched over independent chains (random chord, closed-form exponential
  slice along it);
* rejection-sampled truncation keeping only draws of bounded Mahalanobis
  magnitude sum_a r_a^2 ||x||^2 w.r.t. the per-arm inverse covariances;
* Monte-Carlo estimation of the covariances Sigma-bar (plain draws) and
  Sigma-tilde (truncated draws), exponentially averaged across rounds;
* the optimistic estimator theta-hat = m + (upd/q) r_a Sigma-tilde^-1 x xi
  on the chosen arm, unbiased because Sigma-tilde absorbs the r_a^2
  weighting;
* the variance-adaptive learning rate, online least-squares loss
  predictors constrained to predictions in [-1, 1], and a 2-barycentric
  spanner defining the predictor regularizer.

Everything here works on finite context supports, where spanners and
exact second moments exist.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import env

#: hit-and-run burn-in steps per sample is BURN_IN_FACTOR * K
BURN_IN_FACTOR = 50

#: rejection-sampling cap for one truncated draw
MAX_REJECTIONS = 10_000

#: ridge floor added to Monte-Carlo covariance estimates
COVARIANCE_RIDGE = 1e-6

#: weight of the fresh Monte-Carlo estimate in the exponential average
COVARIANCE_BLEND = 0.2

#: barycentric-spanner coefficient bound
SPANNER_BOUND = 2.0


def gamma_tilde(d: int, n_arms: int, t: int) -> float:
    """Round-t truncation level 4 ln(10 d K t)."""
    if t < 1:
        raise ValueError("rounds are 1-based")
    return 4.0 * math.log(10.0 * d * n_arms * t)


# ---------------------------------------------------------------------------
# hit-and-run sampling on the simplex


def _exp_slice(slo: np.ndarray, shi: np.ndarray, b: np.ndarray,
               u: np.ndarray) -> np.ndarray:
    """Inverse-CDF sample of density prop. to exp(b s) on [slo, shi]."""
    width = shi - slo
    rate = b * width
    u = np.clip(u, 1e-300, 1.0)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        uniform = slo + u * width
        # stable for any negative rate and for moderate positive rates
        interior = slo + np.log1p(u * np.expm1(rate)) / b
        # for strongly positive rates anchor at the top end instead
        top = shi + (np.log(u) + np.log1p((1.0 - u) / u * np.exp(-rate))) / b
    flat = np.abs(rate) < 1e-12
    big = (~flat) & (rate >= 40.0)
    s = np.where(flat, uniform, np.where(big, top, interior))
    return np.clip(s, slo, shi)


def _hit_and_run(coeff: np.ndarray, size: int, rng: np.random.Generator,
                 burn: Optional[int] = None) -> np.ndarray:
    """``size`` independent chains for density prop. to exp(<coeff, r>).

    ``coeff`` is (K,) shared across chains or (size, K) per chain. Each
    chain starts at the barycenter and mixes for 50 K steps.
    """
    coeff = np.asarray(coeff, dtype=float)
    n_arms = coeff.shape[-1]
    if not np.all(np.isfinite(coeff)):
        raise ValueError("coefficients must be finite")
    if burn is None:
        burn = BURN_IN_FACTOR * n_arms
    coeff = np.broadcast_to(coeff, (size, n_arms))
    r = np.full((size, n_arms), 1.0 / n_arms)
    if n_arms == 1:
        return r
    for _ in range(burn):
        direction = rng.normal(size=(size, n_arms))
        direction -= direction.mean(axis=1, keepdims=True)
        norm = np.linalg.norm(direction, axis=1, keepdims=True)
        direction = np.where(norm > 1e-12,
                             direction / np.maximum(norm, 1e-300), 0.0)
        denom = np.where(np.abs(direction) < 1e-14, np.inf, direction)
        ratios = -r / denom
        slo = np.max(np.where(direction > 1e-14, ratios, -np.inf), axis=1)
        shi = np.min(np.where(direction < -1e-14, ratios, np.inf), axis=1)
        stuck = ~np.isfinite(slo) | ~np.isfinite(shi)
        slo = np.where(stuck, 0.0, slo)
        shi = np.where(stuck, 0.0, shi)
        b = np.einsum("nk,nk->n", coeff, direction)
        s = _exp_slice(slo, shi, b, rng.random(size))
        r = r + s[:, None] * direction
        np.clip(r, 0.0, None, out=r)
        r /= r.sum(axis=1, keepdims=True)
    return r


def sample_exp_weights(coeff: np.ndarray, rng: np.random.Generator,
                       size: Optional[int] = None) -> np.ndarray:
    """Draw from the simplex density prop. to exp(<coeff, r>).

    Returns one (K,) point, or a (size, K) batch of independent draws
    when ``size`` is given.
    """
    if size is None:
        return _hit_and_run(coeff, 1, rng)[0]
    return _hit_and_run(coeff, int(size), rng)


# ---------------------------------------------------------------------------
# truncation


@dataclass(frozen=True)
class TruncationSpec:
    """Acceptance region sum_a r_a^2 x'Sigma-bar-inv_a x <= threshold."""

    sigma_bar_inv: np.ndarray
    threshold: float
    max_rejections: int = MAX_REJECTIONS

    def __post_init__(self) -> None:
        mats = np.asarray(self.sigma_bar_inv, dtype=float)
        if mats.ndim != 3 or mats.shape[1] != mats.shape[2]:
            raise ValueError("sigma_bar_inv must be (K, d, d)")
        if self.threshold <= 0.0:
            raise ValueError("threshold must be positive")
        if self.max_rejections < 1:
            raise ValueError("max_rejections must be at least 1")


def round_truncation(sigma_bar_inv: np.ndarray, t: int) -> TruncationSpec:
    """Truncation rule for round ``t``: threshold d K gamma-tilde_t^2."""
    mats = np.asarray(sigma_bar_inv, dtype=float)
    n_arms, d = mats.shape[0], mats.shape[1]
    g = gamma_tilde(d, n_arms, t)
    return TruncationSpec(mats, d * n_arms * g * g)


def _context_weights(x: np.ndarray, trunc: TruncationSpec) -> np.ndarray:
    """Per-arm x'Sigma-bar-inv_a x, shape (K,)."""
    return np.einsum("d,ade,e->a", x, trunc.sigma_bar_inv, x)


def truncated_sample(x: np.ndarray, coeff: np.ndarray, trunc: TruncationSpec,
                     rng: np.random.Generator):
    """Rejection-sample the truncated density; returns (point, rejections)."""
    x = np.asarray(x, dtype=float)
    weights = _context_weights(x, trunc)
    for attempt in range(trunc.max_rejections + 1):
        r = sample_exp_weights(coeff, rng)
        if float(r * r @ weights) <= trunc.threshold:
            return r, attempt
    raise RuntimeError(
        f"rejection sampling exceeded {trunc.max_rejections} redraws; "
        "the covariance estimates or the truncation level are off")


def _truncated_batch(coeffs: np.ndarray, weights: np.ndarray, threshold: float,
                     size: int, rng: np.random.Generator) -> np.ndarray:
    """Batch of truncated draws; per-chain coeffs (size,K), weights (size,K)."""
    r = _hit_and_run(coeffs, size, rng)
    alive = np.einsum("nk,nk->n", r * r, weights) > threshold
    for _ in range(200):
        if not alive.any():
            return r
        idx = np.flatnonzero(alive)
        fresh = _hit_and_run(coeffs[idx], idx.size, rng)
        r[idx] = fresh
        alive[idx] = np.einsum("nk,nk->n", fresh * fresh,
                               weights[idx]) > threshold
    raise RuntimeError("batched truncation failed to accept after 200 sweeps; "
                       "the covariance estimates or the truncation level are off")


# ---------------------------------------------------------------------------
# covariance estimation


def estimate_covariances(dist: env.ContextDistribution,
                         coeff_provider: Callable[[np.ndarray], np.ndarray],
                         trunc: TruncationSpec, n_mc: int,
                         rng: np.random.Generator):
    """Monte-Carlo (Sigma-bar, Sigma-tilde), each (K, d, d) with a ridge.

    Sigma-bar_a averages r_a^2 X X' over plain simplex draws r ~ p(.|X);
    Sigma-tilde_a uses truncated draws. ``coeff_provider`` maps a batch of
    contexts (n, d) to the per-context coefficients (n, K). Accuracy wants
    n_mc >= 1000; smaller values are the caller's trade-off.
    """
    contexts = env.sample_contexts(dist, n_mc, rng)
    coeffs = np.asarray(coeff_provider(contexts), dtype=float)
    n_arms = coeffs.shape[-1]
    coeffs = np.broadcast_to(coeffs, (n_mc, n_arms))
    plain = _hit_and_run(coeffs, n_mc, rng)
    weights = np.einsum("nd,ade,ne->na", contexts, trunc.sigma_bar_inv, contexts)
    trunc_draws = _truncated_batch(coeffs, weights, trunc.threshold, n_mc, rng)
    ridge = COVARIANCE_RIDGE * np.eye(contexts.shape[1])
    sigma_bar = np.einsum("na,nd,ne->ade", plain ** 2, contexts,
                          contexts) / n_mc + ridge
    sigma_tilde = np.einsum("na,nd,ne->ade", trunc_draws ** 2, contexts,
                            contexts) / n_mc + ridge
    return sigma_bar, sigma_tilde


def uniform_second_moment(n_arms: int) -> float:
    """E[r_a^2] under the flat simplex density."""
    return 2.0 / (n_arms * (n_arms + 1.0))


# ---------------------------------------------------------------------------
# optimistic unbiased estimator and the learning rate


def mwu_estimate(simplex_point: np.ndarray, x: np.ndarray, loss: float,
                 chosen: int, predictors: np.ndarray,
                 sigma_tilde_inv: np.ndarray, upd: int, q: float) -> np.ndarray:
    """theta-hat rows: m_a plus the chosen arm's reweighted correction.

    Unbiasedness comes from Sigma-tilde = E[r_a^2 X X']: conditioning on X,
    E[r_a 1{A=a} | r] = r_a^2, so the correction has mean
    Sigma-tilde^-1 E[r_a^2 X X'] (theta_a - m_a).
    """
    if not 0.0 < q <= 1.0:
        raise ValueError("q must lie in (0, 1]")
    if upd not in (0, 1):
        raise ValueError("upd is an indicator")
    if abs(loss) > 1.0 + 1e-12:
        raise ValueError("losses are bounded by 1 in magnitude")
    predictors = np.asarray(predictors, dtype=float)
    estimate = predictors.copy()
    if upd:
        xi = loss - float(predictors[chosen] @ x)
        estimate[chosen] += (float(simplex_point[chosen]) / q) * xi \
            * (sigma_tilde_inv[chosen] @ x)
    return estimate


def mwu_learning_rate(d: int, n_arms: int, t: int, min_q: float,
                      beta_sum_over_q: float) -> float:
    """eta_t = (800 d K gamma-tilde_t^2 / min_q + sum beta_j/q_j)^(-1/2)."""
    if not 0.0 < min_q <= 1.0:
        raise ValueError("min_q must lie in (0, 1]")
    if beta_sum_over_q < 0.0:
        raise ValueError("the beta sum is nonnegative by construction")
    g = gamma_tilde(d, n_arms, t)
    return (800.0 * d * n_arms * g * g / min_q + beta_sum_over_q) ** -0.5


# ---------------------------------------------------------------------------
# loss predictors


@dataclass
class PredictorState:
    """Per-arm regularized least squares on observed (context, loss) pairs."""

    regularizer: np.ndarray
    support: np.ndarray
    design: np.ndarray
    response: np.ndarray

    @property
    def n_arms(self) -> int:
        return self.design.shape[0]


def predictor_init(regularizer: np.ndarray, support: np.ndarray,
                   n_arms: int) -> PredictorState:
    regularizer = np.asarray(regularizer, dtype=float)
    support = np.asarray(support, dtype=float)
    d = support.shape[1]
    if regularizer.shape != (d, d):
        raise ValueError("regularizer must be d x d")
    eigs = np.linalg.eigvalsh(0.5 * (regularizer + regularizer.T))
    if eigs[0] <= 0.0:
        raise ValueError("regularizer must be positive definite")
    return PredictorState(
        regularizer=regularizer,
        support=support,
        design=np.zeros((n_arms, d, d)),
        response=np.zeros((n_arms, d)),
    )


def predictor_update(state: PredictorState, x: np.ndarray, a: int,
                     loss: float) -> PredictorState:
    x = np.asarray(x, dtype=float)
    state.design[a] += np.outer(x, x)
    state.response[a] += loss * x
    return state


def predictor_solve(state: PredictorState, a: int) -> np.ndarray:
    """m_a from (S + design) m = response, scaled into predictions <= 1."""
    m = np.linalg.solve(state.regularizer + state.design[a], state.response[a])
    largest = float(np.max(np.abs(state.support @ m)))
    return m / max(1.0, largest)


def predictor_table(state: PredictorState) -> np.ndarray:
    """All K predictor vectors, stacked (K, d)."""
    return np.stack([predictor_solve(state, a)
                     for a in range(state.n_arms)])


# ---------------------------------------------------------------------------
# barycentric spanner


@dataclass(frozen=True)
class Spanner:
    """d support contexts spanning every other one with coefficients in
    [-2, 2], plus the induced regularizer S = sum b_i b_i'."""

    basis: np.ndarray
    regularizer: np.ndarray
    swaps: int
    coeff_bound: float = SPANNER_BOUND


def spanner_coefficients(spanner: Spanner, x: np.ndarray) -> np.ndarray:
    """Coefficients c with x = sum_i c_i basis_i."""
    return np.linalg.solve(spanner.basis.T, np.asarray(x, dtype=float))


def _greedy_basis(support: np.ndarray) -> np.ndarray:
    """Start from d greedily volume-maximizing support rows."""
    d = support.shape[1]
    residual = support.copy()
    rows = []
    for _ in range(d):
        norms = np.linalg.norm(residual, axis=1)
        pick = int(np.argmax(norms))
        if norms[pick] < 1e-12:
            raise ValueError("support does not span the context space")
        rows.append(support[pick])
        direction = residual[pick] / norms[pick]
        residual = residual - np.outer(residual @ direction, direction)
    return np.array(rows)


def barycentric_spanner(support: np.ndarray) -> Spanner:
    """Awerbuch-Kleinberg determinant swaps until no coefficient exceeds 2."""
    support = np.asarray(support, dtype=float)
    if support.ndim != 2:
        raise ValueError("support must be (n, d)")
    basis = _greedy_basis(support)
    swaps = 0
    for _ in range(10_000):
        coeffs = np.linalg.solve(basis.T, support.T).T  # (n, d)
        worst = np.unravel_index(np.argmax(np.abs(coeffs)), coeffs.shape)
        if abs(coeffs[worst]) <= SPANNER_BOUND + 1e-12:
            return Spanner(basis=basis, regularizer=basis.T @ basis,
                           swaps=swaps)
        basis = basis.copy()
        basis[worst[1]] = support[worst[0]]
        swaps += 1
    raise RuntimeError("spanner construction failed to terminate; "
                       "the support is numerically degenerate")


# ---------------------------------------------------------------------------
# the assembled learner


@dataclass
class MwuState:
    """Mutable state of the continuous exponential-weights learner.

    ``action_set`` lists the arm ids the learner samples over (all K for
    standalone runs; the non-candidate arms inside the reduction stack).
    Predictors cover all K arms so the wrapper can read them for any arm.
    """

    dist: env.ContextDistribution
    n_arms: int
    dim: int
    horizon: float
    action_set: np.ndarray
    n_mc: int
    cum_est: np.ndarray
    predictor: PredictorState
    sigma_bar: np.ndarray
    sigma_tilde: np.ndarray
    min_q: float = 1.0
    beta_sum_over_q: float = 0.0
    t: int = 1
    last_point: Optional[np.ndarray] = None
    last_position: int = -1
    last_rejections: int = 0
    last_eta: float = 0.0
    last_xi: float = 0.0


def mwu_init(dist: env.ContextDistribution, n_arms: int, horizon: float,
             action_set: Optional[Sequence[int]] = None,
             n_mc: int = 2000) -> MwuState:
    """Fresh learner; requires a finite support for spanners and moments."""
    if dist.kind != env.FINITE_UNIFORM:
        raise ValueError("this learner requires a finite context support")
    if horizon <= 1:
        raise ValueError("horizon must exceed 1")
    if action_set is None:
        action_set = np.arange(n_arms)
    action_set = np.asarray(sorted(action_set), dtype=int)
    if action_set.size < 1 or action_set.min() < 0 or action_set.max() >= n_arms:
        raise ValueError("action_set must name existing arms")
    spanner = barycentric_spanner(dist.support)
    predictor = predictor_init(spanner.regularizer, dist.support, n_arms)
    sigma = env.second_moment(dist).sigma
    k_base = action_set.size
    prior = uniform_second_moment(k_base) * sigma \
        + COVARIANCE_RIDGE * np.eye(dist.dim)
    base_cov = np.repeat(prior[None, :, :], k_base, axis=0)
    return MwuState(
        dist=dist,
        n_arms=n_arms,
        dim=dist.dim,
        horizon=float(horizon),
        action_set=action_set,
        n_mc=int(n_mc),
        cum_est=np.zeros((k_base, dist.dim)),
        predictor=predictor,
        sigma_bar=base_cov.copy(),
        sigma_tilde=base_cov.copy(),
    )


def mwu_predictions(state: MwuState, x: np.ndarray) -> np.ndarray:
    """<x, m_a> for every arm a in [K] (not just the action set)."""
    return predictor_table(state.predictor) @ np.asarray(x, dtype=float)


def _coeff_for(state: MwuState, contexts: np.ndarray, eta: float) -> np.ndarray:
    """Exponent coefficients -eta <x, cum_est_a + m_a> over the action set."""
    table = predictor_table(state.predictor)[state.action_set]
    return -eta * contexts @ (state.cum_est + table).T


def mwu_propose(state: MwuState, x: np.ndarray,
                rng: np.random.Generator) -> int:
    """Sample a simplex point from the truncated density and play from it."""
    x = np.asarray(x, dtype=float)
    eta = mwu_learning_rate(state.dim, state.action_set.size, state.t,
                            state.min_q, state.beta_sum_over_q)
    trunc = round_truncation(np.linalg.inv(state.sigma_bar), state.t)
    coeff = _coeff_for(state, x[None, :], eta)[0]
    point, rejections = truncated_sample(x, coeff, trunc, rng)
    position = int(rng.choice(point.size, p=point / point.sum()))
    state.last_point = point
    state.last_position = position
    state.last_rejections = rejections
    state.last_eta = eta
    return int(state.action_set[position])


def mwu_feedback(state: MwuState, x: np.ndarray, action: int, loss: float,
                 q: float = 1.0, upd: int = 1,
                 rng: Optional[np.random.Generator] = None) -> MwuState:
    """Absorb one observed loss and refresh predictors and covariances."""
    if state.last_point is None:
        raise RuntimeError("feedback arrived before any proposal")
    if not 0.0 < q <= 1.0:
        raise ValueError("q must lie in (0, 1]")
    x = np.asarray(x, dtype=float)
    g = gamma_tilde(state.dim, state.action_set.size, state.t)
    bound = 2.0 * math.sqrt(q) / (
        math.sqrt(800.0 * state.dim * state.action_set.size) * g)
    if state.last_eta > bound * (1.0 + 1e-9):
        raise RuntimeError(
            f"learning rate {state.last_eta:.3e} exceeds the variance bound "
            f"{bound:.3e} at round {state.t}")
    table = predictor_table(state.predictor)
    xi = loss - float(table[action] @ x)
    state.last_xi = xi
    positions = np.flatnonzero(state.action_set == action)
    if upd:
        if positions.size != 1:
            raise ValueError("an updating round must play an arm from the "
                             "learner's action set")
        estimate = mwu_estimate(
            state.last_point, x, loss, int(positions[0]),
            table[state.action_set], np.linalg.inv(state.sigma_tilde),
            upd, q)
    else:
        estimate = table[state.action_set].copy()
    state.cum_est += estimate
    predictor_update(state.predictor, x, action, loss)
    state.beta_sum_over_q += 16.0 * g * g * xi * xi / q
    state.min_q = min(state.min_q, q)
    state.t += 1
    if rng is None:
        rng = np.random.default_rng(state.t)
    eta_next = mwu_learning_rate(state.dim, state.action_set.size, state.t,
                                 state.min_q, state.beta_sum_over_q)
    trunc = round_truncation(np.linalg.inv(state.sigma_bar), state.t)
    bar, tilde = estimate_covariances(
        state.dist, lambda batch: _coeff_for(state, batch, eta_next),
        trunc, state.n_mc, rng)
    state.sigma_bar = (1.0 - COVARIANCE_BLEND) * state.sigma_bar \
        + COVARIANCE_BLEND * bar
    state.sigma_tilde = (1.0 - COVARIANCE_BLEND) * state.sigma_tilde \
        + COVARIANCE_BLEND * tilde
    return state


def mwu_step(state: MwuState, x: np.ndarray, loss_fn: Callable[[int], float],
             rng: np.random.Generator):
    """Standalone round with q = 1: propose, observe, learn."""
    action = mwu_propose(state, x, rng)
    loss = float(loss_fn(action))
    mwu_feedback(state, x, action, loss, 1.0, 1, rng)
    return action, state


class MwuCorralBase:
    """Adapter exposing the data-dependent Corral base protocol."""

    def __init__(self, dist: env.ContextDistribution, n_arms: int,
                 horizon: float, candidate: Optional[int] = None,
                 n_mc: int = 2000):
        action_set = None if candidate is None else \
            [a for a in range(n_arms) if a != candidate]
        self.state = mwu_init(dist, n_arms, horizon, action_set, n_mc)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return mwu_predictions(self.state, x)

    def propose(self, x: np.ndarray, rng: np.random.Generator) -> int:
        return mwu_propose(self.state, x, rng)

    def feedback(self, x: np.ndarray, action: int, loss: float, q: float,
                 upd: int) -> None:
        mwu_feedback(self.state, x, action, loss, q, upd)
