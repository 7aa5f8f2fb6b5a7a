"""Loss-vector estimation machinery.

Per-arm policy covariances ``Sigma_a = E[pi(a|X) X X^T]``, the unbiased
estimator for the known-covariance case, and Matrix Geometric Resampling
(MGR): a randomized estimate of ``Sigma_a^{-1}`` built from a truncated
geometric series of fresh (context, action) resamples,

    Sigma_plus = rho I + rho * sum_{k=1..M} prod_{j<=k} (I - rho B_j),

where ``B_j = 1{A(j)=a} X(j) X(j)^T`` and ``rho = 1/2``. Only rounds where
the resampled action hits ``a`` change the running product, so the stream
is compressed to hit events with multiplicities and all prefix products are
computed by a batched-matmul scan; this gives the same estimator as the
literal loop (up to float associativity) at a fraction of the cost.

The returned matrix is explicitly symmetrized: the raw sum is not symmetric
for d >= 2 (products of non-commuting symmetric factors), while its
expectation is. Symmetrization preserves the expectation, the operator-norm
cap rho*(M+1), and diagonality on basis-vector supports.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from . import env

#: Geometric mixing constant of the resampling series (fixed by design).
RHO = 0.5


@dataclass(frozen=True)
class ArmCovariance:
    """Exact ``E[1{A=a} X X^T]`` under context-then-policy sampling."""

    matrix: np.ndarray
    arm: int
    exact: bool

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=float)
        if not np.allclose(m, m.T, atol=1e-12, rtol=0.0):
            raise ValueError("arm covariance must be symmetric within 1e-12")
        if float(np.linalg.eigvalsh(m)[0]) < -1e-10:
            raise ValueError("arm covariance must be positive semi-definite")


@dataclass(frozen=True)
class CovarianceInverseEstimate:
    matrix: np.ndarray
    iterations: int
    rho: float = RHO


@dataclass(frozen=True)
class ThetaEstimate:
    vector: np.ndarray
    arm: int
    biased: bool


# ---------------------------------------------------------------------------
# policy plumbing


def _policy_probs(policy: Callable[[np.ndarray], np.ndarray], xs: np.ndarray) -> np.ndarray:
    """Evaluate a context -> probability-vector policy on a batch of rows.

    Policies may expose a vectorized ``batch`` attribute; otherwise they are
    called row by row.
    """
    batch = getattr(policy, "batch", None)
    if batch is not None:
        return np.asarray(batch(xs), dtype=float)
    return np.stack([np.asarray(policy(x), dtype=float) for x in xs])


def _categorical_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of ``probs``."""
    cdf = np.cumsum(probs, axis=1)
    cdf /= cdf[:, -1:]
    u = rng.random(probs.shape[0])
    return (u[:, None] < cdf).argmax(axis=1)


# ---------------------------------------------------------------------------
# scan core


def _prefix_products(factors: np.ndarray) -> np.ndarray:
    """In-order inclusive prefix products ``P_j = F_1 @ ... @ F_j``.

    Hillis-Steele scan: ceil(log2 m) passes of batched matmul. The RHS of
    each assignment is fully materialized before writing, so the slice
    aliasing is safe.
    """
    out = factors.copy()
    m = out.shape[0]
    stride = 1
    while stride < m:
        out[stride:] = out[:-stride] @ out[stride:]
        stride *= 2
    return out


def _compress_hits(actions: np.ndarray, arm: int, m_iters: int) -> Tuple[np.ndarray, np.ndarray, float]:
    """Positions where the resampled action hit ``arm``, as (hit index array,
    multiplicities, leading identity count c0). Multiplicity j counts how
    many of the M partial products equal the j-th distinct hit prefix."""
    pos = np.flatnonzero(actions == arm) + 1  # 1-based resample indices
    if pos.size == 0:
        return pos, np.empty(0), float(m_iters)
    counts = np.empty(pos.size)
    counts[:-1] = np.diff(pos)
    counts[-1] = m_iters + 1 - pos[-1]
    return pos - 1, counts, float(pos[0] - 1)


def _hit_prefixes(hit_contexts: np.ndarray) -> np.ndarray:
    outer = hit_contexts[:, :, None] * hit_contexts[:, None, :]
    factors = np.eye(hit_contexts.shape[1])[None, :, :] - RHO * outer
    return _prefix_products(factors)


def _estimate_matrix(hit_contexts: np.ndarray, counts: np.ndarray, c0: float, d: int) -> np.ndarray:
    lead = RHO * (1.0 + c0) * np.eye(d)
    if hit_contexts.shape[0] == 0:
        return lead
    weighted = np.einsum("j,jkl->kl", counts, _hit_prefixes(hit_contexts))
    return lead + RHO * 0.5 * (weighted + weighted.T)


def _estimate_apply(hit_contexts: np.ndarray, counts: np.ndarray, c0: float, x: np.ndarray) -> np.ndarray:
    """Symmetrized estimate applied to ``x`` without materializing it."""
    lead = RHO * (1.0 + c0) * x
    if hit_contexts.shape[0] == 0:
        return lead
    prefixes = _hit_prefixes(hit_contexts)
    forward = np.einsum("j,jkl,l->k", counts, prefixes, x)
    backward = np.einsum("j,l,jlk->k", counts, x, prefixes)
    return lead + RHO * 0.5 * (forward + backward)


def _draw_resamples(dist: env.ContextDistribution, policy, arm: int, m_iters: int,
                    rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, float]:
    xs = env.sample_contexts(dist, m_iters, rng)
    probs = _policy_probs(policy, xs)
    actions = _categorical_rows(probs, rng)
    hit_idx, counts, c0 = _compress_hits(actions, arm, m_iters)
    return xs[hit_idx], counts, c0


# ---------------------------------------------------------------------------
# operations


def exact_arm_covariance(dist: env.ContextDistribution, policy, arm: int) -> ArmCovariance:
    """Closed-form ``(1/n) sum_i pi(a|x_i) x_i x_i^T`` on a finite support."""
    if dist.kind != env.FINITE_UNIFORM:
        raise ValueError("exact arm covariance needs a finite support")
    probs = _policy_probs(policy, dist.support)[:, arm]
    sigma = np.einsum("i,ij,ik->jk", probs, dist.support, dist.support) / dist.support.shape[0]
    return ArmCovariance((sigma + sigma.T) / 2.0, arm, True)


def mgr(dist: env.ContextDistribution, policy, arm: int, m_iters: int,
        rng: np.random.Generator) -> CovarianceInverseEstimate:
    """Matrix Geometric Resampling with ``m_iters`` fresh resamples."""
    if m_iters < 0:
        raise ValueError("iteration count must be nonnegative")
    if m_iters == 0:
        return CovarianceInverseEstimate(RHO * np.eye(dist.dim), 0)
    hits, counts, c0 = _draw_resamples(dist, policy, arm, m_iters, rng)
    return CovarianceInverseEstimate(_estimate_matrix(hits, counts, c0, dist.dim), m_iters)


def mgr_apply(dist: env.ContextDistribution, policy, arm: int, m_iters: int,
              x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Vector fast path: the symmetrized resampling estimate times ``x``.

    Draws the same stream as :func:`mgr` but never materializes the d x d
    matrix, which is what the per-round estimator loop needs.
    """
    if m_iters < 0:
        raise ValueError("iteration count must be nonnegative")
    if m_iters == 0:
        return RHO * np.asarray(x, dtype=float)
    hits, counts, c0 = _draw_resamples(dist, policy, arm, m_iters, rng)
    return _estimate_apply(hits, counts, c0, np.asarray(x, dtype=float))


def mgr_expected_output(sigma_ta, m_iters: int) -> np.ndarray:
    """Exact expectation of the resampling estimate.

    Equals the truncated geometric series ``rho * sum_{k=0..M} (I - rho S)^k``
    evaluated per eigenvalue; a zero eigenvalue contributes rho*(M+1). The
    expm1/log1p form keeps tiny eigenvalues from cancelling catastrophically.
    """
    if m_iters < 0:
        raise ValueError("iteration count must be nonnegative")
    matrix = sigma_ta.matrix if isinstance(sigma_ta, ArmCovariance) else np.asarray(sigma_ta, dtype=float)
    vals, vecs = np.linalg.eigh(matrix)
    if vals[-1] > 1.0 + 1e-9:
        raise ValueError("spectral norm of the arm covariance must be <= 1")
    vals = np.clip(vals, 0.0, None)
    with np.errstate(divide="ignore", invalid="ignore"):
        series = -np.expm1((m_iters + 1) * np.log1p(-RHO * vals)) / vals
    series = np.where(vals > 0.0, series, RHO * (m_iters + 1))
    return (vecs * series) @ vecs.T


def biased_theta(sigma_plus: CovarianceInverseEstimate, x: np.ndarray, loss: float,
                 chosen: int, arm: int) -> ThetaEstimate:
    """Resampling-based estimate ``Sigma_plus x * loss * 1{chosen=arm}``."""
    if abs(loss) > 1.0 + 1e-12:
        raise ValueError("losses are bounded by 1 in magnitude")
    x = np.asarray(x, dtype=float)
    if chosen != arm:
        return ThetaEstimate(np.zeros_like(x), arm, True)
    return ThetaEstimate(sigma_plus.matrix @ x * loss, arm, True)


def unbiased_theta(sigma_inv: np.ndarray, x: np.ndarray, loss: float, chosen: int,
                   arm: int, upd: int, q: float) -> ThetaEstimate:
    """Known-covariance estimate ``(upd/q) Sigma^{-1} x loss 1{chosen=arm}``."""
    if not 0.0 < q <= 1.0:
        raise ValueError("update probability must lie in (0, 1]")
    x = np.asarray(x, dtype=float)
    if not upd or chosen != arm:
        return ThetaEstimate(np.zeros_like(x), arm, False)
    return ThetaEstimate((sigma_inv @ x) * (loss / q), arm, False)
