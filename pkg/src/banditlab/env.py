"""Context distributions, loss models, and second-moment information.

The environment side of the laboratory: where contexts come from, how the
losses of the three regimes (stochastic, corrupted stochastic, stochastic
phase) and of oblivious adversarial schedules are generated, and the exact
or Monte-Carlo second moment ``Sigma = E[X X^T]`` together with its smallest
eigenvalue, which the learners consume.

All randomness flows through an explicit ``numpy.random.Generator`` so that
a (config, seed) pair fully determines every sampled stream.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import erf

FINITE_UNIFORM = "finite_uniform"
SPHERICAL_NORMAL = "spherical_normal"

ADVERSARIAL = "adversarial"
STOCHASTIC = "stochastic"
CORRUPTED_STOCHASTIC = "corrupted_stochastic"
STOCHASTIC_PHASE = "stochastic_phase"

#: Per-coordinate Gaussian variance used when generating raw context vectors.
DEFAULT_PER_COORDINATE_VARIANCE = 0.3

#: Standard deviation of the additive loss noise, N(0, 0.3).
DEFAULT_NOISE_STD = math.sqrt(0.3)

#: Maximum number of redraws when rejection-sampling the noise into [-1, 1].
REJECTION_CAP = 10**6

_STOCHASTIC_KINDS = (STOCHASTIC, CORRUPTED_STOCHASTIC)


@dataclass(frozen=True)
class ContextDistribution:
    """A fixed distribution over unit-norm context vectors.

    ``finite_uniform`` draws uniformly from a stored support of unit rows;
    ``spherical_normal`` normalizes a fresh Gaussian draw each round.
    """

    kind: str
    dim: int
    support: Optional[np.ndarray] = None
    per_coordinate_variance: float = DEFAULT_PER_COORDINATE_VARIANCE

    def __post_init__(self) -> None:
        if self.kind not in (FINITE_UNIFORM, SPHERICAL_NORMAL):
            raise ValueError(f"unknown context distribution kind: {self.kind!r}")
        if self.dim < 1:
            raise ValueError("context dimension must be positive")
        if self.kind == FINITE_UNIFORM:
            if self.support is None or self.support.size == 0:
                raise ValueError("finite_uniform requires a non-empty support")
            if self.support.ndim != 2 or self.support.shape[1] != self.dim:
                raise ValueError("support must have shape (n, dim)")


@dataclass(frozen=True)
class SecondMomentInfo:
    """``Sigma = E[X X^T]`` with its smallest eigenvalue.

    ``exact`` is True iff Sigma came from the closed-form average over a
    finite support rather than from Monte-Carlo sampling.
    """

    sigma: np.ndarray
    lambda_min: float
    exact: bool

    def __post_init__(self) -> None:
        sigma = np.asarray(self.sigma, dtype=float)
        if not np.allclose(sigma, sigma.T, atol=1e-12, rtol=0.0):
            raise ValueError("sigma must be symmetric within 1e-12")
        if self.lambda_min <= 0.0:
            raise ValueError("lambda_min must be positive")
        smallest = float(np.linalg.eigvalsh(sigma)[0])
        if abs(smallest - self.lambda_min) > 1e-10:
            raise ValueError("lambda_min does not match the spectrum of sigma")


@dataclass(frozen=True)
class LossModel:
    """Loss generator for one of the four regimes.

    Stochastic kinds hold a (K, d) matrix of unit-norm parameter rows;
    the adversarial regime holds an oblivious schedule ``t -> (K, d)``.
    ``corruption_horizon`` only matters for ``corrupted_stochastic`` (the
    loss mean is sign-flipped while ``t <= corruption_horizon``), and the
    phase fields only matter for ``stochastic_phase``.
    """

    regime: str
    K: int
    theta: Optional[np.ndarray] = None
    schedule: Optional[Callable[[int], np.ndarray]] = None
    corruption_horizon: int = 0
    phase_factor: float = 1.6
    phase_gap: float = 0.125
    initial_phase_length: int = 1
    noise_std: float = DEFAULT_NOISE_STD
    horizon: Optional[int] = None

    def __post_init__(self) -> None:
        if self.regime not in (ADVERSARIAL, STOCHASTIC, CORRUPTED_STOCHASTIC, STOCHASTIC_PHASE):
            raise ValueError(f"unknown regime: {self.regime!r}")
        if self.K < 2:
            raise ValueError("need at least two actions")
        if self.regime in _STOCHASTIC_KINDS:
            if self.theta is None:
                raise ValueError("stochastic kinds need theta")
            theta = np.asarray(self.theta, dtype=float)
            if theta.shape[0] != self.K:
                raise ValueError("theta must have one row per action")
            norms = np.linalg.norm(theta, axis=1)
            if np.any(norms > 1.0 + 1e-9):
                raise ValueError("each theta row must have Euclidean norm <= 1")
        if self.regime == ADVERSARIAL and self.schedule is None:
            raise ValueError("adversarial regime needs an oblivious schedule")
        if self.noise_std < 0.0:
            raise ValueError("noise_std must be nonnegative")


# ---------------------------------------------------------------------------
# constructors


def finite_uniform(support: np.ndarray, per_coordinate_variance: float = DEFAULT_PER_COORDINATE_VARIANCE) -> ContextDistribution:
    """Build a finite-uniform context distribution, normalizing each row."""
    support = np.array(support, dtype=float, copy=True)
    if support.ndim == 1:
        support = support[None, :]
    norms = np.linalg.norm(support, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("support contains a zero vector")
    support = support / norms[:, None]
    support.setflags(write=False)
    return ContextDistribution(FINITE_UNIFORM, support.shape[1], support, per_coordinate_variance)


def spherical_normal(dim: int, per_coordinate_variance: float = DEFAULT_PER_COORDINATE_VARIANCE) -> ContextDistribution:
    return ContextDistribution(SPHERICAL_NORMAL, dim, None, per_coordinate_variance)


def random_unit_support(n: int, dim: int, rng: np.random.Generator,
                        per_coordinate_variance: float = DEFAULT_PER_COORDINATE_VARIANCE) -> np.ndarray:
    """Draw ``n`` support vectors: Gaussian coordinates, normalized once."""
    raw = rng.normal(0.0, math.sqrt(per_coordinate_variance), size=(n, dim))
    norms = np.linalg.norm(raw, axis=1)
    while np.any(norms == 0.0):  # probability-zero guard
        bad = norms == 0.0
        raw[bad] = rng.normal(0.0, math.sqrt(per_coordinate_variance), size=(int(bad.sum()), dim))
        norms = np.linalg.norm(raw, axis=1)
    return raw / norms[:, None]


def stochastic_model(theta: np.ndarray, noise_std: float = DEFAULT_NOISE_STD) -> LossModel:
    theta = np.asarray(theta, dtype=float)
    return LossModel(STOCHASTIC, theta.shape[0], theta=theta, noise_std=noise_std)


def corrupted_model(theta: np.ndarray, corruption_horizon: int,
                    noise_std: float = DEFAULT_NOISE_STD) -> LossModel:
    theta = np.asarray(theta, dtype=float)
    return LossModel(CORRUPTED_STOCHASTIC, theta.shape[0], theta=theta,
                     corruption_horizon=int(corruption_horizon), noise_std=noise_std)


def phase_model(K: int, phase_factor: float = 1.6, phase_gap: float = 0.125,
                initial_phase_length: int = 1, noise_std: float = DEFAULT_NOISE_STD) -> LossModel:
    return LossModel(STOCHASTIC_PHASE, K, phase_factor=phase_factor, phase_gap=phase_gap,
                     initial_phase_length=initial_phase_length, noise_std=noise_std)


def adversarial_model(schedule: Callable[[int], np.ndarray], K: int, horizon: int,
                      noise_std: float = 0.0) -> LossModel:
    return LossModel(ADVERSARIAL, K, schedule=schedule, horizon=horizon, noise_std=noise_std)


# ---------------------------------------------------------------------------
# sampling


def sample_context(dist: ContextDistribution, rng: np.random.Generator) -> np.ndarray:
    """Draw one unit-norm context vector."""
    if dist.kind == FINITE_UNIFORM:
        i = int(rng.integers(dist.support.shape[0]))
        return dist.support[i].copy()
    scale = math.sqrt(dist.per_coordinate_variance)
    while True:
        x = rng.normal(0.0, scale, size=dist.dim)
        norm = np.linalg.norm(x)
        if norm > 0.0:
            return x / norm


def sample_contexts(dist: ContextDistribution, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw a (size, dim) batch of contexts in one vectorized pass."""
    if dist.kind == FINITE_UNIFORM:
        idx = rng.integers(dist.support.shape[0], size=size)
        return dist.support[idx]
    scale = math.sqrt(dist.per_coordinate_variance)
    xs = rng.normal(0.0, scale, size=(size, dist.dim))
    norms = np.linalg.norm(xs, axis=1)
    while np.any(norms == 0.0):
        bad = norms == 0.0
        xs[bad] = rng.normal(0.0, scale, size=(int(bad.sum()), dist.dim))
        norms = np.linalg.norm(xs, axis=1)
    return xs / norms[:, None]


def generate_stochastic_theta(K: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """K independent unit-norm rows from normalized standard Gaussians."""
    if K < 2 or d < 1:
        raise ValueError("need K >= 2 and d >= 1")
    theta = rng.normal(size=(K, d))
    norms = np.linalg.norm(theta, axis=1)
    while np.any(norms == 0.0):
        bad = norms == 0.0
        theta[bad] = rng.normal(size=(int(bad.sum()), d))
        norms = np.linalg.norm(theta, axis=1)
    return theta / norms[:, None]


# ---------------------------------------------------------------------------
# losses


def _phase_index(model: LossModel, t: int) -> int:
    """1-based phase index containing round t; lengths grow by ceil(factor * len)."""
    start = 1
    length = model.initial_phase_length
    k = 1
    while t >= start + length:
        start += length
        length = math.ceil(model.phase_factor * length)
        k += 1
    return k


def _phase_mean(model: LossModel, t: int, a: int) -> float:
    low = _phase_index(model, t) % 2 == 1
    base = 0.0 if low else 1.0 - model.phase_gap
    return base + (model.phase_gap if a != 0 else 0.0)


def mean_loss(model: LossModel, t: int, x: np.ndarray, a: int) -> float:
    """Noiseless expected loss of action ``a`` at context ``x`` in round ``t``."""
    if model.regime == STOCHASTIC:
        return float(model.theta[a] @ x)
    if model.regime == CORRUPTED_STOCHASTIC:
        sign = -1.0 if t <= model.corruption_horizon else 1.0
        return sign * float(model.theta[a] @ x)
    if model.regime == STOCHASTIC_PHASE:
        return _phase_mean(model, t, a)
    return float(model.schedule(t)[a] @ x)


def loss(model: LossModel, t: int, x: np.ndarray, a: int, rng: np.random.Generator) -> float:
    """One realized loss in [-1, 1].

    Noise is rejection-sampled: the Gaussian perturbation is redrawn until
    the total lands in [-1, 1], which leaves the noise distribution
    untouched on the acceptance region. Exceeding the redraw cap means the
    noiseless loss itself lies outside [-1, 1], i.e. a mis-specified model.
    """
    if t < 1:
        raise ValueError("rounds are 1-based")
    if not 0 <= a < model.K:
        raise ValueError(f"action {a} out of range")
    mu = mean_loss(model, t, x, a)
    if model.regime == ADVERSARIAL or model.noise_std == 0.0:
        if abs(mu) > 1.0 + 1e-12:
            raise RuntimeError(f"noiseless loss {mu} outside [-1, 1]; model is mis-specified")
        return mu
    for _ in range(REJECTION_CAP):
        value = mu + rng.normal(0.0, model.noise_std)
        if -1.0 <= value <= 1.0:
            return value
    raise RuntimeError(f"rejection sampling exceeded {REJECTION_CAP} redraws "
                       f"(mean loss {mu} is incompatible with [-1, 1])")


def truncated_loss_mean(mu: float, noise_std: float) -> float:
    """Expected value of ``mu + eps`` given acceptance in [-1, 1].

    The accepted noise is a Gaussian truncated to [-1 - mu, 1 - mu]; the
    mean has the usual closed form in the normal pdf/cdf. Strictly
    increasing in ``mu``, so truncation never reorders actions.
    """
    if noise_std == 0.0:
        return mu
    alpha = (-1.0 - mu) / noise_std
    beta = (1.0 - mu) / noise_std
    pdf = lambda z: math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    cdf = lambda z: 0.5 * (1.0 + erf(z / math.sqrt(2.0)))
    mass = cdf(beta) - cdf(alpha)
    if mass <= 0.0:
        raise ValueError("acceptance region has no mass; |mu| too large")
    return mu + noise_std * (pdf(alpha) - pdf(beta)) / mass


# ---------------------------------------------------------------------------
# oracles


def second_moment(dist: ContextDistribution, mc_samples: int = 200_000,
                  rng: Optional[np.random.Generator] = None) -> SecondMomentInfo:
    """Compute Sigma and lambda_min — exactly on a finite support, by
    Monte-Carlo otherwise (requires an explicit rng for reproducibility)."""
    if dist.kind == FINITE_UNIFORM:
        xs = dist.support
        exact = True
    else:
        if rng is None:
            raise ValueError("Monte-Carlo second moment needs an rng")
        if mc_samples < 1:
            raise ValueError("mc_samples must be positive")
        xs = sample_contexts(dist, mc_samples, rng)
        exact = False
    sigma = xs.T @ xs / xs.shape[0]
    sigma = (sigma + sigma.T) / 2.0
    lam = float(np.linalg.eigvalsh(sigma)[0])
    if lam <= 1e-10:
        raise ValueError("degenerate support: smallest eigenvalue of Sigma is not positive")
    return SecondMomentInfo(sigma, lam, exact)


def optimal_action(model: LossModel, x: np.ndarray) -> int:
    """Per-context optimal action; ties go to the lowest index.

    For stochastic kinds this is the argmin of ``<theta_a, x>`` (equal to
    the truncated-mean argmin since truncation is order-preserving); for the
    phase regime action 0 is optimal in every phase; for adversarial
    schedules the argmin of the cumulative scheduled loss over the horizon.
    """
    if model.regime in _STOCHASTIC_KINDS:
        return int(np.argmin(model.theta @ x))
    if model.regime == STOCHASTIC_PHASE:
        return 0
    if model.horizon is None:
        raise ValueError("adversarial comparator needs the model horizon")
    totals = np.zeros(model.K)
    for t in range(1, model.horizon + 1):
        totals += model.schedule(t) @ x
    return int(np.argmin(totals))
