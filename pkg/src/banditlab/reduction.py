"""Black-box best-of-both-worlds reduction stack.

Three layers, composable around any suitably stable base learner:

* An epoch-restarting wrapper: each epoch k owns a candidate action and a
  freshly initialized learner; the epoch ends once it is at least twice as
  long as the previous one AND some non-candidate action has received at
  least half of the epoch's pulls, which then becomes the next candidate.
* A two-point Corral meta-learner for importance-weighting-stable bases:
  meta-arm 1 plays the candidate, meta-arm 2 delegates to the base, and the
  base's meta-loss is optimistically discounted by a stability bonus B_t.
  The meta-distribution minimizes a hybrid (-sqrt + log-barrier)
  regularized linear objective over the 2-simplex, solved by bisection on
  the strictly increasing derivative.
* A data-dependent variant for bases whose stability is weighted by squared
  prediction errors: pure log-barrier regularizer with one adaptive inverse
  learning rate per meta-arm, optimistic shift y_t from loss predictors,
  and error-weighted meta-loss estimates and bonus.

Both Corral variants clip the meta-distribution to q_{t,i} >= 1/(4 t^2).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import baselines, env

#: bisection iteration cap; hitting it signals pathological constants
MAX_BISECT = 200


# ---------------------------------------------------------------------------
# two-point Corral


@dataclass
class CorralState:
    mode: str                      # "iw" or "dd"
    candidate: int
    c1: float
    c2: float
    horizon: float
    z_sum: np.ndarray = None
    bonus: float = 0.0             # B_{t-1} entering the next objective
    inv_q2_sum: float = 0.0        # iw: sum of 1/q_{tau,2}
    min_q2: float = 1.0
    dev_sums: np.ndarray = None    # dd: per-meta-arm (1{i=i'} - q)^2 xi^2 sums
    xi_over_q2_sum: float = 0.0    # dd: sum of xi^2 1{i=2}/q_{tau,2}^2
    last_q: np.ndarray = None
    last_eta: np.ndarray = None

    def __post_init__(self) -> None:
        if self.mode not in ("iw", "dd"):
            raise ValueError("mode must be 'iw' or 'dd'")
        if self.z_sum is None:
            self.z_sum = np.zeros(2)
        if self.dev_sums is None:
            self.dev_sums = np.zeros(2)


def corral_init(mode: str, candidate: int, c1: float, c2: float,
                horizon: float) -> CorralState:
    if min(c1, c2) <= 0.0:
        raise ValueError("stability constants must be positive")
    if horizon <= 1:
        raise ValueError("horizon must exceed 1")
    return CorralState(mode, int(candidate), float(c1), float(c2), float(horizon))


def _bisect_increasing(grad: Callable[[float], float]) -> float:
    """Root of a strictly increasing scalar function on (0, 1)."""
    lo, hi = 1e-16, 1.0 - 1e-16
    if grad(lo) > 0.0 or grad(hi) < 0.0:
        # the barrier terms force the correct signs for any sane constants
        raise RuntimeError("two-point solver lost its bracket; "
                           "check the stability constants")
    for _ in range(MAX_BISECT):
        mid = 0.5 * (lo + hi)
        if grad(mid) <= 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15:
            return 0.5 * (lo + hi)
    raise RuntimeError("two-point solver failed to converge; "
                       "check the stability constants")


def corral_meta_distribution(state: CorralState, t: int,
                             y: Optional[np.ndarray] = None) -> np.ndarray:
    """Clipped minimizer of the regularized meta objective at round t."""
    if t < 1:
        raise ValueError("round index must be >= 1")
    target = state.z_sum - np.array([0.0, state.bonus])
    if state.mode == "iw":
        eta = 1.0 / (math.sqrt(t) + 8.0 * math.sqrt(state.c1))
        beta = 1.0 / (8.0 * state.c2)

        def grad(q1: float) -> float:
            return (target[0] - target[1]
                    - (1.0 / eta) * (q1 ** -0.5 - (1.0 - q1) ** -0.5)
                    + (1.0 / beta) * (1.0 / (1.0 - q1) - 1.0 / q1))

        state.last_eta = np.array([eta, eta])
    else:
        if y is None:
            raise ValueError("the data-dependent mode needs the optimistic shift y_t")
        target = target + np.asarray(y, dtype=float)
        log_t = math.log(state.horizon)
        inv_eta = 4.0 * np.sqrt(state.dev_sums + (state.c1 + state.c2 ** 2) * log_t) \
            / math.sqrt(log_t)

        def grad(q1: float) -> float:
            return (target[0] - target[1]
                    - inv_eta[0] / q1 + inv_eta[1] / (1.0 - q1))

        state.last_eta = 1.0 / inv_eta
    q1 = _bisect_increasing(grad)
    q_bar = np.array([q1, 1.0 - q1])
    q = (1.0 - 1.0 / (2.0 * t * t)) * q_bar + 1.0 / (4.0 * t * t)
    state.last_q = q
    return q


def corral_iw_step(state: CorralState, t: int, x: np.ndarray,
                   loss_fn: Callable[[int], float], base,
                   rng: np.random.Generator):
    """One round of the importance-weighting Corral; returns (action, state).

    ``base`` duck-types three methods: ``begin_round(q)`` (told the reveal
    probability every round), ``propose(x, rng)`` (consulted only when
    meta-arm 2 fires), and ``feedback(x, action, loss)``.
    """
    q = corral_meta_distribution(state, t)
    base.begin_round(q[1])
    meta = 0 if rng.random() < q[0] else 1
    if meta == 0:
        action = state.candidate
    else:
        action = int(base.propose(x, rng))
    loss = float(loss_fn(action))
    if meta == 1:
        base.feedback(x, action, loss)
    z = np.zeros(2)
    z[meta] = (loss + 1.0) / q[meta]
    z -= 1.0
    state.z_sum += z
    state.inv_q2_sum += 1.0 / q[1]
    state.min_q2 = min(state.min_q2, q[1])
    state.bonus = math.sqrt(state.c1 * state.inv_q2_sum) + state.c2 / state.min_q2
    return action, state


def corral_dd_step(state: CorralState, t: int, x: np.ndarray,
                   loss_fn: Callable[[int], float], base, predictors,
                   rng: np.random.Generator):
    """One round of the data-dependent Corral; returns (action, state).

    ``base`` proposes before the meta-distribution is formed (its proposal
    fixes the optimistic shift y_{t,2}) and receives
    ``feedback(x, action, loss, q, upd)`` afterwards. ``predictors(x)``
    returns the K predicted losses <x, m_{t,a}>.
    """
    base_action = int(base.propose(x, rng))
    preds = np.asarray(predictors(x), dtype=float)
    y = np.array([preds[state.candidate], preds[base_action]])
    q = corral_meta_distribution(state, t, y=y)
    meta = 0 if rng.random() < q[0] else 1
    action = state.candidate if meta == 0 else base_action
    loss = float(loss_fn(action))
    upd = 1 if meta == 1 else 0
    base.feedback(x, action, loss, q[1], upd)
    xi = loss - y[meta]
    z = y + (loss - y) * (np.arange(2) == meta) / q
    state.z_sum += z
    state.dev_sums += ((np.arange(2) == meta).astype(float) - q) ** 2 * xi * xi
    if meta == 1:
        state.xi_over_q2_sum += xi * xi / (q[1] * q[1])
    state.min_q2 = min(state.min_q2, q[1])
    state.bonus = math.sqrt(state.c1 * state.xi_over_q2_sum) + state.c2 / state.min_q2
    return action, state


# ---------------------------------------------------------------------------
# stability constants of the shipped bases


def iw_stability_constants(n_arms: int, dim: int, lambda_min: float):
    """(c1, c2) under which the adaptive exponential-weights learner is
    1/2-iw-stable."""
    c1 = 36.0 * math.log(n_arms) * n_arms ** 2 * (dim + 1.0 / lambda_min) ** 2
    c2 = 2.0 * n_arms * math.log(n_arms) / lambda_min
    return c1, c2


def dd_stability_constants(n_arms: int, dim: int, horizon: float):
    """(c1, c2) under which the continuous exponential-weights learner is
    1/2-dd-iw-stable; kappa is its per-round stability factor."""
    kappa = 32.0 * n_arms * dim * math.log(10.0 * dim * n_arms * horizon) \
        * math.log(horizon)
    return kappa ** 2, kappa * math.sqrt(50.0 * dim * n_arms)


class RealLinExp3Base:
    """Adapter exposing the Corral base protocol over the adaptive
    exponential-weights learner."""

    def __init__(self, dist: env.ContextDistribution, n_arms: int):
        self.state = baselines.reallinexp3_init(dist, n_arms)

    def begin_round(self, q: float) -> None:
        baselines.reallinexp3_begin(self.state, q)

    def propose(self, x: np.ndarray, rng: np.random.Generator) -> int:
        return baselines.reallinexp3_propose(self.state, x, rng)

    def feedback(self, x: np.ndarray, action: int, loss: float) -> None:
        baselines.reallinexp3_feedback(self.state, x, action, loss)


class CorralLearner:
    """A Corral instance packaged as a restartable learner: candidate on
    meta-arm 1, ``base`` on meta-arm 2. Satisfies the epoch-wrapper
    protocol ``play(x, loss_fn, rng) -> action``."""

    def __init__(self, mode: str, candidate: int, c1: float, c2: float,
                 horizon: float, base, predictors=None):
        self.state = corral_init(mode, candidate, c1, c2, horizon)
        self.base = base
        self.predictors = predictors
        self.t = 0

    def play(self, x: np.ndarray, loss_fn: Callable[[int], float],
             rng: np.random.Generator) -> int:
        self.t += 1
        if self.state.mode == "iw":
            action, _ = corral_iw_step(self.state, self.t, x, loss_fn,
                                       self.base, rng)
        else:
            action, _ = corral_dd_step(self.state, self.t, x, loss_fn,
                                       self.base, self.predictors, rng)
        return action


# ---------------------------------------------------------------------------
# epoch-restarting wrapper


@dataclass
class EpochState:
    n_arms: int
    horizon: float
    c2: float
    base_factory: Callable[[int], object]
    k: int = 1
    candidate: int = 0
    t_k: float = 0.0
    t_km1: float = 0.0
    pull_counts: np.ndarray = None
    base: object = None
    boundaries: list = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.pull_counts is None:
            self.pull_counts = np.zeros(self.n_arms, dtype=np.int64)


def bobw_init(n_arms: int, horizon: float, c2: float,
              base_factory: Callable[[int], object],
              rng: np.random.Generator) -> EpochState:
    """Epoch 1 starts at T_1 = 0 with a uniformly drawn candidate; the
    virtual T_0 = -c2 ln(T) seeds the doubling condition."""
    if n_arms < 2:
        raise ValueError("need at least two actions")
    if horizon <= 1:
        raise ValueError("horizon must exceed 1")
    state = EpochState(n_arms=n_arms, horizon=float(horizon), c2=float(c2),
                       base_factory=base_factory)
    state.candidate = int(rng.integers(n_arms))
    state.t_k = 0.0
    state.t_km1 = -c2 * math.log(horizon)
    state.base = base_factory(state.candidate)
    state.boundaries = [0.0]
    return state


def bobw_step(state: EpochState, t: int, x: np.ndarray,
              loss_fn: Callable[[int], float], rng: np.random.Generator):
    """Delegate round t to the epoch's learner and apply the switch rule."""
    action = int(state.base.play(x, loss_fn, rng))
    state.pull_counts[action] += 1
    elapsed = t - state.t_k
    if elapsed >= 2.0 * (state.t_k - state.t_km1):
        counts = state.pull_counts.copy()
        counts[state.candidate] = -1
        best = int(np.argmax(counts))
        if counts[best] >= elapsed / 2.0:
            state.candidate = best
            state.t_km1 = state.t_k
            state.t_k = float(t)
            state.k += 1
            state.pull_counts = np.zeros(state.n_arms, dtype=np.int64)
            state.base = state.base_factory(best)
            state.boundaries.append(float(t))
    return action, state
