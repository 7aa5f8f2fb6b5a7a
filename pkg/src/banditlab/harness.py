"""Experiment orchestration: configs, replications, regret accounting,
trace persistence, and summary emission.

A run is specified by a flat INI config (sections ``[experiment]``,
``[environment]``, ``[policy]``) naming one policy and one environment.
``run`` executes R independent replications seeded ``base_seed + r``,
each with its own policy state, environment stream, and generator, and
returns one :class:`RegretTrace` per replication.

Regret is pseudo-regret against the per-context optimal policy: in the
stochastic kinds the played arm's noiseless gap ``<x, theta_a> - min_b
<x, theta_b>``; in the phase/adversarial kinds the gap of expected
observed (noise-truncated) losses against the arm with the smallest
expected cumulative loss for that context over the whole schedule.

Traces record every round up to 10^4 and then geometrically thinned
rounds (factor 1.05), plus the summary checkpoints. Persistence is a
single CSV with round-trip-exact float formatting, plus an SVG figure of
mean regret with +/-2 SE bands; identical (config, seed) pairs produce
byte-identical files.
"""
from __future__ import annotations

import configparser
import csv
import math
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import baselines, env, ftrl_lc, mwu, reduction

POLICIES = ("ftrl_lc", "reallinexp3", "oful", "uniform", "bobw_iw", "bobw_dd")
ENVIRONMENTS = ("stochastic", "corrupted", "phase")
SUPPORTS = ("bias2", "random")

#: traces keep every round up to here, then thin geometrically
FULL_TRACE_ROUNDS = 10_000
TRACE_GROWTH = 1.05

BASE_COLUMNS = ("t", "replication", "seed", "policy", "action", "loss",
                "cum_regret")

DIAGNOSTIC_COLUMNS = {
    "ftrl_lc": ("entropy", "eta", "gamma", "m_iters", "bound_check",
                "resamples"),
    "reallinexp3": (),
    "oful": ("radius",),
    "uniform": (),
    "bobw_iw": ("epoch", "candidate", "q_base", "bonus", "eta_meta"),
    "bobw_dd": ("epoch", "candidate", "q_base", "bonus", "eta_meta",
                "rejection_count", "eta_mwu", "xi", "cond_sigma_tilde"),
}

TRACES_FILE = "traces.csv"
SUMMARY_FILE = "summary.csv"
FIGURE_FILE = "regret.svg"


class ConfigError(ValueError):
    """A config file that cannot be turned into a runnable experiment."""


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    policy: str
    env_kind: str
    n_arms: int = 2
    dim: int = 2
    horizon: int = 50_000
    replications: int = 20
    base_seed: int = 100
    out_dir: Optional[str] = None
    support: str = "random"
    support_points: int = 20
    support_seed: int = 4
    theta_seed: int = 1017
    noise_std: float = env.DEFAULT_NOISE_STD
    phase_gap: float = 0.125
    phase_factor: float = 1.6
    corruption_horizon: int = 0  # 0 means ceil(sqrt(horizon))
    overrides: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}; "
                              f"choose from {POLICIES}")
        if self.env_kind not in ENVIRONMENTS:
            raise ConfigError(f"unknown environment {self.env_kind!r}; "
                              f"choose from {ENVIRONMENTS}")
        if self.support not in SUPPORTS:
            raise ConfigError(f"unknown support {self.support!r}; "
                              f"choose from {SUPPORTS}")
        if self.horizon < 1 or self.replications < 1:
            raise ConfigError("horizon and replications must be positive")
        if self.n_arms < 2 or self.dim < 1:
            raise ConfigError("need at least two arms and one dimension")
        if self.support == "bias2" and self.dim != 2:
            raise ConfigError("the bias2 support is two-dimensional")
        if self.noise_std < 0.0:
            raise ConfigError("noise_std must be nonnegative")


_EXPERIMENT_KEYS = {"policy", "horizon", "replications", "base_seed",
                    "out_dir"}
_ENVIRONMENT_KEYS = {"kind", "n_arms", "dim", "support", "support_points",
                     "support_seed", "theta_seed", "noise_std", "phase_gap",
                     "phase_factor", "corruption_horizon"}


def load_config(path: str, *, seed: Optional[int] = None,
                policy: Optional[str] = None,
                out_dir: Optional[str] = None) -> ExperimentConfig:
    """Parse an INI experiment file; keyword arguments override it."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path!r}")
    if "experiment" not in parser or "environment" not in parser:
        raise ConfigError("config needs [experiment] and [environment] "
                          "sections")
    exp = parser["experiment"]
    envsec = parser["environment"]
    for key in exp:
        if key not in _EXPERIMENT_KEYS:
            raise ConfigError(f"unknown [experiment] key {key!r}")
    for key in envsec:
        if key not in _ENVIRONMENT_KEYS:
            raise ConfigError(f"unknown [environment] key {key!r}")
    overrides: Dict[str, float] = {}
    if "policy" in parser:
        for key, value in parser["policy"].items():
            overrides[key] = _number(key, value)
    try:
        kwargs = dict(
            policy=policy if policy is not None
            else exp.get("policy", "ftrl_lc"),
            env_kind=envsec.get("kind", "stochastic"),
            n_arms=int(_number("n_arms", envsec.get("n_arms", "2"))),
            dim=int(_number("dim", envsec.get("dim", "2"))),
            horizon=int(_number("horizon", exp.get("horizon", "50000"))),
            replications=int(_number("replications",
                                     exp.get("replications", "20"))),
            base_seed=seed if seed is not None
            else int(_number("base_seed", exp.get("base_seed", "100"))),
            out_dir=out_dir if out_dir is not None else exp.get("out_dir"),
            support=envsec.get("support", "random"),
            support_points=int(_number("support_points",
                                       envsec.get("support_points", "20"))),
            support_seed=int(_number("support_seed",
                                     envsec.get("support_seed", "4"))),
            theta_seed=int(_number("theta_seed",
                                   envsec.get("theta_seed", "1017"))),
            noise_std=_number("noise_std",
                              envsec.get("noise_std",
                                         repr(env.DEFAULT_NOISE_STD))),
            phase_gap=_number("phase_gap", envsec.get("phase_gap", "0.125")),
            phase_factor=_number("phase_factor",
                                 envsec.get("phase_factor", "1.6")),
            corruption_horizon=int(_number(
                "corruption_horizon", envsec.get("corruption_horizon", "0"))),
            overrides=overrides,
        )
    except ConfigError:
        raise
    except (ValueError, OverflowError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc
    return ExperimentConfig(**kwargs)


def _number(key: str, raw: str) -> float:
    try:
        return float(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"value for {key!r} is not a number: {raw!r}") \
            from exc


# ---------------------------------------------------------------------------
# instances


BIAS2_SUPPORT = np.array([[2.0 ** -0.5, 2.0 ** -0.5],
                          [-(2.0 ** -0.5), 2.0 ** -0.5]])


@dataclass(frozen=True)
class Instance:
    """A fully materialized environment plus its regret accounting data."""

    dist: env.ContextDistribution
    model: env.LossModel
    kind: str
    lambda_min: float
    theta: Optional[np.ndarray] = None


def build_instance(config: ExperimentConfig) -> Instance:
    if config.support == "bias2":
        support = BIAS2_SUPPORT
    else:
        support = env.random_unit_support(config.support_points, config.dim,
                                          np.random.default_rng(
                                              config.support_seed))
    dist = env.finite_uniform(support)
    lambda_min = env.second_moment(dist).lambda_min
    if config.env_kind == "phase":
        model = env.phase_model(config.n_arms,
                                phase_factor=config.phase_factor,
                                phase_gap=config.phase_gap,
                                noise_std=config.noise_std)
        return Instance(dist, model, "phase", lambda_min)
    theta = env.generate_stochastic_theta(config.n_arms, config.dim,
                                          np.random.default_rng(
                                              config.theta_seed))
    if config.env_kind == "stochastic":
        model = env.stochastic_model(theta, noise_std=config.noise_std)
        return Instance(dist, model, "stochastic", lambda_min, theta)
    window = config.corruption_horizon or math.ceil(
        math.sqrt(config.horizon))
    model = env.corrupted_model(theta, window, noise_std=config.noise_std)
    return Instance(dist, model, "corrupted", lambda_min, theta)


def instant_regret_fn(instance: Instance,
                      horizon: int) -> Callable[[int, np.ndarray, int], float]:
    """Per-round pseudo-regret of playing arm a on context x at round t."""
    if instance.kind in ("stochastic", "corrupted"):
        theta = instance.theta

        def stochastic_gap(t: int, x: np.ndarray, a: int) -> float:
            values = theta @ x
            return float(values[a] - values.min())

        return stochastic_gap
    if instance.dist.kind != env.FINITE_UNIFORM:
        raise ValueError("schedule-based regret accounting needs a finite "
                         "context support")
    support = instance.dist.support
    means = _expected_observed_losses(instance.model, support, horizon)
    best = np.argmin(means.sum(axis=0), axis=1)  # (n_support,)

    def schedule_gap(t: int, x: np.ndarray, a: int) -> float:
        idx = int(np.argmin(np.abs(support - x).sum(axis=1)))
        row = means[t - 1, idx]
        return float(row[a] - row[best[idx]])

    return schedule_gap


def _expected_observed_losses(model: env.LossModel, support: np.ndarray,
                              horizon: int) -> np.ndarray:
    """(T, n_support, K) expected values of the sampled (truncated) loss."""
    cache: Dict[float, float] = {}

    def truncated(mu: float) -> float:
        if mu not in cache:
            cache[mu] = env.truncated_loss_mean(mu, model.noise_std)
        return cache[mu]

    if model.regime == env.STOCHASTIC_PHASE:
        # phase means ignore the context; compute once and broadcast
        flat = np.array([[truncated(env.mean_loss(model, t, support[0], a))
                          for a in range(model.K)]
                         for t in range(1, horizon + 1)])
        return np.broadcast_to(flat[:, None, :],
                               (horizon, support.shape[0], model.K))
    out = np.empty((horizon, support.shape[0], model.K))
    for t in range(1, horizon + 1):
        for i, x in enumerate(support):
            for a in range(model.K):
                out[t - 1, i, a] = truncated(env.mean_loss(model, t, x, a))
    return out


# ---------------------------------------------------------------------------
# policy adapters


class _LossRecorder:
    """Wraps a loss oracle so the harness can log the evaluated loss."""

    def __init__(self, fn: Callable[[int], float]):
        self.fn = fn
        self.value = math.nan

    def __call__(self, action: int) -> float:
        self.value = float(self.fn(action))
        return self.value


class FtrlPolicy:
    name = "ftrl_lc"

    def __init__(self, instance: Instance, horizon: int,
                 ov: Dict[str, float], rng: np.random.Generator):
        constants = ftrl_lc.ftrl_lc_constants(
            instance.model.K, instance.dist.dim, float(horizon),
            instance.lambda_min,
            c1_scale=ov.get("c1_scale", 1.0),
            c2_scale=ov.get("c2_scale", 1.0),
            exploration_scale=ov.get("exploration_scale", 1.0),
            m_scale=ov.get("m_scale", 1.0))
        self.state = ftrl_lc.init_state(constants)
        self.dist = instance.dist

    def play(self, t, x, loss_fn, rng):
        action, self.state, diag = ftrl_lc.step(self.state, x, loss_fn,
                                                self.dist, rng)
        return action, {k: diag[k] for k in DIAGNOSTIC_COLUMNS[self.name]}


class RealLinExp3Policy:
    name = "reallinexp3"

    def __init__(self, instance: Instance, horizon: int,
                 ov: Dict[str, float], rng: np.random.Generator):
        self.state = baselines.reallinexp3_init(instance.dist,
                                                instance.model.K)

    def play(self, t, x, loss_fn, rng):
        action, self.state = baselines.reallinexp3_step(self.state, x, 1.0,
                                                        loss_fn, rng)
        return action, {}


class OfulPolicy:
    name = "oful"

    def __init__(self, instance: Instance, horizon: int,
                 ov: Dict[str, float], rng: np.random.Generator):
        self.state = baselines.oful_init(
            instance.model.K, instance.dist.dim,
            lambda_reg=ov.get("lambda_reg", 1.0),
            delta=ov.get("delta", 0.05))

    def play(self, t, x, loss_fn, rng):
        action = baselines.oful_predict(self.state, x)
        self.state = baselines.oful_update(self.state, x, action,
                                           loss_fn(action))
        return action, {"radius": baselines.oful_radius(self.state)}


class UniformPolicy:
    name = "uniform"

    def __init__(self, instance: Instance, horizon: int,
                 ov: Dict[str, float], rng: np.random.Generator):
        self.n_arms = instance.model.K

    def play(self, t, x, loss_fn, rng):
        action = baselines.uniform_action(self.n_arms, rng)
        loss_fn(action)
        return action, {}


class BobwPolicy:
    """Epoch wrapper around a Corral learner over a stability-wrapped base."""

    def __init__(self, mode: str, instance: Instance, horizon: int,
                 ov: Dict[str, float], rng: np.random.Generator):
        self.name = "bobw_iw" if mode == "iw" else "bobw_dd"
        self.mode = mode
        n_arms, dim = instance.model.K, instance.dist.dim
        if mode == "iw":
            c1, c2 = reduction.iw_stability_constants(n_arms, dim,
                                                      instance.lambda_min)
        else:
            c1, c2 = reduction.dd_stability_constants(n_arms, dim,
                                                      float(horizon))
        c1 = ov.get("corral_c1", c1)
        c2 = ov.get("corral_c2", c2)
        epoch_c2 = ov.get("epoch_c2", c2)
        n_mc = int(ov.get("n_mc", 2000))
        dist = instance.dist

        def factory(candidate: int):
            if mode == "iw":
                base = reduction.RealLinExp3Base(dist, n_arms)
                return reduction.CorralLearner("iw", candidate, c1, c2,
                                               float(horizon), base)
            base = mwu.MwuCorralBase(dist, n_arms, float(horizon), candidate,
                                     n_mc=n_mc)
            return reduction.CorralLearner("dd", candidate, c1, c2,
                                           float(horizon), base,
                                           predictors=base.predict)

        self.state = reduction.bobw_init(n_arms, float(horizon), epoch_c2,
                                         factory, rng)

    def play(self, t, x, loss_fn, rng):
        action, self.state = reduction.bobw_step(self.state, t, x, loss_fn,
                                                 rng)
        corral = self.state.base
        diag = {
            "epoch": self.state.k,
            "candidate": self.state.candidate,
            "q_base": math.nan if corral.state.last_q is None
            else float(corral.state.last_q[1]),
            "bonus": corral.state.bonus,
            "eta_meta": math.nan if corral.state.last_eta is None
            else float(np.min(corral.state.last_eta)),
        }
        if self.mode == "dd":
            learner = corral.base.state
            diag.update({
                "rejection_count": learner.last_rejections,
                "eta_mwu": learner.last_eta,
                "xi": learner.last_xi,
                "cond_sigma_tilde":
                    float(np.max(np.linalg.cond(learner.sigma_tilde))),
            })
        return action, diag


def build_policy(name: str, instance: Instance, horizon: int,
                 overrides: Dict[str, float], rng: np.random.Generator):
    if name == "ftrl_lc":
        return FtrlPolicy(instance, horizon, overrides, rng)
    if name == "reallinexp3":
        return RealLinExp3Policy(instance, horizon, overrides, rng)
    if name == "oful":
        return OfulPolicy(instance, horizon, overrides, rng)
    if name == "uniform":
        return UniformPolicy(instance, horizon, overrides, rng)
    if name == "bobw_iw":
        return BobwPolicy("iw", instance, horizon, overrides, rng)
    if name == "bobw_dd":
        return BobwPolicy("dd", instance, horizon, overrides, rng)
    raise ConfigError(f"unknown policy {name!r}")


# ---------------------------------------------------------------------------
# traces


@dataclass
class RegretTrace:
    """Thinned per-round record of one replication."""

    policy: str
    replication: int
    seed: int
    horizon: int
    rounds: np.ndarray
    actions: np.ndarray
    losses: np.ndarray
    cum_regret: np.ndarray
    diagnostics: Dict[str, np.ndarray]
    budget: float = 0.0


def trace_grid(horizon: int,
               extra: Sequence[int] = ()) -> np.ndarray:
    """Recorded rounds: all up to 10^4, then 1.05-geometric, plus
    the summary checkpoints and any ``extra`` rounds."""
    rounds = set(range(1, min(horizon, FULL_TRACE_ROUNDS) + 1))
    t = FULL_TRACE_ROUNDS
    while t < horizon:
        t = min(horizon, max(t + 1, math.ceil(t * TRACE_GROWTH)))
        rounds.add(t)
    for c in (horizon // 10, horizon // 4, horizon // 2,
              int(0.8 * horizon), horizon):
        if 1 <= c <= horizon:
            rounds.add(c)
    for c in extra:
        if 1 <= c <= horizon:
            rounds.add(int(c))
    return np.array(sorted(rounds), dtype=np.int64)


def run_replication(instance: Instance, policy, horizon: int,
                    replication: int, seed: int, grid: np.ndarray,
                    regret_fn: Callable[[int, np.ndarray, int], float],
                    rng: np.random.Generator,
                    keep_log: bool = False):
    """One seeded replication; returns (trace, full per-round log or None)."""
    n_rows = grid.size
    actions = np.zeros(n_rows, dtype=np.int64)
    losses = np.zeros(n_rows)
    cum_rows = np.zeros(n_rows)
    diag_cols = DIAGNOSTIC_COLUMNS[policy.name]
    diags = {k: np.zeros(n_rows) for k in diag_cols}
    log = [] if keep_log else None
    cum = 0.0
    budget = 0.0
    gi = 0
    for t in range(1, horizon + 1):
        x = env.sample_context(instance.dist, rng)
        recorder = _LossRecorder(
            lambda a, t=t, x=x: env.loss(instance.model, t, x, a, rng))
        action, diag = policy.play(t, x, recorder, rng)
        cum += regret_fn(t, x, action)
        budget += float(diag.get("resamples", 0.0))
        if keep_log:
            log.append((t, x, action, recorder.value))
        if gi < n_rows and t == grid[gi]:
            actions[gi] = action
            losses[gi] = recorder.value
            cum_rows[gi] = cum
            for k in diag_cols:
                diags[k][gi] = float(diag[k])
            gi += 1
    trace = RegretTrace(policy.name, replication, seed, horizon,
                        grid.copy(), actions, losses, cum_rows, diags,
                        budget)
    return trace, log


def run(config: ExperimentConfig) -> List[RegretTrace]:
    """Execute all replications; flush partial traces if one fails."""
    instance = build_instance(config)
    regret_fn = instant_regret_fn(instance, config.horizon)
    extra = (instance.model.corruption_horizon,) \
        if instance.kind == "corrupted" else ()
    grid = trace_grid(config.horizon, extra)
    traces: List[RegretTrace] = []
    for r in range(config.replications):
        seed = config.base_seed + r
        rng = np.random.default_rng(seed)
        policy = build_policy(config.policy, instance, config.horizon,
                              config.overrides, rng)
        try:
            trace, _ = run_replication(instance, policy, config.horizon, r,
                                       seed, grid, regret_fn, rng)
        except Exception:
            if config.out_dir and traces:
                emit(traces, summarize(traces), config.out_dir)
            raise
        traces.append(trace)
    return traces


# ---------------------------------------------------------------------------
# summaries


@dataclass(frozen=True)
class PolicySummary:
    policy: str
    horizon: int
    replications: int
    checkpoints: Tuple[Tuple[int, float, float], ...]  # (t, mean, se)
    alpha_hat: float
    final_mean: float
    final_se: float
    budget_mean: float


def fitted_exponent(rounds: np.ndarray, mean_curve: np.ndarray,
                    horizon: int) -> float:
    """Log-log OLS slope of the mean curve over the last decade [T/10, T];
    0.0 when the curve is not strictly positive there.

    The fit subsamples the recorded rounds to log-uniform spacing first, so
    densely recorded early rounds do not dominate the regression.
    """
    mask = rounds >= max(1, horizon // 10)
    ts = rounds[mask].astype(float)
    y = mean_curve[mask]
    if ts.size < 2 or np.min(y) <= 0.0:
        return 0.0
    keep = [0]
    for i in range(1, ts.size):
        if ts[i] >= ts[keep[-1]] * TRACE_GROWTH:
            keep.append(i)
    if keep[-1] != ts.size - 1:
        keep.append(ts.size - 1)
    ts, y = ts[keep], y[keep]
    if ts.size < 2 or ts[0] == ts[-1]:
        return 0.0
    slope = np.polyfit(np.log(ts), np.log(y), 1)[0]
    return float(slope)


def summarize(traces: Sequence[RegretTrace]) -> List[PolicySummary]:
    if not traces:
        raise ValueError("no traces to summarize")
    byname: Dict[str, List[RegretTrace]] = {}
    for trace in traces:
        byname.setdefault(trace.policy, []).append(trace)
    out = []
    for name, group in byname.items():
        horizon = group[0].horizon
        rounds = group[0].rounds
        for trace in group[1:]:
            if trace.horizon != horizon or not np.array_equal(trace.rounds,
                                                              rounds):
                raise ValueError("traces in one summary must share a grid")
        stack = np.stack([trace.cum_regret for trace in group])
        mean = stack.mean(axis=0)
        se = stack.std(axis=0, ddof=1) / math.sqrt(len(group)) \
            if len(group) > 1 else np.zeros_like(mean)
        marks = []
        for c in (horizon // 10, horizon // 4, horizon // 2, horizon):
            pos = int(np.searchsorted(rounds, c))
            if pos < rounds.size and rounds[pos] == c:
                marks.append((int(c), float(mean[pos]), float(se[pos])))
        out.append(PolicySummary(
            policy=name, horizon=horizon, replications=len(group),
            checkpoints=tuple(marks),
            alpha_hat=fitted_exponent(rounds, mean, horizon),
            final_mean=float(mean[-1]), final_se=float(se[-1]),
            budget_mean=float(np.mean([trace.budget for trace in group]))))
    return out


def format_summary(summary: PolicySummary) -> str:
    marks = " ".join(f"t={t}: {m:.1f}+/-{s:.1f}"
                     for t, m, s in summary.checkpoints)
    return (f"{summary.policy} (R={summary.replications}): "
            f"final={summary.final_mean:.1f}+/-{summary.final_se:.1f} "
            f"alpha={summary.alpha_hat:.3f} budget={summary.budget_mean:.3g} "
            f"| {marks}")


# ---------------------------------------------------------------------------
# persistence


def _format_value(value: float) -> str:
    """Round-trip-exact decimal text for a float."""
    return repr(float(value))


def diagnostic_header(traces: Sequence[RegretTrace]) -> List[str]:
    cols: List[str] = []
    for trace in traces:
        for key in DIAGNOSTIC_COLUMNS[trace.policy]:
            if key not in cols:
                cols.append(key)
    return cols


def write_traces(traces: Sequence[RegretTrace], path: str) -> None:
    diag_cols = diagnostic_header(traces)
    header = list(BASE_COLUMNS) + diag_cols
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for trace in traces:
            own = DIAGNOSTIC_COLUMNS[trace.policy]
            for i, t in enumerate(trace.rounds):
                row = [str(int(t)), str(trace.replication), str(trace.seed),
                       trace.policy, str(int(trace.actions[i])),
                       _format_value(trace.losses[i]),
                       _format_value(trace.cum_regret[i])]
                row.extend(
                    _format_value(trace.diagnostics[k][i]) if k in own
                    else "" for k in diag_cols)
                writer.writerow(row)


def read_traces(path: str) -> List[RegretTrace]:
    """Rebuild traces from a CSV produced by :func:`write_traces`."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    if header[:len(BASE_COLUMNS)] != list(BASE_COLUMNS):
        raise ValueError(f"unrecognized trace header in {path!r}")
    diag_cols = header[len(BASE_COLUMNS):]
    grouped: Dict[Tuple[str, int], List[List[str]]] = {}
    order: List[Tuple[str, int]] = []
    for row in rows:
        key = (row[3], int(row[1]))
        if key not in grouped:
            grouped[key] = []
            order.append(key)
        grouped[key].append(row)
    traces = []
    for policy, replication in order:
        rows = grouped[(policy, replication)]
        rounds = np.array([int(r[0]) for r in rows], dtype=np.int64)
        own = [k for k in DIAGNOSTIC_COLUMNS.get(policy, ()) if k in diag_cols]
        diags = {k: np.array([float(r[len(BASE_COLUMNS) + diag_cols.index(k)])
                              for r in rows]) for k in own}
        traces.append(RegretTrace(
            policy=policy, replication=replication, seed=int(rows[0][2]),
            horizon=int(rounds[-1]), rounds=rounds,
            actions=np.array([int(r[4]) for r in rows], dtype=np.int64),
            losses=np.array([float(r[5]) for r in rows]),
            cum_regret=np.array([float(r[6]) for r in rows]),
            diagnostics=diags))
    return traces


def write_summary(summaries: Sequence[PolicySummary], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["policy", "replications", "t", "mean_cum_regret",
                         "se", "alpha_hat", "budget_mean"])
        for s in summaries:
            for t, mean, se in s.checkpoints:
                writer.writerow([s.policy, str(s.replications), str(t),
                                 _format_value(mean), _format_value(se),
                                 _format_value(s.alpha_hat),
                                 _format_value(s.budget_mean)])


def write_figure(traces: Sequence[RegretTrace], path: str) -> None:
    """Mean cumulative regret with +/-2 SE bands, one series per policy."""
    import matplotlib
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "banditlab"
    import matplotlib.pyplot as plt

    byname: Dict[str, List[RegretTrace]] = {}
    for trace in traces:
        byname.setdefault(trace.policy, []).append(trace)
    fig, ax = plt.subplots(figsize=(7.0, 4.5))
    for name in sorted(byname):
        group = byname[name]
        rounds = group[0].rounds
        stack = np.stack([trace.cum_regret for trace in group])
        mean = stack.mean(axis=0)
        se = stack.std(axis=0, ddof=1) / math.sqrt(len(group)) \
            if len(group) > 1 else np.zeros_like(mean)
        ax.plot(rounds, mean, label=name)
        ax.fill_between(rounds, mean - 2.0 * se, mean + 2.0 * se, alpha=0.25)
    ax.set_xlabel("round")
    ax.set_ylabel("mean cumulative pseudo-regret")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def emit(traces: Sequence[RegretTrace], summaries: Sequence[PolicySummary],
         out_dir: str) -> Dict[str, str]:
    """Write traces.csv, summary.csv and regret.svg under ``out_dir``."""
    try:
        os.makedirs(out_dir, exist_ok=True)
        paths = {"traces": os.path.join(out_dir, TRACES_FILE),
                 "summary": os.path.join(out_dir, SUMMARY_FILE)}
        write_traces(traces, paths["traces"])
        write_summary(summaries, paths["summary"])
        if traces:
            paths["figure"] = os.path.join(out_dir, FIGURE_FILE)
            write_figure(traces, paths["figure"])
    except OSError as exc:
        raise OSError(f"cannot write experiment output under {out_dir!r}: "
                      f"{exc}") from exc
    return paths
