"""Package acceptance suite: one test per acceptance criterion.

Each test carries its full statement — instance, tolerance, and wall-clock
budget — and the terminal summary hook in conftest prints one PASS/FAIL
line per criterion. The experiment-scale checks read the shipped config
files so they exercise exactly what a user would run.
"""
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from numpy.random import default_rng

from banditlab import (baselines, env, estimators, ftrl_lc, harness, mwu,
                       reduction)

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"
S2 = 2.0 ** -0.5
BIAS_SUPPORT = np.array([[S2, S2], [-S2, S2]])


def table_policy(support, table):
    support = np.asarray(support, dtype=float)
    table = np.asarray(table, dtype=float)

    def policy(x):
        idx = int(np.argmin(np.linalg.norm(support - x, axis=1)))
        return table[idx]

    return policy


def load_frozen_config(name, policy=None):
    config = harness.load_config(str(CONFIG_DIR / f"{name}.ini"),
                                 policy=policy)
    return replace(config, out_dir=None)


def checkpoint_value(trace_rounds, mean_curve, t):
    pos = int(np.searchsorted(trace_rounds, t))
    assert trace_rounds[pos] == t
    return float(mean_curve[pos])


# ---------------------------------------------------------------------------
# 1. resampling estimator: Monte-Carlo mean against the closed form


def test_criterion_01_mgr_monte_carlo_mean():
    started = time.monotonic()
    dist = env.finite_uniform(env.random_unit_support(5, 2, default_rng(2)))
    table = default_rng(3).random((5, 2)) + 0.2
    table /= table.sum(axis=1, keepdims=True)
    policy = table_policy(dist.support, table)
    sigma = estimators.exact_arm_covariance(dist, policy, 0)
    n_draws = 100_000
    for m_iters in (0, 1, 3, 10):
        expected = estimators.mgr_expected_output(sigma, m_iters)
        rng = default_rng(1000 + m_iters)
        acc = np.zeros((2, 2))
        acc2 = np.zeros((2, 2))
        for _ in range(n_draws):
            draw = estimators.mgr(dist, policy, 0, m_iters, rng).matrix
            acc += draw
            acc2 += draw * draw
        mean = acc / n_draws
        var = np.maximum(acc2 / n_draws - mean * mean, 0.0)
        se = np.sqrt(var / n_draws)
        assert np.all(np.abs(mean - expected) <= 3.0 * se + 1e-12), \
            f"MC mean off at M={m_iters}"
    assert time.monotonic() - started < 30.0


# ---------------------------------------------------------------------------
# 2. resampling estimator: bias contraction from the closed form


def test_criterion_02_mgr_bias_contraction():
    started = time.monotonic()
    dist = env.finite_uniform(env.random_unit_support(5, 2, default_rng(2)))
    table = default_rng(3).random((5, 2)) + 0.2
    table /= table.sum(axis=1, keepdims=True)
    policy = table_policy(dist.support, table)
    sigma = estimators.exact_arm_covariance(dist, policy, 0).matrix
    lam = float(np.linalg.eigvalsh(sigma).min())
    assert lam > 0.0
    for m_iters in (1, 5, 20):
        expected = estimators.mgr_expected_output(sigma, m_iters)
        gap = np.linalg.norm(expected @ sigma - np.eye(2), ord=2)
        assert gap <= (1.0 - 0.5 * lam) ** m_iters + 1e-12
    assert time.monotonic() - started < 1.0


# ---------------------------------------------------------------------------
# 3. loss-parameter estimators: unbiasedness at one-million draws


def test_criterion_03_estimator_unbiasedness():
    started = time.monotonic()
    n = 1_000_000

    # known-covariance importance-weighted estimator
    rng = default_rng(50)
    support = env.random_unit_support(4, 2, rng)
    theta = env.generate_stochastic_theta(2, 2, rng)
    table = rng.random((4, 2)) + 0.2
    table /= table.sum(axis=1, keepdims=True)
    dist = env.finite_uniform(support)
    sigma = estimators.exact_arm_covariance(
        dist, table_policy(support, table), 0).matrix
    sigma_inv = np.linalg.inv(sigma)
    q = 0.7
    idx = rng.integers(4, size=n)
    xs = support[idx]
    actions = (table[idx, 0][:, None] < rng.random((n, 1))).astype(int)[:, 0]
    upd = rng.random(n) < q
    losses = np.einsum("nd,nd->n", theta[actions], xs)
    assert np.max(np.abs(losses)) <= 1.0
    scale = (upd & (actions == 0)) * losses / q
    draws = scale[:, None] * (xs @ sigma_inv.T)
    se = draws.std(axis=0) / math.sqrt(n)
    assert np.all(np.abs(draws.mean(axis=0) - theta[0]) <= 3.0 * se + 1e-9)
    single = estimators.unbiased_theta(sigma_inv, xs[0], float(losses[0]),
                                       int(actions[0]), 0, int(upd[0]), q)
    assert np.allclose(single.vector, draws[0], atol=1e-12)

    # optimistic simplex-weighted estimator with the exact second moment
    rng = default_rng(51)
    support = env.random_unit_support(4, 2, rng)
    theta3 = env.generate_stochastic_theta(3, 2, rng)
    m = np.array([[0.1, -0.2], [0.0, 0.15], [-0.1, 0.05]])
    sigma_x = np.einsum("nd,ne->de", support, support) / support.shape[0]
    tilde = mwu.uniform_second_moment(3) * sigma_x
    st_inv = np.repeat(np.linalg.inv(tilde)[None], 3, axis=0)
    xs = support[rng.integers(4, size=n)]
    points = rng.dirichlet(np.ones(3), size=n)
    chosen = (points.cumsum(axis=1) < rng.random(n)[:, None]).sum(axis=1)
    losses = np.einsum("nd,nd->n", theta3[chosen], xs)
    est = np.broadcast_to(m, (n, 3, 2)).copy()
    xi = losses - np.einsum("nd,nd->n", m[chosen], xs)
    corr = (points[np.arange(n), chosen] * xi)[:, None] * \
        np.einsum("nde,ne->nd", st_inv[chosen], xs)
    est[np.arange(n), chosen] += corr
    mean = est.mean(axis=0)
    se = est.std(axis=0) / math.sqrt(n)
    assert np.all(np.abs(mean - theta3) <= 3.0 * se + 1e-9)
    single = mwu.mwu_estimate(points[0], xs[0], float(losses[0]),
                              int(chosen[0]), m, st_inv, 1, 1.0)
    assert np.allclose(single, est[0], atol=1e-12)
    assert time.monotonic() - started < 60.0


# ---------------------------------------------------------------------------
# 4. main-policy runtime invariants over a full default-schedule run


def test_criterion_04_ftrl_runtime_invariants():
    started = time.monotonic()
    config = load_frozen_config("stochastic")
    instance = harness.build_instance(config)
    lam = instance.lambda_min
    horizon = config.horizon
    constants = ftrl_lc.ftrl_lc_constants(2, 2, float(horizon), lam)
    state = ftrl_lc.init_state(constants)
    rng = default_rng(config.base_seed)
    violations = 0
    for t in range(1, horizon + 1):
        x = env.sample_context(instance.dist, rng)
        _, state, diag = ftrl_lc.step(
            state, x, lambda a, t=t, x=x: env.loss(instance.model, t, x, a,
                                                   rng),
            instance.dist, rng)
        eta, gamma, m_iters = diag["eta"], diag["gamma"], diag["m_iters"]
        if not 0.0 < eta <= 0.5 + 1e-12:
            violations += 1
        if not -1e-12 <= gamma <= 0.5 + 1e-12:
            violations += 1
        if diag["bound_check"] > 1.0 + 1e-9:
            violations += 1
        if m_iters < 1:
            violations += 1
        if t >= 2 and math.exp(-gamma * lam * m_iters / 4.0) > \
                (1.0 + 1e-9) / (t * t):
            violations += 1
    assert violations == 0
    assert time.monotonic() - started < 300.0


# ---------------------------------------------------------------------------
# 5. qualitative regret scaling across regimes


def test_criterion_05_regret_scaling_across_regimes():
    started = time.monotonic()
    stoch_cfg = load_frozen_config("stochastic")
    phase_cfg = load_frozen_config("phase")
    oful_cfg = load_frozen_config("phase", policy="oful")
    instance = harness.build_instance(stoch_cfg)
    values = instance.dist.support @ instance.theta.T
    per_context = np.sort(values, axis=1)
    delta_min = float(np.min(per_context[:, 1] - per_context[:, 0]))
    assert 0.25 <= delta_min <= 0.35  # the advertised gap scale

    stoch = harness.summarize(harness.run(stoch_cfg))[0]
    phase = harness.summarize(harness.run(phase_cfg))[0]
    oful = harness.summarize(harness.run(oful_cfg))[0]

    assert stoch.alpha_hat <= 0.35, \
        f"stochastic growth exponent {stoch.alpha_hat:.3f} exceeds 0.35"
    assert 0.4 <= phase.alpha_hat <= 0.75, \
        f"adversarial growth exponent {phase.alpha_hat:.3f} outside [0.4, 0.75]"
    assert oful.final_mean >= 1.5 * phase.final_mean, \
        (f"optimistic baseline regret {oful.final_mean:.1f} not 1.5x the "
         f"main policy's {phase.final_mean:.1f}")
    assert time.monotonic() - started < 1800.0


# ---------------------------------------------------------------------------
# 6. recovery after a sqrt(T) corruption window


def test_criterion_06_corruption_recovery():
    started = time.monotonic()
    config = load_frozen_config("corrupted")
    window = math.ceil(math.sqrt(config.horizon))
    traces = harness.run(config)
    rounds = traces[0].rounds
    mean = np.stack([t.cum_regret for t in traces]).mean(axis=0)
    at_window = checkpoint_value(rounds, mean, window)
    at_80 = checkpoint_value(rounds, mean, int(0.8 * config.horizon))
    at_end = checkpoint_value(rounds, mean, config.horizon)
    window_rate = at_window / window
    final_rate = (at_end - at_80) / (config.horizon - int(0.8 *
                                                          config.horizon))
    assert window_rate > 0.0
    assert final_rate <= 0.2 * window_rate, \
        (f"final incremental rate {final_rate:.5f} above 20% of the "
         f"corruption-window rate {window_rate:.5f}")
    assert time.monotonic() - started < 600.0


# ---------------------------------------------------------------------------
# 7. meta-allocation solver against brute-force grid search


def test_criterion_07_corral_solver_oracle():
    started = time.monotonic()
    grid = np.linspace(1e-9, 1.0 - 1e-9, 1_000_001)
    sqrt_g = np.sqrt(grid)
    sqrt_1mg = np.sqrt(1.0 - grid)
    log_g = np.log(grid)
    log_1mg = np.log(1.0 - grid)
    rng = default_rng(77)
    for _ in range(100):
        state = reduction.corral_init(
            "iw", 0, float(rng.uniform(0.5, 40.0)),
            float(rng.uniform(0.5, 15.0)), 2000.0)
        state.z_sum = rng.normal(scale=5.0, size=2)
        state.bonus = float(rng.uniform(0.0, 12.0))
        t = int(rng.integers(1, 1000))
        q = reduction.corral_meta_distribution(state, t)
        eta = 1.0 / (math.sqrt(t) + 8.0 * math.sqrt(state.c1))
        beta = 1.0 / (8.0 * state.c2)
        target = state.z_sum - np.array([0.0, state.bonus])
        objective = (1.0 - grid) * target[0] + grid * target[1] \
            - (2.0 / eta) * (sqrt_g + sqrt_1mg) \
            - (1.0 / beta) * (log_g + log_1mg)
        best = grid[int(np.argmin(objective))]
        solver = (q[1] - 1.0 / (4.0 * t * t)) / (1.0 - 1.0 / (2.0 * t * t))
        assert abs(solver - best) <= 1e-5

    # post-clip floor over a full reduction run
    dist = env.finite_uniform(env.random_unit_support(6, 2, default_rng(4)))
    c1, c2 = 9.0, 3.0

    def factory(candidate):
        base = reduction.RealLinExp3Base(dist, 2)
        return reduction.CorralLearner("iw", candidate, c1, c2, 400.0, base)

    run_rng = default_rng(11)
    state = reduction.bobw_init(2, 400.0, c2, factory, run_rng)
    theta = env.generate_stochastic_theta(2, 2, default_rng(9))
    model = env.stochastic_model(theta)
    for t in range(1, 401):
        x = env.sample_context(dist, run_rng)
        _, state = reduction.bobw_step(
            state, t, x,
            lambda a, t=t, x=x: env.loss(model, t, x, a, run_rng), run_rng)
        q = state.base.state.last_q
        assert float(np.min(q)) >= 1.0 / (4.0 * t * t) - 1e-15
    assert time.monotonic() - started < 60.0


# ---------------------------------------------------------------------------
# 8. continuous sampler against simplex quadrature


def _quad_mean_two_arms(coeff, n_grid=200_001):
    r1 = np.linspace(0.0, 1.0, n_grid)
    expo = coeff[0] * r1 + coeff[1] * (1.0 - r1)
    w = np.exp(expo - expo.max())
    m1 = float((w * r1).sum() / w.sum())
    return np.array([m1, 1.0 - m1])


def _quad_mean_three_arms(coeff, n_grid=1200):
    g = (np.arange(n_grid) + 0.5) / n_grid
    r1, r2 = np.meshgrid(g, g, indexing="ij")
    keep = r1 + r2 <= 1.0
    r1, r2 = r1[keep], r2[keep]
    r3 = 1.0 - r1 - r2
    expo = coeff[0] * r1 + coeff[1] * r2 + coeff[2] * r3
    w = np.exp(expo - expo.max())
    total = w.sum()
    return np.array([(w * r1).sum(), (w * r2).sum(), (w * r3).sum()]) / total


def test_criterion_08_continuous_sampler_oracle():
    started = time.monotonic()
    cases = [
        np.array([0.0, 0.0]),
        np.array([2.0, -1.0]),
        np.array([-1.5, 0.5]),
        np.array([0.0, 0.0, 0.0]),
        np.array([1.2, 0.0, -0.7]),
        np.array([-2.0, 1.0, 0.4]),
    ]
    for i, coeff in enumerate(cases):
        quad = _quad_mean_two_arms(coeff) if coeff.size == 2 \
            else _quad_mean_three_arms(coeff)
        draws = mwu.sample_exp_weights(coeff, default_rng(300 + i),
                                       size=80_000)
        se = draws.std(axis=0) / math.sqrt(draws.shape[0])
        assert np.all(np.abs(draws.mean(axis=0) - quad) <= 3.0 * se + 1e-4), \
            f"sampler moments off for coefficients {coeff}"

    # rejection counts at the default truncation level on the 2-arm toy
    prior = mwu.uniform_second_moment(2) * 0.5 * np.eye(2)
    inv = np.repeat(np.linalg.inv(prior)[None], 2, axis=0)
    trunc = mwu.round_truncation(inv, 1)
    rng = default_rng(5)
    counts = [mwu.truncated_sample(BIAS_SUPPORT[0], np.array([1.0, -1.0]),
                                   trunc, rng)[1] for _ in range(300)]
    assert float(np.mean(counts)) <= 2.0
    assert time.monotonic() - started < 300.0


# ---------------------------------------------------------------------------
# 9. spanner coefficients and predictor norm bounds


def test_criterion_09_spanner_and_predictor():
    started = time.monotonic()
    for d in range(2, 7):
        support = env.random_unit_support(50, d, default_rng(400 + d))
        spanner = mwu.barycentric_spanner(support)
        coeffs = np.stack([mwu.spanner_coefficients(spanner, x)
                           for x in support])
        assert np.max(np.abs(coeffs)) <= 2.0 + 1e-9
        assert np.allclose(coeffs @ spanner.basis, support, atol=1e-9)
        state = mwu.predictor_init(spanner.regularizer, support, 1)
        rng = default_rng(500 + d)
        theta = env.generate_stochastic_theta(2, d, rng)[0]
        for _ in range(200):
            x = support[rng.integers(50)]
            state = mwu.predictor_update(state, x, 0, float(x @ theta)
                                         + float(rng.normal(0.0, 0.1)))
        m = mwu.predictor_solve(state, 0)
        s_norm = float(m @ spanner.regularizer @ m)
        assert s_norm <= d + 1e-9
        s_inv = np.linalg.inv(spanner.regularizer)
        x_norms = np.einsum("nd,de,ne->n", support, s_inv, support)
        assert np.max(x_norms) <= 4.0 * d + 1e-9

    # noiseless consistency on a two-dimensional instance
    support = env.random_unit_support(12, 2, default_rng(62))
    spanner = mwu.barycentric_spanner(support)
    theta = env.generate_stochastic_theta(2, 2, default_rng(63))[0]
    state = mwu.predictor_init(spanner.regularizer, support, 1)
    rng = default_rng(64)
    for _ in range(10_000):
        x = support[rng.integers(12)]
        state = mwu.predictor_update(state, x, 0, float(x @ theta))
    m = mwu.predictor_solve(state, 0)
    predictions = support @ m
    truth = support @ theta
    assert np.max(np.abs(predictions - truth)) <= 0.01
    assert time.monotonic() - started < 60.0


# ---------------------------------------------------------------------------
# 10. exact orthogonality on basis-vector supports


def test_criterion_10_basis_support_orthogonality():
    started = time.monotonic()
    dist = env.finite_uniform(np.eye(2))
    theta = np.array([[0.4, -0.3], [-0.2, 0.5]])
    model = env.stochastic_model(theta)
    horizon = 2000

    # main policy: every accumulated estimate stays on its own coordinate
    constants = ftrl_lc.ftrl_lc_constants(2, 2, float(horizon), 0.5,
                                          m_scale=0.1)
    state = ftrl_lc.init_state(constants)
    rng = default_rng(70)
    for t in range(1, horizon + 1):
        x = env.sample_context(dist, rng)
        coord = int(np.argmax(np.abs(x)))
        before = state.cum_theta.copy()
        _, state, _ = ftrl_lc.step(
            state, x, lambda a, t=t, x=x: env.loss(model, t, x, a, rng),
            dist, rng)
        delta = state.cum_theta - before
        off = np.delete(delta, coord, axis=1)
        assert np.all(off == 0.0)

    # importance-weighted baseline: same exact-zero property
    rl_state = baselines.reallinexp3_init(dist, 2)
    rng = default_rng(71)
    for t in range(1, horizon + 1):
        x = env.sample_context(dist, rng)
        coord = int(np.argmax(np.abs(x)))
        before = rl_state.cum_theta_hat.copy()
        _, rl_state = baselines.reallinexp3_step(
            rl_state, x, 1.0,
            lambda a, t=t, x=x: env.loss(model, t, x, a, rng), rng)
        delta = rl_state.cum_theta_hat - before
        off = np.delete(delta, coord, axis=1)
        assert np.all(off == 0.0)
    assert time.monotonic() - started < 60.0


# ---------------------------------------------------------------------------
# 11. artifact determinism and exact round-trip


def test_criterion_11_determinism_and_roundtrip(tmp_path):
    started = time.monotonic()
    config = harness.ExperimentConfig(
        policy="ftrl_lc", env_kind="stochastic", horizon=400,
        replications=2, base_seed=17, support_points=8,
        overrides={"m_scale": 0.1})
    blobs = []
    traces = None
    for i in range(2):
        traces = harness.run(config)
        path = tmp_path / f"run{i}.csv"
        harness.write_traces(traces, str(path))
        blobs.append(path.read_bytes())
    assert blobs[0] == blobs[1]

    back = harness.read_traces(str(tmp_path / "run1.csv"))
    assert len(back) == len(traces)
    for orig, copy in zip(traces, back):
        assert copy.policy == orig.policy
        assert copy.replication == orig.replication
        assert copy.seed == orig.seed
        assert np.array_equal(copy.rounds, orig.rounds)
        assert np.array_equal(copy.actions, orig.actions)
        assert np.array_equal(copy.losses, orig.losses)
        assert np.array_equal(copy.cum_regret, orig.cum_regret)
        for key in orig.diagnostics:
            assert np.array_equal(copy.diagnostics[key],
                                  orig.diagnostics[key], equal_nan=True)
    assert time.monotonic() - started < 60.0
