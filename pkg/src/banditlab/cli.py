"""Command-line front end.

``banditlab run`` executes a configured experiment and persists its
traces; ``banditlab plot`` re-renders a persisted trace directory into an
SVG; ``banditlab selftest`` replays a fast subset of the package's
correctness invariants. Exit codes: 0 success, 1 invariant violation,
2 configuration error.
"""
import math
import os
import sys
import tempfile

import click
import numpy as np

from . import env, estimators, harness, mwu, reduction


@click.group()
def main():
    """Contextual-bandit simulation laboratory."""


@main.command(name="run")
@click.option("--config", "config_path", required=True, type=click.Path(),
              help="INI experiment file.")
@click.option("--seed", type=int, default=None, help="Override base_seed.")
@click.option("--policy", default=None,
              help="Override the configured policy.")
@click.option("--out", "out_dir", default=None,
              help="Override the output directory.")
def run_command(config_path, seed, policy, out_dir):
    """Run the configured experiment and persist its traces."""
    try:
        config = harness.load_config(config_path, seed=seed, policy=policy,
                                     out_dir=out_dir)
    except harness.ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    try:
        traces = harness.run(config)
    except RuntimeError as exc:
        click.echo(f"invariant violation: {exc}", err=True)
        sys.exit(1)
    summaries = harness.summarize(traces)
    if config.out_dir:
        paths = harness.emit(traces, summaries, config.out_dir)
        click.echo(f"wrote {paths['traces']}")
    for summary in summaries:
        click.echo(harness.format_summary(summary))


@main.command(name="plot")
@click.option("--in", "in_dir", required=True, type=click.Path(),
              help="Directory holding traces.csv.")
@click.option("--out", "out_file", required=True, type=click.Path(),
              help="SVG file to write.")
def plot_command(in_dir, out_file):
    """Re-render persisted traces into a regret figure."""
    path = os.path.join(in_dir, harness.TRACES_FILE)
    try:
        traces = harness.read_traces(path)
    except (OSError, ValueError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    if not traces:
        click.echo("config error: no traces to plot", err=True)
        sys.exit(2)
    harness.write_figure(traces, out_file)
    click.echo(f"wrote {out_file}")


def _check_mgr_contraction():
    sigma = np.array([[0.5, 0.1], [0.1, 0.3]])
    lam = float(np.linalg.eigvalsh(sigma).min())
    for m_iters in (1, 5, 20):
        expected = estimators.mgr_expected_output(sigma, m_iters)
        gap = np.linalg.norm(expected @ sigma - np.eye(2), ord=2)
        if gap > (1.0 - 0.5 * lam) ** m_iters + 1e-12:
            return f"contraction violated at M={m_iters}: {gap}"
    return None


def _check_corral_argmin():
    rng = np.random.default_rng(2024)
    grid = np.linspace(1e-7, 1.0 - 1e-7, 200_001)
    for _ in range(5):
        state = reduction.corral_init("iw", 0, float(rng.uniform(0.5, 30.0)),
                                      float(rng.uniform(0.5, 10.0)), 1000.0)
        state.z_sum = rng.normal(scale=5.0, size=2)
        state.bonus = float(rng.uniform(0.0, 10.0))
        t = int(rng.integers(1, 500))
        q = reduction.corral_meta_distribution(state, t)
        eta = 1.0 / (math.sqrt(t) + 8.0 * math.sqrt(state.c1))
        beta = 1.0 / (8.0 * state.c2)
        target = state.z_sum - np.array([0.0, state.bonus])
        objective = (1.0 - grid) * target[0] + grid * target[1] \
            - (2.0 / eta) * (np.sqrt(grid) + np.sqrt(1.0 - grid)) \
            + (1.0 / beta) * (-np.log(grid) - np.log(1.0 - grid))
        best = grid[int(np.argmin(objective))]
        solver = (q[1] - 1.0 / (4.0 * t * t)) / (1.0 - 1.0 / (2.0 * t * t))
        if abs(solver - best) > 1e-4:
            return f"solver argmin off by {abs(solver - best)}"
    return None


def _check_sampler_uniform():
    draws = mwu.sample_exp_weights(np.zeros(3), np.random.default_rng(7),
                                   size=20_000)
    se = draws.std(axis=0) / math.sqrt(draws.shape[0])
    err = np.abs(draws.mean(axis=0) - 1.0 / 3.0)
    if np.any(err > 4.0 * se):
        return f"uniform sampler means off: {err}"
    return None


def _check_spanner():
    support = env.random_unit_support(40, 3, np.random.default_rng(11))
    spanner = mwu.barycentric_spanner(support)
    coeffs = np.linalg.solve(spanner.basis.T, support.T).T
    if np.max(np.abs(coeffs)) > 2.0 + 1e-9:
        return f"spanner coefficient {np.max(np.abs(coeffs))} exceeds 2"
    return None


def _check_determinism():
    config = harness.ExperimentConfig(
        policy="ftrl_lc", env_kind="stochastic", horizon=300,
        replications=2, base_seed=7, support_points=6,
        overrides={"m_scale": 0.1})
    blobs = []
    for _ in range(2):
        traces = harness.run(config)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "t.csv")
            harness.write_traces(traces, path)
            with open(path, "rb") as fh:
                blobs.append(fh.read())
    if blobs[0] != blobs[1]:
        return "identical (config, seed) produced different CSV bytes"
    return None


def _check_regret_accounting():
    config = harness.ExperimentConfig(
        policy="uniform", env_kind="stochastic", horizon=2_000,
        replications=1, base_seed=3, noise_std=0.0)
    instance = harness.build_instance(config)
    regret_fn = harness.instant_regret_fn(instance, config.horizon)
    grid = harness.trace_grid(config.horizon)
    rng = np.random.default_rng(3)
    policy = harness.build_policy("uniform", instance, config.horizon, {},
                                  rng)
    trace, log = harness.run_replication(instance, policy, config.horizon,
                                         0, 3, grid, regret_fn, rng,
                                         keep_log=True)
    recomputed = 0.0
    for t, x, action, _ in log:
        recomputed += regret_fn(t, x, action)
    if abs(recomputed - trace.cum_regret[-1]) > 1e-9:
        return "trace regret disagrees with the recomputation from the log"
    return None


SELFTEST_CHECKS = (
    ("mgr-contraction", _check_mgr_contraction),
    ("corral-argmin", _check_corral_argmin),
    ("sampler-uniform", _check_sampler_uniform),
    ("spanner-bound", _check_spanner),
    ("determinism", _check_determinism),
    ("regret-accounting", _check_regret_accounting),
)


@main.command(name="selftest")
def selftest_command():
    """Fast replay of the package's key correctness invariants."""
    failures = 0
    for name, check in SELFTEST_CHECKS:
        problem = check()
        if problem is None:
            click.echo(f"PASS {name}")
        else:
            click.echo(f"FAIL {name}: {problem}")
            failures += 1
    if failures:
        click.echo(f"{failures} selftest check(s) failed", err=True)
        sys.exit(1)
    click.echo("all selftest checks passed")


if __name__ == "__main__":
    main()
