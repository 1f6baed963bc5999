"""
End-to-end acceptance scenarios for g2kit

Long simulations, deselect with: pytest -m "not slow"
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np
import pytest

import correlator
from correlator import correlate_arrays, cross_correlate, merge
from estimator import WindowSpec, estimate_alpha
from lifetime import aggregate_lifetime, fit_many
from simulator import SimConfig, analytic_expectations, simulate_run, simulate_series
from tests.test_correlator import brute_force, random_pair
from uncertainty import RunSeries, budget_report

pytestmark = pytest.mark.slow

WINDOW = WindowSpec(16, 1000, 1, 2.5e6)


def pulls_over_series(config, expected, n_runs=10):
    """(alpha - expected) / u_alpha for each run of a seeded series"""
    pulls = []
    for run in simulate_series(config, n_runs):
        estimate = estimate_alpha(cross_correlate(run, 0, 1), 16)
        pulls.append((estimate.alpha - expected) / estimate.u_alpha)
    return np.array(pulls)


def test_calibrated_run_counts():
    ch = cross_correlate(simulate_run(SimConfig.nv_reference(seed=1)), 0, 1)
    estimate = estimate_alpha(ch, 16)
    for measured, reference in zip(estimate.counts[:3], (1000, 7400, 560)):
        assert 0.5 * reference <= measured <= 1.5 * reference
    assert 0.0 < estimate.alpha < 0.2


def test_pure_single_emitter_is_consistent_with_zero():
    config = SimConfig.nv_reference(acquisition_time_s=100.0, poisson_mean=0.0, seed=3)
    pulls = pulls_over_series(config, 0.0)
    assert np.all(np.abs(pulls) <= 4.0)
    assert abs(pulls.mean()) < 1.0


def test_poissonian_source_is_consistent_with_unity(bright_config):
    config = replace(bright_config, source_mode='poissonian')
    pulls = pulls_over_series(config, 1.0)
    assert np.all(np.abs(pulls) <= 4.0)
    assert abs(pulls.mean()) < 1.0


def test_dead_time_leaves_alpha_unchanged():
    base = SimConfig.nv_reference(acquisition_time_s=50.0, backflash_probability=0.0, seed=5)
    ideal = estimate_alpha(cross_correlate(simulate_run(base), 0, 1), 16)
    dead = estimate_alpha(cross_correlate(simulate_run(replace(base, dead_time_ns=50.0)), 0, 1), 16)
    assert abs(dead.alpha - ideal.alpha) < ideal.u_alpha


def test_lifetime_closure_over_runs(bright_config):
    chronograms = [cross_correlate(s, 0, 1) for s in simulate_series(bright_config, 10)]
    summary = aggregate_lifetime(fit_many(chronograms))
    assert summary.mean == pytest.approx(bright_config.lifetime_ns, rel=0.02)
    assert summary.standard_error <= 0.2


def test_alpha_pulls_over_seeds(bright_config):
    config = replace(bright_config, acquisition_time_s=1.0)
    expected = analytic_expectations(config, WINDOW, min_delay=-600000).alpha
    pulls = pulls_over_series(config, expected, n_runs=20)
    assert abs(pulls.mean()) < 1.0
    assert 0.5 < pulls.std(ddof=1) < 1.6


def test_budget_over_series(bright_config):
    config = replace(bright_config, acquisition_time_s=0.5)
    chronograms = [cross_correlate(s, 0, 1) for s in simulate_series(config, 8)]
    series = RunSeries.from_estimates([estimate_alpha(ch, 16, run_index=i) for i, ch in enumerate(chronograms)])
    budget = budget_report(series, k=2.0)
    pooled = estimate_alpha(merge(chronograms), 16)
    assert budget.alpha == pytest.approx(pooled.alpha, rel=1e-9)
    assert budget.expanded > 0


def test_correlator_matches_brute_force_on_large_streams(mocker):
    mocker.patch.object(correlator, '_MIN_EVENTS_PER_WORKER', 1000)
    rng = np.random.default_rng(77)
    ta, tb = random_pair(rng, 20_000, 20_000, 10**9)
    for n_workers in (1, 4):
        np.testing.assert_array_equal(
            correlate_arrays(ta, tb, 1000, (-600000, 600000), n_workers=n_workers),
            brute_force(ta, tb, 1000, (-600000, 600000)))


def test_correlator_throughput():
    rng = np.random.default_rng(0)
    correlate_arrays(np.arange(10), np.arange(10), 1, (-5, 5))
    ta, tb = random_pair(rng, 2_500_000, 2_500_000, 10**12)
    start = time.perf_counter()
    correlate_arrays(ta, tb, 1000, (-600000, 600000), n_workers=1)
    assert time.perf_counter() - start < 5.0


def test_series_correlate_and_merge_timing():
    config = SimConfig.nv_reference(acquisition_time_s=50.0, seed=8)
    correlate_arrays(np.arange(10), np.arange(10), 1, (-5, 5))
    start = time.perf_counter()
    runs = simulate_series(config, 10)
    with ThreadPoolExecutor(max_workers=4) as pool:
        chronograms = list(pool.map(lambda stream: cross_correlate(stream, 0, 1, n_workers=1), runs))
    pooled = merge(chronograms)
    assert time.perf_counter() - start < 20.0

    assert pooled.n_pulses == 10 * config.metadata.n_pulses
    serial = merge([cross_correlate(stream, 0, 1) for stream in runs])
    np.testing.assert_array_equal(pooled.bins, serial.bins)
