"""
Test suite for g2kit simulator module
"""

import itertools
import tempfile
import unittest
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from correlator import cross_correlate
from errors import ConfigError, UnsupportedConfigurationError
from estimator import WindowSpec, count_windows, estimate_alpha
from simulator import (
    SimConfig,
    analytic_expectations,
    dump_config,
    expected_singles_rate,
    load_config,
    simulate_joint_run,
    simulate_run,
    simulate_series,
)
from timetag import write_ttag
from uncertainty import RunSeries, correlation_matrix

WINDOW = WindowSpec(16, 1000, 1, 2.5e6)


def clean(config, **overrides):
    """Configuration without dead time and backflash"""
    return replace(config.without_impairments(), **overrides)


class TestSimConfig(unittest.TestCase):

    def test_defaults(self):
        config = SimConfig()
        self.assertEqual(config.excitation_rate_hz, 2.5e6)
        self.assertEqual(config.lifetime_ns, 15.34)
        self.assertEqual(config.backflash_delay_ns, 50.0)
        self.assertEqual(config.metadata.n_pulses, 2_500_000)

    def test_invalid_values(self):
        with self.assertRaises(ConfigError):
            SimConfig(p_emit=1.5)
        with self.assertRaises(ConfigError):
            SimConfig(eta_a=0.7, eta_b=0.7)
        with self.assertRaises(ConfigError):
            SimConfig(background_rate_hz=-1.0)
        with self.assertRaises(ConfigError):
            SimConfig(source_mode='thermal')
        with self.assertRaises(ConfigError):
            SimConfig(n_emitters=0)
        with self.assertRaises(ConfigError):
            SimConfig(dead_time_a_ns=-1.0)

    def test_file_round_trip(self):
        config = SimConfig.nv_reference(seed=99, run_index=3)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'sim.env'
            dump_config(config, path)
            self.assertEqual(load_config(path), config)

    def test_unknown_key(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'sim.env'
            path.write_text("p_emit=0.3\nfrobnicate=1\n")
            with self.assertRaises(ConfigError):
                load_config(path)

    def test_unparseable_value(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'sim.env'
            path.write_text("n_emitters=two\n")
            with self.assertRaises(ConfigError):
                load_config(path)


class TestSimulateRun(unittest.TestCase):

    def setUp(self):
        self.config = SimConfig(acquisition_time_s=0.2, p_emit=0.6, eta_a=0.05, eta_b=0.05,
                                background_rate_hz=2000.0, seed=42)

    def test_nothing_to_detect(self):
        config = replace(self.config, p_emit=0.0, background_rate_hz=0.0, poisson_mean=0.0)
        self.assertEqual(len(simulate_run(config)), 0)

    def test_deterministic(self):
        first, second = simulate_run(self.config), simulate_run(self.config)
        self.assertEqual(first, second)
        with tempfile.TemporaryDirectory() as tmp:
            a, b = Path(tmp) / 'a.ttag', Path(tmp) / 'b.ttag'
            write_ttag(first, a)
            write_ttag(second, b)
            self.assertEqual(a.read_bytes(), b.read_bytes())

    def test_seed_override(self):
        self.assertNotEqual(simulate_run(self.config, seed=1), simulate_run(self.config, seed=2))
        self.assertEqual(simulate_run(self.config, seed=7), simulate_run(replace(self.config, seed=7)))

    def test_stream_shape(self):
        stream = simulate_run(self.config)
        self.assertEqual(stream.detector_channels, [0, 1])
        self.assertEqual(stream.duration_ticks, 200_000_000_000)
        self.assertEqual(stream.metadata.n_pulses, 500_000)
        for ch in (0, 1):
            self.assertTrue(np.all(np.diff(stream.channel_times(ch)) > 0))

    def test_dead_time_spacing(self):
        config = replace(self.config, dead_time_ns=50.0, backflash_probability=0.0,
                         background_rate_hz=2e5)
        stream = simulate_run(config)
        for ch in (0, 1):
            self.assertGreaterEqual(np.diff(stream.channel_times(ch)).min(), 50_000)

    def test_dead_time_per_detector(self):
        config = replace(self.config, dead_time_a_ns=80.0, dead_time_b_ns=10.0,
                         backflash_probability=0.0, background_rate_hz=2e5)
        self.assertEqual(config.dead_times_ns, (80.0, 10.0))
        stream = simulate_run(config)
        gaps_a = np.diff(stream.channel_times(0))
        gaps_b = np.diff(stream.channel_times(1))
        self.assertGreaterEqual(gaps_a.min(), 80_000)
        self.assertGreaterEqual(gaps_b.min(), 10_000)
        self.assertLess(gaps_b.min(), 80_000)

    def test_coarse_resolution(self):
        config = replace(self.config, resolution_ps=60)
        stream = simulate_run(config)
        self.assertEqual(stream.resolution_ps, 60)
        self.assertEqual(stream.duration_ticks, -(-200_000_000_000 // 60))

    def test_backflash_peak(self):
        config = replace(self.config, backflash_probability=0.05)
        ch = cross_correlate(simulate_run(config), 0, 1)
        peak = int(ch.bins[ch.bin_of(49_000):ch.bin_of(51_000) + 1].sum())
        side = int(ch.bins[ch.bin_of(80_000):ch.bin_of(82_000) + 1].sum())
        self.assertGreater(peak, 10 * max(side, 1))

    def test_single_emitter_shows_no_coincidences(self):
        config = clean(self.config, background_rate_hz=0.0, poisson_mean=0.0)
        counts = count_windows(cross_correlate(simulate_run(config), 0, 1), 16)
        self.assertEqual(counts.n_c, 0)
        self.assertEqual(counts.n_bg, 0)
        self.assertGreater(counts.n_xi, 100)


class TestSeries(unittest.TestCase):

    def setUp(self):
        self.config = SimConfig(acquisition_time_s=0.05, p_emit=0.6, eta_a=0.05, eta_b=0.05, seed=5)

    def test_run_order_and_indices(self):
        runs = simulate_series(self.config, 4, n_workers=2)
        self.assertEqual([r.metadata.run_index for r in runs], [0, 1, 2, 3])
        self.assertNotEqual(runs[0], runs[1])

    def test_worker_count_does_not_change_output(self):
        serial = simulate_series(self.config, 3, n_workers=1)
        threaded = simulate_series(self.config, 3, n_workers=3)
        self.assertEqual(serial, threaded)

    def test_joint_run_shares_emissions(self):
        config = clean(self.config, background_rate_hz=0.0, poisson_mean=0.0, jitter_sigma_a_ns=0.0,
                       jitter_sigma_b_ns=0.0)
        host, partner = simulate_joint_run(config, partner_resolution_ps=4)
        self.assertEqual(partner.resolution_ps, 4)
        # one emitter photon per pulse at most: no pulse has clicks in both interferometers
        period = 400_000
        host_pulses = set((host.timestamps.astype(np.int64) // period).tolist())
        partner_pulses = set((partner.timestamps.astype(np.int64) * 4 // period).tolist())
        self.assertFalse(host_pulses & partner_pulses)
        ratio = len(host) / len(simulate_run(config))
        self.assertAlmostEqual(ratio, 0.5, delta=0.05)


class TestExpectations(unittest.TestCase):

    def test_requires_ideal_detectors(self):
        with self.assertRaises(UnsupportedConfigurationError):
            analytic_expectations(SimConfig(), WINDOW)
        with self.assertRaises(UnsupportedConfigurationError):
            analytic_expectations(SimConfig(backflash_probability=0.0, dead_time_ns=20.0), WINDOW)
        with self.assertRaises(UnsupportedConfigurationError):
            analytic_expectations(SimConfig(backflash_probability=0.0, dead_time_b_ns=20.0), WINDOW)

    def test_single_emitter(self):
        expected = analytic_expectations(clean(SimConfig()), WINDOW)
        self.assertAlmostEqual(expected.alpha, 0.0, places=4)

    def test_two_emitters(self):
        expected = analytic_expectations(clean(SimConfig(n_emitters=2)), WINDOW)
        self.assertAlmostEqual(expected.alpha, 0.5, places=4)

    def test_poissonian_source(self):
        config = clean(SimConfig(source_mode='poissonian', poisson_mean=0.3), background_rate_hz=1000.0)
        self.assertAlmostEqual(analytic_expectations(config, WINDOW).alpha, 1.0, places=6)

    def test_two_emitters_by_enumeration(self):
        p, eta_a, eta_b = 0.4, 0.03, 0.02
        outcomes = {'A': p * eta_a, 'B': p * eta_b, '-': 1 - p * (eta_a + eta_b)}
        pair, singles_a, singles_b = 0.0, 0.0, 0.0
        for first, second in itertools.product(outcomes, repeat=2):
            weight = outcomes[first] * outcomes[second]
            n_a = (first, second).count('A')
            n_b = (first, second).count('B')
            pair += weight * n_a * n_b
            singles_a += weight * n_a
            singles_b += weight * n_b
        config = clean(SimConfig(n_emitters=2, p_emit=p, eta_a=eta_a, eta_b=eta_b))
        self.assertAlmostEqual(analytic_expectations(config, WINDOW).alpha,
                               pair / (singles_a * singles_b), places=4)

    def test_singles_rate(self):
        config = SimConfig(p_emit=0.5, eta_a=0.02, eta_b=0.01, background_rate_hz=1000.0,
                           backflash_probability=0.0)
        rate_a, rate_b = expected_singles_rate(config)
        self.assertAlmostEqual(rate_a, 0.5 * 0.02 * 2.5e6 + 1000.0)
        self.assertAlmostEqual(rate_b, 0.5 * 0.01 * 2.5e6 + 1000.0)

    def test_singles_rate_per_detector_dead_time(self):
        config = SimConfig(p_emit=0.5, eta_a=0.02, eta_b=0.02, backflash_probability=0.0,
                           dead_time_ns=20.0, dead_time_b_ns=200.0)
        rate_a, rate_b = expected_singles_rate(config)
        r = 0.5 * 0.02 * 2.5e6
        self.assertAlmostEqual(rate_a, r / (1 + r * 20e-9))
        self.assertAlmostEqual(rate_b, r / (1 + r * 200e-9))


def test_simulation_matches_closed_form(bright_config):
    ch = cross_correlate(simulate_run(bright_config), 0, 1)
    expected = analytic_expectations(bright_config, WINDOW, min_delay=ch.min_delay)
    counts = count_windows(ch, WINDOW)
    for measured, mean in zip(counts[:3], expected[:3]):
        assert abs(measured - mean) <= 4 * np.sqrt(mean) + 1


def test_poissonian_source_gives_unity(bright_config):
    config = replace(bright_config, source_mode='poissonian')
    estimate = estimate_alpha(cross_correlate(simulate_run(config), 0, 1), 16)
    assert abs(estimate.alpha - 1.0) <= 3 * estimate.u_alpha


def test_singles_rate_with_dead_time(bright_config):
    config = replace(bright_config, dead_time_ns=50.0)
    stream = simulate_run(config)
    for ch, rate in zip((0, 1), expected_singles_rate(config)):
        measured = stream.channel_times(ch).size / config.acquisition_time_s
        assert measured == pytest.approx(rate, rel=0.01)


def test_brightness_drift_correlates_counts(bright_config):
    config = replace(bright_config, acquisition_time_s=0.5, brightness_sigma=0.2)
    chronograms = [cross_correlate(s, 0, 1) for s in simulate_series(config, 10)]
    series = RunSeries(tuple(count_windows(ch, 16) for ch in chronograms))
    assert correlation_matrix(series)[0, 1] > 0.3
