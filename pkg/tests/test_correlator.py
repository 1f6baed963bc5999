"""
Test suite for g2kit correlator module
"""

import tempfile
import unittest
from dataclasses import replace
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pytest

import correlator
from correlator import (
    Chronogram,
    correlate_arrays,
    cross_correlate,
    default_geometry,
    export_chronogram,
    import_chronogram,
    is_chronogram_csv,
    locate_peaks,
    merge,
)
from errors import GeometryError, UsageError
from simulator import SimConfig, simulate_series, simulate_run
from tests.helpers import make_chronogram, make_stream
from timetag import concat_streams


def brute_force(ta, tb, bin_width, range_ticks):
    """Reference histogram by enumerating every pair; ta and tb sorted"""
    lo, hi = range_ticks
    n_bins = (hi - lo) // bin_width
    bins = np.zeros(n_bins, dtype=np.int64)
    tb = np.asarray(tb, dtype=np.int64)
    for start in range(0, len(ta), 500):
        chunk = np.asarray(ta[start:start + 500], dtype=np.int64)
        near = tb[np.searchsorted(tb, chunk[0] + lo):np.searchsorted(tb, chunk[-1] + hi)]
        delays = (near[None, :] - chunk[:, None]).ravel()
        delays = delays[(delays >= lo) & (delays < hi)]
        bins += np.bincount((delays - lo) // bin_width, minlength=n_bins)
    return bins.astype(np.uint64)


def random_pair(rng, n_a, n_b, span):
    ta = np.sort(rng.integers(0, span, size=n_a))
    tb = np.sort(rng.integers(0, span, size=n_b))
    return ta, tb


class TestCorrelateArrays(unittest.TestCase):

    def test_single_pair(self):
        bins = correlate_arrays(np.array([100]), np.array([100]), 1, (-10, 10))
        expected = np.zeros(20, dtype=np.uint64)
        expected[10] = 1
        np.testing.assert_array_equal(bins, expected)

    def test_empty_channel(self):
        bins = correlate_arrays(np.array([1, 2, 3]), np.array([], dtype=np.int64), 5, (-50, 50))
        self.assertEqual(bins.sum(), 0)
        self.assertEqual(bins.size, 20)

    def test_range_end_is_exclusive(self):
        bins = correlate_arrays(np.array([0]), np.array([-10, 9, 10]) + 100, 1, (-10, 10))
        self.assertEqual(bins.sum(), 0)
        bins = correlate_arrays(np.array([100]), np.array([90, 109, 110]), 1, (-10, 10))
        self.assertEqual(bins.tolist()[0], 1)
        self.assertEqual(bins.tolist()[-1], 1)
        self.assertEqual(bins.sum(), 2)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2024)
        for trial in range(200):
            n_a, n_b = rng.integers(0, 10_001, size=2)
            ta, tb = random_pair(rng, n_a, n_b, 2_000_000)
            bw = int(rng.integers(1, 40))
            half = bw * int(rng.integers(5, 200))
            with self.subTest(trial=trial):
                np.testing.assert_array_equal(
                    correlate_arrays(ta, tb, bw, (-half, half)),
                    brute_force(ta, tb, bw, (-half, half)))

    def test_duplicate_timestamps(self):
        ta = np.array([10, 10, 10, 50])
        tb = np.array([10, 10, 60, 60])
        np.testing.assert_array_equal(
            correlate_arrays(ta, tb, 3, (-30, 30)), brute_force(ta, tb, 3, (-30, 30)))

    def test_asymmetric_range(self):
        rng = np.random.default_rng(8)
        ta, tb = random_pair(rng, 800, 900, 50_000)
        np.testing.assert_array_equal(
            correlate_arrays(ta, tb, 7, (35, 700)), brute_force(ta, tb, 7, (35, 700)))

    @patch.object(correlator, '_MIN_EVENTS_PER_WORKER', 10)
    def test_chunked_workers_agree(self):
        rng = np.random.default_rng(99)
        ta, tb = random_pair(rng, 3000, 2500, 400_000)
        single = correlate_arrays(ta, tb, 10, (-2000, 2000), n_workers=1)
        many = correlate_arrays(ta, tb, 10, (-2000, 2000), n_workers=4)
        np.testing.assert_array_equal(single, many)
        np.testing.assert_array_equal(single, brute_force(ta, tb, 10, (-2000, 2000)))

    def test_shift_covariance(self):
        rng = np.random.default_rng(4)
        ta, tb = random_pair(rng, 1000, 1000, 100_000)
        shift = 5 * 20
        base = correlate_arrays(ta, tb, 20, (-2000, 2000))
        moved = correlate_arrays(ta, tb + shift, 20, (-2000, 2000))
        np.testing.assert_array_equal(moved[5:], base[:-5])

    def test_swap_reverses_delays(self):
        rng = np.random.default_rng(12)
        ta, tb = random_pair(rng, 1200, 700, 80_000)
        forward = correlate_arrays(ta, tb, 4, (-400, 400))
        backward = correlate_arrays(tb, ta, 4, (-399, 401))
        np.testing.assert_array_equal(forward, backward[::-1])

    def test_bad_geometry(self):
        with self.assertRaises(GeometryError) as ctx:
            correlate_arrays(np.array([1]), np.array([2]), 3, (-10, 10))
        self.assertEqual(ctx.exception.field, 'range_ticks')
        with self.assertRaises(GeometryError):
            correlate_arrays(np.array([1]), np.array([2]), 0, (-10, 10))
        with self.assertRaises(GeometryError):
            correlate_arrays(np.array([1]), np.array([2]), 1, (10, 10))


class TestCrossCorrelate(unittest.TestCase):

    def test_same_channel_rejected(self):
        stream = make_stream({0: [1, 2], 1: [3]})
        with self.assertRaises(UsageError):
            cross_correlate(stream, 0, 0)

    def test_missing_channel_rejected(self):
        stream = make_stream({0: [1, 2], 1: [3]})
        with self.assertRaises(UsageError):
            cross_correlate(stream, 0, 5)

    def test_default_geometry_and_normalisation(self):
        stream = make_stream({0: [1000], 1: [1500]})
        ch = cross_correlate(stream, 0, 1)
        self.assertEqual(ch.bin_width_ticks, 1000)
        self.assertEqual(ch.range_ticks, (-600000, 600000))
        self.assertEqual(ch.n_pulses, 2500)
        self.assertEqual(ch.channel_pair, (0, 1))
        self.assertEqual(ch.total, 1)
        self.assertEqual(int(ch.bins[ch.bin_of(500)]), 1)

    def test_default_geometry_coarse_ticks(self):
        bw, (lo, hi) = default_geometry(60, 2.5e6)
        self.assertEqual(bw, 17)
        self.assertEqual(hi, -lo)
        self.assertEqual(hi % bw, 0)
        self.assertGreaterEqual(hi * 60, 600000)
        self.assertLess((hi - bw) * 60, 600000)

    def test_bins_are_read_only(self):
        ch = cross_correlate(make_stream({0: [5], 1: [6]}), 0, 1)
        with self.assertRaises(ValueError):
            ch.bins[0] = 3


class TestMerge(unittest.TestCase):

    def setUp(self):
        rng = np.random.default_rng(1)
        self.parts = [make_chronogram(rng.integers(0, 50, size=40), n_pulses=100 * (i + 1))
                      for i in range(3)]

    def test_zero_is_identity(self):
        first = self.parts[0]
        self.assertEqual(merge([first, first.zeros_like()]), first)

    def test_sums_bins_and_pulses(self):
        merged = merge(self.parts)
        np.testing.assert_array_equal(merged.bins, sum(p.bins for p in self.parts))
        self.assertEqual(merged.n_pulses, 600)

    def test_associative_and_commutative(self):
        a, b, c = self.parts
        self.assertEqual(merge([merge([a, b]), c]), merge([a, merge([b, c])]))
        self.assertEqual(merge([a, b]), merge([b, a]))

    def test_geometry_mismatch_names_field(self):
        other = replace(self.parts[1], channel_pair=(1, 0))
        with self.assertRaises(GeometryError) as ctx:
            merge([self.parts[0], other])
        self.assertEqual(ctx.exception.field, 'channel_pair')

        coarse = make_chronogram(np.zeros(20), bin_width_ticks=2000)
        with self.assertRaises(GeometryError) as ctx:
            merge([self.parts[0], coarse])
        self.assertEqual(ctx.exception.field, 'bin_width_ticks')

    def test_merged_runs_equal_concatenated_stream(self):
        config = SimConfig(acquisition_time_s=0.01, p_emit=0.6, eta_a=0.05, eta_b=0.05,
                           background_rate_hz=20000.0, seed=31)
        runs = simulate_series(config, 3, n_workers=1)
        per_run = [cross_correlate(run, 0, 1) for run in runs]
        joined = concat_streams(runs, gap_ticks=per_run[0].max_delay)
        self.assertEqual(merge(per_run), cross_correlate(joined, 0, 1))


class TestChronogramFiles(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.dir = Path(self.tmp.name)

    def test_three_bins_give_three_rows(self):
        ch = make_chronogram([4, 0, 7])
        path = self.dir / 'small.csv'
        export_chronogram(ch, path)
        rows = [line for line in path.read_text().splitlines() if not line.startswith('#')]
        self.assertEqual(rows[0], 'delay_ns,counts')
        self.assertEqual(len(rows) - 1, 3)
        self.assertTrue(is_chronogram_csv(path))

    def test_round_trip(self):
        rng = np.random.default_rng(6)
        ch = make_chronogram(rng.integers(0, 1000, size=1200), n_pulses=1_250_000_000,
                             channel_pair=(1, 0), rate_hz=3e6)
        path = self.dir / 'full.csv'
        export_chronogram(ch, path)
        back = import_chronogram(path)
        self.assertEqual(back, ch)
        self.assertEqual(back.channel_pair, (1, 0))

    def test_event_csv_is_not_a_chronogram(self):
        path = self.dir / 'events.csv'
        path.write_text("0,100\n1,200\n")
        self.assertFalse(is_chronogram_csv(path))

    def test_missing_header_rejected(self):
        path = self.dir / 'bare.csv'
        path.write_text("# bin_width_ticks: 1000\ndelay_ns,counts\n0,1\n")
        with self.assertRaises(GeometryError):
            import_chronogram(path)


def test_chronogram_rejects_wrong_bin_count():
    with pytest.raises(GeometryError):
        Chronogram(bin_width_ticks=10, range_ticks=(-100, 100), bins=np.zeros(5),
                   n_pulses=1, resolution_ps=1, channel_pair=(0, 1), excitation_rate_hz=1e6)


def test_locate_peaks_finds_side_peaks(bright_config):
    ch = cross_correlate(simulate_run(bright_config), 0, 1)
    peaks = locate_peaks(ch)
    near = [p for p in peaks if abs(abs(p) - 400.0) < 5.0]
    assert len(near) == 2
    assert max(near) - min(near) == pytest.approx(800.0, abs=5.0)
