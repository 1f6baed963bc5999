"""
g2kit Correlator Module
Coincidence chronograms (histograms of t_b - t_a between two detector
channels) built with a sliding two-pointer sweep over sorted streams.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numba
import numpy as np
import pandas as pd
from scipy.signal import find_peaks

import metrics
from errors import GeometryError, UsageError
from settings import thread_cap
from timetag import TimeTagStream, channel_times, exact, read_csv_metadata

logger = logging.getLogger('g2kit.correlator')

PathLike = Union[str, Path]

# below this many a-events a single sweep beats the thread start-up cost
_MIN_EVENTS_PER_WORKER = 250_000


@dataclass(frozen=True, eq=False)
class Chronogram:
    """
    Coincidence counts versus delay t_b - t_a.

    Bin k covers [min_delay + k*bin_width, min_delay + (k+1)*bin_width) ticks.
    """
    bin_width_ticks: int
    range_ticks: Tuple[int, int]
    bins: np.ndarray
    n_pulses: int
    resolution_ps: int
    channel_pair: Tuple[int, int]
    excitation_rate_hz: float

    def __post_init__(self):
        lo, hi = (int(v) for v in self.range_ticks)
        object.__setattr__(self, 'range_ticks', (lo, hi))
        object.__setattr__(self, 'channel_pair', tuple(int(c) for c in self.channel_pair))
        check_geometry(self.bin_width_ticks, (lo, hi))
        bins = np.asarray(self.bins)
        if bins.ndim != 1 or bins.size != (hi - lo) // self.bin_width_ticks:
            raise GeometryError(
                f"expected {(hi - lo) // self.bin_width_ticks} bins, got {bins.size}", field='bins')
        if bins.size and bins.min() < 0:
            raise GeometryError("negative bin count", field='bins')
        bins = bins.astype(np.uint64)
        bins.flags.writeable = False
        object.__setattr__(self, 'bins', bins)
        if self.n_pulses < 0:
            raise GeometryError("n_pulses must be non-negative", field='n_pulses')

    def __eq__(self, other) -> bool:
        if not isinstance(other, Chronogram):
            return NotImplemented
        return self.geometry() == other.geometry() and self.n_pulses == other.n_pulses \
            and np.array_equal(self.bins, other.bins)

    __hash__ = None

    def geometry(self) -> Tuple:
        return (self.bin_width_ticks, self.range_ticks, self.resolution_ps,
                self.channel_pair, exact(self.excitation_rate_hz))

    @property
    def min_delay(self) -> int:
        return self.range_ticks[0]

    @property
    def max_delay(self) -> int:
        return self.range_ticks[1]

    @property
    def n_bins(self) -> int:
        return int(self.bins.size)

    @property
    def total(self) -> int:
        return int(self.bins.sum())

    @property
    def tick_ns(self) -> float:
        return self.resolution_ps / 1000.0

    @property
    def bin_width_ns(self) -> float:
        return self.bin_width_ticks * self.tick_ns

    def left_edges_ticks(self) -> np.ndarray:
        return self.min_delay + self.bin_width_ticks * np.arange(self.n_bins, dtype=np.int64)

    def left_edges_ns(self) -> np.ndarray:
        return self.left_edges_ticks() * self.tick_ns

    def centers_ns(self) -> np.ndarray:
        return self.left_edges_ns() + 0.5 * self.bin_width_ns

    def period_ticks(self) -> Fraction:
        return Fraction(10 ** 12) / (exact(self.excitation_rate_hz) * self.resolution_ps)

    def period_ns(self) -> float:
        return float(Fraction(10 ** 9) / exact(self.excitation_rate_hz))

    def bin_of(self, delay_ticks: int) -> int:
        """Index of the bin containing a delay (may fall outside 0..n_bins-1)"""
        return (int(delay_ticks) - self.min_delay) // self.bin_width_ticks

    def with_bins(self, bins: np.ndarray, n_pulses: Optional[int] = None) -> 'Chronogram':
        return Chronogram(
            bin_width_ticks=self.bin_width_ticks,
            range_ticks=self.range_ticks,
            bins=bins,
            n_pulses=self.n_pulses if n_pulses is None else n_pulses,
            resolution_ps=self.resolution_ps,
            channel_pair=self.channel_pair,
            excitation_rate_hz=self.excitation_rate_hz,
        )

    def zeros_like(self) -> 'Chronogram':
        """All-zero chronogram with the same geometry; the identity of merge"""
        return self.with_bins(np.zeros(self.n_bins, dtype=np.uint64), n_pulses=0)


def check_geometry(bin_width_ticks: int, range_ticks: Tuple[int, int]) -> None:
    lo, hi = range_ticks
    if bin_width_ticks <= 0:
        raise GeometryError(f"bin width must be positive, got {bin_width_ticks}", field='bin_width_ticks')
    if hi <= lo:
        raise GeometryError(f"empty delay range ({lo}, {hi})", field='range_ticks')
    if (hi - lo) % bin_width_ticks:
        raise GeometryError(
            f"range {hi - lo} ticks is not divisible by bin width {bin_width_ticks}",
            field='range_ticks')


def default_geometry(resolution_ps: int, excitation_rate_hz: float, bin_width_ns: float = 1.0,
                     range_periods: float = 1.5) -> Tuple[int, Tuple[int, int]]:
    """
    Bin width and symmetric delay range for analysis.

    The bin width is bin_width_ns rounded to whole ticks; the range covers
    +/- range_periods excitation periods, rounded outward to whole bins.
    """
    bin_width = max(1, round(bin_width_ns * 1000 / resolution_ps))
    period = Fraction(10 ** 12) / (exact(excitation_rate_hz) * resolution_ps)
    half = math.ceil(exact(range_periods) * period / bin_width) * bin_width
    return bin_width, (-half, half)


@numba.njit(cache=True, nogil=True)
def _sweep(ta, tb, j_start, min_delay, max_delay, bin_width, bins):
    nb = tb.shape[0]
    j0 = j_start
    pairs = 0
    for i in range(ta.shape[0]):
        lo = ta[i] + min_delay
        hi = ta[i] + max_delay
        while j0 < nb and tb[j0] < lo:
            j0 += 1
        j = j0
        while j < nb and tb[j] < hi:
            bins[(tb[j] - lo) // bin_width] += 1
            pairs += 1
            j += 1
    return pairs


def correlate_arrays(ta: np.ndarray, tb: np.ndarray, bin_width_ticks: int,
                     range_ticks: Tuple[int, int], n_workers: Optional[int] = None) -> np.ndarray:
    """
    Histogram of tb - ta over all pairs with delay in range.

    Cost is O(n_a + n_b + pairs): for each a-event the b-pointer only moves
    forward. With several workers the a-array is cut into contiguous chunks,
    each starting its b-pointer by binary search.
    """
    check_geometry(bin_width_ticks, range_ticks)
    lo, hi = int(range_ticks[0]), int(range_ticks[1])
    n_bins = (hi - lo) // bin_width_ticks
    ta = np.ascontiguousarray(ta, dtype=np.int64)
    tb = np.ascontiguousarray(tb, dtype=np.int64)

    if n_workers is None:
        n_workers = thread_cap()
    n_workers = max(1, min(n_workers, ta.size // _MIN_EVENTS_PER_WORKER))

    def run(chunk: Tuple[int, int]) -> Tuple[np.ndarray, int]:
        i0, i1 = chunk
        bins = np.zeros(n_bins, dtype=np.int64)
        if i1 > i0:
            j_start = int(np.searchsorted(tb, ta[i0] + lo, side='left'))
            pairs = _sweep(ta[i0:i1], tb, j_start, np.int64(lo), np.int64(hi),
                           np.int64(bin_width_ticks), bins)
        else:
            pairs = 0
        return bins, int(pairs)

    bounds = np.linspace(0, ta.size, n_workers + 1).astype(np.int64)
    chunks = list(zip(bounds[:-1].tolist(), bounds[1:].tolist()))
    if n_workers == 1:
        results = [run(chunks[0])]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(run, chunks))

    total = np.zeros(n_bins, dtype=np.int64)
    pairs = 0
    for bins, n in results:
        total += bins
        pairs += n
    metrics.PAIRS_BINNED.inc(pairs)
    logger.debug(f"Binned {pairs} pairs from {ta.size}x{tb.size} events on {n_workers} worker(s)")
    return total.astype(np.uint64)


def cross_correlate(stream: TimeTagStream, ch_a: int, ch_b: int,
                    bin_width_ticks: Optional[int] = None,
                    range_ticks: Optional[Tuple[int, int]] = None,
                    n_workers: Optional[int] = None) -> Chronogram:
    """
    Build the chronogram of delays t_b - t_a between two channels.

    Args:
        stream: time-tag stream holding both channels
        ch_a, ch_b: distinct channel ids (delay = t_b - t_a)
        bin_width_ticks, range_ticks: geometry; defaults to 1 ns bins over
            +/-1.5 excitation periods
        n_workers: thread cap (defaults to G2KIT_THREADS)

    Returns:
        Chronogram with n_pulses = R * t_acq of the stream
    """
    if ch_a == ch_b:
        raise UsageError(f"cross-correlation needs two distinct channels, got {ch_a} twice")
    for ch in (ch_a, ch_b):
        if not stream.has_channel(ch):
            raise UsageError(f"channel {ch} not declared in stream")

    meta = stream.metadata
    if bin_width_ticks is None or range_ticks is None:
        default_bw, default_range = default_geometry(stream.resolution_ps, meta.excitation_rate_hz)
        bin_width_ticks = default_bw if bin_width_ticks is None else bin_width_ticks
        range_ticks = default_range if range_ticks is None else range_ticks

    with metrics.timed('correlate'):
        bins = correlate_arrays(channel_times(stream, ch_a), channel_times(stream, ch_b),
                                bin_width_ticks, range_ticks, n_workers)
    chronogram = Chronogram(
        bin_width_ticks=int(bin_width_ticks),
        range_ticks=tuple(range_ticks),
        bins=bins,
        n_pulses=meta.n_pulses,
        resolution_ps=stream.resolution_ps,
        channel_pair=(ch_a, ch_b),
        excitation_rate_hz=meta.excitation_rate_hz,
    )
    logger.info(f"Chronogram ch{ch_a}->ch{ch_b}: {chronogram.total} coincidences "
                f"in {chronogram.n_bins} bins")
    return chronogram


_GEOMETRY_FIELDS = ('bin_width_ticks', 'range_ticks', 'resolution_ps', 'channel_pair',
                    'excitation_rate_hz')


def merge(chronograms: Sequence[Chronogram]) -> Chronogram:
    """Element-wise sum of chronograms with identical geometry; n_pulses are summed"""
    if not chronograms:
        raise UsageError("nothing to merge")
    first = chronograms[0]
    for other in chronograms[1:]:
        for name, mine, theirs in zip(_GEOMETRY_FIELDS, first.geometry(), other.geometry()):
            if mine != theirs:
                raise GeometryError(f"cannot merge: {name} differs ({mine} vs {theirs})", field=name)

    total = np.zeros(first.n_bins, dtype=np.uint64)
    for ch in chronograms:
        total += ch.bins
    return first.with_bins(total, n_pulses=sum(ch.n_pulses for ch in chronograms))


def export_chronogram(ch: Chronogram, path: PathLike) -> None:
    """CSV with columns delay_ns (bin left edge), counts; geometry in # header lines"""
    path = Path(path)
    with path.open('w', newline='') as f:
        f.write(f"# bin_width_ticks: {ch.bin_width_ticks}\n")
        f.write(f"# min_delay_ticks: {ch.min_delay}\n")
        f.write(f"# max_delay_ticks: {ch.max_delay}\n")
        f.write(f"# resolution_ps: {ch.resolution_ps}\n")
        f.write(f"# n_pulses: {ch.n_pulses}\n")
        f.write(f"# channel_pair: {ch.channel_pair[0]},{ch.channel_pair[1]}\n")
        f.write(f"# excitation_rate_hz: {ch.excitation_rate_hz!r}\n")
        frame = pd.DataFrame({'delay_ns': ch.left_edges_ns(), 'counts': ch.bins})
        frame.to_csv(f, index=False)
    logger.info(f"Exported chronogram ({ch.n_bins} bins) to {path}")


def import_chronogram(path: PathLike) -> Chronogram:
    path = Path(path)
    header = read_csv_metadata(path)
    required = ('bin_width_ticks', 'min_delay_ticks', 'max_delay_ticks', 'resolution_ps',
                'n_pulses', 'channel_pair', 'excitation_rate_hz')
    missing = [key for key in required if key not in header]
    if missing:
        raise GeometryError(f"{path}: missing header lines: {', '.join(missing)}", field=missing[0])
    frame = pd.read_csv(path, comment='#')
    a, b = (int(v) for v in header['channel_pair'].split(','))
    return Chronogram(
        bin_width_ticks=int(header['bin_width_ticks']),
        range_ticks=(int(header['min_delay_ticks']), int(header['max_delay_ticks'])),
        bins=frame['counts'].to_numpy(dtype=np.uint64),
        n_pulses=int(header['n_pulses']),
        resolution_ps=int(header['resolution_ps']),
        channel_pair=(a, b),
        excitation_rate_hz=float(header['excitation_rate_hz']),
    )


def is_chronogram_csv(path: PathLike) -> bool:
    try:
        return 'bin_width_ticks' in read_csv_metadata(path)
    except (UnicodeDecodeError, OSError):
        return False


def locate_peaks(ch: Chronogram, smoothing_ns: float = 5.0) -> List[float]:
    """
    Delays (ns) of the excitation-period peaks of a chronogram.

    Counts are smoothed with a box filter, then peaks at least half a period
    apart are kept.
    """
    width = max(1, round(smoothing_ns / ch.bin_width_ns))
    smooth = np.convolve(ch.bins.astype(float), np.ones(width) / width, mode='same')
    distance = max(1, int(0.5 * ch.period_ns() / ch.bin_width_ns))
    baseline = np.median(smooth)
    idx, _ = find_peaks(smooth, distance=distance, prominence=max(1.0, 0.25 * (smooth.max() - baseline)))
    return (ch.centers_ns()[idx]).tolist()
