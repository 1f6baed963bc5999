"""
g2kit Estimator Module
Background-corrected antibunching parameter alpha from windowed chronogram
counts, window validation against backflash peaks and window sweeps.
"""

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from correlator import Chronogram
from errors import (
    DegenerateStatisticsError,
    GeometryError,
    LifetimeFitError,
    UsageError,
    WindowOverlapError,
    WindowRangeError,
)
from lifetime import fit_lifetime, model_eval
from timetag import TimeTagStream, exact

logger = logging.getLogger('g2kit.estimator')

PathLike = Union[str, Path]

LOW_FLUX_THRESHOLD = 0.1
BACKFLASH_SIGMA = 5.0
DEFAULT_WIDTH_NS = 16.0


@dataclass(frozen=True)
class WindowSpec:
    """
    Three identical coincidence windows of width w on a chronogram.

    Windows are centred on delay 0 (true coincidences), +T (accidentals,
    the next excitation pulse) and -T/2 (flat background). k_w is the bin
    count whose total width best approximates w.
    """
    width_ns: float
    bin_width_ticks: int
    resolution_ps: int
    excitation_rate_hz: float
    k_w: int = field(init=False)

    def __post_init__(self):
        if not self.width_ns > 0:
            raise UsageError(f"window width must be positive, got {self.width_ns}")
        if self.bin_width_ticks <= 0 or self.resolution_ps <= 0:
            raise GeometryError("bin width and resolution must be positive", field='bin_width_ticks')
        bins = exact(self.width_ns) * 1000 / (self.resolution_ps * self.bin_width_ticks)
        object.__setattr__(self, 'k_w', max(1, math.floor(bins + Fraction(1, 2))))
        if self.k_w * self.bin_width_ticks > self.period_ticks / 2:
            raise WindowOverlapError(
                f"window of {self.k_w} bins ({self.effective_width_ns:.3f} ns) exceeds half the "
                f"excitation period; background and signal windows would overlap")

    @classmethod
    def for_chronogram(cls, ch: Chronogram, width_ns: float = DEFAULT_WIDTH_NS) -> 'WindowSpec':
        return cls(width_ns=width_ns, bin_width_ticks=ch.bin_width_ticks,
                   resolution_ps=ch.resolution_ps, excitation_rate_hz=ch.excitation_rate_hz)

    @property
    def period_ticks(self) -> Fraction:
        return Fraction(10 ** 12) / (exact(self.excitation_rate_hz) * self.resolution_ps)

    @property
    def effective_width_ns(self) -> float:
        return self.k_w * self.bin_width_ticks * self.resolution_ps / 1000.0

    @property
    def center_true_ns(self) -> float:
        return 0.0

    @property
    def center_accidental_ns(self) -> float:
        return float(self.period_ticks * self.resolution_ps / 1000)

    @property
    def center_background_ns(self) -> float:
        return -self.center_accidental_ns / 2

    def centers_ticks(self) -> Dict[str, Fraction]:
        period = self.period_ticks
        return {'true': Fraction(0), 'accidental': period, 'background': -period / 2}

    def _start_bins(self, min_delay: int) -> Dict[str, int]:
        # anchor: bin whose left edge is nearest the nominal centre
        starts = {}
        for name, centre in self.centers_ticks().items():
            anchor = math.floor((centre - min_delay) / self.bin_width_ticks + Fraction(1, 2))
            starts[name] = anchor - self.k_w // 2
        return starts

    def interval_ticks(self, min_delay: int = 0) -> Dict[str, Tuple[int, int]]:
        """Half-open delay intervals [lo, hi) in ticks, for bin edges at min_delay + k*bin_width"""
        span = self.k_w * self.bin_width_ticks
        return {name: (min_delay + s * self.bin_width_ticks, min_delay + s * self.bin_width_ticks + span)
                for name, s in self._start_bins(min_delay).items()}

    def bin_ranges(self, ch: Chronogram) -> Dict[str, Tuple[int, int]]:
        """
        Half-open bin index ranges of the three windows on a chronogram.

        The anchor bin is the one whose left edge lies nearest the nominal
        centre; the window spans [anchor - k_w//2, anchor - k_w//2 + k_w).
        """
        self.check_geometry(ch)
        ranges = {name: (s, s + self.k_w) for name, s in self._start_bins(ch.min_delay).items()}
        for name, (start, stop) in ranges.items():
            if start < 0 or stop > ch.n_bins:
                raise WindowRangeError(
                    f"{name} window [{start}, {stop}) lies outside the chronogram "
                    f"(0..{ch.n_bins} bins)")
        spans = sorted(ranges.values())
        for (_, stop), (start, _) in zip(spans, spans[1:]):
            if start < stop:
                raise WindowOverlapError("coincidence windows overlap")
        return ranges

    def check_geometry(self, ch: Chronogram) -> None:
        if ch.bin_width_ticks != self.bin_width_ticks:
            raise GeometryError("window built for another bin width", field='bin_width_ticks')
        if ch.resolution_ps != self.resolution_ps:
            raise GeometryError("window built for another resolution", field='resolution_ps')
        if exact(ch.excitation_rate_hz) != exact(self.excitation_rate_hz):
            raise GeometryError("window built for another excitation rate", field='excitation_rate_hz')


WindowLike = Union[WindowSpec, float, int]


def as_window(ch: Chronogram, window: WindowLike) -> WindowSpec:
    if isinstance(window, WindowSpec):
        return window
    return WindowSpec.for_chronogram(ch, float(window))


class CountTriple(NamedTuple):
    """Windowed counts of one run (or their means across runs)"""
    n_c: float
    n_xi: float
    n_bg: float
    run_index: Optional[int] = None
    source: str = ''


@dataclass(frozen=True)
class AlphaEstimate:
    alpha: float
    counts: CountTriple
    window: Optional[WindowSpec] = None
    n_pulses: int = 0
    u_alpha: Optional[float] = None

    @property
    def negative(self) -> bool:
        return self.alpha < 0

    def as_dict(self) -> Dict:
        return {
            'alpha': self.alpha,
            'u_alpha_k1': self.u_alpha,
            'n_c': self.counts.n_c,
            'n_xi': self.counts.n_xi,
            'n_bg': self.counts.n_bg,
            'run_index': self.counts.run_index,
            'source': self.counts.source,
            'window_ns': self.window.width_ns if self.window else None,
            'k_w': self.window.k_w if self.window else None,
            'n_pulses': self.n_pulses,
            'negative': self.negative,
        }


def count_windows(ch: Chronogram, window: WindowLike, run_index: Optional[int] = None,
                  source: str = '') -> CountTriple:
    """
    Sum chronogram bins over the true, accidental and background windows.

    Returns:
        CountTriple (N_C, N_xi, N_bg) of integer counts
    """
    spec = as_window(ch, window)
    ranges = spec.bin_ranges(ch)
    sums = {name: int(ch.bins[start:stop].sum()) for name, (start, stop) in ranges.items()}
    return CountTriple(sums['true'], sums['accidental'], sums['background'], run_index, source)


def compute_alpha(counts: CountTriple, window: Optional[WindowSpec] = None,
                  n_pulses: int = 0) -> AlphaEstimate:
    """alpha = (N_C - N_bg) / (N_xi - N_bg)"""
    denominator = counts.n_xi - counts.n_bg
    if denominator <= 0:
        raise DegenerateStatisticsError(
            f"accidental peak ({counts.n_xi}) not above background ({counts.n_bg})")
    alpha = (counts.n_c - counts.n_bg) / denominator
    if alpha < 0:
        logger.warning(f"Negative alpha {alpha:.4g}: N_C={counts.n_c} below N_bg={counts.n_bg}")
    return AlphaEstimate(alpha=float(alpha), counts=counts, window=window, n_pulses=n_pulses)


def estimate_alpha(ch: Chronogram, width_ns: WindowLike = DEFAULT_WIDTH_NS,
                   run_index: Optional[int] = None, source: str = '') -> AlphaEstimate:
    """count_windows followed by compute_alpha, with the Poisson u(alpha) attached"""
    from uncertainty import poisson_uncertainty

    window = as_window(ch, width_ns)
    counts = count_windows(ch, window, run_index=run_index, source=source)
    estimate = compute_alpha(counts, window, ch.n_pulses)
    return AlphaEstimate(alpha=estimate.alpha, counts=counts, window=window,
                         n_pulses=ch.n_pulses, u_alpha=poisson_uncertainty(counts))


def alpha_from_probabilities(p_c: float, p_a: float, p_b: float, p_cbg: float = 0.0,
                             p_abg: float = 0.0, p_bbg: float = 0.0) -> float:
    """
    Background-corrected alpha from click probabilities per pulse.

    alpha = (P_C - P_Cbg) / ((P_A - P_Abg)(P_B - P_Bbg)); with zero
    backgrounds this is the uncorrected P_C / (P_A P_B).
    """
    net_a = p_a - p_abg
    net_b = p_b - p_bbg
    if net_a <= 0 or net_b <= 0:
        raise DegenerateStatisticsError(
            f"singles probabilities not above background (A: {net_a:.3g}, B: {net_b:.3g})")
    return (p_c - p_cbg) / (net_a * net_b)


def alpha_uncorrected(p_c: float, p_a: float, p_b: float) -> float:
    return alpha_from_probabilities(p_c, p_a, p_b)


@dataclass(frozen=True)
class FluxReport:
    passed: bool
    max_probability: float
    threshold: float = LOW_FLUX_THRESHOLD

    @property
    def message(self) -> str:
        if self.passed:
            return f"low-flux condition met (max P = {self.max_probability:.3g})"
        return (f"click probability {self.max_probability:.3g} per pulse is not << "
                f"{self.threshold}; alpha no longer approximates g2(0)")


def low_flux_check(p_a: float, p_b: float) -> FluxReport:
    """Pass when both click probabilities per pulse are below 0.1 (boundary fails)"""
    highest = max(p_a, p_b)
    report = FluxReport(passed=highest < LOW_FLUX_THRESHOLD, max_probability=float(highest))
    if not report.passed:
        logger.warning(report.message)
    return report


@dataclass(frozen=True)
class BackflashFlag:
    delay_ns: float
    first_bin: int
    n_bins: int
    excess_counts: float


@dataclass(frozen=True)
class WindowValidation:
    flags: Tuple[BackflashFlag, ...] = ()
    fit_converged: bool = False
    note: str = ''

    @property
    def clean(self) -> bool:
        return not self.flags

    def as_dict(self) -> Dict:
        return {
            'clean': self.clean,
            'fit_converged': self.fit_converged,
            'note': self.note,
            'flags': [{'delay_ns': f.delay_ns, 'first_bin': f.first_bin, 'n_bins': f.n_bins,
                       'excess_counts': f.excess_counts} for f in self.flags],
        }


def _outliers(ch: Chronogram, expected: np.ndarray) -> np.ndarray:
    expected = np.clip(expected, 0.0, None)
    return ch.bins.astype(float) > expected + BACKFLASH_SIGMA * np.sqrt(expected)


def validate_window(ch: Chronogram, window: WindowLike, max_refits: int = 3) -> WindowValidation:
    """
    Look for secondary (backflash) peaks inside the true-coincidence window.

    The pulse-train model is fitted with outlying bins masked out (refitted
    until the mask settles), then every contiguous group of bins above
    model + 5*sqrt(model) inside the N_C window is flagged.
    """
    spec = as_window(ch, window)
    start, stop = spec.bin_ranges(ch)['true']
    if ch.total == 0:
        return WindowValidation(note='empty chronogram')

    mask = np.ones(ch.n_bins, dtype=bool)
    try:
        for _ in range(max_refits):
            fit = fit_lifetime(ch, mask=mask)
            expected = model_eval(fit.model, ch.centers_ns())
            new_mask = ~_outliers(ch, expected)
            if np.array_equal(new_mask, mask):
                break
            mask = new_mask
    except LifetimeFitError as e:
        logger.warning(f"Window validation skipped: {e}")
        return WindowValidation(note=f"model fit failed: {e}")

    excess = _outliers(ch, expected)
    excess[:start] = False
    excess[stop:] = False

    flags: List[BackflashFlag] = []
    idx = np.flatnonzero(excess)
    if idx.size:
        groups = np.split(idx, np.flatnonzero(np.diff(idx) > 1) + 1)
        centers = ch.centers_ns()
        for group in groups:
            extra = ch.bins[group].astype(float) - expected[group]
            weights = np.clip(extra, 0.0, None)
            delay = float(np.average(centers[group], weights=weights)) if weights.sum() else \
                float(centers[group].mean())
            flags.append(BackflashFlag(delay_ns=delay, first_bin=int(group[0]),
                                       n_bins=int(group.size), excess_counts=float(extra.sum())))
    for flag in flags:
        logger.warning(f"Secondary peak at {flag.delay_ns:.1f} ns inside the "
                       f"{spec.effective_width_ns:.1f} ns coincidence window")
    return WindowValidation(flags=tuple(flags), fit_converged=fit.converged,
                            note=f"{len(flags)} secondary peak(s)" if flags else 'no secondary peaks')


def window_sweep(ch: Chronogram, widths: Sequence[float]) -> List[AlphaEstimate]:
    """alpha and its Poisson k=1 uncertainty for each window width"""
    return [estimate_alpha(ch, float(w)) for w in widths]


def sweep_widths(w_min: float, w_max: float, step: float) -> List[float]:
    if step <= 0 or w_max < w_min:
        raise UsageError(f"invalid sweep ({w_min}, {w_max}, step {step})")
    n = int(math.floor((w_max - w_min) / step + 1e-9)) + 1
    return [round(w_min + i * step, 9) for i in range(n)]


def export_sweep(estimates: Sequence[AlphaEstimate], path: PathLike) -> None:
    frame = pd.DataFrame({
        'w_ns': [e.window.width_ns if e.window else float('nan') for e in estimates],
        'alpha': [e.alpha for e in estimates],
        'u_alpha_k1': [e.u_alpha for e in estimates],
    })
    frame.to_csv(path, index=False)
    logger.info(f"Exported {len(estimates)} sweep points to {path}")


def coupling_efficiency(streams: Sequence[TimeTagStream]) -> float:
    """Total detection efficiency: summed detector click rates over R"""
    if not streams:
        raise UsageError("no streams given")
    rate = exact(streams[0].metadata.excitation_rate_hz)
    total = Fraction(0)
    for s in streams:
        if exact(s.metadata.excitation_rate_hz) != rate:
            raise UsageError("streams have different excitation rates")
        clicks = int(np.isin(s.event_channels, s.detector_channels).sum())
        total += Fraction(clicks) / exact(s.metadata.acquisition_time_s)
    return float(total / rate)
