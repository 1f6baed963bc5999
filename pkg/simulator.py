"""
g2kit Simulator Module
Seeded Monte Carlo generator of time-tag streams for a pulsed emitter seen
through a Hanbury Brown-Twiss detection chain, plus closed-form
expectations for the windowed counts.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import log_ndtr, ndtr

import metrics
from errors import ConfigError, UnsupportedConfigurationError
from estimator import WindowSpec
from settings import dump_key_values, from_mapping, load_key_values, thread_cap
from timetag import (
    PS_PER_SECOND,
    RunMetadata,
    TimeTagStream,
    apply_dead_time,
    detector_channels,
    exact,
    from_channel_arrays,
)

logger = logging.getLogger('g2kit.simulator')

PathLike = Union[str, Path]
SeedLike = Union[int, np.random.SeedSequence, None]

SOURCE_MODES = ('emitter', 'poissonian')
BACKFLASH_PROBABILITY = 0.02
BACKFLASH_DELAY_NS = 50.0
BACKFLASH_SPREAD_NS = 1.0


@dataclass(frozen=True)
class SimConfig:
    """
    Generative model of a pulsed source and a two-detector HBT chain.

    eta_a, eta_b are the probabilities that one emitted photon is detected
    on A or B (beam-splitter ratio included). poisson_mean adds a Poissonian
    photon component per pulse; source_mode='poissonian' replaces the
    emitters by a Poissonian source of the same mean photon number.
    brightness_sigma is a relative Gaussian run-to-run drift of the source
    brightness.
    """
    excitation_rate_hz: float = 2.5e6
    acquisition_time_s: float = 1.0
    lifetime_ns: float = 15.34
    p_emit: float = 0.35
    n_emitters: int = 1
    background_rate_hz: float = 0.0
    eta_a: float = 0.01
    eta_b: float = 0.01
    dead_time_ns: float = 0.0
    dead_time_a_ns: Optional[float] = None
    dead_time_b_ns: Optional[float] = None
    jitter_sigma_a_ns: float = 0.35
    jitter_sigma_b_ns: float = 0.35
    backflash_probability: float = BACKFLASH_PROBABILITY
    backflash_delay_ns: float = BACKFLASH_DELAY_NS
    backflash_spread_ns: float = BACKFLASH_SPREAD_NS
    resolution_ps: int = 1
    seed: int = 0
    poisson_mean: float = 0.0
    source_mode: str = 'emitter'
    brightness_sigma: float = 0.0
    run_index: int = 0

    def __post_init__(self):
        for name in ('p_emit', 'eta_a', 'eta_b', 'backflash_probability'):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be a probability, got {value}")
        if self.eta_a + self.eta_b > 1.0:
            raise ConfigError(f"eta_a + eta_b exceeds 1 ({self.eta_a + self.eta_b})")
        for name in ('excitation_rate_hz', 'acquisition_time_s', 'lifetime_ns'):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ('background_rate_hz', 'dead_time_ns', 'jitter_sigma_a_ns', 'jitter_sigma_b_ns',
                     'backflash_delay_ns', 'backflash_spread_ns', 'poisson_mean', 'brightness_sigma'):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        for name in ('dead_time_a_ns', 'dead_time_b_ns'):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise ConfigError(f"{name} must be non-negative, got {value}")
        if self.n_emitters < 1:
            raise ConfigError(f"n_emitters must be >= 1, got {self.n_emitters}")
        if self.resolution_ps < 1:
            raise ConfigError(f"resolution_ps must be >= 1, got {self.resolution_ps}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.source_mode not in SOURCE_MODES:
            raise ConfigError(f"source_mode must be one of {SOURCE_MODES}, got {self.source_mode!r}")

    @classmethod
    def nv_reference(cls, **overrides) -> 'SimConfig':
        """
        NV-centre HBT measurement at 2.5 MHz over 500 s: a single emitter
        with a weak Poissonian component (alpha ~ 0.065), about 3.7e-3 signal
        clicks per pulse and 3.2 kHz background per detector, giving windowed
        counts near (1000, 7400, 560) at w = 16 ns.
        """
        base = cls(
            excitation_rate_hz=2.5e6,
            acquisition_time_s=500.0,
            lifetime_ns=15.34,
            p_emit=0.355,
            n_emitters=1,
            background_rate_hz=3200.0,
            eta_a=0.01,
            eta_b=0.01,
            dead_time_ns=0.0,
            jitter_sigma_a_ns=0.35,
            jitter_sigma_b_ns=0.35,
            resolution_ps=1,
            poisson_mean=0.012,
        )
        return replace(base, **overrides)

    @property
    def metadata(self) -> RunMetadata:
        return RunMetadata(self.excitation_rate_hz, self.acquisition_time_s, self.run_index)

    @property
    def mean_photons(self) -> float:
        """Mean photon number per pulse"""
        return self.n_emitters * self.p_emit + self.poisson_mean

    @property
    def dead_times_ns(self) -> Tuple[float, float]:
        """Dead time of detectors A and B; per-detector values override dead_time_ns"""
        a = self.dead_time_ns if self.dead_time_a_ns is None else self.dead_time_a_ns
        b = self.dead_time_ns if self.dead_time_b_ns is None else self.dead_time_b_ns
        return a, b

    def without_impairments(self) -> 'SimConfig':
        """Same source with dead time and backflash switched off"""
        return replace(self, dead_time_ns=0.0, dead_time_a_ns=None, dead_time_b_ns=None,
                       backflash_probability=0.0)


def load_config(path: PathLike) -> SimConfig:
    return from_mapping(SimConfig, load_key_values(path))


def dump_config(config: SimConfig, path: PathLike) -> None:
    dump_key_values(config, path)


def _rng(seed: SeedLike, config: SimConfig) -> np.random.Generator:
    return np.random.default_rng(config.seed if seed is None else seed)


def _bernoulli_pulses(rng: np.random.Generator, n_pulses: int, q: float) -> np.ndarray:
    """Sorted indices of pulses where an event with probability q occurs"""
    if q <= 0 or n_pulses <= 0:
        return np.empty(0, dtype=np.int64)
    if q >= 1:
        return np.arange(n_pulses, dtype=np.int64)
    expected = n_pulses * q
    chunks = []
    position = -1
    while position < n_pulses - 1:
        size = int(expected + 6 * math.sqrt(expected) + 16)
        gaps = rng.geometric(q, size=size).astype(np.int64)
        idx = position + np.cumsum(gaps)
        chunks.append(idx)
        position = int(idx[-1])
    pulses = np.concatenate(chunks)
    return pulses[pulses < n_pulses]


def _pulse_start_ps(pulses: np.ndarray, period_ps: Fraction) -> np.ndarray:
    """floor(n * T) in picoseconds, exact"""
    num, den = period_ps.numerator, period_ps.denominator
    q, r = np.divmod(pulses.astype(np.int64), den)
    return q * num + (r * num) // den


def _brightness(rng: np.random.Generator, config: SimConfig) -> float:
    if config.brightness_sigma <= 0:
        return 1.0
    return max(0.0, 1.0 + config.brightness_sigma * float(rng.standard_normal()))


def _source_clicks(rng: np.random.Generator, config: SimConfig, etas: Sequence[float],
                   jitters_ns: Sequence[float], brightness: float) -> List[np.ndarray]:
    """
    Detection times (ps, unsorted) of source photons on each detector.

    Each emitter yields at most one detection per pulse, routed to detector
    i with probability eta_i; the Poissonian component gives independent
    Poisson counts per detector.
    """
    metadata = config.metadata
    n_pulses = metadata.n_pulses
    period_ps = Fraction(PS_PER_SECOND) / exact(config.excitation_rate_hz)
    etas = np.asarray(etas, dtype=float)
    pulses: List[List[np.ndarray]] = [[] for _ in etas]

    if config.source_mode == 'emitter':
        total = float(etas.sum())
        q = min(1.0, config.p_emit * brightness * total)
        for _ in range(config.n_emitters):
            hits = _bernoulli_pulses(rng, n_pulses, q)
            if total > 0 and hits.size:
                detector = rng.choice(etas.size, size=hits.size, p=etas / total)
                for i in range(etas.size):
                    pulses[i].append(hits[detector == i])
        poisson_mean = config.poisson_mean
    else:
        poisson_mean = config.mean_photons

    if poisson_mean > 0:
        for i, eta in enumerate(etas):
            count = rng.poisson(n_pulses * poisson_mean * brightness * eta)
            pulses[i].append(rng.integers(0, n_pulses, size=count, dtype=np.int64))

    clicks = []
    for i, parts in enumerate(pulses):
        idx = np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)
        delay_ps = rng.exponential(config.lifetime_ns * 1000.0, size=idx.size)
        if jitters_ns[i] > 0:
            delay_ps += rng.normal(0.0, jitters_ns[i] * 1000.0, size=idx.size)
        clicks.append(_pulse_start_ps(idx, period_ps) + np.rint(delay_ps).astype(np.int64))
    return clicks


def _detector_pair(rng: np.random.Generator, config: SimConfig, clicks_ps: Sequence[np.ndarray],
                   resolution_ps: int) -> TimeTagStream:
    """Background, quantisation, dead time and backflash for one HBT pair (channels 0, 1)"""
    metadata = config.metadata
    duration = metadata.duration_ticks(resolution_ps)
    per_channel: Dict[int, np.ndarray] = {}
    for ch, ps in enumerate(clicks_ps):
        ticks = np.floor_divide(ps, resolution_ps)
        n_bg = rng.poisson(config.background_rate_hz * config.acquisition_time_s)
        background = rng.integers(0, duration, size=n_bg, dtype=np.int64)
        ticks = np.concatenate([ticks, background])
        per_channel[ch] = np.sort(ticks[(ticks >= 0) & (ticks < duration)])

    stream = from_channel_arrays(per_channel, resolution_ps, metadata, duration,
                                 channels=detector_channels(2))
    dead_ticks = {ch: round(ns * 1000 / resolution_ps) for ch, ns in enumerate(config.dead_times_ns)}
    stream = apply_dead_time(stream, dead_ticks)

    if config.backflash_probability > 0:
        kept = {ch: stream.channel_times(ch) for ch in (0, 1)}
        extra = {0: [], 1: []}
        for ch, times in kept.items():
            fires = rng.random(times.size) < config.backflash_probability
            delay_ps = config.backflash_delay_ns * 1000.0 + \
                config.backflash_spread_ns * 1000.0 * rng.standard_normal(int(fires.sum()))
            flashes = times[fires] + np.rint(delay_ps / resolution_ps).astype(np.int64)
            extra[1 - ch].append(flashes[(flashes >= 0) & (flashes < duration)])
        merged = {ch: np.concatenate([kept[ch]] + extra[ch]) for ch in (0, 1)}
        stream = from_channel_arrays(merged, resolution_ps, metadata, duration,
                                     channels=detector_channels(2))
        # backflash events can land on an existing tick
        stream = apply_dead_time(stream, 0)
    return stream


def simulate_run(config: SimConfig, seed: SeedLike = None) -> TimeTagStream:
    """
    One acquisition run on two detector channels (0 = A, 1 = B).

    Args:
        config: generative model
        seed: overrides config.seed (int or SeedSequence)

    Returns:
        Sorted, dead-time filtered TimeTagStream; identical for identical
        (config, seed)
    """
    rng = _rng(seed, config)
    with metrics.timed('simulate'):
        brightness = _brightness(rng, config)
        clicks = _source_clicks(rng, config, (config.eta_a, config.eta_b),
                                (config.jitter_sigma_a_ns, config.jitter_sigma_b_ns), brightness)
        stream = _detector_pair(rng, config, clicks, config.resolution_ps)
    metrics.RUNS_SIMULATED.inc()
    logger.info(f"Simulated run {config.run_index}: {len(stream)} events over "
                f"{config.acquisition_time_s:g} s (brightness x{brightness:.3f})")
    return stream


def simulate_series(config: SimConfig, n_runs: int,
                    n_workers: Optional[int] = None) -> List[TimeTagStream]:
    """
    Independent runs with seeds spawned from config.seed, generated
    concurrently and returned in run order.
    """
    children = np.random.SeedSequence(config.seed).spawn(n_runs)
    jobs = [(replace(config, run_index=i), child) for i, child in enumerate(children)]
    workers = max(1, min(n_workers or thread_cap(), n_runs))
    if workers == 1:
        return [simulate_run(cfg, seed) for cfg, seed in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda job: simulate_run(*job), jobs))


def simulate_joint_run(config: SimConfig, partner_resolution_ps: Optional[int] = None,
                       seed: SeedLike = None) -> Tuple[TimeTagStream, TimeTagStream]:
    """
    One source split 50:50 between a host and a partner HBT interferometer.

    Each photon reaches at most one of the four detectors, so the two
    returned streams share the emission events. Per-detector efficiencies
    are half of eta_a, eta_b.
    """
    rng = _rng(seed, config)
    brightness = _brightness(rng, config)
    etas = (config.eta_a / 2, config.eta_b / 2, config.eta_a / 2, config.eta_b / 2)
    jitters = (config.jitter_sigma_a_ns, config.jitter_sigma_b_ns) * 2
    clicks = _source_clicks(rng, config, etas, jitters, brightness)
    host = _detector_pair(rng, config, clicks[:2], config.resolution_ps)
    partner = _detector_pair(rng, config, clicks[2:], partner_resolution_ps or config.resolution_ps)
    metrics.RUNS_SIMULATED.inc()
    logger.info(f"Simulated joint run {config.run_index}: host {len(host)} / partner {len(partner)} events")
    return host, partner


class Expectations(NamedTuple):
    n_c: float
    n_xi: float
    n_bg: float
    alpha: float


def _delay_cdf(x: np.ndarray, tau: float, sigma: float) -> np.ndarray:
    """CDF of the difference of two Exp(tau) delays plus Gaussian jitter (sigma)"""
    x = np.asarray(x, dtype=float)
    if sigma <= 0:
        return np.where(x < 0, 0.5 * np.exp(np.minimum(x, 0) / tau), 1 - 0.5 * np.exp(-np.maximum(x, 0) / tau))
    shift = sigma ** 2 / (2 * tau ** 2)
    lower = np.exp(shift - x / tau + log_ndtr(x / sigma - sigma / tau))
    upper = np.exp(shift + x / tau + log_ndtr(-x / sigma - sigma / tau))
    return ndtr(x / sigma) - 0.5 * lower + 0.5 * upper


def _pair_moment(config: SimConfig) -> float:
    """E[N(N-1)] of the photon number per pulse"""
    mu = config.poisson_mean
    if config.source_mode == 'poissonian':
        return config.mean_photons ** 2
    c, p = config.n_emitters, config.p_emit
    return c * (c - 1) * p ** 2 + 2 * c * p * mu + mu ** 2


def analytic_expectations(config: SimConfig, window: WindowSpec, min_delay: int = 0) -> Expectations:
    """
    Expected windowed counts and alpha without dead time or backflash.

    Same-pulse pairs scale with E[N(N-1)] eta_a eta_b, pairs from different
    pulses with E[N]^2 eta_a eta_b; signal-background and
    background-background pairs form a flat floor. Brightness drift enters
    through E[f^2] = 1 + sigma^2.
    """
    if max(config.dead_times_ns) > 0 or config.backflash_probability > 0:
        raise UnsupportedConfigurationError(
            "closed-form expectations need dead_time_ns = 0 and backflash_probability = 0")
    if window.resolution_ps != config.resolution_ps \
            or exact(window.excitation_rate_hz) != exact(config.excitation_rate_hz):
        raise UnsupportedConfigurationError("window geometry does not match the configuration")

    n_pulses = config.metadata.n_pulses
    f2 = 1.0 + config.brightness_sigma ** 2
    ab = config.eta_a * config.eta_b
    same_pulse = n_pulses * _pair_moment(config) * ab * f2
    other_pulse = n_pulses * config.mean_photons ** 2 * ab * f2

    rate = config.excitation_rate_hz
    signal_a = config.eta_a * config.mean_photons * rate
    signal_b = config.eta_b * config.mean_photons * rate
    bg = config.background_rate_hz
    floor_density = (signal_a * bg + bg * signal_b + bg * bg) * config.acquisition_time_s

    tick_ns = config.resolution_ps / 1000.0
    period_ns = 1e9 / rate
    sigma = math.hypot(config.jitter_sigma_a_ns, config.jitter_sigma_b_ns)
    counts = {}
    for name, (lo, hi) in window.interval_ticks(min_delay).items():
        lo_ns, hi_ns = lo * tick_ns, hi * tick_ns
        expected = floor_density * (hi_ns - lo_ns) * 1e-9
        for k in range(-3, 4):
            mass = float(_delay_cdf(hi_ns - k * period_ns, config.lifetime_ns, sigma)
                         - _delay_cdf(lo_ns - k * period_ns, config.lifetime_ns, sigma))
            expected += (same_pulse if k == 0 else other_pulse) * mass
        counts[name] = expected

    n_c, n_xi, n_bg = counts['true'], counts['accidental'], counts['background']
    alpha = (n_c - n_bg) / (n_xi - n_bg) if n_xi > n_bg else float('nan')
    return Expectations(n_c, n_xi, n_bg, alpha)


def expected_singles_rate(config: SimConfig) -> Tuple[float, float]:
    """
    Closed-form click rate (Hz) of detectors A and B.

    Pulse term plus background, thinned by non-paralyzable dead time
    r / (1 + r * dead_time), plus backflash from the other detector.
    """
    raw = []
    for eta, dead_ns in zip((config.eta_a, config.eta_b), config.dead_times_ns):
        dead = dead_ns * 1e-9
        if config.source_mode == 'emitter':
            per_pulse = config.n_emitters * config.p_emit * eta + config.poisson_mean * eta
        else:
            per_pulse = config.mean_photons * eta
        r = per_pulse * config.excitation_rate_hz + config.background_rate_hz
        raw.append(r / (1 + r * dead))
    bf = config.backflash_probability
    return raw[0] + bf * raw[1], raw[1] + bf * raw[0]
