"""
Shared builders for g2kit tests
"""

import numpy as np

from correlator import Chronogram
from timetag import RunMetadata, detector_channels, from_channel_arrays


def make_chronogram(bins, bin_width_ticks=1000, min_delay=None, n_pulses=1000,
                    resolution_ps=1, rate_hz=2.5e6, channel_pair=(0, 1)):
    """Chronogram around delay 0 from a list of counts"""
    bins = np.asarray(bins, dtype=np.uint64)
    if min_delay is None:
        min_delay = -(bins.size // 2) * bin_width_ticks
    return Chronogram(
        bin_width_ticks=bin_width_ticks,
        range_ticks=(min_delay, min_delay + bins.size * bin_width_ticks),
        bins=bins,
        n_pulses=n_pulses,
        resolution_ps=resolution_ps,
        channel_pair=channel_pair,
        excitation_rate_hz=rate_hz,
    )


def make_stream(per_channel, resolution_ps=1, rate_hz=2.5e6, acquisition_time_s=1e-3,
                channel_count=2, duration_ticks=None):
    metadata = RunMetadata(excitation_rate_hz=rate_hz, acquisition_time_s=acquisition_time_s)
    return from_channel_arrays(
        {ch: np.asarray(t, dtype=np.uint64) for ch, t in per_channel.items()},
        resolution_ps, metadata, duration_ticks, channels=detector_channels(channel_count))
