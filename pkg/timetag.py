"""
g2kit Time-Tag Module
Data model for detector event streams, the TTAG binary format, a CSV bridge
and exact (integer/rational) excitation-pulse indexing.
"""

import logging
import math
import re
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numba
import numpy as np
import pandas as pd

import metrics
from errors import (
    CsvParseError,
    TimeTagFormatError,
    TimeTagIntegrityError,
    TruncatedRecordError,
    UsageError,
)

logger = logging.getLogger('g2kit.timetag')

PathLike = Union[str, Path]

TTAG_MAGIC = b'TTAG'
TTAG_VERSION = 1
# magic, version, resolution_ps, channel_count, reserved[sync_channel+1, run_index],
# duration_ticks, excitation_rate_hz, acquisition_time_ms
TTAG_HEADER = struct.Struct('<4sHIBBIQII')
RECORD_DTYPE = np.dtype([('channel', 'u1'), ('timestamp', '<u8')])

PS_PER_SECOND = 10 ** 12
_U32_MAX = 2 ** 32 - 1


class ChannelRole(str, Enum):
    DETECTOR = 'detector'
    SYNC = 'sync'


class SyncMode(str, Enum):
    RECORDED_SYNC_CHANNEL = 'recorded_sync_channel'
    NOMINAL_CLOCK = 'nominal_clock'


@dataclass(frozen=True)
class ChannelInfo:
    id: int
    label: str = ''
    role: ChannelRole = ChannelRole.DETECTOR

    def __post_init__(self):
        if not 0 <= self.id <= 255:
            raise UsageError(f"channel id {self.id} outside 0-255")
        if not self.label:
            object.__setattr__(self, 'label', default_label(self.id, self.role))


def default_label(channel: int, role: ChannelRole = ChannelRole.DETECTOR) -> str:
    return 'sync' if role == ChannelRole.SYNC else f"det{channel}"


class EventRecord(NamedTuple):
    channel: int
    timestamp: int


def exact(value: Union[int, float, str, Fraction]) -> Fraction:
    """Rational value of a decimal quantity (2.5e6 -> 2500000 exactly)"""
    if isinstance(value, (int, Fraction)):
        return Fraction(value)
    return Fraction(repr(float(value)))


@dataclass(frozen=True)
class RunMetadata:
    excitation_rate_hz: float
    acquisition_time_s: float
    run_index: int = 0
    sync_mode: SyncMode = SyncMode.NOMINAL_CLOCK

    def __post_init__(self):
        if not self.excitation_rate_hz > 0:
            raise UsageError(f"excitation rate must be positive, got {self.excitation_rate_hz}")
        if not self.acquisition_time_s > 0:
            raise UsageError(f"acquisition time must be positive, got {self.acquisition_time_s}")
        object.__setattr__(self, 'sync_mode', SyncMode(self.sync_mode))

    @property
    def n_pulses(self) -> int:
        """Number of excitation pulses R * t_acq (normalisation denominator)"""
        pulses = exact(self.excitation_rate_hz) * exact(self.acquisition_time_s)
        return max(1, round(pulses))

    def period_ticks(self, resolution_ps: int) -> Fraction:
        """Excitation period in device ticks, exact"""
        return Fraction(PS_PER_SECOND) / (exact(self.excitation_rate_hz) * resolution_ps)

    def period_ns(self) -> float:
        return float(Fraction(10 ** 9) / exact(self.excitation_rate_hz))

    def duration_ticks(self, resolution_ps: int) -> int:
        ticks = exact(self.acquisition_time_s) * PS_PER_SECOND / resolution_ps
        return math.ceil(ticks)


@dataclass(frozen=True, eq=False)
class TimeTagStream:
    """
    Immutable detector event stream.

    Events are held column-wise: `event_channels` (uint8) and `timestamps`
    (uint64 ticks), globally sorted by timestamp.
    """
    resolution_ps: int
    channels: Tuple[ChannelInfo, ...]
    event_channels: np.ndarray
    timestamps: np.ndarray
    duration_ticks: int
    metadata: RunMetadata
    sort_performed: bool = field(default=False, compare=False)

    def __post_init__(self):
        if self.resolution_ps <= 0:
            raise UsageError(f"resolution_ps must be positive, got {self.resolution_ps}")
        object.__setattr__(self, 'channels', tuple(self.channels))
        ids = [c.id for c in self.channels]
        if len(set(ids)) != len(ids):
            raise UsageError(f"duplicate channel ids: {ids}")

        chans = _frozen(np.asarray(self.event_channels, dtype=np.uint8))
        stamps = _frozen(np.asarray(self.timestamps, dtype=np.uint64))
        if chans.shape != stamps.shape or chans.ndim != 1:
            raise UsageError("event_channels and timestamps must be 1-D arrays of equal length")
        object.__setattr__(self, 'event_channels', chans)
        object.__setattr__(self, 'timestamps', stamps)

        if stamps.size:
            bad = np.flatnonzero(stamps[1:] < stamps[:-1])
            if bad.size:
                raise TimeTagIntegrityError(
                    f"timestamps decrease at record {bad[0] + 1}", offset=int(bad[0] + 1))
            if int(stamps[-1]) >= self.duration_ticks:
                raise TimeTagIntegrityError(
                    f"timestamp {int(stamps[-1])} beyond duration {self.duration_ticks}",
                    offset=int(np.argmax(stamps >= np.uint64(self.duration_ticks))))
            undeclared = ~np.isin(chans, np.asarray(ids, dtype=np.uint8))
            if undeclared.any():
                first = int(np.argmax(undeclared))
                raise TimeTagIntegrityError(
                    f"event on undeclared channel {int(chans[first])}", offset=first)

    def __len__(self) -> int:
        return int(self.timestamps.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TimeTagStream):
            return NotImplemented
        return (
            self.resolution_ps == other.resolution_ps
            and [(c.id, c.role) for c in self.channels] == [(c.id, c.role) for c in other.channels]
            and self.duration_ticks == other.duration_ticks
            and self.metadata == other.metadata
            and np.array_equal(self.event_channels, other.event_channels)
            and np.array_equal(self.timestamps, other.timestamps)
        )

    __hash__ = None

    @property
    def events(self) -> List[EventRecord]:
        return list(self.iter_events())

    def iter_events(self) -> Iterator[EventRecord]:
        for ch, ts in zip(self.event_channels.tolist(), self.timestamps.tolist()):
            yield EventRecord(ch, ts)

    @property
    def detector_channels(self) -> List[int]:
        return [c.id for c in self.channels if c.role == ChannelRole.DETECTOR]

    @property
    def sync_channel(self) -> Optional[int]:
        syncs = [c.id for c in self.channels if c.role == ChannelRole.SYNC]
        return syncs[0] if syncs else None

    def has_channel(self, channel: int) -> bool:
        return any(c.id == channel for c in self.channels)

    def channel_times(self, channel: int) -> np.ndarray:
        return channel_times(self, channel)


def _frozen(array: np.ndarray) -> np.ndarray:
    if array.flags.writeable:
        array = array.copy()
        array.flags.writeable = False
    return array


def detector_channels(count: int, sync_channel: Optional[int] = None) -> Tuple[ChannelInfo, ...]:
    return tuple(
        ChannelInfo(i, role=ChannelRole.SYNC if i == sync_channel else ChannelRole.DETECTOR)
        for i in range(count)
    )


def from_channel_arrays(per_channel: Mapping[int, np.ndarray], resolution_ps: int,
                        metadata: RunMetadata, duration_ticks: Optional[int] = None,
                        channels: Optional[Sequence[ChannelInfo]] = None) -> TimeTagStream:
    """
    Merge per-channel timestamp arrays into one sorted stream.

    Ties in timestamp are ordered by channel id.
    """
    if channels is None:
        count = max(per_channel) + 1 if per_channel else 2
        channels = detector_channels(count)
    if duration_ticks is None:
        duration_ticks = metadata.duration_ticks(resolution_ps)

    parts_t = [np.asarray(t, dtype=np.uint64) for t in per_channel.values()]
    parts_c = [np.full(len(t), ch, dtype=np.uint8) for ch, t in zip(per_channel, parts_t)]
    stamps = np.concatenate(parts_t) if parts_t else np.empty(0, dtype=np.uint64)
    chans = np.concatenate(parts_c) if parts_c else np.empty(0, dtype=np.uint8)
    order = np.lexsort((chans, stamps))
    return TimeTagStream(
        resolution_ps=resolution_ps,
        channels=tuple(channels),
        event_channels=chans[order],
        timestamps=stamps[order],
        duration_ticks=duration_ticks,
        metadata=metadata,
    )


def channel_times(stream: TimeTagStream, channel: int) -> np.ndarray:
    """Sorted timestamps of one channel as int64 ticks"""
    if not stream.has_channel(channel):
        raise UsageError(f"channel {channel} not declared in stream")
    return stream.timestamps[stream.event_channels == channel].astype(np.int64)


# TTAG binary format

def write_ttag(stream: TimeTagStream, path: PathLike) -> None:
    """
    Write a stream as TTAG: 32-byte little-endian header followed by
    9-byte (channel u8, timestamp u64) records.

    The header holds the rate in whole Hz and the acquisition time in whole
    ms (both u32); metadata outside that raises UsageError before writing.
    """
    path = Path(path)
    meta = stream.metadata

    rate = exact(meta.excitation_rate_hz)
    if rate.denominator != 1 or not 0 < rate <= _U32_MAX:
        raise UsageError(f"TTAG stores the excitation rate as whole Hz (u32), got {meta.excitation_rate_hz}")
    acq = exact(meta.acquisition_time_s) * 1000
    if acq.denominator != 1 or not 0 < acq <= _U32_MAX:
        raise UsageError(f"TTAG stores the acquisition time as whole ms (u32), got {meta.acquisition_time_s} s")
    if not 0 <= meta.run_index <= _U32_MAX:
        raise UsageError(f"run_index {meta.run_index} does not fit in u32")
    rate_hz, acq_ms = int(rate), int(acq)
    if any(c.label != default_label(c.id, c.role) for c in stream.channels):
        logger.warning("Channel labels are not stored in TTAG files")

    channel_count = max((c.id for c in stream.channels), default=-1) + 1
    sync = stream.sync_channel
    header = TTAG_HEADER.pack(
        TTAG_MAGIC, TTAG_VERSION, stream.resolution_ps, channel_count,
        0 if sync is None else sync + 1, meta.run_index,
        stream.duration_ticks, rate_hz, acq_ms,
    )

    records = np.empty(len(stream), dtype=RECORD_DTYPE)
    records['channel'] = stream.event_channels
    records['timestamp'] = stream.timestamps

    with path.open('wb') as f:
        f.write(header)
        f.write(records.tobytes())
    logger.info(f"Wrote {len(stream)} events to {path}")


def read_ttag(path: PathLike) -> TimeTagStream:
    """Read and validate a TTAG file"""
    path = Path(path)
    with path.open('rb') as f:
        head = f.read(TTAG_HEADER.size)
        if not head.startswith(TTAG_MAGIC):
            if TTAG_MAGIC.startswith(head):
                raise TruncatedRecordError(f"{path}: header truncated at {len(head)} bytes")
            raise TimeTagFormatError(f"{path}: bad magic {head[:4]!r}")
        if len(head) < TTAG_HEADER.size:
            raise TruncatedRecordError(f"{path}: header truncated at {len(head)} bytes")
        payload = np.frombuffer(f.read(), dtype=np.uint8)

    (_, version, resolution_ps, channel_count, sync_plus_one, run_index,
     duration_ticks, rate_hz, acq_ms) = TTAG_HEADER.unpack(head)
    if version != TTAG_VERSION:
        raise TimeTagFormatError(f"{path}: unsupported TTAG version {version}")
    if resolution_ps == 0:
        raise TimeTagFormatError(f"{path}: resolution_ps is zero")
    if rate_hz == 0 or acq_ms == 0:
        raise TimeTagFormatError(f"{path}: excitation rate and acquisition time must be positive")

    trailing = payload.size % RECORD_DTYPE.itemsize
    if trailing:
        raise TruncatedRecordError(
            f"{path}: truncated record at byte {TTAG_HEADER.size + payload.size - trailing} "
            f"({trailing} trailing bytes)")
    records = payload.view(RECORD_DTYPE)
    chans = records['channel'].copy()
    stamps = records['timestamp'].astype(np.uint64)

    def offset_of(index: int) -> int:
        return TTAG_HEADER.size + index * RECORD_DTYPE.itemsize

    if stamps.size:
        bad = np.flatnonzero(stamps[1:] < stamps[:-1])
        if bad.size:
            first = int(bad[0] + 1)
            raise TimeTagIntegrityError(
                f"{path}: non-monotone timestamp at byte offset {offset_of(first)}",
                offset=offset_of(first))
        over = np.flatnonzero(chans >= channel_count)
        if over.size:
            first = int(over[0])
            raise TimeTagIntegrityError(
                f"{path}: undeclared channel {int(chans[first])} at byte offset {offset_of(first)}",
                offset=offset_of(first))
        late = np.flatnonzero(stamps >= np.uint64(duration_ticks))
        if late.size:
            first = int(late[0])
            raise TimeTagIntegrityError(
                f"{path}: timestamp beyond duration at byte offset {offset_of(first)}",
                offset=offset_of(first))

    sync = sync_plus_one - 1 if sync_plus_one else None
    metadata = RunMetadata(
        excitation_rate_hz=float(rate_hz),
        acquisition_time_s=float(Fraction(acq_ms, 1000)),
        run_index=run_index,
        sync_mode=SyncMode.RECORDED_SYNC_CHANNEL if sync is not None else SyncMode.NOMINAL_CLOCK,
    )
    stream = TimeTagStream(
        resolution_ps=resolution_ps,
        channels=detector_channels(channel_count, sync),
        event_channels=chans,
        timestamps=stamps,
        duration_ticks=duration_ticks,
        metadata=metadata,
    )
    metrics.EVENTS_READ.inc(len(stream))
    logger.info(f"Read {len(stream)} events from {path} ({resolution_ps} ps/tick)")
    return stream


# CSV bridge

_ROW = re.compile(r'^\s*(\d+)\s*,\s*(\d+)\s*$')
_COMMENT_KV = re.compile(r'^#\s*([A-Za-z_]+)\s*:\s*(.*?)\s*$')


def export_csv(stream: TimeTagStream, path: PathLike) -> None:
    """Write `channel,timestamp_ticks` rows with # comment lines carrying the stream geometry"""
    path = Path(path)
    meta = stream.metadata
    with path.open('w', newline='') as f:
        f.write(f"# resolution_ps: {stream.resolution_ps}\n")
        f.write(f"# duration_ticks: {stream.duration_ticks}\n")
        f.write(f"# channel_count: {max((c.id for c in stream.channels), default=-1) + 1}\n")
        if stream.sync_channel is not None:
            f.write(f"# sync_channel: {stream.sync_channel}\n")
        f.write(f"# excitation_rate_hz: {meta.excitation_rate_hz!r}\n")
        f.write(f"# acquisition_time_s: {meta.acquisition_time_s!r}\n")
        f.write(f"# run_index: {meta.run_index}\n")
        frame = pd.DataFrame({
            'channel': stream.event_channels.astype(np.int64),
            'timestamp_ticks': stream.timestamps,
        })
        frame.to_csv(f, index=False)
    logger.info(f"Exported {len(stream)} events to {path}")


def import_csv(path: PathLike, resolution_ps: int, metadata: RunMetadata) -> TimeTagStream:
    """
    Read `channel,timestamp_ticks` rows into a stream.

    A header row and `#` comment lines are allowed. Unsorted rows are sorted
    (stable, by timestamp) and the returned stream has sort_performed=True.
    """
    path = Path(path)
    lines = path.read_text().splitlines()

    comments: Dict[str, str] = {}
    numbers: List[int] = []
    texts: List[str] = []
    header_seen = False
    for lineno, text in enumerate(lines, start=1):
        stripped = text.strip()
        if not stripped:
            continue
        if stripped.startswith('#'):
            match = _COMMENT_KV.match(stripped)
            if match:
                comments[match.group(1)] = match.group(2)
            continue
        if not texts and not header_seen and not _ROW.match(stripped) and re.search('[A-Za-z]', stripped):
            header_seen = True
            continue
        numbers.append(lineno)
        texts.append(stripped)

    rows = pd.Series(texts, dtype=object).str.extract(_ROW)
    bad = rows[0].isna()
    if bad.any():
        first = int(np.argmax(bad.to_numpy()))
        raise CsvParseError(f"{path}:{numbers[first]}: cannot parse row {texts[first]!r}",
                            line=numbers[first])

    chans_wide = rows[0].to_numpy(dtype=str).astype(np.uint64) if texts else np.empty(0, np.uint64)
    stamps = rows[1].to_numpy(dtype=str).astype(np.uint64) if texts else np.empty(0, np.uint64)
    too_big = np.flatnonzero(chans_wide > 255)
    if too_big.size:
        first = int(too_big[0])
        raise CsvParseError(f"{path}:{numbers[first]}: channel {int(chans_wide[first])} > 255",
                            line=numbers[first])
    chans = chans_wide.astype(np.uint8)

    sort_performed = False
    if stamps.size and np.any(stamps[1:] < stamps[:-1]):
        order = np.argsort(stamps, kind='stable')
        chans, stamps = chans[order], stamps[order]
        sort_performed = True
        logger.warning(f"{path}: rows were not time-ordered; sorted {stamps.size} events")

    duration = int(comments['duration_ticks']) if 'duration_ticks' in comments \
        else metadata.duration_ticks(resolution_ps)
    if stamps.size and int(stamps[-1]) >= duration:
        logger.warning(f"{path}: events extend past the acquisition time; duration set from data")
        duration = int(stamps[-1]) + 1

    count = int(comments['channel_count']) if 'channel_count' in comments \
        else (int(chans.max()) + 1 if chans.size else 2)
    sync = int(comments['sync_channel']) if 'sync_channel' in comments else None

    stream = TimeTagStream(
        resolution_ps=resolution_ps,
        channels=detector_channels(count, sync),
        event_channels=chans,
        timestamps=stamps,
        duration_ticks=duration,
        metadata=metadata,
        sort_performed=sort_performed,
    )
    metrics.EVENTS_READ.inc(len(stream))
    logger.info(f"Imported {len(stream)} events from {path}")
    return stream


def read_csv_metadata(path: PathLike) -> Dict[str, str]:
    """`# key: value` comment lines at the top of an exported CSV"""
    found: Dict[str, str] = {}
    with Path(path).open() as f:
        for text in f:
            if not text.startswith('#'):
                break
            match = _COMMENT_KV.match(text.strip())
            if match:
                found[match.group(1)] = match.group(2)
    return found


# pulse indexing

def pulse_index(timestamp: int, metadata: RunMetadata, resolution_ps: int) -> Tuple[int, int]:
    """
    Excitation pulse number and tick offset of a timestamp under the nominal clock.

    Pulse n starts at tick ceil(n*T); the offset is measured from there, so
    0 <= offset < T even when T is not a whole number of ticks.
    """
    period = metadata.period_ticks(resolution_ps)
    num, den = period.numerator, period.denominator
    t = int(timestamp)
    pulse = (t * den) // num
    start = -((-pulse * num) // den)
    return pulse, t - start


def pulse_indices(timestamps: np.ndarray, metadata: RunMetadata,
                  resolution_ps: int) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised pulse_index over an array of ticks, exact for 64-bit ranges"""
    period = metadata.period_ticks(resolution_ps)
    num, den = period.numerator, period.denominator
    t = np.asarray(timestamps)

    if num * den >= 2 ** 62 or (t.size and int(t.max()) >= 2 ** 62):
        pairs = [pulse_index(int(x), metadata, resolution_ps) for x in t.tolist()]
        pulses = np.array([p for p, _ in pairs], dtype=object)
        offsets = np.array([o for _, o in pairs], dtype=object)
        return pulses, offsets

    t = t.astype(np.int64)
    q, r = np.divmod(t, num)
    pulses = q * den + (r * den) // num
    p1, p2 = np.divmod(pulses, den)
    starts = p1 * num + (p2 * num + den - 1) // den
    return pulses, t - starts


def sync_pulse_index(timestamps: np.ndarray, sync_ticks: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Pulse number and offset against a recorded sync channel.

    Events before the first sync get pulse -1 and offset 0.
    """
    sync = np.asarray(sync_ticks, dtype=np.int64)
    t = np.asarray(timestamps, dtype=np.int64)
    pulses = np.searchsorted(sync, t, side='right') - 1
    offsets = np.where(pulses >= 0, t - sync[np.clip(pulses, 0, None)] if sync.size else 0, 0)
    return pulses.astype(np.int64), offsets.astype(np.int64)


# stream transforms

@numba.njit(cache=True, nogil=True)
def _non_paralyzable_keep(timestamps, dead_ticks):
    n = timestamps.shape[0]
    keep = np.zeros(n, dtype=np.bool_)
    last = 0
    started = False
    for i in range(n):
        t = timestamps[i]
        if not started or t - last >= dead_ticks:
            keep[i] = True
            last = t
            started = True
    return keep


def apply_dead_time(stream: TimeTagStream,
                    dead_time_ticks: Union[int, Mapping[int, int]]) -> TimeTagStream:
    """
    Non-paralyzable dead-time filter on detector channels.

    An event is kept when at least max(dead_time, 1) ticks have passed since
    the last kept event on the same channel, so per-channel timestamps come
    out strictly increasing.
    """
    keep = np.ones(len(stream), dtype=bool)
    for ch in stream.detector_channels:
        dead = dead_time_ticks.get(ch, 0) if isinstance(dead_time_ticks, Mapping) else dead_time_ticks
        idx = np.flatnonzero(stream.event_channels == ch)
        if idx.size:
            ts = stream.timestamps[idx].astype(np.int64)
            keep[idx] = _non_paralyzable_keep(ts, np.int64(max(int(dead), 1)))
    removed = int((~keep).sum())
    if removed:
        logger.debug(f"Dead time removed {removed} of {len(stream)} events")
    return replace(stream, event_channels=stream.event_channels[keep],
                   timestamps=stream.timestamps[keep])


def concat_streams(streams: Sequence[TimeTagStream], gap_ticks: int = 0) -> TimeTagStream:
    """
    Concatenate runs end to end, shifting each by the duration of the ones
    before it plus gap_ticks (rounded up to whole excitation periods). A gap
    wider than the correlation range keeps pairs from straddling two runs.
    """
    if not streams:
        raise UsageError("no streams to concatenate")
    first = streams[0]
    for s in streams[1:]:
        if s.resolution_ps != first.resolution_ps:
            raise UsageError("streams have different resolutions")
        if exact(s.metadata.excitation_rate_hz) != exact(first.metadata.excitation_rate_hz):
            raise UsageError("streams have different excitation rates")
        if [(c.id, c.role) for c in s.channels] != [(c.id, c.role) for c in first.channels]:
            raise UsageError("streams have different channel layouts")

    period = first.metadata.period_ticks(first.resolution_ps)
    gap = 0
    if gap_ticks > 0:
        n_gap = math.ceil(Fraction(gap_ticks) / period)
        n_gap = math.ceil(Fraction(n_gap, period.denominator)) * period.denominator
        gap = int(n_gap * period)
    shift = 0
    parts_t, parts_c = [], []
    for s in streams:
        if shift % period != 0:
            raise UsageError("run durations are not whole excitation periods")
        parts_t.append(s.timestamps.astype(np.uint64) + np.uint64(shift))
        parts_c.append(s.event_channels)
        shift += s.duration_ticks + gap

    total_time = sum(exact(s.metadata.acquisition_time_s) for s in streams)
    metadata = replace(first.metadata, acquisition_time_s=float(total_time))
    return TimeTagStream(
        resolution_ps=first.resolution_ps,
        channels=first.channels,
        event_channels=np.concatenate(parts_c),
        timestamps=np.concatenate(parts_t),
        duration_ticks=int(shift - gap),
        metadata=metadata,
    )


def singles_probabilities(stream: TimeTagStream) -> Dict[int, float]:
    """Clicks per excitation pulse on each detector channel, N_x / (R * t_acq)"""
    n_pulses = stream.metadata.n_pulses
    counts = np.bincount(stream.event_channels, minlength=256)
    return {ch: float(counts[ch]) / n_pulses for ch in stream.detector_channels}
