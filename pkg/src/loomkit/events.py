"""Event stream ingestion, window slicing, voxel encoding, clock remapping.

Events carry integer microsecond timestamps and polarity in {-1, +1}.
On disk polarity is stored as 0/1 (0 maps to -1). Streams keep the event
data in parallel numpy arrays so slicing and voxelization stay cheap.

Binary file layout (little endian):
    header, 16 bytes:  magic b"EVT1", u16 width, u16 height,
                       u32 record count (low 32 bits), u32 reserved
    record, 12 bytes:  u16 x, u16 y, u64 composite
                       (bits 0-62 timestamp in us, bit 63 polarity, 1 = ON)
    trigger records use x = 0xFFFF, y = 0xFFFF

A CSV alternative with columns ``x,y,t_us,p`` is accepted for interchange.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import BinCountZero, CountMismatch, MalformedRecord, NonMonotonicTime

MAGIC = b"EVT1"
HEADER = struct.Struct("<4sHHII")
RECORD_BYTES = 12
TRIGGER_XY = 0xFFFF
TIME_MASK = (1 << 63) - 1
JITTER_TOLERANCE_US = 1000  # input disorder up to 1 ms is silently sorted

_RECORD_DTYPE = np.dtype([("x", "<u2"), ("y", "<u2"), ("c", "<u8")])


class Event(NamedTuple):
    x: int
    y: int
    t: int  # microseconds
    p: int  # -1 or +1


def _sort_within_jitter(t: np.ndarray, what: str) -> np.ndarray | None:
    """Return a stable sort permutation, or None if already sorted.

    Raises NonMonotonicTime when any timestamp lags the running maximum
    by more than the 1 ms jitter tolerance.
    """
    if t.size == 0:
        return None
    lag = np.maximum.accumulate(t) - t
    worst = int(lag.max())
    if worst == 0:
        return None
    if worst > JITTER_TOLERANCE_US:
        raise NonMonotonicTime(f"{what} disordered by {worst} us (> {JITTER_TOLERANCE_US} us)")
    return np.argsort(t, kind="stable")


@dataclass(frozen=True)
class EventStream:
    """Time-ordered event sequence with trigger marks for one sensor."""

    sensor_size: tuple[int, int]  # (width, height)
    xs: np.ndarray
    ys: np.ndarray
    ts: np.ndarray
    ps: np.ndarray
    trigger_marks: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    partial: bool = False  # trigger marks extend beyond the event time range

    def __post_init__(self):
        w, h = self.sensor_size
        if len({self.xs.size, self.ys.size, self.ts.size, self.ps.size}) != 1:
            raise ValueError("event component arrays must share one length")
        if self.xs.size:
            if self.ts.min() < 0:
                raise ValueError("negative timestamp")
            if np.any(np.diff(self.ts) < 0):
                raise ValueError("events must be non-decreasing in t")
            if self.xs.max() >= w or self.ys.max() >= h:
                raise ValueError("event coordinates exceed sensor size")
            if not np.isin(self.ps, (-1, 1)).all():
                raise ValueError("polarity must be -1 or +1")

    def __len__(self) -> int:
        return self.xs.size

    def __getitem__(self, i: int) -> Event:
        return Event(int(self.xs[i]), int(self.ys[i]), int(self.ts[i]), int(self.ps[i]))

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def from_events(
        cls,
        sensor_size: tuple[int, int],
        events: Sequence[tuple[int, int, int, int]],
        trigger_marks: Sequence[int] = (),
    ) -> "EventStream":
        arr = np.asarray(list(events), dtype=np.int64).reshape(-1, 4)
        return cls.from_arrays(
            sensor_size,
            arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3],
            np.asarray(trigger_marks, dtype=np.int64),
        )

    @classmethod
    def from_arrays(cls, sensor_size, xs, ys, ts, ps, trigger_marks=None) -> "EventStream":
        """Build a stream, applying the jitter-tolerant sort policy."""
        xs = np.asarray(xs, np.int32)
        ys = np.asarray(ys, np.int32)
        ts = np.asarray(ts, np.int64)
        ps = np.asarray(ps, np.int8)
        marks = np.asarray(trigger_marks if trigger_marks is not None else [], np.int64)
        order = _sort_within_jitter(ts, "events")
        if order is not None:
            xs, ys, ts, ps = xs[order], ys[order], ts[order], ps[order]
        t_order = _sort_within_jitter(marks, "trigger marks")
        if t_order is not None:
            marks = marks[t_order]
        partial = bool(
            marks.size
            and ts.size
            and (marks[0] < ts[0] or marks[-1] > ts[-1])
        ) or bool(marks.size and ts.size == 0)
        return cls(tuple(sensor_size), xs, ys, ts, ps, marks, partial)


@dataclass(frozen=True)
class EventSlice:
    """View over a half-open time window [t0, t1) of a stream."""

    sensor_size: tuple[int, int]
    window: tuple[int, int]
    xs: np.ndarray
    ys: np.ndarray
    ts: np.ndarray
    ps: np.ndarray

    def __len__(self) -> int:
        return self.xs.size

    def __getitem__(self, i: int) -> Event:
        return Event(int(self.xs[i]), int(self.ys[i]), int(self.ts[i]), int(self.ps[i]))


@dataclass(frozen=True)
class EventVoxelGrid:
    """N-bin most-recent-polarity encoding of one time window.

    Cell values: 1.0 where the freshest in-bin event is ON, 0.0 where it
    is OFF, 0.5 where the pixel saw no event in that bin. ``values`` is
    laid out (bins, height, width).
    """

    width: int
    height: int
    bins: int
    window: tuple[int, int]
    values: np.ndarray

    def value(self, x: int, y: int, i: int) -> float:
        return float(self.values[i, y, x])


def slice_window(stream: EventStream, t0: int, t1: int) -> EventSlice:
    """Events with t0 <= t < t1, order preserved. Empty windows are fine."""
    if t0 >= t1:
        raise ValueError(f"need t0 < t1, got [{t0}, {t1})")
    lo = int(np.searchsorted(stream.ts, t0, side="left"))
    hi = int(np.searchsorted(stream.ts, t1, side="left"))
    return EventSlice(
        stream.sensor_size,
        (int(t0), int(t1)),
        stream.xs[lo:hi], stream.ys[lo:hi], stream.ts[lo:hi], stream.ps[lo:hi],
    )


def voxelize(slc: EventSlice, bins: int, size: tuple[int, int] | None = None) -> EventVoxelGrid:
    """Encode a slice into the N-bin most-recent-polarity grid.

    Each (pixel, bin) cell takes (p + 1)/2 of the latest event that fell
    into it; cells without events read 0.5. Timestamp ties resolve to the
    later record in stream order.
    """
    if bins < 1:
        raise BinCountZero(f"bins must be >= 1, got {bins}")
    w, h = size if size is not None else slc.sensor_size
    t0, t1 = slc.window
    values = np.full((bins, h, w), 0.5, dtype=np.float32)
    if len(slc):
        # integer bin arithmetic keeps edges exact; t < t1 guarantees idx < bins
        idx = (slc.ts.astype(np.int64) - t0) * bins // (t1 - t0)
        keep = (slc.xs >= 0) & (slc.xs < w) & (slc.ys >= 0) & (slc.ys < h)
        # duplicate cell assignments resolve to the last occurrence, which is
        # the freshest event because slices are time ordered
        values[idx[keep], slc.ys[keep], slc.xs[keep]] = (
            (slc.ps[keep].astype(np.float32) + 1.0) / 2.0
        )
    return EventVoxelGrid(w, h, bins, (t0, t1), values)


def remap_clock(frame_count: int, trigger_marks, offset: int = 0) -> np.ndarray:
    """Assign trigger timestamps to frames: frame i -> marks[i + offset].

    Raises CountMismatch with the deficit when there are not enough
    trigger marks, which signals dropped frames or triggers upstream.
    """
    marks = np.asarray(trigger_marks, dtype=np.int64)
    if frame_count < 0 or offset < 0:
        raise ValueError("frame_count and offset must be non-negative")
    if marks.size > 1 and np.any(np.diff(marks) <= 0):
        raise ValueError("trigger marks must be strictly increasing")
    needed = frame_count + offset
    if needed > marks.size:
        raise CountMismatch(needed - marks.size)
    return marks[offset:offset + frame_count].copy()


# ---------------------------------------------------------------------------
# file I/O


def _decode_records(raw: np.ndarray, width: int, height: int):
    t = (raw["c"] & TIME_MASK).astype(np.int64)
    p = np.where((raw["c"] >> 63) > 0, 1, -1).astype(np.int8)
    is_trigger = (raw["x"] == TRIGGER_XY) & (raw["y"] == TRIGGER_XY)
    ev = ~is_trigger
    xs = raw["x"][ev].astype(np.int32)
    ys = raw["y"][ev].astype(np.int32)
    out_of_range = (xs >= width) | (ys >= height)
    if out_of_range.any():
        bad = int(np.flatnonzero(out_of_range)[0])
        raise MalformedRecord(f"event record {bad} outside {width}x{height} sensor")
    return xs, ys, t[ev], p[ev], t[is_trigger]


def ingest_events(path) -> EventStream:
    """Load a binary or CSV event file into a stream.

    Minor disorder (<= 1 ms) is sorted away; anything worse raises
    NonMonotonicTime. Trigger records come back in ``trigger_marks``.
    """
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(4)
    if head == MAGIC:
        return _ingest_binary(path)
    return _ingest_csv(path)


def _ingest_binary(path: Path) -> EventStream:
    blob = Path(path).read_bytes()
    if len(blob) < HEADER.size:
        raise MalformedRecord(f"{path}: file shorter than the 16-byte header")
    magic, width, height, count_low, _reserved = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise MalformedRecord(f"{path}: bad magic {magic!r}")
    body = len(blob) - HEADER.size
    if body % RECORD_BYTES != 0:
        raise MalformedRecord(f"{path}: truncated record ({body % RECORD_BYTES} stray bytes)")
    n = body // RECORD_BYTES
    if (n & 0xFFFFFFFF) != count_low:
        raise MalformedRecord(f"{path}: header says {count_low} records, file holds {n}")
    raw = np.frombuffer(blob, dtype=_RECORD_DTYPE, count=n, offset=HEADER.size)
    xs, ys, ts, ps, marks = _decode_records(raw, width, height)
    return EventStream.from_arrays((width, height), xs, ys, ts, ps, marks)


def _ingest_csv(path: Path) -> EventStream:
    xs, ys, ts, ps, marks = [], [], [], [], []
    width = height = 0
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or row[0].startswith("#"):
                continue
            if lineno == 1 and not row[0].strip().lstrip("-").isdigit():
                continue  # header row
            if len(row) != 4:
                raise MalformedRecord(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
            try:
                x, y, t, p = (int(v) for v in row)
            except ValueError as e:
                raise MalformedRecord(f"{path}:{lineno}: {e}") from None
            if x == TRIGGER_XY and y == TRIGGER_XY:
                marks.append(t)
                continue
            if x < 0 or y < 0 or t < 0 or p not in (-1, 0, 1):
                raise MalformedRecord(f"{path}:{lineno}: out-of-range field")
            xs.append(x)
            ys.append(y)
            ts.append(t)
            ps.append(1 if p == 1 else -1)
            width = max(width, x + 1)
            height = max(height, y + 1)
    return EventStream.from_arrays(
        (width, height),
        np.array(xs, np.int32), np.array(ys, np.int32),
        np.array(ts, np.int64), np.array(ps, np.int8),
        np.array(marks, np.int64),
    )


def write_binary(stream: EventStream, path) -> None:
    """Serialize a stream (events merged with trigger records by time)."""
    ev = np.empty(len(stream), dtype=_RECORD_DTYPE)
    ev["x"] = stream.xs
    ev["y"] = stream.ys
    ev["c"] = stream.ts.astype(np.uint64) | (
        (stream.ps > 0).astype(np.uint64) << np.uint64(63)
    )
    trig = np.empty(stream.trigger_marks.size, dtype=_RECORD_DTYPE)
    trig["x"] = TRIGGER_XY
    trig["y"] = TRIGGER_XY
    trig["c"] = stream.trigger_marks.astype(np.uint64)
    rec = np.concatenate([ev, trig])
    order = np.argsort(rec["c"] & np.uint64(TIME_MASK), kind="stable")
    rec = rec[order]
    w, h = stream.sensor_size
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, w, h, rec.size & 0xFFFFFFFF, 0))
        f.write(rec.tobytes())


def write_csv(stream: EventStream, path) -> None:
    with open(path, "w", newline="") as f:
        out = csv.writer(f)
        out.writerow(["x", "y", "t_us", "p"])
        for e in stream:
            out.writerow([e.x, e.y, e.t, 1 if e.p > 0 else 0])
        for m in stream.trigger_marks:
            out.writerow([TRIGGER_XY, TRIGGER_XY, int(m), 0])
