"""Event data model, binary/CSV codecs, validation and synthetic streams.

binary_v1 layout, all little-endian::

    header  b"EVS1"  width:u16  height:u16  count:u64        (16 bytes)
    record  x:u16  y:u16  t:u64  p:i8                         (13 bytes)

CSV has a mandatory ``x,y,t,p`` header line and one event per line, with
polarity written as ``-1`` or ``1``.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

MAGIC = b"EVS1"
HEADER_DTYPE = np.dtype([("magic", "S4"), ("width", "<u2"), ("height", "<u2"), ("count", "<u8")])
RECORD_DTYPE = np.dtype([("x", "<u2"), ("y", "<u2"), ("t", "<u8"), ("p", "i1")])
HEADER_SIZE = HEADER_DTYPE.itemsize  # 16
RECORD_SIZE = RECORD_DTYPE.itemsize  # 13
CSV_HEADER = "x,y,t,p"
FORMATS = ("binary_v1", "csv")
PATTERNS = ("cyclic_horizontal", "cyclic_vertical", "discrete_arc", "discrete_linear")


class EventFormatError(ValueError):
    """Malformed payload; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class StreamValidationError(ValueError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class EncodingError(ValueError):
    pass


class Event(NamedTuple):
    x: int
    y: int
    t: int
    p: int


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=dtype)
    if a.flags.writeable:
        a = a.copy()
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class EventStream:
    """Columnar, read-only event sequence for one sensor recording."""

    sensor_width: int
    sensor_height: int
    x: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int32))
    y: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int32))
    t: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    p: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int8))
    label: int | None = None
    subject: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "x", _frozen(self.x, np.int32))
        object.__setattr__(self, "y", _frozen(self.y, np.int32))
        object.__setattr__(self, "t", _frozen(self.t, np.int64))
        object.__setattr__(self, "p", _frozen(self.p, np.int8))
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event columns must have equal length")

    @classmethod
    def from_events(cls, events, width: int, height: int, **meta) -> "EventStream":
        events = list(events)
        if not events:
            return cls(width, height, **meta)
        x, y, t, p = (np.array(col) for col in zip(*events))
        return cls(width, height, x, y, t, p, **meta)

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i: int) -> Event:
        return Event(int(self.x[i]), int(self.y[i]), int(self.t[i]), int(self.p[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (self.sensor_width == other.sensor_width and self.sensor_height == other.sensor_height
                and self.label == other.label and self.subject == other.subject
                and all(np.array_equal(getattr(self, c), getattr(other, c)) for c in "xytp"))

    __hash__ = None

    @property
    def duration(self) -> int:
        """Span from the first to the last event in µs (0 when empty)."""
        return int(self.t[-1] - self.t[0]) if len(self) else 0

    def select(self, mask_or_index) -> "EventStream":
        return EventStream(self.sensor_width, self.sensor_height, self.x[mask_or_index], self.y[mask_or_index],
                           self.t[mask_or_index], self.p[mask_or_index], self.label, self.subject)

    def with_meta(self, **meta) -> "EventStream":
        kw = {"label": self.label, "subject": self.subject, **meta}
        return EventStream(self.sensor_width, self.sensor_height, self.x, self.y, self.t, self.p, **kw)

    def normalized(self) -> "EventStream":
        if not len(self) or self.t[0] == 0:
            return self
        return EventStream(self.sensor_width, self.sensor_height, self.x, self.y, self.t - self.t[0],
                           self.p, self.label, self.subject)


# --- validation ------------------------------------------------------------

@dataclass
class ValidationReport:
    issues: list[tuple[int, str]] = field(default_factory=list)

    def __bool__(self) -> bool:
        # truthy when the stream is valid
        return not self.issues

    def __len__(self) -> int:
        return len(self.issues)

    def indices(self, reason: str | None = None) -> list[int]:
        return [i for i, r in self.issues if reason is None or r.startswith(reason)]


def validate_stream(stream: EventStream) -> ValidationReport:
    """Report every invariant violation as ``(index, reason)``; empty iff valid."""
    issues: list[tuple[int, str]] = []
    w, h = stream.sensor_width, stream.sensor_height
    x, y, t, p = stream.x, stream.y, stream.t, stream.p
    checks = [
        (x < 0, "out_of_bounds: x < 0"),
        (x >= w, f"out_of_bounds: x >= sensor_width {w}"),
        (y < 0, "out_of_bounds: y < 0"),
        (y >= h, f"out_of_bounds: y >= sensor_height {h}"),
        (t < 0, "negative_timestamp"),
        ((p != 1) & (p != -1), "bad_polarity"),
    ]
    if len(t) > 1:
        dec = np.zeros(len(t), bool)
        dec[1:] = t[1:] < t[:-1]
        checks.append((dec, "timestamp_decrease"))
    for mask, reason in checks:
        issues.extend((int(i), reason) for i in np.flatnonzero(mask))
    issues.sort(key=lambda item: item[0])
    return ValidationReport(issues)


def _raise_on_invalid(stream: EventStream) -> None:
    report = validate_stream(stream)
    if report.issues:
        idx, reason = report.issues[0]
        if reason == "timestamp_decrease":
            raise StreamValidationError(f"non-monotonic timestamp at event index {idx}", idx)
        raise StreamValidationError(f"invalid event at index {idx}: {reason}", idx)


# --- codecs ----------------------------------------------------------------

def encode_stream(stream: EventStream, format: str = "binary_v1") -> bytes:
    n = len(stream)
    if n:
        if stream.x.max() > 0xFFFF or stream.y.max() > 0xFFFF or stream.x.min() < 0 or stream.y.min() < 0:
            raise EncodingError("event coordinates exceed the 16-bit field width")
        if stream.t.min() < 0:
            raise EncodingError("negative timestamps cannot be encoded")
    if format == "binary_v1":
        if not (0 <= stream.sensor_width <= 0xFFFF and 0 <= stream.sensor_height <= 0xFFFF):
            raise EncodingError("sensor dimensions exceed the 16-bit field width")
        header = np.array([(MAGIC, stream.sensor_width, stream.sensor_height, n)], HEADER_DTYPE)
        return header.tobytes() + encode_records(stream)
    if format == "csv":
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        for x, y, t, p in zip(stream.x.tolist(), stream.y.tolist(), stream.t.tolist(), stream.p.tolist()):
            buf.write(f"{x},{y},{t},{p}\n")
        return buf.getvalue().encode("ascii")
    raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")


def encode_records(stream: EventStream) -> bytes:
    rec = np.empty(len(stream), RECORD_DTYPE)
    rec["x"], rec["y"], rec["t"], rec["p"] = stream.x, stream.y, stream.t, stream.p
    return rec.tobytes()


def decode_records(data: bytes, base_offset: int = 0) -> np.ndarray:
    if len(data) % RECORD_SIZE:
        full = len(data) // RECORD_SIZE
        raise EventFormatError(f"truncated event record {full}", base_offset + full * RECORD_SIZE)
    return np.frombuffer(data, RECORD_DTYPE)


def _from_records(rec: np.ndarray, width: int, height: int, normalize: bool) -> EventStream:
    t = rec["t"].astype(np.int64)
    if (rec["t"] > np.iinfo(np.int64).max).any():
        raise StreamValidationError("timestamp exceeds signed 64-bit range")
    s = EventStream(width, height, rec["x"].astype(np.int32), rec["y"].astype(np.int32), t, rec["p"])
    _raise_on_invalid(s)
    return s.normalized() if normalize else s


def decode_stream(data: bytes, format: str = "binary_v1", width: int | None = None,
                  height: int | None = None, normalize: bool = True) -> EventStream:
    """Parse and validate a payload; timestamps are shifted so the first event is at 0.

    CSV carries no sensor size; pass ``width``/``height`` or they are taken
    as one past the largest coordinate.
    """
    if format == "binary_v1":
        if len(data) < HEADER_SIZE:
            raise EventFormatError("payload shorter than the 16-byte header", len(data))
        head = np.frombuffer(data[:HEADER_SIZE], HEADER_DTYPE)[0]
        if head["magic"] != MAGIC:
            raise EventFormatError(f"bad magic {bytes(head['magic'])!r}", 0)
        count = int(head["count"])
        body = data[HEADER_SIZE:]
        if len(body) != count * RECORD_SIZE:
            have = len(body) // RECORD_SIZE
            off = HEADER_SIZE + min(have, count) * RECORD_SIZE
            raise EventFormatError(f"header declares {count} events but payload holds {len(body) / RECORD_SIZE:g}", off)
        rec = decode_records(body, HEADER_SIZE)
        return _from_records(rec, int(head["width"]), int(head["height"]), normalize)
    if format == "csv":
        return _decode_csv(data, width, height, normalize)
    raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")


def _decode_csv(data: bytes, width, height, normalize) -> EventStream:
    rows = []
    offset = 0
    lines = data.split(b"\n")
    for lineno, line in enumerate(lines):
        start = offset
        offset += len(line) + 1
        text = line.strip()
        if lineno == 0:
            if text.decode("ascii", "replace").replace(" ", "") != CSV_HEADER:
                raise EventFormatError("missing 'x,y,t,p' header line", 0)
            continue
        if not text:
            if lineno == len(lines) - 1:
                continue
            raise EventFormatError("empty line", start)
        parts = text.split(b",")
        if len(parts) != 4:
            raise EventFormatError(f"expected 4 fields, got {len(parts)}", start)
        try:
            rows.append(tuple(int(v) for v in parts))
        except ValueError:
            raise EventFormatError("non-integer field", start) from None
    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    if width is None:
        width = int(arr[:, 0].max()) + 1 if len(arr) else 0
    if height is None:
        height = int(arr[:, 1].max()) + 1 if len(arr) else 0
    if len(arr) and ((arr[:, 3] != 1) & (arr[:, 3] != -1)).any():
        i = int(np.flatnonzero((arr[:, 3] != 1) & (arr[:, 3] != -1))[0])
        raise StreamValidationError(f"polarity {arr[i, 3]} at index {i} not in {{-1, +1}}", i)
    s = EventStream(width, height, arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])
    _raise_on_invalid(s)
    return s.normalized() if normalize else s


def slice_window(stream: EventStream, t0: int, t1: float) -> EventStream:
    """Events with ``t0 <= t < t1``; ``t1`` may be ``inf``."""
    if t0 > t1:
        raise ValueError("slice_window requires t0 <= t1")
    lo = np.searchsorted(stream.t, t0, side="left")
    hi = len(stream) if t1 == np.inf else np.searchsorted(stream.t, t1, side="left")
    return stream.select(slice(lo, max(lo, hi)))


def concat(streams: list[EventStream]) -> EventStream:
    first = streams[0]
    return EventStream(first.sensor_width, first.sensor_height,
                       np.concatenate([s.x for s in streams]), np.concatenate([s.y for s in streams]),
                       np.concatenate([s.t for s in streams]), np.concatenate([s.p for s in streams]),
                       first.label, first.subject)


# --- synthetic streams -----------------------------------------------------

@dataclass(frozen=True)
class MotionScript:
    pattern: str
    duration: float = 2.0  # seconds
    rate: float = 20000.0  # events / s
    noise_rate: float = 0.0
    seed: int = 0
    period: float = 0.5  # cyclic patterns only
    sigma: float | None = None  # blob radius in px; default scales with sensor size

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}; expected one of {PATTERNS}")
        if not self.duration > 0:
            raise ValueError("duration must be > 0")
        if not self.rate > 0:
            raise ValueError("rate must be > 0")
        if not self.noise_rate >= 0:
            raise ValueError("noise_rate must be >= 0")
        if not self.period > 0:
            raise ValueError("period must be > 0")


def _triangle(phase: np.ndarray) -> np.ndarray:
    """Unit triangle wave in [-1, 1] with period 1; starts at 0 moving up."""
    f = np.mod(phase + 0.25, 1.0)
    return 4.0 * np.abs(f - 0.5) - 1.0


def blob_trajectory(script: MotionScript, width: int, height: int, times: np.ndarray,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Blob centre (x, y) at each time, shape ``(len(times), 2)``."""
    rng = np.random.default_rng(script.seed) if rng is None else rng
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    span = min(width, height)
    amp = span * rng.uniform(0.25, 0.32)
    jitter = rng.uniform(-0.05, 0.05, 2) * span
    phase0 = rng.uniform(0, 1)
    s = times / script.duration
    if script.pattern in ("cyclic_horizontal", "cyclic_vertical"):
        osc = amp * _triangle(times / script.period + phase0)
        if script.pattern == "cyclic_horizontal":
            return np.stack([cx + osc, np.full_like(osc, cy + jitter[1])], axis=1)
        return np.stack([np.full_like(osc, cx + jitter[0]), cy + osc], axis=1)
    # discrete: one movement over the first part of the stream, then rest
    move_end = rng.uniform(0.5, 0.65)
    u = np.clip(s / move_end, 0.0, 1.0)
    u = 0.5 - 0.5 * np.cos(np.pi * u)
    flip = rng.choice([-1.0, 1.0])
    if script.pattern == "discrete_arc":
        ang = np.pi * (1.0 - u)
        px = cx + flip * amp * np.cos(ang)
        py = cy + amp * 0.5 - amp * np.sin(ang)
        return np.stack([px + jitter[0], py], axis=1)
    px = cx + flip * amp * (2 * u - 1)
    py = cy + amp * (2 * u - 1)
    return np.stack([px + jitter[0] * 0.5, py + jitter[1] * 0.5], axis=1)


def _neighbour_counts(xq, yq, tq, px, py, pt, radius: int, window: int, width: int, height: int) -> np.ndarray:
    """For each query event, count reference events within the space-time box.

    Reference events must be given sorted by time. Queries that are also in
    the reference set count themselves.
    """
    if len(px) == 0 or len(xq) == 0:
        return np.zeros(len(xq), np.int64)
    pix = py.astype(np.int64) * width + px
    span = int(pt.max() - min(pt.min(), tq.min())) + 2 * window + 2
    base = int(min(pt.min(), tq.min())) - window
    if (width * height + 1) * span >= 2 ** 62:
        raise OverflowError("stream too long for packed neighbour keys")
    keys = np.sort(pix * span + (pt - base))
    counts = np.zeros(len(xq), np.int64)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            nx = xq + dx
            ny = yq + dy
            ok = (nx >= 0) & (nx < width) & (ny >= 0) & (ny < height)
            if not ok.any():
                continue
            npix = ny[ok].astype(np.int64) * width + nx[ok]
            rel = tq[ok] - base
            lo = np.searchsorted(keys, npix * span + rel - window, side="left")
            hi = np.searchsorted(keys, npix * span + rel + window, side="right")
            counts[ok] += hi - lo
    return counts


@dataclass
class SyntheticTruth:
    stream: EventStream
    is_noise: np.ndarray
    centroids: np.ndarray  # ideal blob centre per time step
    step_times: np.ndarray  # µs


# guard used when placing noise events so they are isolated under the default filter
NOISE_GUARD_RADIUS = 2
NOISE_GUARD_WINDOW = 10_000


def synthesize(script: MotionScript, width: int, height: int, dt_us: int = 1000) -> SyntheticTruth:
    """Generate a stream plus the ground truth used to build it."""
    if width < 32 or height < 32:
        raise ValueError("synthetic sensor must be at least 32×32")
    rng = np.random.default_rng(script.seed)
    dur_us = int(round(script.duration * 1e6))
    steps = max(1, dur_us // dt_us)
    edges = np.arange(steps + 1, dtype=np.float64) * dt_us
    centres = blob_trajectory(script, width, height, edges / 1e6, rng)
    sigma = script.sigma if script.sigma is not None else max(1.5, min(width, height) / 16)

    gx = np.arange(width, dtype=np.float64)
    gy = np.arange(height, dtype=np.float64)

    def intensity(c):
        dx = gx[None, None, :] - c[:, 0, None, None]
        dy = gy[None, :, None] - c[:, 1, None, None]
        return np.exp(-(dx * dx + dy * dy) / (2 * sigma * sigma))

    def changes():
        # per-step intensity change, in blocks of time steps
        prev = intensity(centres[:1])
        for s0 in range(0, steps, 200):
            cur = intensity(centres[s0 + 1:min(steps, s0 + 200) + 1])
            yield s0, np.diff(np.concatenate([prev, cur], axis=0), axis=0)
            prev = cur[-1:]

    peak = 0.0
    for _, ch in changes():
        peak = max(peak, float(np.abs(ch).max()))
    floor = 0.05 * peak
    total = 0.0
    for _, ch in changes():
        m = np.abs(ch)
        total += float(m[m >= floor].sum())
    n_expected = script.rate * script.duration
    scale = n_expected / total if total > 0 else 0.0

    cols = []
    for s0, ch in changes():
        m = np.abs(ch)
        m[m < floor] = 0.0
        counts = rng.poisson(m * scale)
        k, yy, xx = np.nonzero(counts)
        reps = counts[k, yy, xx]
        pol = np.where(ch[k, yy, xx] > 0, 1, -1)
        cols.append((np.repeat(k + s0, reps), np.repeat(yy, reps), np.repeat(xx, reps), np.repeat(pol, reps)))
    k = np.concatenate([c[0] for c in cols])
    by = np.concatenate([c[1] for c in cols])
    bx = np.concatenate([c[2] for c in cols])
    bp = np.concatenate([c[3] for c in cols]).astype(np.int8)
    bt = (k * dt_us + rng.integers(0, dt_us, len(k))).astype(np.int64)

    n_noise = rng.poisson(script.noise_rate * script.duration) if script.noise_rate > 0 else 0
    nx, ny, nt = _place_noise(rng, n_noise, bx, by, bt, width, height, dur_us)
    npol = rng.choice(np.array([-1, 1], np.int8), len(nx))

    x = np.concatenate([bx, nx]).astype(np.int32)
    y = np.concatenate([by, ny]).astype(np.int32)
    t = np.concatenate([bt, nt]).astype(np.int64)
    p = np.concatenate([bp, npol]).astype(np.int8)
    noise = np.concatenate([np.zeros(len(bx), bool), np.ones(len(nx), bool)])
    order = np.lexsort((x, y, t))
    x, y, t, p, noise = x[order], y[order], t[order], p[order], noise[order]
    if len(t):
        t = t - t[0]
    stream = EventStream(width, height, x, y, t, p)
    return SyntheticTruth(stream, noise, centres[:-1], edges[:-1])


def _place_noise(rng, n, bx, by, bt, width, height, dur_us):
    if n == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64)
    order = np.argsort(bt, kind="stable")
    rx, ry, rt = bx[order].astype(np.int64), by[order].astype(np.int64), bt[order].astype(np.int64)
    acc_x, acc_y, acc_t = [], [], []
    remaining = n
    for _ in range(50):
        if remaining == 0:
            break
        cx = rng.integers(0, width, 2 * remaining)
        cy = rng.integers(0, height, 2 * remaining)
        ct = rng.integers(0, dur_us, 2 * remaining)
        clear = _neighbour_counts(cx, cy, ct, rx, ry, rt, NOISE_GUARD_RADIUS, NOISE_GUARD_WINDOW, width, height) == 0
        # candidates must also be isolated from one another and from accepted noise
        for i in np.flatnonzero(clear):
            if remaining == 0:
                break
            ok = True
            for ax, ay, at in zip(acc_x, acc_y, acc_t):
                if (abs(ax - cx[i]) <= NOISE_GUARD_RADIUS and abs(ay - cy[i]) <= NOISE_GUARD_RADIUS
                        and abs(at - ct[i]) <= NOISE_GUARD_WINDOW):
                    ok = False
                    break
            if ok:
                acc_x.append(int(cx[i]))
                acc_y.append(int(cy[i]))
                acc_t.append(int(ct[i]))
                remaining -= 1
    return np.array(acc_x, np.int64), np.array(acc_y, np.int64), np.array(acc_t, np.int64)


def generate_synthetic(script: MotionScript, width: int = 64, height: int = 64) -> EventStream:
    """Deterministic moving-blob event stream for ``script``."""
    return synthesize(script, width, height).stream
