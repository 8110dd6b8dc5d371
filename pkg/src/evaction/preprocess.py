"""Denoising, decaying time surfaces, resampling and augmentation."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .events import EventStream, _neighbour_counts

MODES = ("latest_event", "decayed_sum")
TSF_MAGIC = b"TSF1"
TSF_HEADER = struct.Struct("<4sQHH")


@dataclass(frozen=True)
class DecayConfig:
    tau: float = 33_000.0  # µs
    cadence: int = 33_000  # µs between surfaces
    mode: str = "latest_event"

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if not self.cadence > 0:
            raise ValueError("cadence must be > 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass(frozen=True)
class FilterConfig:
    spatial_radius: int = 1
    temporal_window: int = 5_000  # µs
    min_neighbors: int = 1

    def __post_init__(self):
        if self.spatial_radius < 1:
            raise ValueError("spatial_radius must be >= 1")
        if not self.temporal_window > 0:
            raise ValueError("temporal_window must be > 0")
        if self.min_neighbors < 1:
            raise ValueError("min_neighbors must be >= 1")


@dataclass(frozen=True, eq=False)
class TimeSurface:
    t_ref: int
    values: np.ndarray

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other):
        if not isinstance(other, TimeSurface):
            return NotImplemented
        return self.t_ref == other.t_ref and np.array_equal(self.values, other.values)

    __hash__ = None

    def to_bytes(self) -> bytes:
        return (TSF_HEADER.pack(TSF_MAGIC, int(self.t_ref), self.height, self.width)
                + np.ascontiguousarray(self.values, dtype="<f4").tobytes())

    @classmethod
    def from_bytes(cls, data: bytes, offset: int = 0) -> tuple["TimeSurface", int]:
        magic, t_ref, h, w = TSF_HEADER.unpack_from(data, offset)
        if magic != TSF_MAGIC:
            raise ValueError(f"bad time-surface magic at byte {offset}")
        start = offset + TSF_HEADER.size
        end = start + 4 * h * w
        if end > len(data):
            raise ValueError(f"truncated time surface at byte {offset}")
        vals = np.frombuffer(data, "<f4", h * w, start).reshape(h, w).astype(np.float32)
        return cls(int(t_ref), vals), end


def dump_surfaces(surfaces) -> bytes:
    return b"".join(s.to_bytes() for s in surfaces)


def load_surfaces(data: bytes) -> list[TimeSurface]:
    out, off = [], 0
    while off < len(data):
        s, off = TimeSurface.from_bytes(data, off)
        out.append(s)
    return out


# --- filtering -------------------------------------------------------------

def isolated_mask(stream: EventStream, cfg: FilterConfig) -> np.ndarray:
    """True for events with at least ``min_neighbors`` other events nearby."""
    if not len(stream):
        return np.zeros(0, bool)
    x = stream.x.astype(np.int64)
    y = stream.y.astype(np.int64)
    counts = _neighbour_counts(x, y, stream.t, x, y, stream.t, cfg.spatial_radius, cfg.temporal_window,
                               stream.sensor_width, stream.sensor_height)
    return (counts - 1) >= cfg.min_neighbors


def filter_isolated(stream: EventStream, cfg: FilterConfig = FilterConfig()) -> EventStream:
    """Drop events with fewer than ``min_neighbors`` neighbours in the space-time box.

    Neighbours are counted against the unfiltered input, Chebyshev distance
    ``<= spatial_radius`` and ``|dt| <= temporal_window``.
    """
    return stream.select(isolated_mask(stream, cfg))


# --- time surfaces ---------------------------------------------------------

def _latest_per_pixel(pix: np.ndarray) -> np.ndarray:
    """Index of the last occurrence of each distinct pixel id."""
    rev = pix[::-1]
    _, first_in_rev = np.unique(rev, return_index=True)
    return len(pix) - 1 - first_in_rev


def build_time_surface(stream: EventStream, t_ref: int, cfg: DecayConfig = DecayConfig()) -> TimeSurface:
    h, w = stream.sensor_height, stream.sensor_width
    out = np.zeros(h * w, dtype=np.float64)
    n = int(np.searchsorted(stream.t, t_ref, side="right"))
    if n:
        pix = stream.y[:n].astype(np.int64) * w + stream.x[:n]
        t = stream.t[:n]
        p = stream.p[:n].astype(np.float64)
        if cfg.mode == "latest_event":
            idx = _latest_per_pixel(pix)
            out[pix[idx]] = p[idx] * np.exp((t[idx] - t_ref) / cfg.tau)
        else:
            wts = p * np.exp((t - t_ref) / cfg.tau)
            out = np.bincount(pix, weights=wts, minlength=h * w)
    return TimeSurface(int(t_ref), out.reshape(h, w))


def horizon_for(stream: EventStream, cfg: DecayConfig) -> int:
    """Number of complete cadence intervals spanned by the stream."""
    if not len(stream):
        return 0
    return int(stream.t[-1] // cfg.cadence)


def surface_sequence(stream: EventStream, cfg: DecayConfig = DecayConfig(), horizon: int | None = None) -> list[TimeSurface]:
    """Surfaces at ``t_ref = k * cadence`` for k = 1..horizon.

    Surface k only sees events with ``t < k * cadence``.
    """
    if horizon is None:
        horizon = horizon_for(stream, cfg)
        if horizon == 0:
            return []
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    builder = SurfaceBuilder(stream.sensor_width, stream.sensor_height, cfg)
    out = []
    lo = 0
    for k in range(1, horizon + 1):
        t_ref = k * cfg.cadence
        hi = int(np.searchsorted(stream.t, t_ref, side="left"))
        builder.add(stream.x[lo:hi], stream.y[lo:hi], stream.t[lo:hi], stream.p[lo:hi])
        out.append(builder.surface(t_ref))
        lo = hi
    return out


class SurfaceBuilder:
    """Incremental per-pixel state that yields surfaces identical to ``build_time_surface``.

    Events must be added in timestamp order.
    """

    def __init__(self, width: int, height: int, cfg: DecayConfig):
        self.width, self.height, self.cfg = width, height, cfg
        n = width * height
        if cfg.mode == "latest_event":
            self.last_t = np.zeros(n, np.int64)
            self.last_p = np.zeros(n, np.float64)
        else:
            # running sum referenced to ``self.anchor``
            self.acc = np.zeros(n, np.float64)
            self.anchor = 0

    def add(self, x, y, t, p) -> None:
        if not len(t):
            return
        pix = np.asarray(y, np.int64) * self.width + np.asarray(x, np.int64)
        t = np.asarray(t, np.int64)
        if self.cfg.mode == "latest_event":
            idx = _latest_per_pixel(pix)
            self.last_t[pix[idx]] = t[idx]
            self.last_p[pix[idx]] = np.asarray(p, np.float64)[idx]
        else:
            new_anchor = int(t[-1])
            self.acc *= math.exp((self.anchor - new_anchor) / self.cfg.tau)
            self.anchor = new_anchor
            self.acc += np.bincount(pix, weights=np.asarray(p, np.float64) * np.exp((t - new_anchor) / self.cfg.tau),
                                    minlength=self.acc.size)

    def surface(self, t_ref: int) -> TimeSurface:
        if self.cfg.mode == "latest_event":
            vals = self.last_p * np.exp((self.last_t - t_ref) / self.cfg.tau)
        else:
            vals = self.acc * math.exp((self.anchor - t_ref) / self.cfg.tau)
        return TimeSurface(int(t_ref), vals.reshape(self.height, self.width))


class StreamingSurfaces:
    """Turns timestamp-ordered event chunks into completed surfaces.

    Surface k is emitted once every event that can influence it has been
    seen: all events before ``k * cadence`` plus, when filtering, the
    ``temporal_window`` of events after them that decide their neighbour
    counts. ``close()`` flushes the surfaces whose boundary the stream
    reached. Output equals ``surface_sequence(filter_isolated(stream))``
    over ``horizon_for(stream)`` surfaces.
    """

    def __init__(self, width: int, height: int, decay: DecayConfig = DecayConfig(),
                 filt: FilterConfig | None = FilterConfig()):
        self.width, self.height = width, height
        self.decay, self.filt = decay, filt
        self.builder = SurfaceBuilder(width, height, decay)
        self.window = filt.temporal_window if filt else 0
        self._buf = [np.zeros(0, np.int64) for _ in range(4)]  # x, y, t, p raw events kept for context
        self._n_final = 0  # leading events of _buf already decided by the filter
        self._pending: list[tuple] = []  # kept events not yet fed to the builder
        self._next_k = 1
        self._latest: int | None = None
        self._origin: int | None = None

    def push(self, x, y, t, p) -> list[TimeSurface]:
        t = np.asarray(t, np.int64)
        if not len(t):
            return []
        if self._origin is None:
            self._origin = int(t[0])
        t = t - self._origin
        if (self._latest is not None and t[0] < self._latest) or (len(t) > 1 and (np.diff(t) < 0).any()):
            bad = self._latest if self._latest is not None else 0
            raise ValueError(f"out-of-order chunk: timestamp {int(t.min())} µs precedes {bad} µs already seen "
                             f"(surface boundary {self._next_k * self.decay.cadence} µs)")
        cols = (np.asarray(x, np.int64), np.asarray(y, np.int64), t, np.asarray(p, np.int64))
        self._buf = [np.concatenate([b, c]) for b, c in zip(self._buf, cols)]
        self._latest = int(t[-1])
        return self._advance(final=False)

    def close(self) -> list[TimeSurface]:
        return self._advance(final=True)

    def _advance(self, final: bool) -> list[TimeSurface]:
        if self._latest is None:
            return []
        bx, by, bt, bp = self._buf
        # events whose whole +-window neighbourhood has arrived
        if final:
            n_ready = len(bt)
        else:
            n_ready = int(np.searchsorted(bt, self._latest - self.window, side="left"))
        out = []
        if n_ready > self._n_final:
            keep = self._decide(self._n_final, n_ready)
            sel = np.arange(self._n_final, n_ready)[keep]
            self._pending.append((bx[sel], by[sel], bt[sel], bp[sel]))
            self._n_final = n_ready
        decided_until = self._latest + 1 if final else self._latest - self.window
        limit = self._latest  # boundary must have been reached by an actual event
        while True:
            t_ref = self._next_k * self.decay.cadence
            if t_ref > limit or t_ref > decided_until:
                break
            self._feed_until(t_ref)
            out.append(self.builder.surface(t_ref))
            self._next_k += 1
        self._trim()
        return out

    def _decide(self, i0: int, i1: int) -> np.ndarray:
        bx, by, bt, _ = self._buf
        if self.filt is None:
            return np.ones(i1 - i0, bool)
        counts = _neighbour_counts(bx[i0:i1], by[i0:i1], bt[i0:i1], bx, by, bt,
                                   self.filt.spatial_radius, self.filt.temporal_window, self.width, self.height)
        return (counts - 1) >= self.filt.min_neighbors

    def _feed_until(self, t_ref: int) -> None:
        rest = []
        for x, y, t, p in self._pending:
            cut = int(np.searchsorted(t, t_ref, side="left"))
            if cut:
                self.builder.add(x[:cut], y[:cut], t[:cut], p[:cut])
            if cut < len(t):
                rest.append((x[cut:], y[cut:], t[cut:], p[cut:]))
        self._pending = rest

    def _trim(self) -> None:
        # keep raw events still needed as neighbours for undecided events
        bt = self._buf[2]
        if self._n_final == 0 or not len(bt):
            return
        oldest_needed = bt[self._n_final] - self.window if self._n_final < len(bt) else bt[-1] - self.window
        drop = min(int(np.searchsorted(bt, oldest_needed, side="left")), self._n_final)
        if drop:
            self._buf = [b[drop:] for b in self._buf]
            self._n_final -= drop


# --- resampling ------------------------------------------------------------

def _bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray, fill: float | None = None) -> np.ndarray:
    """Sample ``img`` (..., H, W) at fractional coordinates (broadcast ys/xs).

    Out-of-range coordinates clamp to the border, or take ``fill`` if given.
    """
    h, w = img.shape[-2:]
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = ys - y0
    wx = xs - x0
    if fill is not None:
        outside = (ys < -0.5) | (ys > h - 0.5) | (xs < -0.5) | (xs > w - 0.5)
    y0c, y1c = np.clip(y0, 0, h - 1), np.clip(y0 + 1, 0, h - 1)
    x0c, x1c = np.clip(x0, 0, w - 1), np.clip(x0 + 1, 0, w - 1)
    a = img[..., y0c, x0c]
    b = img[..., y0c, x1c]
    c = img[..., y1c, x0c]
    d = img[..., y1c, x1c]
    top = a + (b - a) * wx
    bot = c + (d - c) * wx
    out = top + (bot - top) * wy
    if fill is not None:
        out = np.where(outside, fill, out)
    return out


def center_crop_box(h: int, w: int, out_h: int, out_w: int) -> tuple[int, int, int, int]:
    """Largest centred (top, left, height, width) region with the output aspect ratio."""
    target = out_w / out_h
    if w / h > target:
        cw, ch = max(1, int(round(h * target))), h
    else:
        cw, ch = w, max(1, int(round(w / target)))
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def resize_array(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Centre-crop to the output aspect, then bilinear resize (half-pixel centres)."""
    h, w = img.shape[-2:]
    top, left, ch, cw = center_crop_box(h, w, out_h, out_w)
    img = img[..., top:top + ch, left:left + cw]
    if (ch, cw) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * (ch / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (cw / out_w) - 0.5
    return _bilinear(img, ys[:, None], xs[None, :])


def resize_surface(surface: TimeSurface, out_h: int, out_w: int) -> TimeSurface:
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be >= 1")
    return TimeSurface(surface.t_ref, resize_array(surface.values, out_h, out_w))


# --- augmentation ----------------------------------------------------------

@dataclass(frozen=True)
class AugmentPolicy:
    rotation: tuple[float, float] = (-15.0, 15.0)  # degrees
    crop: tuple[float, float] = (0.8, 1.0)  # side fraction kept
    flip_prob: float = 0.5

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls((0.0, 0.0), (1.0, 1.0), 0.0)


@dataclass(frozen=True)
class Transform:
    angle: float
    crop: float
    dy: float  # crop-centre offset as a fraction of the free margin, in [-1, 1]
    dx: float
    flip: bool

    @classmethod
    def sample(cls, policy: AugmentPolicy, rng: np.random.Generator) -> "Transform":
        return cls(float(rng.uniform(*policy.rotation)), float(rng.uniform(*policy.crop)),
                   float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1)), bool(rng.random() < policy.flip_prob))

    def apply(self, stack: np.ndarray) -> np.ndarray:
        """Apply to one ``(..., H, W)`` array; every leading slice gets the same transform."""
        out = stack
        h, w = stack.shape[-2:]
        if self.angle != 0.0 or self.crop != 1.0:
            cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
            oy = self.dy * (1 - self.crop) * h / 2.0
            ox = self.dx * (1 - self.crop) * w / 2.0
            gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
            # output pixel -> source pixel: scale into the crop, rotate about the centre, then shift
            uy = (gy - cy) * self.crop
            ux = (gx - cx) * self.crop
            a = math.radians(self.angle)
            sy = math.cos(a) * uy - math.sin(a) * ux + cy + oy
            sx = math.sin(a) * uy + math.cos(a) * ux + cx + ox
            out = _bilinear(out, sy, sx, fill=0.0).astype(stack.dtype, copy=False)
        if self.flip:
            out = out[..., ::-1]
        return np.ascontiguousarray(out)


def augment(surfaces: list[TimeSurface], policy: AugmentPolicy = AugmentPolicy(), seed: int = 0) -> list[TimeSurface]:
    """One transform, sampled from ``policy`` with ``seed``, applied to every surface."""
    if not surfaces:
        return []
    tf = Transform.sample(policy, np.random.default_rng(seed))
    stack = tf.apply(np.stack([s.values for s in surfaces]))
    return [TimeSurface(s.t_ref, v) for s, v in zip(surfaces, stack)]
