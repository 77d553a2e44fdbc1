"""Event data model, stream I/O, time windowing, DVS simulation and synthetic scenes.

Events are stored in bulk as a numpy structured array (``EVENT_DTYPE``) whose
memory layout matches the 16-byte binary-evs record, so binary parsing is a
single ``np.frombuffer``. Streams are rebased so the first record sits at t=0.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Sequence

import numpy as np

EVS_MAGIC = b"EVS1"

# 16-byte record: t u64 LE, x u16 LE, y u16 LE, p i8, 3 reserved zero bytes.
EVENT_DTYPE = np.dtype(
    {
        "names": ["t", "x", "y", "p"],
        "formats": ["<u8", "<u2", "<u2", "i1"],
        "offsets": [0, 8, 10, 12],
        "itemsize": 16,
    }
)


class StreamFormatError(ValueError):
    """Raised for malformed or inconsistent event stream input."""


@dataclass(frozen=True)
class SensorGeometry:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"degenerate geometry {self.width}x{self.height}")

    @classmethod
    def parse(cls, text: str) -> "SensorGeometry":
        """Parse a 'WxH' string."""
        try:
            w, h = text.lower().split("x")
            return cls(int(w), int(h))
        except (ValueError, TypeError) as exc:
            raise ValueError(f"bad geometry {text!r}, expected WxH") from exc

    def __str__(self) -> str:
        return f"{self.width}x{self.height}"


@dataclass(frozen=True)
class Event:
    """A single sensor event: timestamp (us), pixel coordinates, polarity."""

    t: int
    x: int
    y: int
    p: int

    def __post_init__(self):
        if self.p not in (-1, 1):
            raise ValueError(f"polarity must be -1 or +1, got {self.p}")


def events_array(t, x, y, p) -> np.ndarray:
    """Pack parallel coordinate sequences into an EVENT_DTYPE array."""
    t = np.asarray(t, dtype=np.uint64)
    arr = np.zeros(len(t), dtype=EVENT_DTYPE)
    arr["t"] = t
    arr["x"] = x
    arr["y"] = y
    arr["p"] = p
    return arr


def _empty_events() -> np.ndarray:
    return np.zeros(0, dtype=EVENT_DTYPE)


def _copy_events(arr: np.ndarray) -> np.ndarray:
    """Field-wise copy into a freshly zeroed array.

    A plain ndarray.copy() leaves the padding bytes of the 16-byte layout
    uninitialized, which would make serialization nondeterministic.
    """
    out = np.zeros(len(arr), dtype=EVENT_DTYPE)
    for name in ("t", "x", "y", "p"):
        out[name] = arr[name]
    return out


def _validate_events(events: np.ndarray, geometry: SensorGeometry) -> None:
    if events.dtype != EVENT_DTYPE:
        raise StreamFormatError("events array must use EVENT_DTYPE")
    if len(events) == 0:
        return
    p = events["p"]
    bad = np.nonzero((p != 1) & (p != -1))[0]
    if bad.size:
        raise StreamFormatError(f"invalid polarity {p[bad[0]]} at record {bad[0] + 1}")
    oob = np.nonzero((events["x"] >= geometry.width) | (events["y"] >= geometry.height))[0]
    if oob.size:
        i = oob[0]
        raise StreamFormatError(
            f"out-of-bounds coordinate ({events['x'][i]},{events['y'][i]}) at record {i + 1}"
        )
    t = events["t"]
    drop = np.nonzero(t[1:] < t[:-1])[0]
    if drop.size:
        raise StreamFormatError(f"non-monotone timestamp at record {drop[0] + 2}")


@dataclass(frozen=True)
class EventStream:
    """Time-ordered event sequence with sensor geometry. Immutable by convention."""

    geometry: SensorGeometry
    events: np.ndarray = field(default_factory=_empty_events)

    def __post_init__(self):
        _validate_events(self.events, self.geometry)

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[Event]:
        for rec in self.events:
            yield Event(int(rec["t"]), int(rec["x"]), int(rec["y"]), int(rec["p"]))


@dataclass(frozen=True)
class EventWindow:
    """Half-open time slice [start_us, start_us + duration_us) of a stream."""

    start_us: int
    duration_us: int
    geometry: SensorGeometry
    events: np.ndarray = field(default_factory=_empty_events)

    def __post_init__(self):
        if self.duration_us < 1:
            raise ValueError("window duration must be >= 1 us")
        if len(self.events):
            t = self.events["t"]
            if t[0] < self.start_us or t[-1] >= self.start_us + self.duration_us:
                raise ValueError("events outside window bounds")

    @property
    def end_us(self) -> int:
        return self.start_us + self.duration_us

    def __len__(self) -> int:
        return len(self.events)


@dataclass(frozen=True)
class DvsSimConfig:
    """Log-brightness threshold model for frame-to-event conversion."""

    contrast_threshold: float = 0.2
    luminance_floor: float = 1e-3

    def __post_init__(self):
        if self.contrast_threshold <= 0:
            raise ValueError("contrast_threshold must be > 0")
        if self.luminance_floor <= 0:
            raise ValueError("luminance_floor must be > 0")


# ---------------------------------------------------------------------------
# stream I/O


def _rebase(events: np.ndarray) -> np.ndarray:
    if len(events):
        events["t"] -= events["t"][0]
    return events


def parse_stream(
    source: bytes | str,
    fmt: str,
    geometry: SensorGeometry | None = None,
    sort: bool = False,
) -> EventStream:
    """Parse a binary-evs or csv payload into an EventStream.

    Timestamps are rebased so the first record becomes t=0. Non-monotone
    input is rejected unless ``sort`` is set, in which case a stable sort
    by timestamp is applied first.
    """
    if fmt in ("evs", "binary-evs"):
        if isinstance(source, str):
            raise StreamFormatError("binary-evs payload must be bytes")
        if len(source) < 8:
            raise StreamFormatError("truncated header (need 8 bytes)")
        if source[:4] != EVS_MAGIC:
            raise StreamFormatError("bad magic, expected EVS1")
        width, height = struct.unpack_from("<HH", source, 4)
        geometry = SensorGeometry(width, height)
        body = source[8:]
        if len(body) % 16:
            raise StreamFormatError(
                f"malformed record at byte offset {8 + len(body) - len(body) % 16}"
            )
        events = _copy_events(np.frombuffer(body, dtype=EVENT_DTYPE))
    elif fmt == "csv":
        if geometry is None:
            raise StreamFormatError("csv parsing requires an explicit geometry")
        if isinstance(source, bytes):
            source = source.decode("utf-8")
        lines = source.splitlines()
        if not lines or lines[0].strip() != "t,x,y,p":
            raise StreamFormatError("missing 't,x,y,p' header")
        rows = []
        for lineno, line in enumerate(lines[1:], start=1):
            if not line.strip():
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise StreamFormatError(f"malformed record at line {lineno + 1}")
            try:
                rows.append([int(v) for v in parts])
            except ValueError as exc:
                raise StreamFormatError(f"malformed record at line {lineno + 1}") from exc
        if rows:
            mat = np.asarray(rows, dtype=np.int64)
            events = events_array(mat[:, 0], mat[:, 1], mat[:, 2], mat[:, 3])
        else:
            events = _empty_events()
    else:
        raise StreamFormatError(f"unknown stream format {fmt!r}")

    if sort and len(events):
        events = events[np.argsort(events["t"], kind="stable")]
    stream = EventStream(geometry, events)  # validates order, bounds, polarity
    return EventStream(geometry, _rebase(_copy_events(stream.events)))


def write_stream(stream: EventStream, fmt: str) -> bytes:
    """Serialize a stream to binary-evs or csv bytes."""
    if fmt in ("evs", "binary-evs"):
        header = EVS_MAGIC + struct.pack("<HH", stream.geometry.width, stream.geometry.height)
        return header + stream.events.tobytes()
    if fmt == "csv":
        lines = ["t,x,y,p"]
        for rec in stream.events:
            lines.append(f"{rec['t']},{rec['x']},{rec['y']},{rec['p']}")
        return ("\n".join(lines) + "\n").encode("utf-8")
    raise StreamFormatError(f"unknown stream format {fmt!r}")


# ---------------------------------------------------------------------------
# windowing


def slice_windows(
    stream: EventStream, duration_us: int, stride_us: int | None = None
) -> list[EventWindow]:
    """Cut the stream into windows starting at t=0, advancing by stride.

    With stride == duration the windows partition the events. The trailing
    partial window is emitted; an empty stream yields no windows.
    """
    if stride_us is None:
        stride_us = duration_us
    if duration_us < 1 or stride_us < 1:
        raise ValueError("duration and stride must be >= 1 us")
    t = stream.events["t"]
    if len(t) == 0:
        return []
    last = int(t[-1])
    starts = np.arange(0, last + 1, stride_us, dtype=np.uint64)
    # one contiguous copy: searchsorted on the strided field view would
    # otherwise re-copy the whole column once per window
    t = np.ascontiguousarray(t)
    lows = np.searchsorted(t, starts)
    highs = np.searchsorted(t, starts + np.uint64(duration_us))
    return [
        EventWindow(int(start), duration_us, stream.geometry, stream.events[lo:hi])
        for start, lo, hi in zip(starts, lows, highs)
    ]


# ---------------------------------------------------------------------------
# DVS simulation


def simulate_dvs(
    frames: Iterable[tuple[int, np.ndarray]], cfg: DvsSimConfig = DvsSimConfig()
) -> EventStream:
    """Convert timestamped grayscale frames into events.

    Per pixel a reference log level r is tracked. Between consecutive frames,
    a change d = log(L+eps) - r of magnitude >= C emits k = floor(|d|/C)
    events of polarity sign(d), timestamped at t0 + (t1-t0)*i // (k+1) for
    i = 1..k, after which r moves by k*C*sign(d).
    """
    C = cfg.contrast_threshold
    chunks: list[np.ndarray] = []
    ref = None
    t_prev = None
    shape = None
    n_frames = 0
    for t_us, lum in frames:
        t_us = int(t_us)
        lum = np.asarray(lum, dtype=np.float64)
        if lum.ndim != 2:
            raise ValueError("frames must be 2-D luminance arrays")
        if (lum < 0).any():
            raise ValueError("negative luminance")
        n_frames += 1
        logl = np.log(lum + cfg.luminance_floor)
        if ref is None:
            ref = logl
            t_prev = t_us
            shape = lum.shape
            continue
        if lum.shape != shape:
            raise ValueError("frame shape changed mid-sequence")
        if t_us <= t_prev:
            raise ValueError(f"non-increasing frame timestamp {t_us}")
        d = logl - ref
        k = np.floor(np.abs(d) / C).astype(np.int64)
        mask = k > 0
        if mask.any():
            ys, xs = np.nonzero(mask)
            kk = k[mask]
            sg = np.where(d[mask] > 0, 1, -1).astype(np.int8)
            total = int(kk.sum())
            pix = np.repeat(np.arange(len(kk)), kk)
            starts = np.cumsum(kk) - kk
            i = np.arange(total, dtype=np.int64) - starts[pix] + 1
            dt = t_us - t_prev
            ts = t_prev + (dt * i) // (kk[pix] + 1)
            ev = np.zeros(total, dtype=EVENT_DTYPE)
            ev["t"] = ts
            ev["x"] = xs[pix]
            ev["y"] = ys[pix]
            ev["p"] = sg[pix]
            chunks.append(ev[np.argsort(ev["t"], kind="stable")])
            ref[mask] += kk * C * sg
        t_prev = t_us
    if n_frames < 2:
        raise ValueError("need at least 2 frames")
    h, w = shape
    # concatenate repacks padded structured dtypes; _copy_events restores the
    # 16-byte layout with zeroed padding
    events = _copy_events(np.concatenate(chunks)) if chunks else _empty_events()
    return EventStream(SensorGeometry(w, h), events)


# ---------------------------------------------------------------------------
# synthetic labelled scenes


@dataclass(frozen=True)
class SceneConfig:
    """Moving bright rectangles on a dark background, rendered at 1 kHz."""

    n_rects: int
    geometry: SensorGeometry
    duration_us: int
    seed: int
    size_range: tuple[int, int] = (6, 20)
    speed_range: tuple[float, float] = (20.0, 120.0)
    window_us: int = 10_000
    frame_interval_us: int = 1_000
    background: float = 0.1
    foreground: float = 1.0
    dvs: DvsSimConfig = field(default_factory=DvsSimConfig)


def _reflect(pos: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Fold positions into [0, hi] by mirror reflection at both walls."""
    hi = np.maximum(hi, 1e-9)
    m = np.mod(pos, 2 * hi)
    return hi - np.abs(m - hi)


def gen_synthetic_scene(cfg: SceneConfig) -> tuple[EventStream, dict[int, list[tuple]]]:
    """Generate a labelled event scene.

    Returns the (rebased) event stream and ground truth: a mapping from
    window start (us) to a list of (x, y, w, h, class_id) pixel boxes, one
    window per ``cfg.window_us`` covering the stream. Deterministic per seed.
    """
    geo = cfg.geometry
    H, W = geo.height, geo.width
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_rects
    lo, hi = cfg.size_range
    rw = rng.integers(lo, hi + 1, n)
    rh = rng.integers(lo, hi + 1, n)
    if n and (rw.max() > W or rh.max() > H):
        raise ValueError("rectangle sizes exceed geometry")
    x0 = rng.uniform(0, W - rw, n)
    y0 = rng.uniform(0, H - rh, n)
    speed = rng.uniform(cfg.speed_range[0], cfg.speed_range[1], n)
    ang = rng.uniform(0, 2 * np.pi, n)
    vx = speed * np.cos(ang)
    vy = speed * np.sin(ang)

    def rects_at(t_us: int) -> tuple[np.ndarray, np.ndarray]:
        T = t_us * 1e-6
        xs = np.round(_reflect(x0 + vx * T, W - rw)).astype(np.int64)
        ys = np.round(_reflect(y0 + vy * T, H - rh)).astype(np.int64)
        return xs, ys

    def render() -> Iterator[tuple[int, np.ndarray]]:
        for t in range(0, cfg.duration_us + 1, cfg.frame_interval_us):
            img = np.full((H, W), cfg.background)
            xs, ys = rects_at(t)
            for j in range(n):
                img[ys[j] : ys[j] + rh[j], xs[j] : xs[j] + rw[j]] = cfg.foreground
            yield t, img

    stream = simulate_dvs(render(), cfg.dvs)
    if len(stream) == 0:
        return stream, {}
    t0 = int(stream.events["t"][0])
    rebased = _copy_events(stream.events)
    rebased["t"] -= t0
    stream = EventStream(geo, rebased)

    gt: dict[int, list[tuple]] = {}
    last = int(rebased["t"][-1])
    for i in range(last // cfg.window_us + 1):
        start = i * cfg.window_us
        xs, ys = rects_at(t0 + start)
        gt[start] = [
            (int(xs[j]), int(ys[j]), int(rw[j]), int(rh[j]), 0) for j in range(n)
        ]
    return stream, gt


def write_ground_truth_csv(gt: dict[int, list[tuple]]) -> str:
    """Serialize ground truth to the annotations CSV format."""
    lines = ["window_start_us,x,y,w,h,class_id"]
    for start in sorted(gt):
        for (x, y, w, h, cls) in gt[start]:
            lines.append(f"{start},{x},{y},{w},{h},{cls}")
    return "\n".join(lines) + "\n"
