"""Event-frame representation builders.

Each builder condenses an EventWindow into a dense multi-channel frame
"as of" the window end: polarity histogram, last-polarity map, exponentially
decaying time surface, event frequency, a stateful leaky surface, and the
fused [polarity, decay, frequency] stack.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from evdet.events import EventWindow, SensorGeometry

REPF_MAGIC = b"REPF"

NORMALIZATIONS = ("none", "maxabs", "log1p")


@dataclass(frozen=True)
class RepConfig:
    tau_decay_us: float = 10_000.0
    tau_leak_us: float = 100_000.0
    normalization: str = "none"

    def __post_init__(self):
        if self.tau_decay_us <= 0 or self.tau_leak_us <= 0:
            raise ValueError("tau constants must be > 0")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {self.normalization!r}")


@dataclass(frozen=True)
class RepFrame:
    """C x H x W frame with per-channel semantics and window provenance."""

    values: np.ndarray
    channel_labels: tuple[str, ...]
    start_us: int = 0
    duration_us: int = 0

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError("values must be C x H x W")
        if len(self.channel_labels) != self.values.shape[0]:
            raise ValueError("label count must match channel count")
        if not np.isfinite(self.values).all():
            raise ValueError("non-finite representation values")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class LeakyState:
    """Per-pixel accumulator value and time of its last decay update."""

    values: np.ndarray
    last_update_us: np.ndarray

    @classmethod
    def zeros(cls, geometry: SensorGeometry) -> "LeakyState":
        shape = (geometry.height, geometry.width)
        return cls(np.zeros(shape), np.zeros(shape, dtype=np.int64))


def _grid(w: EventWindow) -> tuple[int, int]:
    return w.geometry.height, w.geometry.width


def _last_event_indices(w: EventWindow) -> tuple[np.ndarray, np.ndarray]:
    """(flat pixel index, event index of that pixel's last event) pairs.

    Ties on equal timestamps resolve to the later stream position.
    """
    ev = w.events
    H, W = _grid(w)
    flat = ev["y"].astype(np.int64) * W + ev["x"].astype(np.int64)
    uniq, first_in_rev = np.unique(flat[::-1], return_index=True)
    return uniq, len(ev) - 1 - first_in_rev


def build_histogram(w: EventWindow) -> RepFrame:
    """Per-pixel event counts split by polarity: channel 0 = +1, channel 1 = -1."""
    H, W = _grid(w)
    ev = w.events
    vals = np.zeros((2, H, W))
    for ch, pol in ((0, 1), (1, -1)):
        sel = ev["p"] == pol
        np.add.at(vals[ch], (ev["y"][sel], ev["x"][sel]), 1.0)
    return RepFrame(vals, ("count_pos", "count_neg"), w.start_us, w.duration_us)


def build_last_polarity(w: EventWindow) -> RepFrame:
    """Polarity of the last event per pixel; 0 where no events."""
    H, W = _grid(w)
    vals = np.zeros((1, H, W))
    if len(w.events):
        pix, idx = _last_event_indices(w)
        vals[0].flat[pix] = w.events["p"][idx]
    return RepFrame(vals, ("last_polarity",), w.start_us, w.duration_us)


def build_decay_surface(w: EventWindow, cfg: RepConfig = RepConfig()) -> RepFrame:
    """Signed exponentially decaying time surface referenced to the window end."""
    H, W = _grid(w)
    vals = np.zeros((1, H, W))
    if len(w.events):
        pix, idx = _last_event_indices(w)
        ev = w.events
        age = w.end_us - ev["t"][idx].astype(np.float64)
        vals[0].flat[pix] = ev["p"][idx] * np.exp(-age / cfg.tau_decay_us)
    return RepFrame(vals, ("decay_surface",), w.start_us, w.duration_us)


def build_frequency(w: EventWindow) -> RepFrame:
    """Per-pixel event rate in events/s over the window duration."""
    H, W = _grid(w)
    ev = w.events
    counts = np.zeros((1, H, W))
    np.add.at(counts[0], (ev["y"], ev["x"]), 1.0)
    vals = counts / (w.duration_us / 1e6)
    return RepFrame(vals, ("frequency",), w.start_us, w.duration_us)


def build_leaky_surface(
    w: EventWindow, state: LeakyState, cfg: RepConfig = RepConfig()
) -> tuple[RepFrame, LeakyState]:
    """Leaky per-pixel accumulator: decay to the window end, add one signed
    unit per event (itself decayed by its age). Memory persists across windows
    through the returned state.
    """
    H, W = _grid(w)
    if state.values.shape != (H, W):
        raise ValueError("leaky state geometry mismatch")
    tau = cfg.tau_leak_us
    t_ref = w.end_us
    decayed = state.values * np.exp(-(t_ref - state.last_update_us) / tau)
    ev = w.events
    if len(ev):
        contrib = np.zeros((H, W))
        weights = ev["p"] * np.exp(-(t_ref - ev["t"].astype(np.float64)) / tau)
        np.add.at(contrib, (ev["y"], ev["x"]), weights)
        decayed = decayed + contrib
    new_state = LeakyState(decayed, np.full((H, W), t_ref, dtype=np.int64))
    frame = RepFrame(decayed[None, :, :].copy(), ("leaky_surface",), w.start_us, w.duration_us)
    return frame, new_state


def build_fused(w: EventWindow, cfg: RepConfig = RepConfig()) -> RepFrame:
    """[last_polarity, decay_surface, maxabs-normalized frequency] stack."""
    pol = build_last_polarity(w)
    dec = build_decay_surface(w, cfg)
    freq = normalize(build_frequency(w), "maxabs")
    vals = np.concatenate([pol.values, dec.values, freq.values], axis=0)
    frame = RepFrame(
        vals,
        ("last_polarity", "decay_surface", "frequency_norm"),
        w.start_us,
        w.duration_us,
    )
    return normalize(frame, cfg.normalization)


def normalize(r: RepFrame, mode: str) -> RepFrame:
    """Per-channel normalization: none, maxabs (all-zero channels untouched),
    or signed log1p."""
    if mode == "none":
        return r
    if mode == "maxabs":
        vals = r.values.copy()
        for c in range(r.channels):
            m = np.abs(vals[c]).max()
            if m > 0:
                vals[c] /= m
        return replace(r, values=vals)
    if mode == "log1p":
        return replace(r, values=np.sign(r.values) * np.log1p(np.abs(r.values)))
    raise ValueError(f"unknown normalization {mode!r}")


# ---------------------------------------------------------------------------
# serialization

REP_BUILDERS = {
    "histogram": build_histogram,
    "polarity": build_last_polarity,
    "decay": build_decay_surface,
    "frequency": build_frequency,
    "fused": build_fused,
}

REP_CHANNELS = {
    "histogram": 2,
    "polarity": 1,
    "decay": 1,
    "frequency": 1,
    "leaky": 1,
    "fused": 3,
}


def build_representation(kind: str, w: EventWindow, cfg: RepConfig = RepConfig()) -> RepFrame:
    """Dispatch to a stateless builder by kind (leaky is excluded: it needs state)."""
    if kind not in REP_BUILDERS:
        raise ValueError(f"unknown representation kind {kind!r}")
    builder = REP_BUILDERS[kind]
    if kind in ("decay", "fused"):
        return builder(w, cfg)
    return builder(w)


def write_repframe(r: RepFrame) -> bytes:
    """Portable float32 binary: REPF magic, C/H/W u16 LE, row-major data."""
    header = REPF_MAGIC + struct.pack("<HHH", r.channels, r.height, r.width)
    return header + r.values.astype("<f4").tobytes()


def read_repframe(payload: bytes) -> RepFrame:
    if payload[:4] != REPF_MAGIC:
        raise ValueError("bad magic, expected REPF")
    c, h, w = struct.unpack_from("<HHH", payload, 4)
    data = np.frombuffer(payload, dtype="<f4", offset=10)
    if data.size != c * h * w:
        raise ValueError("payload size does not match header")
    vals = data.reshape(c, h, w).astype(np.float64)
    return RepFrame(vals, tuple(f"ch{i}" for i in range(c)))


def _to_u8(channel: np.ndarray) -> np.ndarray:
    lo, hi = channel.min(), channel.max()
    if hi > lo:
        scaled = (channel - lo) / (hi - lo) * 255.0
    else:
        scaled = np.zeros_like(channel)
    return np.round(scaled).astype(np.uint8)


def write_preview(r: RepFrame) -> bytes:
    """8-bit preview: PPM for 3-channel frames, stacked PGM otherwise.

    Each channel is affinely mapped to [0, 255] independently.
    """
    if r.channels == 3:
        header = f"P6\n{r.width} {r.height}\n255\n".encode()
        rgb = np.stack([_to_u8(r.values[c]) for c in range(3)], axis=-1)
        return header + rgb.tobytes()
    # channels stacked vertically in one PGM
    header = f"P5\n{r.width} {r.height * r.channels}\n255\n".encode()
    planes = np.concatenate([_to_u8(r.values[c]) for c in range(r.channels)], axis=0)
    return header + planes.tobytes()
