"""Shared generators and independent brute-force oracles for the test suite."""

from __future__ import annotations

import math

import numpy as np
import pytest

from evdet.events import EventWindow, SensorGeometry, events_array
from evdet.network import LayerSpec, NetworkSpec
from evdet.representations import RepConfig


def random_window(rng, height=8, width=8, max_events=20, duration_us=10_000, start_us=0):
    n = int(rng.integers(0, max_events + 1))
    t = np.sort(rng.integers(start_us, start_us + duration_us, n))
    x = rng.integers(0, width, n)
    y = rng.integers(0, height, n)
    p = rng.choice([-1, 1], n)
    return EventWindow(
        start_us, duration_us, SensorGeometry(width, height), events_array(t, x, y, p)
    )


def random_net_spec(rng, cin, height, width, n_layers, max_ch=6):
    """Random conv/relu/maxpool chain with valid shapes and >= 1 conv."""
    layers = []
    shape = (cin, height, width)
    force_conv = int(rng.integers(0, n_layers))
    for li in range(n_layers):
        choices = ["conv", "relu"]
        if shape[1] >= 2 and shape[2] >= 2:
            choices.append("maxpool")
        kind = "conv" if li == force_conv else choices[int(rng.integers(0, len(choices)))]
        if kind == "conv":
            k = int(rng.choice([1, 3, 5]))
            stride = int(rng.choice([1, 2]))
            cout = int(rng.integers(1, max_ch + 1))
            layer = LayerSpec("conv", k, shape[0], cout, stride)
        elif kind == "maxpool":
            layer = LayerSpec("maxpool", 2, stride=2)
        else:
            layer = LayerSpec("relu")
        try:
            shape = layer.out_shape(shape)
        except ValueError:
            layer = LayerSpec("relu")
            shape = layer.out_shape(shape)
        layers.append(layer)
    return NetworkSpec((cin, height, width), tuple(layers))


# ---------------------------------------------------------------------------
# per-pixel brute-force representation oracles (independent of the builders)


def oracle_histogram(w: EventWindow) -> np.ndarray:
    H, W = w.geometry.height, w.geometry.width
    out = np.zeros((2, H, W))
    for rec in w.events:
        out[0 if rec["p"] == 1 else 1, rec["y"], rec["x"]] += 1.0
    return out


def oracle_last_polarity(w: EventWindow) -> np.ndarray:
    H, W = w.geometry.height, w.geometry.width
    out = np.zeros((1, H, W))
    for rec in w.events:  # later events overwrite earlier ones
        out[0, rec["y"], rec["x"]] = rec["p"]
    return out


def oracle_decay_surface(w: EventWindow, cfg: RepConfig) -> np.ndarray:
    H, W = w.geometry.height, w.geometry.width
    last: dict[tuple[int, int], tuple[int, int]] = {}
    for rec in w.events:
        last[(int(rec["y"]), int(rec["x"]))] = (int(rec["t"]), int(rec["p"]))
    out = np.zeros((1, H, W))
    for (y, x), (t, p) in last.items():
        out[0, y, x] = p * math.exp(-(w.end_us - t) / cfg.tau_decay_us)
    return out


def oracle_frequency(w: EventWindow) -> np.ndarray:
    H, W = w.geometry.height, w.geometry.width
    out = np.zeros((1, H, W))
    for rec in w.events:
        out[0, rec["y"], rec["x"]] += 1.0
    return out / (w.duration_us / 1e6)


def oracle_leaky(w: EventWindow, values: np.ndarray, last_update: np.ndarray, cfg: RepConfig):
    """Sequential per-event leak-then-increment scan; returns the frame values."""
    v = values.copy().astype(float)
    lu = last_update.copy().astype(float)
    for rec in w.events:
        y, x = int(rec["y"]), int(rec["x"])
        v[y, x] = v[y, x] * math.exp(-(int(rec["t"]) - lu[y, x]) / cfg.tau_leak_us) + int(rec["p"])
        lu[y, x] = int(rec["t"])
    out = v * np.exp(-(w.end_us - lu) / cfg.tau_leak_us)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
