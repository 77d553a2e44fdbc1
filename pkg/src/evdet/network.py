"""Network architecture description, presets, weight init and serialization.

A NetworkSpec is an ordered list of conv / maxpool / relu layers with a fixed
input geometry. Convs are same-padded (pad = k // 2); maxpools are unpadded
with floor output sizing. A Network binds a spec to concrete float32 weights
and caches the zero-input response of every layer, which the sparse engine
uses as the implicit value of inactive sites.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

WGT_MAGIC = b"WGT1"

VGG16_PLAN = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]

DEFAULT_ANCHORS = ((0.05, 0.15), (0.1, 0.3), (0.2, 0.5))


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # 'conv' | 'maxpool' | 'relu'
    k: int = 1
    cin: int = 0
    cout: int = 0
    stride: int = 1

    def __post_init__(self):
        if self.kind not in ("conv", "maxpool", "relu"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind != "relu" and (self.k < 1 or self.stride < 1):
            raise ValueError("k and stride must be >= 1")
        if self.kind == "conv" and (self.cin < 1 or self.cout < 1):
            raise ValueError("conv needs cin and cout >= 1")

    @property
    def pad(self) -> int:
        return self.k // 2 if self.kind == "conv" else 0

    def out_shape(self, shape: tuple[int, int, int]) -> tuple[int, int, int]:
        c, h, w = shape
        if self.kind == "relu":
            return shape
        if self.kind == "conv":
            if c != self.cin:
                raise ValueError(f"conv expects {self.cin} channels, got {c}")
            c = self.cout
        k, s, p = self.k, self.stride, self.pad
        ho = (h + 2 * p - k) // s + 1
        wo = (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"layer {self} collapses {h}x{w} input")
        return c, ho, wo


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, int, int]  # C, H, W
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        self.shape_chain()  # validates

    def shape_chain(self) -> list[tuple[int, int, int]]:
        """Activation shapes from input through every layer."""
        shapes = [tuple(self.input_shape)]
        for layer in self.layers:
            shapes.append(layer.out_shape(shapes[-1]))
        return shapes

    @property
    def output_shape(self) -> tuple[int, int, int]:
        return self.shape_chain()[-1]

    def to_json(self) -> str:
        layers = []
        for l in self.layers:
            if l.kind == "conv":
                layers.append({"kind": "conv", "k": l.k, "cin": l.cin, "cout": l.cout, "stride": l.stride})
            elif l.kind == "maxpool":
                layers.append({"kind": "maxpool", "k": l.k, "stride": l.stride})
            else:
                layers.append({"kind": "relu"})
        return json.dumps({"input": list(self.input_shape), "layers": layers}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        doc = json.loads(text)
        layers = []
        for entry in doc["layers"]:
            kind = entry["kind"]
            if kind == "conv":
                layers.append(LayerSpec("conv", entry["k"], entry["cin"], entry["cout"], entry.get("stride", 1)))
            elif kind == "maxpool":
                layers.append(LayerSpec("maxpool", entry["k"], stride=entry.get("stride", entry["k"])))
            elif kind == "relu":
                layers.append(LayerSpec("relu"))
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
        return cls(tuple(doc["input"]), tuple(layers))


def vgg16_yolo_spec(
    in_channels: int = 2,
    height: int = 144,
    width: int = 256,
    num_anchors: int = 3,
    num_classes: int = 1,
    extended: bool = False,
) -> NetworkSpec:
    """VGG-16 feature extractor with a 1x1 conv YOLO head.

    The extended variant prepends two 3x3 conv layers (32 channels) and a
    max-pooling layer before the VGG stack.
    """
    layers: list[LayerSpec] = []
    cin = in_channels
    if extended:
        for cout in (32, 32):
            layers.append(LayerSpec("conv", 3, cin, cout))
            layers.append(LayerSpec("relu"))
            cin = cout
        layers.append(LayerSpec("maxpool", 2, stride=2))
    for item in VGG16_PLAN:
        if item == "M":
            layers.append(LayerSpec("maxpool", 2, stride=2))
        else:
            layers.append(LayerSpec("conv", 3, cin, int(item)))
            layers.append(LayerSpec("relu"))
            cin = int(item)
    head_cout = num_anchors * (5 + num_classes)
    layers.append(LayerSpec("conv", 1, cin, head_cout))
    return NetworkSpec((in_channels, height, width), tuple(layers))


PRESETS = ("vgg16-yolo", "vgg16-yolo-ext")


def preset_spec(name: str, **kwargs) -> NetworkSpec:
    if name == "vgg16-yolo":
        return vgg16_yolo_spec(**kwargs)
    if name == "vgg16-yolo-ext":
        return vgg16_yolo_spec(extended=True, **kwargs)
    raise ValueError(f"unknown preset {name!r}")


class Network:
    """A NetworkSpec bound to float32 weights, with a cached zero-input response."""

    def __init__(self, spec: NetworkSpec, weights: list[tuple[np.ndarray, np.ndarray] | None]):
        if len(weights) != len(spec.layers):
            raise ValueError("one weight entry per layer required")
        for layer, entry in zip(spec.layers, weights):
            if layer.kind == "conv":
                if entry is None:
                    raise ValueError("conv layer missing weights")
                w, b = entry
                if w.shape != (layer.cout, layer.cin, layer.k, layer.k) or b.shape != (layer.cout,):
                    raise ValueError(f"weight shape mismatch for {layer}")
            elif entry is not None:
                raise ValueError(f"{layer.kind} layer cannot carry weights")
        self.spec = spec
        self.weights = [
            (entry[0].astype(np.float32), entry[1].astype(np.float32)) if entry is not None else None
            for entry in weights
        ]
        self._zero_response: list[np.ndarray] | None = None

    @classmethod
    def random(cls, spec: NetworkSpec, seed: int) -> "Network":
        """Uniform init in [-s, s] with s = sqrt(1 / (k^2 * cin)), for weights and biases."""
        rng = np.random.default_rng(seed)
        weights = []
        for layer in spec.layers:
            if layer.kind == "conv":
                s = np.sqrt(1.0 / (layer.k * layer.k * layer.cin))
                w = rng.uniform(-s, s, (layer.cout, layer.cin, layer.k, layer.k)).astype(np.float32)
                b = rng.uniform(-s, s, layer.cout).astype(np.float32)
                weights.append((w, b))
            else:
                weights.append(None)
        return cls(spec, weights)

    def zero_response(self) -> list[np.ndarray]:
        """Per-layer activations for an all-zero input (index 0 = the input itself).

        This is the value every inactive site implicitly holds in sparse and
        asynchronous execution; it is non-trivial whenever biases are nonzero.
        """
        if self._zero_response is None:
            from evdet.engine import dense_forward_layers

            zero = np.zeros(self.spec.input_shape, dtype=np.float32)
            self._zero_response = dense_forward_layers(self, zero)
        return self._zero_response


def write_weights(net: Network) -> bytes:
    """WGT1 container: per conv layer, index u32 LE, value count u64 LE,
    float32 LE weights then biases."""
    out = [WGT_MAGIC]
    for i, entry in enumerate(net.weights):
        if entry is None:
            continue
        w, b = entry
        count = w.size + b.size
        out.append(struct.pack("<IQ", i, count))
        out.append(w.astype("<f4").tobytes())
        out.append(b.astype("<f4").tobytes())
    return b"".join(out)


def read_weights(spec: NetworkSpec, payload: bytes) -> Network:
    if payload[:4] != WGT_MAGIC:
        raise ValueError("bad magic, expected WGT1")
    pos = 4
    table: dict[int, np.ndarray] = {}
    while pos < len(payload):
        try:
            idx, count = struct.unpack_from("<IQ", payload, pos)
        except struct.error as exc:
            raise ValueError(f"truncated weights record at byte {pos}") from exc
        pos += 12
        vals = np.frombuffer(payload, dtype="<f4", count=count, offset=pos)
        pos += 4 * count
        table[idx] = vals
    weights: list[tuple[np.ndarray, np.ndarray] | None] = []
    for i, layer in enumerate(spec.layers):
        if layer.kind != "conv":
            weights.append(None)
            continue
        if i not in table:
            raise ValueError(f"missing weights for conv layer {i}")
        vals = table[i]
        n_w = layer.cout * layer.cin * layer.k * layer.k
        if vals.size != n_w + layer.cout:
            raise ValueError(f"weight count mismatch for layer {i}")
        w = vals[:n_w].reshape(layer.cout, layer.cin, layer.k, layer.k)
        b = vals[n_w:]
        weights.append((w.copy(), b.copy()))
    return Network(spec, weights)
