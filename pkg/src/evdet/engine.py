"""Convolutional forward execution in three modes with exact FLOP accounting.

Modes:
  * dense:  reference im2col execution of the whole grid.
  * sparse: regular (dilating) sparse convolution; only output sites whose
              receptive field intersects an active input site are computed.
  * async:  incremental; a cached activation stack is patched site-by-site,
              recomputing only what a delta can reach.

Bias handling: inactive sites implicitly hold the network's zero-input
response (cached per layer on the Network), not literal zero, so sparse
results agree with the dense oracle even with nonzero biases. Sparse conv
therefore convolves input *deltas* against that background and adds the
background back at the end.

Counting conventions: one MAC = 2 FLOPs, one pooling comparison = 1 FLOP,
one relu = 1 FLOP per element.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from evdet.network import LayerSpec, Network


# ---------------------------------------------------------------------------
# FLOP accounting


@dataclass(frozen=True)
class LayerFlops:
    index: int
    kind: str
    dense_flops: int
    executed_flops: int

    @property
    def ratio(self) -> float:
        return self.executed_flops / self.dense_flops if self.dense_flops else 0.0


@dataclass(frozen=True)
class FlopReport:
    layers: tuple[LayerFlops, ...]

    @property
    def dense_total(self) -> int:
        return sum(l.dense_flops for l in self.layers)

    @property
    def executed_total(self) -> int:
        return sum(l.executed_flops for l in self.layers)

    @property
    def ratio(self) -> float:
        return self.executed_total / self.dense_total if self.dense_total else 0.0

    def to_csv(self) -> str:
        lines = ["layer,kind,dense_flops,executed_flops,ratio"]
        for l in self.layers:
            lines.append(f"{l.index},{l.kind},{l.dense_flops},{l.executed_flops},{l.ratio:.6f}")
        lines.append(f"total,,{self.dense_total},{self.executed_total},{self.ratio:.6f}")
        return "\n".join(lines) + "\n"


def layer_dense_flops(layer: LayerSpec, out_shape: tuple[int, int, int]) -> int:
    c, h, w = (int(v) for v in out_shape)
    if layer.kind == "conv":
        return 2 * layer.k * layer.k * layer.cin * layer.cout * h * w
    if layer.kind == "maxpool":
        return layer.k * layer.k * c * h * w
    return c * h * w  # relu


def network_dense_flops(net_spec) -> FlopReport:
    """Analytic dense cost of every layer, no execution."""
    shapes = net_spec.shape_chain()
    layers = tuple(
        LayerFlops(i, l.kind, layer_dense_flops(l, shapes[i + 1]), layer_dense_flops(l, shapes[i + 1]))
        for i, l in enumerate(net_spec.layers)
    )
    return FlopReport(layers)


def flop_summary(reports) -> FlopReport:
    """Layer-aligned sum of reports sharing one network structure."""
    reports = list(reports)
    if not reports:
        return FlopReport(())
    kinds = [(l.index, l.kind) for l in reports[0].layers]
    for r in reports[1:]:
        if [(l.index, l.kind) for l in r.layers] != kinds:
            raise ValueError("reports come from different network structures")
    layers = tuple(
        LayerFlops(
            idx,
            kind,
            sum(r.layers[j].dense_flops for r in reports),
            sum(r.layers[j].executed_flops for r in reports),
        )
        for j, (idx, kind) in enumerate(kinds)
    )
    return FlopReport(layers)


# ---------------------------------------------------------------------------
# dense execution


def _conv_dense(x: np.ndarray, layer: LayerSpec, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    k, s, p = layer.k, layer.stride, layer.pad
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s]
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, layer.cin * k * k)
    out = cols @ w.reshape(layer.cout, -1).T + b
    return np.ascontiguousarray(out.T.reshape(layer.cout, ho, wo))


def _pool_dense(x: np.ndarray, layer: LayerSpec) -> np.ndarray:
    k, s = layer.k, layer.stride
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
    return win.max(axis=(3, 4))


def dense_forward_layers(net: Network, x: np.ndarray) -> list[np.ndarray]:
    """All activations, input included (index 0)."""
    if tuple(x.shape) != tuple(net.spec.input_shape):
        raise ValueError(f"input shape {x.shape} does not match spec {net.spec.input_shape}")
    acts = [np.asarray(x, dtype=np.float32)]
    for layer, weights in zip(net.spec.layers, net.weights):
        cur = acts[-1]
        if layer.kind == "conv":
            cur = _conv_dense(cur, layer, *weights)
        elif layer.kind == "maxpool":
            cur = _pool_dense(cur, layer)
        else:
            cur = np.maximum(cur, 0)
        acts.append(cur)
    return acts


def dense_forward(net: Network, x: np.ndarray) -> tuple[np.ndarray, FlopReport]:
    """Reference forward pass; executed cost equals dense cost."""
    acts = dense_forward_layers(net, x)
    return acts[-1], network_dense_flops(net.spec)


# ---------------------------------------------------------------------------
# sparse execution


@dataclass(frozen=True)
class SparseTensor:
    """Active-site activation storage.

    ``sites`` is an (N, 2) array of (y, x) rows, ``values`` the matching
    (N, C) vectors. For network inputs the implicit off-site value is exact
    zero; for sparse_forward outputs it is the layer's bias background.
    """

    channels: int
    height: int
    width: int
    sites: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.sites.shape != (len(self.sites), 2) or self.values.shape != (len(self.sites), self.channels):
            raise ValueError("inconsistent sites/values shapes")
        if len(self.sites):
            ys, xs = self.sites[:, 0], self.sites[:, 1]
            if ys.min() < 0 or xs.min() < 0 or ys.max() >= self.height or xs.max() >= self.width:
                raise ValueError("site out of bounds")

    @classmethod
    def from_dense(cls, x: np.ndarray, threshold: float = 0.0) -> "SparseTensor":
        if threshold < 0:
            raise ValueError("threshold must be >= 0")
        c, h, w = x.shape
        mask = (np.abs(x) > threshold).any(axis=0)
        ys, xs = np.nonzero(mask)
        sites = np.stack([ys, xs], axis=1).astype(np.int64)
        values = np.ascontiguousarray(x[:, ys, xs].T, dtype=np.float32)
        return cls(c, h, w, sites, values)

    def to_dense(self, background: np.ndarray | None = None) -> np.ndarray:
        out = (
            np.zeros((self.channels, self.height, self.width), dtype=np.float32)
            if background is None
            else background.astype(np.float32).copy()
        )
        if len(self.sites):
            out[:, self.sites[:, 0], self.sites[:, 1]] = self.values.T
        return out


def to_sparse(x: np.ndarray, threshold: float = 0.0) -> SparseTensor:
    return SparseTensor.from_dense(x, threshold)


def _dilate_mask(mask: np.ndarray, k: int, s: int, p: int) -> np.ndarray:
    """Output sites whose k x k receptive field (stride s, pad p) touches the mask."""
    mp = np.pad(mask, p)
    win = sliding_window_view(mp, (k, k))[::s, ::s]
    return win.any(axis=(2, 3))


def _gather_conv(source: np.ndarray, layer: LayerSpec, oy: np.ndarray, ox: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Convolution evaluated only at the listed output sites. Returns (N, cout), no bias."""
    k, s, p = layer.k, layer.stride, layer.pad
    sp = np.pad(source, ((0, 0), (p, p), (p, p)))
    win = sliding_window_view(sp, (k, k), axis=(1, 2))
    pat = win[:, oy * s, ox * s]  # C, N, k, k
    cols = pat.transpose(1, 0, 2, 3).reshape(len(oy), layer.cin * k * k)
    return cols @ w.reshape(layer.cout, -1).T


def _gather_pool(source: np.ndarray, layer: LayerSpec, oy: np.ndarray, ox: np.ndarray) -> np.ndarray:
    k, s = layer.k, layer.stride
    win = sliding_window_view(source, (k, k), axis=(1, 2))
    pat = win[:, oy * s, ox * s]
    return pat.reshape(source.shape[0], len(oy), k * k).max(axis=2)


def sparse_forward(net: Network, sp: SparseTensor) -> tuple[SparseTensor, FlopReport]:
    """Active-sites-only forward pass; exactly matches the dense oracle at
    computed sites and holds the bias background elsewhere."""
    cin, H, W = net.spec.input_shape
    if (sp.channels, sp.height, sp.width) != (cin, H, W):
        raise ValueError("sparse input geometry does not match network")
    bg = net.zero_response()
    shapes = net.spec.shape_chain()

    mask = np.zeros((H, W), dtype=bool)
    delta = np.zeros((cin, H, W), dtype=np.float32)
    if len(sp.sites):
        ys, xs = sp.sites[:, 0], sp.sites[:, 1]
        mask[ys, xs] = True
        delta[:, ys, xs] = sp.values.T  # input background is exact zero

    entries = []
    for i, layer in enumerate(net.spec.layers):
        out_shape = shapes[i + 1]
        dflops = layer_dense_flops(layer, out_shape)
        if layer.kind == "relu":
            oy, ox = np.nonzero(mask)
            executed = int(out_shape[0]) * len(oy)
            new_delta = np.zeros(out_shape, dtype=np.float32)
            if len(oy):
                full = bg[i][:, oy, ox] + delta[:, oy, ox]
                new_delta[:, oy, ox] = np.maximum(full, 0) - bg[i + 1][:, oy, ox]
        elif layer.kind == "conv":
            out_mask = _dilate_mask(mask, layer.k, layer.stride, layer.pad)
            oy, ox = np.nonzero(out_mask)
            executed = 2 * layer.k * layer.k * layer.cin * layer.cout * len(oy)
            new_delta = np.zeros(out_shape, dtype=np.float32)
            if len(oy):
                vals = _gather_conv(delta, layer, oy, ox, net.weights[i][0])
                new_delta[:, oy, ox] = vals.T
            mask = out_mask
        else:  # maxpool
            out_mask = _dilate_mask(mask, layer.k, layer.stride, 0)
            oy, ox = np.nonzero(out_mask)
            executed = layer.k * layer.k * int(out_shape[0]) * len(oy)
            new_delta = np.zeros(out_shape, dtype=np.float32)
            if len(oy):
                vals = _gather_pool(bg[i] + delta, layer, oy, ox)
                new_delta[:, oy, ox] = vals - bg[i + 1][:, oy, ox]
            mask = out_mask
        delta = new_delta
        entries.append(LayerFlops(i, layer.kind, dflops, executed))

    oy, ox = np.nonzero(mask)
    sites = np.stack([oy, ox], axis=1).astype(np.int64)
    c_out = shapes[-1][0]
    values = np.ascontiguousarray((bg[-1][:, oy, ox] + delta[:, oy, ox]).T.reshape(len(oy), c_out))
    out = SparseTensor(c_out, shapes[-1][1], shapes[-1][2], sites, values)
    return out, FlopReport(tuple(entries))


def sparse_output_to_dense(net: Network, sp: SparseTensor) -> np.ndarray:
    """Densify a sparse_forward output, filling non-computed sites with the
    network's zero-input response."""
    return sp.to_dense(net.zero_response()[-1])


# ---------------------------------------------------------------------------
# asynchronous incremental execution


@dataclass
class AsyncState:
    """Single-owner cached activation stack for incremental inference."""

    net: Network
    acts: list[np.ndarray]
    total: FlopReport

    @property
    def output(self) -> np.ndarray:
        return self.acts[-1]


def async_init(net: Network, x: np.ndarray) -> AsyncState:
    """Full dense first pass; later updates touch only what changes."""
    acts = dense_forward_layers(net, x)
    return AsyncState(net, acts, network_dense_flops(net.spec))


def async_update(
    state: AsyncState, sites: np.ndarray, values: np.ndarray
) -> tuple[np.ndarray, FlopReport]:
    """Apply per-site input deltas and propagate the dirty region.

    ``sites`` is (N, 2) of (y, x), ``values`` the (N, C) replacement vectors.
    Returns the recomputed output sites and this update's FlopReport; the
    cumulative report on the state is extended as well.
    """
    net = state.net
    sites = np.asarray(sites, dtype=np.int64).reshape(-1, 2)
    cin, H, W = net.spec.input_shape
    shapes = net.spec.shape_chain()
    if len(sites):
        ys, xs = sites[:, 0], sites[:, 1]
        if ys.min() < 0 or xs.min() < 0 or ys.max() >= H or xs.max() >= W:
            raise ValueError("delta site out of bounds")
        state.acts[0][:, ys, xs] = np.asarray(values, dtype=np.float32).T

    mask = np.zeros((H, W), dtype=bool)
    if len(sites):
        mask[sites[:, 0], sites[:, 1]] = True

    entries = []
    for i, layer in enumerate(net.spec.layers):
        out_shape = shapes[i + 1]
        dflops = layer_dense_flops(layer, out_shape)
        if layer.kind == "relu":
            oy, ox = np.nonzero(mask)
            executed = int(out_shape[0]) * len(oy)
            if len(oy):
                state.acts[i + 1][:, oy, ox] = np.maximum(state.acts[i][:, oy, ox], 0)
        elif layer.kind == "conv":
            mask = _dilate_mask(mask, layer.k, layer.stride, layer.pad)
            oy, ox = np.nonzero(mask)
            executed = 2 * layer.k * layer.k * layer.cin * layer.cout * len(oy)
            if len(oy):
                w, b = net.weights[i]
                vals = _gather_conv(state.acts[i], layer, oy, ox, w) + b
                state.acts[i + 1][:, oy, ox] = vals.T
        else:  # maxpool
            mask = _dilate_mask(mask, layer.k, layer.stride, 0)
            oy, ox = np.nonzero(mask)
            executed = layer.k * layer.k * int(out_shape[0]) * len(oy)
            if len(oy):
                state.acts[i + 1][:, oy, ox] = _gather_pool(state.acts[i], layer, oy, ox)
        entries.append(LayerFlops(i, layer.kind, dflops, executed))

    report = FlopReport(tuple(entries))
    state.total = flop_summary([state.total, report])
    oy, ox = np.nonzero(mask)
    return np.stack([oy, ox], axis=1).astype(np.int64), report


def events_to_deltas(prev, nxt) -> tuple[np.ndarray, np.ndarray]:
    """Sites (and new channel vectors) where two representation frames differ.

    Accepts RepFrame objects or raw C x H x W arrays.
    """
    a = getattr(prev, "values", prev)
    b = getattr(nxt, "values", nxt)
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.shape != b.shape:
        raise ValueError("frame shapes differ")
    ys, xs = np.nonzero((a != b).any(axis=0))
    sites = np.stack([ys, xs], axis=1).astype(np.int64)
    values = np.ascontiguousarray(b[:, ys, xs].T)
    return sites, values
