"""YOLO-style grid head decoding, non-maximum suppression, and the
window-to-detections pipeline in dense / sparse / async modes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from evdet.engine import (
    AsyncState,
    FlopReport,
    async_init,
    async_update,
    dense_forward,
    events_to_deltas,
    sparse_forward,
    sparse_output_to_dense,
    to_sparse,
)
from evdet.events import EventWindow
from evdet.network import DEFAULT_ANCHORS, Network
from evdet.representations import LeakyState, RepConfig, RepFrame, build_leaky_surface, build_representation

MODES = ("dense", "sparse", "async")


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in normalized image fractions, center + size."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError("box size must be positive")

    @property
    def corners(self) -> tuple[float, float, float, float]:
        """(x0, y0, x1, y1) in normalized fractions."""
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    def to_pixels(self, width: int, height: int) -> tuple[float, float, float, float]:
        """(x0, y0, x1, y1) in pixel units, top-left origin."""
        x0, y0, x1, y1 = self.corners
        return (x0 * width, y0 * height, x1 * width, y1 * height)

    @classmethod
    def from_pixel_rect(cls, x: float, y: float, w: float, h: float, width: int, height: int) -> "BBox":
        """From a pixel-unit (x, y, w, h) top-left rectangle."""
        return cls((x + w / 2) / width, (y + h / 2) / height, w / width, h / height)


@dataclass(frozen=True)
class Detection:
    box: BBox
    class_id: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score must be in [0, 1]")
        if self.class_id < 0:
            raise ValueError("class_id must be >= 0")


@dataclass(frozen=True)
class YoloHeadSpec:
    grid_h: int
    grid_w: int
    anchors: tuple[tuple[float, float], ...] = DEFAULT_ANCHORS
    num_classes: int = 1

    def __post_init__(self):
        if self.grid_h < 1 or self.grid_w < 1:
            raise ValueError("grid must be >= 1x1")
        if not self.anchors or any(a <= 0 or b <= 0 for a, b in self.anchors):
            raise ValueError("anchors must be positive")
        if self.num_classes < 1:
            raise ValueError("need at least one class")

    @property
    def num_anchors(self) -> int:
        return len(self.anchors)

    @property
    def raw_channels(self) -> int:
        return self.num_anchors * (5 + self.num_classes)

    @classmethod
    def for_network(cls, net: Network, anchors=DEFAULT_ANCHORS, num_classes: int = 1) -> "YoloHeadSpec":
        c, h, w = net.spec.output_shape
        head = cls(h, w, tuple(anchors), num_classes)
        if head.raw_channels != c:
            raise ValueError(f"network emits {c} channels, head expects {head.raw_channels}")
        return head


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def decode_yolo(raw: np.ndarray, head: YoloHeadSpec, conf_threshold: float) -> list[Detection]:
    """Decode a (B*(5+nc)) x Sy x Sx logit tensor.

    Per cell and anchor: objectness sigma(to); center ((j+sigma(tx))/Sx,
    (i+sigma(ty))/Sy); size anchor * exp(tw, th) clamped to (0, 1];
    score = objectness * sigmoid of the best class logit. Detections are
    emitted in (cell, anchor) scan order.
    """
    B, nc = head.num_anchors, head.num_classes
    if raw.shape != (head.raw_channels, head.grid_h, head.grid_w):
        raise ValueError(f"raw shape {raw.shape} does not match head")
    r = raw.reshape(B, 5 + nc, head.grid_h, head.grid_w).astype(np.float64)
    sx = _sigmoid(r[:, 0])
    sy = _sigmoid(r[:, 1])
    obj = _sigmoid(r[:, 4])
    cls_prob = _sigmoid(r[:, 5:])  # B, nc, Sy, Sx
    class_id = cls_prob.argmax(axis=1)
    score = obj * np.take_along_axis(cls_prob, class_id[:, None], axis=1)[:, 0]
    jj = np.arange(head.grid_w)
    ii = np.arange(head.grid_h)
    cx = (jj[None, None, :] + sx) / head.grid_w
    cy = (ii[None, :, None] + sy) / head.grid_h
    anchors = np.asarray(head.anchors)
    bw = np.clip(anchors[:, 0, None, None] * np.exp(r[:, 2]), None, 1.0)
    bh = np.clip(anchors[:, 1, None, None] * np.exp(r[:, 3]), None, 1.0)

    dets = []
    for i in range(head.grid_h):
        for j in range(head.grid_w):
            for b in range(B):
                s = float(score[b, i, j])
                if s > conf_threshold:
                    dets.append(
                        Detection(
                            BBox(float(cx[b, i, j]), float(cy[b, i, j]), float(bw[b, i, j]), float(bh[b, i, j])),
                            int(class_id[b, i, j]),
                            s,
                        )
                    )
    return dets


def box_iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two normalized boxes."""
    ax0, ay0, ax1, ay1 = a.corners
    bx0, by0, bx1, by1 = b.corners
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy per-class suppression, score descending, ties by input order."""
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: list[Detection] = []
    for i in order:
        d = dets[i]
        if all(k.class_id != d.class_id or box_iou(k.box, d.box) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


@dataclass
class PipelineResult:
    detections: list[Detection]
    flops: FlopReport
    state: AsyncState | None = None


def run_pipeline(
    window: EventWindow,
    net: Network,
    head: YoloHeadSpec,
    rep_kind: str = "histogram",
    rep_cfg: RepConfig = RepConfig(),
    mode: str = "dense",
    conf_threshold: float = 0.5,
    nms_iou: float = 0.5,
    sparse_threshold: float = 0.0,
    state: AsyncState | None = None,
    frame: RepFrame | None = None,
) -> PipelineResult:
    """Representation build -> forward -> decode -> NMS for one window.

    In async mode the state is initialized on first use and updated with the
    per-site difference against the cached input on subsequent windows; the
    (mutated) state is returned for threading across windows. A prebuilt
    ``frame`` may be supplied for stateful representations such as leaky.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if frame is None:
        frame = build_representation(rep_kind, window, rep_cfg)
    x = frame.values.astype(np.float32)
    if tuple(x.shape) != tuple(net.spec.input_shape):
        raise ValueError(f"representation shape {x.shape} does not match network input")

    if mode == "dense":
        out, report = dense_forward(net, x)
    elif mode == "sparse":
        sp_out, report = sparse_forward(net, to_sparse(x, sparse_threshold))
        out = sparse_output_to_dense(net, sp_out)
    else:
        if state is None:
            state = async_init(net, x)
            report = state.total
        else:
            sites, values = events_to_deltas(state.acts[0], x)
            _, report = async_update(state, sites, values)
        out = state.output

    dets = nms(decode_yolo(out.astype(np.float64), head, conf_threshold), nms_iou)
    return PipelineResult(dets, report, state)


# ---------------------------------------------------------------------------
# detections CSV


def detections_to_csv(per_window: dict[int, list[Detection]]) -> str:
    lines = ["window_start_us,class_id,score,cx,cy,w,h"]
    for start in sorted(per_window):
        for d in per_window[start]:
            lines.append(
                f"{start},{d.class_id},{d.score:.6f},{d.box.cx:.6f},{d.box.cy:.6f},{d.box.w:.6f},{d.box.h:.6f}"
            )
    return "\n".join(lines) + "\n"


def detections_from_csv(text: str) -> dict[int, list[Detection]]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "window_start_us,class_id,score,cx,cy,w,h":
        raise ValueError("missing detections CSV header")
    out: dict[int, list[Detection]] = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        start, cls, score, cx, cy, w, h = line.split(",")
        out.setdefault(int(start), []).append(
            Detection(BBox(float(cx), float(cy), float(w), float(h)), int(cls), float(score))
        )
    return out
