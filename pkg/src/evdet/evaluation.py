"""Detection quality metrics: greedy matching, COCO-style 101-point AP,
mAP@0.5 and mAP@.5:.95, plus ground-truth CSV loading."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from evdet.detector import BBox, Detection, box_iou
from evdet.events import SensorGeometry

IOU_LADDER = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))

# GroundTruth: window_start_us -> list of (BBox, class_id)
GroundTruth = dict[int, list[tuple[BBox, int]]]


@dataclass(frozen=True)
class EvalResult:
    ap: dict[int, dict[float, float]]  # class -> iou threshold -> AP
    map50: float
    map5095: float
    tp: int
    fp: int
    fn: int

    def to_csv(self) -> str:
        lines = ["class_id,ap50,ap5095,tp,fp,fn"]
        for cls in sorted(self.ap):
            ap50 = self.ap[cls][0.5]
            ap5095 = float(np.mean([self.ap[cls][t] for t in IOU_LADDER]))
            lines.append(f"{cls},{ap50:.6f},{ap5095:.6f},,,")
        lines.append(f"summary,{self.map50:.6f},{self.map5095:.6f},{self.tp},{self.fp},{self.fn}")
        return "\n".join(lines) + "\n"


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 for disjoint boxes."""
    return box_iou(a, b)


def match_detections(
    preds: list[Detection], gts: list[tuple[BBox, int]], iou_thresh: float
) -> tuple[list[bool], int]:
    """Greedy matching within one window.

    Detections are taken in descending score (ties by input order); each
    claims the highest-IoU unmatched same-class ground truth with
    IoU >= threshold. Returns TP flags aligned to the input order and the
    count of unmatched ground truths (FN).
    """
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    matched = [False] * len(gts)
    labels = [False] * len(preds)
    for i in order:
        d = preds[i]
        best, best_iou = -1, -1.0
        for j, (gbox, gcls) in enumerate(gts):
            if matched[j] or gcls != d.class_id:
                continue
            v = box_iou(d.box, gbox)
            if v >= iou_thresh and v > best_iou:
                best, best_iou = j, v
        if best >= 0:
            matched[best] = True
            labels[i] = True
    fn = matched.count(False)
    return labels, fn


def average_precision(records: list[tuple[float, bool]], n_gt: int) -> float:
    """COCO-style 101-point interpolated AP from (score, is_tp) records."""
    if n_gt == 0 or not records:
        return 0.0
    order = sorted(range(len(records)), key=lambda i: (-records[i][0], i))
    tp = np.cumsum([1.0 if records[i][1] else 0.0 for i in order])
    fp = np.cumsum([0.0 if records[i][1] else 1.0 for i in order])
    recall = tp / n_gt
    precision = tp / (tp + fp)
    # max precision to the right of each point
    p_interp = np.maximum.accumulate(precision[::-1])[::-1]
    grid = np.linspace(0, 1, 101)
    idx = np.searchsorted(recall, grid, side="left")
    ap = np.where(idx < len(recall), p_interp[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(ap.mean())


def _class_records(
    preds: GroundTruth | dict[int, list[Detection]],
    gts: GroundTruth,
    cls: int,
    iou_thresh: float,
) -> tuple[list[tuple[float, bool]], int, int]:
    """(score, tp) records across windows for one class, plus (n_gt, fn)."""
    records: list[tuple[float, bool]] = []
    n_gt = 0
    fn_total = 0
    windows = set(preds) | set(gts)
    for wstart in windows:
        p = [d for d in preds.get(wstart, []) if d.class_id == cls]
        g = [entry for entry in gts.get(wstart, []) if entry[1] == cls]
        n_gt += len(g)
        labels, fn = match_detections(p, g, iou_thresh)
        fn_total += fn
        records.extend((d.score, tp) for d, tp in zip(p, labels))
    return records, n_gt, fn_total


def map_metrics(
    preds: dict[int, list[Detection]],
    gts: GroundTruth,
    iou_thresholds: tuple[float, ...] = IOU_LADDER,
) -> EvalResult:
    """Per-class AP over the IoU ladder; mAP means over ground-truth classes.

    TP/FP/FN counts are reported at IoU 0.5.
    """
    classes = sorted({cls for entries in gts.values() for (_, cls) in entries})
    ap: dict[int, dict[float, float]] = {}
    for cls in classes:
        ap[cls] = {}
        for thr in iou_thresholds:
            records, n_gt, _ = _class_records(preds, gts, cls, thr)
            ap[cls][thr] = average_precision(records, n_gt)
    if classes:
        map50 = float(np.mean([ap[c][0.5] for c in classes]))
        map5095 = float(np.mean([np.mean([ap[c][t] for t in iou_thresholds]) for c in classes]))
    else:
        map50 = map5095 = 0.0
    tp = fp = fn = 0
    for cls in classes:
        records, _, f = _class_records(preds, gts, cls, 0.5)
        tp += sum(1 for _, ok in records if ok)
        fp += sum(1 for _, ok in records if not ok)
        fn += f
    return EvalResult(ap, map50, map5095, tp, fp, fn)


def pr_curve(
    preds: dict[int, list[Detection]], gts: GroundTruth, cls: int, iou_thresh: float
) -> tuple[np.ndarray, np.ndarray]:
    """(recall, precision) arrays over the globally score-sorted detections."""
    records, n_gt, _ = _class_records(preds, gts, cls, iou_thresh)
    if n_gt == 0 or not records:
        return np.zeros(0), np.zeros(0)
    order = sorted(range(len(records)), key=lambda i: (-records[i][0], i))
    tp = np.cumsum([1.0 if records[i][1] else 0.0 for i in order])
    fp = np.cumsum([0.0 if records[i][1] else 1.0 for i in order])
    return tp / n_gt, tp / (tp + fp)


def load_ground_truth(text: str, geometry: SensorGeometry) -> GroundTruth:
    """Parse the annotations CSV (pixel units, top-left origin) into
    normalized boxes keyed by window start."""
    lines = text.splitlines()
    if not lines or lines[0].strip() != "window_start_us,x,y,w,h,class_id":
        raise ValueError("missing ground-truth CSV header")
    gt: GroundTruth = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            start, x, y, w, h, cls = (int(v) for v in line.split(","))
        except ValueError as exc:
            raise ValueError(f"malformed ground-truth row at line {lineno}") from exc
        box = BBox.from_pixel_rect(x, y, w, h, geometry.width, geometry.height)
        gt.setdefault(start, []).append((box, cls))
    return gt
