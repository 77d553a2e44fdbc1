import numpy as np
import pytest

from evdet.detector import (
    BBox,
    Detection,
    YoloHeadSpec,
    box_iou,
    decode_yolo,
    detections_from_csv,
    detections_to_csv,
    nms,
    run_pipeline,
)
from evdet.engine import network_dense_flops
from evdet.events import EventStream, EventWindow, SensorGeometry, events_array, slice_windows
from evdet.network import LayerSpec, Network, NetworkSpec

GEO = SensorGeometry(32, 16)


def make_window(rng, n, start=0, duration=10_000, geo=GEO):
    t = np.sort(rng.integers(start, start + duration, n))
    arr = events_array(
        t, rng.integers(0, geo.width, n), rng.integers(0, geo.height, n), rng.choice([-1, 1], n)
    )
    return EventWindow(start, duration, geo, arr)


def tiny_net(seed=0):
    spec = NetworkSpec(
        (2, 16, 32),
        (
            LayerSpec("conv", 3, 2, 8),
            LayerSpec("relu"),
            LayerSpec("maxpool", 2, stride=2),
            LayerSpec("conv", 1, 8, 18),
        ),
    )
    return Network.random(spec, seed)


class TestBBox:
    def test_corners(self):
        assert BBox(0.5, 0.5, 0.2, 0.4).corners == pytest.approx((0.4, 0.3, 0.6, 0.7))

    def test_pixel_round_trip(self):
        b = BBox.from_pixel_rect(4, 2, 8, 6, 32, 16)
        assert b.to_pixels(32, 16) == pytest.approx((4, 2, 12, 8))

    def test_invalid_size(self):
        with pytest.raises(ValueError, match="positive"):
            BBox(0.5, 0.5, 0.0, 0.1)


class TestHeadSpec:
    def test_for_network(self):
        head = YoloHeadSpec.for_network(tiny_net())
        assert (head.grid_h, head.grid_w) == (8, 16)
        assert head.num_anchors == 3 and head.raw_channels == 18

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channels"):
            YoloHeadSpec.for_network(tiny_net(), anchors=((0.1, 0.1),))

    def test_bad_anchor(self):
        with pytest.raises(ValueError, match="anchors"):
            YoloHeadSpec(4, 4, ((0.1, -0.1),))


class TestDecodeYolo:
    def test_zero_logits_below_threshold(self):
        head = YoloHeadSpec(4, 4, ((0.2, 0.2),))
        raw = np.zeros((6, 4, 4))
        # objectness and class prob both sigmoid(0) = 0.5, so score is 0.25
        assert decode_yolo(raw, head, 0.6) == []
        dets = decode_yolo(raw, head, 0.2)
        assert len(dets) == 16
        assert dets[0].score == pytest.approx(0.25)

    def test_saturated_corner_cell(self):
        head = YoloHeadSpec(4, 4, ((0.25, 0.25),))
        raw = np.full((6, 4, 4), -50.0)
        raw[0, 0, 0] = raw[1, 0, 0] = raw[4, 0, 0] = raw[5, 0, 0] = 50.0
        raw[2, 0, 0] = raw[3, 0, 0] = 0.0
        (d,) = decode_yolo(raw, head, 0.9)
        assert d.box.cx == pytest.approx(0.25, abs=1e-6)
        assert d.box.cy == pytest.approx(0.25, abs=1e-6)
        assert (d.box.w, d.box.h) == pytest.approx((0.25, 0.25))
        assert d.score > 0.999

    def test_threshold_one_always_empty(self, rng):
        head = YoloHeadSpec(3, 5, ((0.1, 0.2), (0.3, 0.3)))
        raw = rng.normal(scale=10, size=(12, 3, 5))
        assert decode_yolo(raw, head, 1.0) == []

    def test_centers_inside_cell_sizes_positive(self, rng):
        head = YoloHeadSpec(4, 6, ((0.1, 0.2), (0.3, 0.3)))
        raw = rng.normal(scale=5, size=(12, 4, 6))
        for d in decode_yolo(raw, head, 0.0):
            j = int(d.box.cx * head.grid_w)
            i = int(d.box.cy * head.grid_h)
            assert 0 <= j < head.grid_w and 0 <= i < head.grid_h
            assert d.box.w > 0 and d.box.h > 0 and d.box.w <= 1 and d.box.h <= 1

    def test_monotone_in_threshold(self, rng):
        head = YoloHeadSpec(4, 4, ((0.2, 0.2),))
        raw = rng.normal(scale=3, size=(6, 4, 4))
        counts = [len(decode_yolo(raw, head, t)) for t in (0.0, 0.25, 0.5, 0.75, 0.95)]
        assert counts == sorted(counts, reverse=True)

    def test_shape_mismatch(self):
        head = YoloHeadSpec(4, 4, ((0.2, 0.2),))
        with pytest.raises(ValueError, match="shape"):
            decode_yolo(np.zeros((6, 4, 5)), head, 0.5)


class TestNms:
    def test_empty(self):
        assert nms([], 0.5) == []

    def test_identical_boxes_keep_higher_score(self):
        b = BBox(0.5, 0.5, 0.2, 0.2)
        kept = nms([Detection(b, 0, 0.8), Detection(b, 0, 0.9)], 0.5)
        assert [d.score for d in kept] == [0.9]

    def test_disjoint_boxes_all_kept(self):
        dets = [
            Detection(BBox(0.2, 0.2, 0.1, 0.1), 0, 0.7),
            Detection(BBox(0.8, 0.8, 0.1, 0.1), 0, 0.6),
        ]
        assert nms(dets, 0.5) == sorted(dets, key=lambda d: -d.score)

    def test_different_classes_not_suppressed(self):
        b = BBox(0.5, 0.5, 0.2, 0.2)
        kept = nms([Detection(b, 0, 0.9), Detection(b, 1, 0.8)], 0.5)
        assert len(kept) == 2

    def test_subset_sorted_and_pairwise_below_threshold(self, rng):
        dets = [
            Detection(
                BBox(rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.3), rng.uniform(0.05, 0.3)),
                int(rng.integers(0, 2)),
                float(rng.random()),
            )
            for _ in range(40)
        ]
        kept = nms(dets, 0.4)
        assert all(d in dets for d in kept)
        assert [d.score for d in kept] == sorted((d.score for d in kept), reverse=True)
        for i, a in enumerate(kept):
            for b in kept[i + 1 :]:
                if a.class_id == b.class_id:
                    assert box_iou(a.box, b.box) <= 0.4


class TestRunPipeline:
    def test_empty_window_zero_bias_no_detections(self):
        net = tiny_net()
        for entry in net.weights:
            if entry is not None:
                entry[1][:] = 0
        head = YoloHeadSpec.for_network(net)
        window = EventWindow(0, 10_000, GEO)
        res = run_pipeline(window, net, head, mode="sparse", conf_threshold=0.5)
        assert res.detections == []
        assert res.flops.executed_total == 0

    def test_dense_sparse_equivalence(self, rng):
        net = tiny_net(seed=2)
        head = YoloHeadSpec.for_network(net)
        window = make_window(rng, 150)
        rd = run_pipeline(window, net, head, mode="dense", conf_threshold=0.1)
        rs = run_pipeline(window, net, head, mode="sparse", conf_threshold=0.1)
        assert len(rd.detections) == len(rs.detections)
        for a, b in zip(rd.detections, rs.detections):
            assert a.class_id == b.class_id
            assert a.score == pytest.approx(b.score, abs=1e-4)
            assert a.box.cx == pytest.approx(b.box.cx, abs=1e-4)
        assert rs.flops.executed_total <= rd.flops.dense_total

    def test_async_matches_dense_over_sequence(self, rng):
        net = tiny_net(seed=5)
        head = YoloHeadSpec.for_network(net)
        n = 400
        t = np.sort(rng.integers(0, 40_000, n))
        t[0] = 0
        stream = EventStream(
            GEO,
            events_array(t, rng.integers(0, 32, n), rng.integers(0, 16, n), rng.choice([-1, 1], n)),
        )
        state = None
        for window in slice_windows(stream, 10_000):
            ra = run_pipeline(window, net, head, mode="async", conf_threshold=0.1, state=state)
            state = ra.state
            rd = run_pipeline(window, net, head, mode="dense", conf_threshold=0.1)
            assert len(ra.detections) == len(rd.detections)
            for a, b in zip(ra.detections, rd.detections):
                assert a.score == pytest.approx(b.score, abs=1e-3)

    def test_async_total_at_most_dense(self, rng):
        net = tiny_net(seed=5)
        head = YoloHeadSpec.for_network(net)
        windows = [make_window(rng, 20, start=i * 10_000) for i in range(4)]
        state = None
        executed = 0
        for window in windows:
            res = run_pipeline(window, net, head, mode="async", state=state)
            state = res.state
            executed += res.flops.executed_total
        dense_total = len(windows) * network_dense_flops(net.spec).dense_total
        assert executed <= dense_total

    def test_unknown_mode(self, rng):
        net = tiny_net()
        head = YoloHeadSpec.for_network(net)
        with pytest.raises(ValueError, match="mode"):
            run_pipeline(make_window(rng, 5), net, head, mode="lazy")

    def test_shape_mismatch(self, rng):
        net = tiny_net()
        head = YoloHeadSpec.for_network(net)
        bad = make_window(rng, 5, geo=SensorGeometry(8, 8))
        with pytest.raises(ValueError, match="shape"):
            run_pipeline(bad, net, head)


class TestDetectionsCsv:
    def test_round_trip(self, rng):
        per_window = {
            0: [Detection(BBox(0.25, 0.5, 0.1, 0.2), 0, 0.875)],
            10_000: [
                Detection(BBox(0.5, 0.5, 0.3, 0.3), 1, 0.5),
                Detection(BBox(0.75, 0.25, 0.1, 0.1), 0, 0.25),
            ],
        }
        back = detections_from_csv(detections_to_csv(per_window))
        assert sorted(back) == [0, 10_000]
        assert len(back[10_000]) == 2
        d = back[0][0]
        assert (d.class_id, d.score) == (0, 0.875)
        assert (d.box.cx, d.box.w) == (0.25, 0.1)

    def test_header_and_precision(self):
        text = detections_to_csv({5: [Detection(BBox(1 / 3, 0.5, 0.1, 0.1), 0, 0.9)]})
        lines = text.strip().splitlines()
        assert lines[0] == "window_start_us,class_id,score,cx,cy,w,h"
        assert lines[1] == "5,0,0.900000,0.333333,0.500000,0.100000,0.100000"

    def test_missing_header(self):
        with pytest.raises(ValueError, match="header"):
            detections_from_csv("nope\n")
