import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evdet.events import (
    DvsSimConfig,
    EventStream,
    SceneConfig,
    SensorGeometry,
    StreamFormatError,
    events_array,
    gen_synthetic_scene,
    parse_stream,
    simulate_dvs,
    slice_windows,
    write_ground_truth_csv,
    write_stream,
)

GEO16 = SensorGeometry(16, 16)


def make_stream(t, x, y, p, geo=GEO16):
    return EventStream(geo, events_array(t, x, y, p))


class TestParse:
    def test_empty_evs_payload(self):
        payload = b"EVS1" + (16).to_bytes(2, "little") + (16).to_bytes(2, "little")
        s = parse_stream(payload, "evs")
        assert len(s) == 0
        assert s.geometry == GEO16

    def test_empty_csv(self):
        s = parse_stream("t,x,y,p\n", "csv", GEO16)
        assert len(s) == 0

    def test_csv_two_events(self):
        s = parse_stream("t,x,y,p\n100,5,7,1\n250,5,7,-1\n", "csv", GEO16)
        assert len(s) == 2
        # epoch is rebased to the first record
        assert list(s.events["t"]) == [0, 150]
        assert list(s.events["p"]) == [1, -1]
        assert list(s.events["x"]) == [5, 5]

    def test_non_monotone_rejected(self):
        with pytest.raises(StreamFormatError, match="non-monotone timestamp at record 2"):
            parse_stream("t,x,y,p\n200,1,1,1\n100,2,2,1\n", "csv", GEO16)

    def test_sort_option(self):
        s = parse_stream("t,x,y,p\n200,1,1,1\n100,2,2,-1\n", "csv", GEO16, sort=True)
        assert list(s.events["t"]) == [0, 100]
        assert list(s.events["x"]) == [2, 1]

    def test_out_of_bounds(self):
        with pytest.raises(StreamFormatError, match="out-of-bounds"):
            parse_stream("t,x,y,p\n100,16,7,1\n", "csv", GEO16)

    def test_bad_polarity(self):
        with pytest.raises(StreamFormatError, match="polarity"):
            parse_stream("t,x,y,p\n100,5,7,2\n", "csv", GEO16)

    def test_malformed_line_reported(self):
        with pytest.raises(StreamFormatError, match="line 3"):
            parse_stream("t,x,y,p\n100,5,7,1\n100,zz,7,1\n", "csv", GEO16)

    def test_bad_magic(self):
        with pytest.raises(StreamFormatError, match="magic"):
            parse_stream(b"NOPE" + bytes(12), "evs")

    def test_truncated_record_offset(self):
        payload = b"EVS1" + (4).to_bytes(2, "little") + (4).to_bytes(2, "little") + bytes(7)
        with pytest.raises(StreamFormatError, match="byte offset"):
            parse_stream(payload, "evs")

    def test_csv_requires_geometry(self):
        with pytest.raises(StreamFormatError, match="geometry"):
            parse_stream("t,x,y,p\n", "csv")


class TestRoundTrip:
    @pytest.mark.parametrize("fmt", ["evs", "csv"])
    def test_round_trip(self, rng, fmt):
        n = 200
        t = np.sort(rng.integers(0, 100_000, n))
        t[0] = 0
        s = make_stream(t, rng.integers(0, 16, n), rng.integers(0, 16, n), rng.choice([-1, 1], n))
        payload = write_stream(s, fmt)
        s2 = parse_stream(payload, fmt, GEO16 if fmt == "csv" else None)
        assert np.array_equal(s.events, s2.events)
        assert s2.geometry == s.geometry

    def test_evs_reserved_bytes_zero(self):
        s = make_stream([0], [1], [2], [1])
        payload = write_stream(s, "evs")
        assert payload[8 + 13 : 8 + 16] == bytes(3)


class TestSliceWindows:
    def test_half_open_boundary(self):
        s = make_stream([0, 9_999, 10_000], [0, 1, 2], [0, 1, 2], [1, 1, 1])
        ws = slice_windows(s, 10_000)
        assert [len(w) for w in ws] == [2, 1]
        assert ws[1].start_us == 10_000

    def test_empty_stream(self):
        assert slice_windows(EventStream(GEO16), 10_000) == []

    def test_partition_counts(self, rng):
        n = 1_000
        t = np.sort(rng.integers(0, 50_000, n))
        t[0] = 0
        t[-1] = 49_999
        s = make_stream(t, rng.integers(0, 16, n), rng.integers(0, 16, n), rng.choice([-1, 1], n))
        ws = slice_windows(s, 10_000)
        assert len(ws) == 5
        assert sum(len(w) for w in ws) == n
        # brute-force assignment oracle
        for w in ws:
            expect = ((t >= w.start_us) & (t < w.end_us)).sum()
            assert len(w) == expect

    @settings(max_examples=50, deadline=None)
    @given(
        ts=st.lists(st.integers(0, 200_000), min_size=1, max_size=80),
        duration=st.integers(1, 40_000),
    )
    def test_partition_property(self, ts, duration):
        t = np.sort(np.asarray(ts))
        t = t - t[0]
        n = len(t)
        s = make_stream(t, np.zeros(n, int), np.zeros(n, int), np.ones(n, int))
        ws = slice_windows(s, duration)
        merged = np.concatenate([w.events["t"] for w in ws]) if ws else np.zeros(0)
        assert np.array_equal(merged, t)


class TestSimulateDvs:
    def test_constant_video(self):
        frames = [(i * 1000, np.ones((4, 4))) for i in range(5)]
        assert len(simulate_dvs(frames)) == 0

    def _step_frames(self, delta_log, base=1.0, eps=1e-3):
        lum0 = np.full((3, 3), base)
        lum1 = lum0.copy()
        lum1[1, 2] = np.exp(np.log(base + eps) + delta_log) - eps
        return [(0, lum0), (1000, lum1)]

    def test_positive_step_two_events(self):
        s = simulate_dvs(self._step_frames(+0.45), DvsSimConfig(0.2))
        assert len(s) == 2
        assert all(s.events["p"] == 1)
        assert all(s.events["x"] == 2) and all(s.events["y"] == 1)
        assert all(s.events["t"] < 1000)

    def test_negative_step_reference_update(self):
        # -0.45 with C=0.2 emits 2 negative events and moves the reference by -0.4,
        # so a further -0.16 step crosses the threshold again (residual 0.21)
        frames = self._step_frames(-0.45)
        lum2 = np.full((3, 3), 1.0)
        lum2[1, 2] = np.exp(np.log(1.0 + 1e-3) - 0.61) - 1e-3
        frames.append((2000, lum2))
        s = simulate_dvs(frames, DvsSimConfig(0.2))
        assert len(s) == 3
        assert all(s.events["p"] == -1)

    def test_signed_count_tracks_log_change(self, rng):
        C = 0.2
        frames = []
        lum = rng.uniform(0.2, 2.0, (5, 5))
        for i in range(10):
            frames.append((i * 1000, lum.copy()))
            lum = lum * rng.uniform(0.6, 1.6, (5, 5))
        s = simulate_dvs(frames, DvsSimConfig(C))
        net_signed = np.zeros((5, 5))
        np.add.at(net_signed, (s.events["y"], s.events["x"]), s.events["p"])
        total_change = np.log(frames[-1][1] + 1e-3) - np.log(frames[0][1] + 1e-3)
        assert np.all(np.abs(net_signed * C - total_change) < C)

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError, match="at least 2"):
            simulate_dvs([(0, np.ones((2, 2)))])
        with pytest.raises(ValueError, match="negative luminance"):
            simulate_dvs([(0, np.ones((2, 2))), (1, -np.ones((2, 2)))])
        with pytest.raises(ValueError, match="non-increasing"):
            simulate_dvs([(0, np.ones((2, 2))), (0, np.ones((2, 2)))])


class TestSyntheticScene:
    def test_zero_rects(self):
        cfg = SceneConfig(0, SensorGeometry(32, 32), 50_000, seed=1)
        stream, gt = gen_synthetic_scene(cfg)
        assert len(stream) == 0
        assert gt == {}

    def test_static_rect_invisible(self):
        cfg = SceneConfig(1, SensorGeometry(32, 32), 50_000, seed=3, speed_range=(0.0, 0.0))
        stream, gt = gen_synthetic_scene(cfg)
        assert len(stream) == 0

    def test_deterministic(self):
        cfg = SceneConfig(2, SensorGeometry(48, 32), 80_000, seed=11)
        s1, g1 = gen_synthetic_scene(cfg)
        s2, g2 = gen_synthetic_scene(cfg)
        assert np.array_equal(s1.events, s2.events)
        assert g1 == g2
        assert write_stream(s1, "evs") == write_stream(s2, "evs")

    def test_gt_covers_windows_and_csv_shape(self):
        cfg = SceneConfig(2, SensorGeometry(48, 32), 80_000, seed=11)
        stream, gt = gen_synthetic_scene(cfg)
        assert len(stream) > 0
        last = int(stream.events["t"][-1])
        assert sorted(gt) == [i * 10_000 for i in range(last // 10_000 + 1)]
        text = write_ground_truth_csv(gt)
        lines = text.strip().splitlines()
        assert lines[0] == "window_start_us,x,y,w,h,class_id"
        assert len(lines) == 1 + 2 * len(gt)
