"""evdet command line: gen, simulate, rep, infer, eval, flops, bench.

Stages communicate through files (binary-evs streams, REPF frames, CSV
reports) so any stage's output can be cross-checked externally. Every
subcommand is deterministic given its inputs and seeds; on failure the
partial outputs of the failing run are removed and a single-line diagnostic
goes to stderr.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from evdet import engine, evaluation, report
from evdet.detector import YoloHeadSpec, detections_to_csv, run_pipeline
from evdet.engine import dense_forward, flop_summary, network_dense_flops, sparse_forward, to_sparse
from evdet.events import (
    DvsSimConfig,
    EventStream,
    SceneConfig,
    SensorGeometry,
    StreamFormatError,
    gen_synthetic_scene,
    parse_stream,
    simulate_dvs,
    slice_windows,
    write_ground_truth_csv,
    write_stream,
)
from evdet.network import PRESETS, Network, NetworkSpec, preset_spec, read_weights
from evdet.representations import (
    REP_CHANNELS,
    LeakyState,
    RepConfig,
    build_leaky_surface,
    build_representation,
    write_preview,
    write_repframe,
)


class CliError(Exception):
    pass


class _Outputs:
    """Tracks files written by one run so they can be removed on failure."""

    def __init__(self):
        self.paths: list[Path] = []

    def write_bytes(self, path: Path, payload: bytes) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
        self.paths.append(path)

    def write_text(self, path: Path, payload: str) -> None:
        self.write_bytes(path, payload.encode("utf-8"))

    def track(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        self.paths.append(path)
        return path

    def cleanup(self) -> None:
        for p in self.paths:
            try:
                p.unlink(missing_ok=True)
            except OSError:
                pass


# ---------------------------------------------------------------------------
# shared helpers


def _load_stream(args) -> EventStream:
    path = Path(args.input)
    if not path.exists():
        raise CliError(f"input file not found: {path}")
    if path.suffix == ".csv":
        if args.geometry is None:
            raise CliError("csv input requires --geometry")
        return parse_stream(path.read_text(), "csv", SensorGeometry.parse(args.geometry), sort=args.sort)
    return parse_stream(path.read_bytes(), "evs", sort=args.sort)


def _rep_config(args) -> RepConfig:
    return RepConfig(
        tau_decay_us=args.tau_decay_us,
        tau_leak_us=args.tau_leak_us,
        normalization=args.normalization,
    )


def _build_network(args, in_channels: int, geometry: SensorGeometry) -> Network:
    if args.net in PRESETS:
        spec = preset_spec(args.net, in_channels=in_channels, height=geometry.height, width=geometry.width)
    else:
        path = Path(args.net)
        if not path.exists():
            raise CliError(f"network spec not found: {args.net} (not a preset, not a file)")
        spec = NetworkSpec.from_json(path.read_text())
        if spec.input_shape != (in_channels, geometry.height, geometry.width):
            raise CliError(
                f"network input {spec.input_shape} does not match "
                f"({in_channels},{geometry.height},{geometry.width})"
            )
    if getattr(args, "weights", None):
        wpath = Path(args.weights)
        if not wpath.exists():
            raise CliError(f"weights file not found: {wpath}")
        return read_weights(spec, wpath.read_bytes())
    return Network.random(spec, args.seed)


def _iter_rep_frames(stream: EventStream, kind: str, cfg: RepConfig, window_us: int, stride_us: int):
    """Yield (window, frame) pairs; the leaky builder threads state in order."""
    windows = slice_windows(stream, window_us, stride_us)
    if kind == "leaky":
        state = LeakyState.zeros(stream.geometry)
        for w in windows:
            frame, state = build_leaky_surface(w, state, cfg)
            yield w, frame
    else:
        for w in windows:
            yield w, build_representation(kind, w, cfg)


def _read_pgm(payload: bytes) -> np.ndarray:
    """Minimal binary PGM (P5) reader, values normalized to [0, 1]."""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(payload) and payload[pos : pos + 1].isspace():
            pos += 1
        if payload[pos : pos + 1] == b"#":
            while pos < len(payload) and payload[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(payload) and not payload[pos : pos + 1].isspace():
            pos += 1
        tokens.append(payload[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P5":
        raise CliError("only binary PGM (P5) frames are supported")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = np.dtype(">u2") if maxval > 255 else np.uint8
    data = np.frombuffer(payload, dtype=dtype, count=width * height, offset=pos)
    return data.reshape(height, width).astype(np.float64) / maxval


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args, out: _Outputs) -> int:
    geo = SensorGeometry.parse(args.geometry)
    cfg = SceneConfig(
        n_rects=args.rects,
        geometry=geo,
        duration_us=int(args.duration_ms * 1000),
        seed=args.seed,
        size_range=tuple(args.size_range),
        speed_range=tuple(args.speed_range),
        window_us=int(args.window_ms * 1000),
        dvs=DvsSimConfig(contrast_threshold=args.contrast),
    )
    stream, gt = gen_synthetic_scene(cfg)
    out_dir = Path(args.out)
    out.write_bytes(out_dir / "events.evs", write_stream(stream, "evs"))
    out.write_text(out_dir / "gt.csv", write_ground_truth_csv(gt))
    print(f"gen: {len(stream)} events, {len(gt)} windows -> {out_dir}")
    return 0


def cmd_simulate(args, out: _Outputs) -> int:
    frames_dir = Path(args.frames)
    index = frames_dir / "timestamps.csv"
    if not index.exists():
        raise CliError(f"missing {index}")
    lines = index.read_text().splitlines()
    if not lines or lines[0].strip() != "t_us,filename":
        raise CliError("timestamps.csv must start with 't_us,filename'")

    def frame_iter():
        for line in lines[1:]:
            if not line.strip():
                continue
            t_us, name = line.split(",")
            yield int(t_us), _read_pgm((frames_dir / name.strip()).read_bytes())

    cfg = DvsSimConfig(contrast_threshold=args.contrast, luminance_floor=args.floor)
    stream = simulate_dvs(frame_iter(), cfg)
    out_dir = Path(args.out)
    out.write_bytes(out_dir / "events.evs", write_stream(stream, "evs"))
    print(f"simulate: {len(stream)} events -> {out_dir / 'events.evs'}")
    return 0


def cmd_rep(args, out: _Outputs) -> int:
    stream = _load_stream(args)
    cfg = _rep_config(args)
    out_dir = Path(args.out)
    count = 0
    for w, frame in _iter_rep_frames(
        stream, args.kind, cfg, int(args.window_ms * 1000), int(args.stride_ms * 1000)
    ):
        base = out_dir / f"win_{w.start_us:010d}"
        out.write_bytes(base.with_suffix(".repf"), write_repframe(frame))
        if args.preview:
            ext = ".ppm" if frame.channels == 3 else ".pgm"
            out.write_bytes(base.with_suffix(ext), write_preview(frame))
        count += 1
    print(f"rep: {count} {args.kind} frames -> {out_dir}")
    return 0


def cmd_infer(args, out: _Outputs) -> int:
    stream = _load_stream(args)
    cfg = _rep_config(args)
    net = _build_network(args, REP_CHANNELS[args.rep], stream.geometry)
    head = YoloHeadSpec.for_network(net, num_classes=args.classes)
    per_window: dict[int, list] = {}
    reports = []
    state = None
    for w, frame in _iter_rep_frames(
        stream, args.rep, cfg, int(args.window_ms * 1000), int(args.stride_ms * 1000)
    ):
        result = run_pipeline(
            w,
            net,
            head,
            rep_kind=args.rep,
            rep_cfg=cfg,
            mode=args.mode,
            conf_threshold=args.conf,
            nms_iou=args.nms_iou,
            sparse_threshold=args.sparse_threshold,
            state=state,
            frame=frame,
        )
        state = result.state
        per_window[w.start_us] = result.detections
        reports.append(result.flops)
    out_dir = Path(args.out)
    out.write_text(out_dir / "detections.csv", detections_to_csv(per_window))
    total = flop_summary(reports)
    out.write_text(out_dir / "flops.csv", total.to_csv())
    n_det = sum(len(v) for v in per_window.values())
    print(
        f"infer[{args.mode}]: {len(per_window)} windows, {n_det} detections, "
        f"flops ratio {total.ratio:.4f} -> {out_dir}"
    )
    return 0


def cmd_eval(args, out: _Outputs) -> int:
    dets_path = Path(args.dets)
    gt_path = Path(args.gt)
    if not dets_path.exists():
        raise CliError(f"detections file not found: {dets_path}")
    if not gt_path.exists():
        raise CliError(f"ground-truth file not found: {gt_path}")
    from evdet.detector import detections_from_csv

    geo = SensorGeometry.parse(args.geometry)
    preds = detections_from_csv(dets_path.read_text())
    gts = evaluation.load_ground_truth(gt_path.read_text(), geo)
    result = evaluation.map_metrics(preds, gts)
    out_dir = Path(args.out)
    out.write_text(out_dir / "eval.csv", result.to_csv())
    curves = {}
    for cls in sorted(result.ap):
        for thr in evaluation.IOU_LADDER:
            recall, precision = evaluation.pr_curve(preds, gts, cls, thr)
            lines = ["recall,precision"] + [
                f"{r:.6f},{p:.6f}" for r, p in zip(recall, precision)
            ]
            out.write_text(out_dir / f"pr_cls{cls}_iou{int(round(thr * 100))}.csv", "\n".join(lines) + "\n")
        curves[cls] = evaluation.pr_curve(preds, gts, cls, 0.5)
    report.save_pr_curves(out.track(out_dir / "pr_curves.png"), curves, 0.5)
    print(f"eval: mAP@0.5 {result.map50:.4f}, mAP@.5:.95 {result.map5095:.4f} -> {out_dir}")
    return 0


def cmd_flops(args, out: _Outputs) -> int:
    geo = SensorGeometry.parse(args.geometry)
    channels = REP_CHANNELS[args.rep] if args.input else args.in_channels
    if args.net in PRESETS:
        spec = preset_spec(args.net, in_channels=channels, height=geo.height, width=geo.width)
    else:
        path = Path(args.net)
        if not path.exists():
            raise CliError(f"network spec not found: {args.net}")
        spec = NetworkSpec.from_json(path.read_text())
    out_dir = Path(args.out)
    if args.input:
        net = Network.random(spec, args.seed)
        stream = _load_stream(args)
        cfg = _rep_config(args)
        reports = []
        for w, frame in _iter_rep_frames(
            stream, args.rep, cfg, int(args.window_ms * 1000), int(args.stride_ms * 1000)
        ):
            _, rep_ = sparse_forward(net, to_sparse(frame.values.astype(np.float32), args.sparse_threshold))
            reports.append(rep_)
        total = flop_summary(reports) if reports else network_dense_flops(spec)
        label = f"measured sparse over {len(reports)} windows"
    else:
        total = network_dense_flops(spec)
        label = "analytic dense"
    out.write_text(out_dir / "flops.csv", total.to_csv())
    report.save_flops_figure(out.track(out_dir / "flops.png"), total)
    print(
        f"flops[{label}]: dense {total.dense_total:,} executed {total.executed_total:,} "
        f"ratio {total.ratio:.6f} -> {out_dir}"
    )
    return 0


def cmd_bench(args, out: _Outputs) -> int:
    path = Path(args.input)
    if not path.exists():
        raise CliError(f"input file not found: {path}")
    payload = path.read_bytes()
    rows = []

    def timed(stage, count, fn):
        t0 = time.perf_counter()
        result = fn()
        dt = time.perf_counter() - t0
        rate = count / dt if dt > 0 else 0.0
        rows.append(f"{stage},{count},{dt:.6f},{rate:.1f}")
        return result

    stream = timed("parse", max(1, (len(payload) - 8) // 16), lambda: parse_stream(payload, "evs"))
    window_us = int(args.window_ms * 1000)
    windows = timed("slice", len(stream), lambda: slice_windows(stream, window_us))
    cfg = RepConfig()
    for kind in ("histogram", "polarity", "decay", "frequency", "fused"):
        timed(f"rep_{kind}", len(windows), lambda k=kind: [build_representation(k, w, cfg) for w in windows])
    timed("rep_leaky", len(windows), lambda: list(_iter_rep_frames(stream, "leaky", cfg, window_us, window_us)))

    net = _build_network(args, REP_CHANNELS[args.rep], stream.geometry)
    net.zero_response()  # warm the background cache outside the timers
    frames = [
        frame.values.astype(np.float32)
        for _, frame in _iter_rep_frames(stream, args.rep, cfg, window_us, window_us)
    ]
    sample = frames[: args.bench_windows] if args.bench_windows else frames
    if sample:
        timed("forward_dense", len(sample), lambda: [dense_forward(net, x) for x in sample])
        timed("forward_sparse", len(sample), lambda: [sparse_forward(net, to_sparse(x)) for x in sample])

        def run_async():
            state = engine.async_init(net, sample[0])
            for x in sample[1:]:
                sites, values = engine.events_to_deltas(state.acts[0], x)
                engine.async_update(state, sites, values)

        timed("forward_async", len(sample), run_async)
    out_dir = Path(args.out)
    out.write_text(out_dir / "bench.csv", "stage,events_or_windows,seconds,rate\n" + "\n".join(rows) + "\n")
    print(f"bench: {len(rows)} stages -> {out_dir / 'bench.csv'}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _float_pair(text: str) -> tuple[float, float]:
    a, b = text.split(",")
    return float(a), float(b)


def _int_pair(text: str) -> tuple[int, int]:
    a, b = text.split(",")
    return int(a), int(b)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evdet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, seed=False, windowing=False, rep=False, net=False, inp=False):
        p.add_argument("--out", required=True, help="output directory")
        if seed:
            p.add_argument("--seed", type=int, required=True, help="RNG seed (mandatory, no silent entropy)")
        if windowing:
            p.add_argument("--window-ms", type=float, default=10.0)
            p.add_argument("--stride-ms", type=float, default=None)
        if rep:
            p.add_argument("--tau-decay-us", type=float, default=10_000.0)
            p.add_argument("--tau-leak-us", type=float, default=100_000.0)
            p.add_argument("--normalization", choices=("none", "maxabs", "log1p"), default="none")
        if net:
            p.add_argument("--net", default="vgg16-yolo", help="preset name or NetworkSpec JSON path")
            p.add_argument("--weights", default=None, help="WGT1 weights file (default: random from --seed)")
        if inp:
            p.add_argument("--in", dest="input", required=True, help="event stream (.evs or .csv)")
            p.add_argument("--geometry", default=None, help="WxH, required for csv input")
            p.add_argument("--sort", action="store_true", help="stable-sort non-monotone csv input")

    p = sub.add_parser("gen", help="generate a synthetic labelled scene")
    common(p, seed=True, windowing=True)
    p.add_argument("--rects", type=int, required=True)
    p.add_argument("--duration-ms", type=float, default=500.0)
    p.add_argument("--geometry", default="256x144")
    p.add_argument("--size-range", type=_int_pair, default=(6, 20))
    p.add_argument("--speed-range", type=_float_pair, default=(20.0, 120.0))
    p.add_argument("--contrast", type=float, default=0.2)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("simulate", help="convert PGM frames + timestamps.csv to events")
    common(p)
    p.add_argument("--frames", required=True, help="directory with timestamps.csv and PGM frames")
    p.add_argument("--contrast", type=float, default=0.2)
    p.add_argument("--floor", type=float, default=1e-3)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("rep", help="build per-window representations")
    common(p, windowing=True, rep=True, inp=True)
    p.add_argument("--kind", choices=tuple(REP_CHANNELS), default="histogram")
    p.add_argument("--preview", action="store_true", help="also write PGM/PPM previews")
    p.set_defaults(func=cmd_rep)

    p = sub.add_parser("infer", help="run the detection pipeline per window")
    common(p, seed=True, windowing=True, rep=True, net=True, inp=True)
    p.add_argument("--rep", choices=tuple(REP_CHANNELS), default="histogram")
    p.add_argument("--mode", choices=("dense", "sparse", "async"), default="dense")
    p.add_argument("--conf", type=float, default=0.5)
    p.add_argument("--nms-iou", type=float, default=0.5)
    p.add_argument("--sparse-threshold", type=float, default=0.0)
    p.add_argument("--classes", type=int, default=1)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score detections against ground truth")
    common(p)
    p.add_argument("--dets", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--geometry", required=True, help="WxH of the sensor")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flops", help="analytic dense FLOPs, or measured sparse ratios over a stream")
    common(p, windowing=True, rep=True)
    p.add_argument("--net", default="vgg16-yolo")
    p.add_argument("--geometry", default="256x144")
    p.add_argument("--in", dest="input", default=None, help="optional event stream for measured ratios")
    p.add_argument("--sort", action="store_true")
    p.add_argument("--rep", choices=tuple(REP_CHANNELS), default="histogram")
    p.add_argument("--in-channels", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sparse-threshold", type=float, default=0.0)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("bench", help="wall-clock throughput per stage")
    common(p, seed=True, windowing=True, net=True, inp=True)
    p.add_argument("--rep", choices=tuple(REP_CHANNELS), default="histogram")
    p.add_argument("--bench-windows", type=int, default=5, help="windows per forward-mode timing (0 = all)")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "stride_ms", None) is None and hasattr(args, "window_ms"):
        args.stride_ms = args.window_ms
    out = _Outputs()
    try:
        return args.func(args, out)
    except (CliError, StreamFormatError, ValueError, OSError) as exc:
        out.cleanup()
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
