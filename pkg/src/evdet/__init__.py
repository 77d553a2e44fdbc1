"""Event-camera detection toolkit.

Converts DVS event streams into frame representations, runs them through a
convolutional detector in dense, sparse or asynchronous-incremental mode,
and evaluates detections with COCO-style mAP.
"""

__version__ = "0.1.0"

from evdet.events import (
    Event,
    EventStream,
    EventWindow,
    SensorGeometry,
    DvsSimConfig,
    parse_stream,
    write_stream,
    slice_windows,
    simulate_dvs,
    gen_synthetic_scene,
)
from evdet.representations import RepConfig, RepFrame, LeakyState

__all__ = [
    "Event",
    "EventStream",
    "EventWindow",
    "SensorGeometry",
    "DvsSimConfig",
    "parse_stream",
    "write_stream",
    "slice_windows",
    "simulate_dvs",
    "gen_synthetic_scene",
    "RepConfig",
    "RepFrame",
    "LeakyState",
]
