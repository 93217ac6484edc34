"""Stage composition: wiring preprocess, inference, decode, merge, anchor.

A pipeline is an ordered list of named stages operating on a shared
context; the profiler brackets each stage with clock reads, and the CLI /
service run them unbracketed. Names are fixed (preprocess, inference,
postprocess, merge, anchor) so timing reports are comparable across
configurations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .clocks import VirtualClock, precise_sleep_ms
from .decode import Detection, DecodeConfig, decode_batch, nms, postprocess
from .engine import InferenceSession
from .errors import ConfigurationError
from .frame import CameraIntrinsics, ImageFrame, PoseBuffer
from .geometry import Anchor3D, GeometryError, PlacementPolicy, RayOnly, anchor_detection
from .preprocess import CropRect, InputTensor, Layout, center_crop, normalize, to_tensor
from .tiler import TilePlan, assemble_batch, merge_detections, plan_tiles


@dataclass
class PipeContext:
    """Mutable state threaded through pipeline stages."""

    frame: ImageFrame | None = None
    tensor: object = None
    crop: CropRect | None = None
    region_offset: tuple[int, int] | None = None
    plan: TilePlan | None = None
    raw: object = None
    detections: list[Detection] = field(default_factory=list)
    anchors: list[Anchor3D | None] = field(default_factory=list)


Stage = tuple[str, Callable[[PipeContext], None]]


@dataclass(frozen=True)
class AnchorSetup:
    intrinsics: CameraIntrinsics
    poses: PoseBuffer
    policy: PlacementPolicy = RayOnly()


def run_stages(stages: list[Stage], frame: ImageFrame | None) -> PipeContext:
    ctx = PipeContext(frame=frame)
    for _, fn in stages:
        fn(ctx)
    return ctx


def _anchor_stage(setup: AnchorSetup) -> Callable[[PipeContext], None]:
    def anchor(ctx: PipeContext) -> None:
        ctx.anchors = []
        for det in ctx.detections:
            try:
                ctx.anchors.append(
                    anchor_detection(
                        det, ctx.frame.timestamp_ns, setup.intrinsics, setup.poses, setup.policy
                    )
                )
            except GeometryError:
                # boxes that stick out of the frame simply get no anchor
                ctx.anchors.append(None)

    return anchor


def build_single_pipeline(
    session: InferenceSession,
    decode_config: DecodeConfig,
    anchoring: AnchorSetup | None = None,
) -> list[Stage]:
    """preprocess -> inference -> postprocess (-> anchor) on one frame."""
    n = session.descriptor.input_size
    layout = session.descriptor.layout

    def pre(ctx: PipeContext) -> None:
        cropped, ctx.crop = center_crop(ctx.frame, n)
        ctx.tensor = to_tensor(normalize(cropped), layout)

    def infer(ctx: PipeContext) -> None:
        ctx.raw = session.infer(ctx.tensor)

    def post(ctx: PipeContext) -> None:
        ctx.detections = postprocess(ctx.raw, decode_config, ctx.crop)

    stages: list[Stage] = [("preprocess", pre), ("inference", infer), ("postprocess", post)]
    if anchoring is not None:
        stages.append(("anchor", _anchor_stage(anchoring)))
    return stages


def build_tiled_pipeline(
    session: InferenceSession,
    region: tuple[int, int],
    overlap: int = 0,
    decode_config: DecodeConfig = DecodeConfig(),
    anchoring: AnchorSetup | None = None,
) -> list[Stage]:
    """Tiled variant: a centered region is cut out of the frame, split into
    a batch of square tiles, decoded per tile and merged."""
    n = session.descriptor.input_size
    layout = session.descriptor.layout
    region_w, region_h = region
    plan = plan_tiles(region_w, region_h, n, overlap)

    def pre(ctx: PipeContext) -> None:
        frame = ctx.frame
        if region_w > frame.width or region_h > frame.height:
            raise ConfigurationError(
                f"region {region_w}x{region_h} exceeds frame {frame.width}x{frame.height}"
            )
        x = (frame.width - region_w) // 2
        y = (frame.height - region_h) // 2
        ctx.region_offset = (x, y)
        ctx.plan = plan
        regpix = frame.pixels[y : y + region_h, x : x + region_w]
        ctx.tensor = assemble_batch(normalize(regpix), plan, layout)

    def infer(ctx: PipeContext) -> None:
        ctx.raw = session.infer(ctx.tensor)

    def post(ctx: PipeContext) -> None:
        per_tile = decode_batch(ctx.raw, decode_config)
        ctx.detections = [
            nms(dets, decode_config.nms_iou_threshold, decode_config.class_aware_nms)
            for dets in per_tile
        ]

    def merge(ctx: PipeContext) -> None:
        merged = merge_detections(ctx.detections, ctx.plan, decode_config)
        merged = merged[: decode_config.max_detections]
        ox, oy = ctx.region_offset
        ctx.detections = [
            Detection(
                bbox=(d.bbox[0] + ox, d.bbox[1] + oy, d.bbox[2], d.bbox[3]),
                category=d.category,
                score=d.score,
                space=d.space,
            )
            for d in merged
        ]

    stages: list[Stage] = [
        ("preprocess", pre),
        ("inference", infer),
        ("postprocess", post),
        ("merge", merge),
    ]
    if anchoring is not None:
        stages.append(("anchor", _anchor_stage(anchoring)))
    return stages


def build_simulated_stages(
    delays_ms: dict[str, float], clock: VirtualClock | None = None
) -> list[Stage]:
    """Stages that just burn the configured wall time (and advance the
    virtual clock by exactly that amount). Used to exercise the timing
    harness with known ground truth."""

    def make(delay: float) -> Callable[[PipeContext], None]:
        def stage(_ctx: PipeContext) -> None:
            precise_sleep_ms(delay)
            if clock is not None:
                clock.advance_ms(delay)

        return stage

    return [(name, make(delay)) for name, delay in delays_ms.items()]


def simulated_inference_stage(session: InferenceSession) -> Stage:
    """Inference stage fed a fixed zero tensor; pairs with simulated
    pre/post stages when benchmarking a mock backend's protocol."""
    n = session.descriptor.input_size
    layout = session.descriptor.layout
    shape = (1, 3, n, n) if layout is Layout.CHANNELS_FIRST else (1, n, n, 3)
    zero = InputTensor(values=np.zeros(shape, dtype=np.float32), layout=layout)

    def infer(ctx: PipeContext) -> None:
        ctx.raw = session.infer(zero)

    return ("inference", infer)
