"""Bridges request models to library calls; shared by every endpoint."""

from __future__ import annotations

import json
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .. import __version__
from ..decode import DecodeConfig, detection_to_record
from ..engine import (
    BackendKind,
    InferenceSession,
    MockSpec,
    create_mock_session,
    load_model,
    resolve_model_path,
)
from ..errors import ConfigurationError
from ..evalmap import EvalConfig, evaluate, load_annotations, load_detections, recall_by_group
from ..frame import CameraIntrinsics, CameraPose, ImageFrame, PoseBuffer, SyntheticStreamSpec, synthetic_stream
from ..geometry import FixedDepth, PlaneIntersection, PlacementPolicy, RayOnly, anchor_to_record
from ..pipeline import (
    AnchorSetup,
    build_simulated_stages,
    build_single_pipeline,
    build_tiled_pipeline,
    run_stages,
    simulated_inference_stage,
)
from ..preprocess import Layout
from ..profiler import (
    LatencyReport,
    RunDescriptor,
    SweepTable,
    TimingProtocol,
    compare_tiled,
    sweep,
    time_pipeline,
)
from ..reports import load_sweep_table
from ..selector import Budget, pareto_frontier, select_config
from . import schemas

DEFAULT_MOCK_SIZE = 160


def _layout_from_name(name: str) -> Layout | None:
    if name == "auto":
        return None
    try:
        return Layout(name)
    except ValueError as exc:
        raise ConfigurationError(f"unknown layout {name!r}") from exc


def _mock_spec(opts: schemas.MockOptions) -> MockSpec:
    boxes = []
    for b in opts.boxes:
        if len(b) != 6:
            raise ConfigurationError(f"mock box needs 6 values (cx, cy, w, h, category, score): {b}")
        boxes.append((b[0], b[1], b[2], b[3], int(b[4]), b[5]))
    return MockSpec(
        fixed_delay_ms=opts.fixed_delay_ms,
        per_pixel_delay_ms=opts.per_pixel_delay_ms,
        stage_delays_ms=dict(opts.stage_delays_ms),
        boxes=tuple(boxes),
        category_count=opts.category_count,
        candidate_count=opts.candidate_count,
    )


def build_session(model: schemas.ModelSource) -> InferenceSession:
    layout = _layout_from_name(model.layout)
    if model.backend == "mock":
        spec = _mock_spec(model.mock or schemas.MockOptions())
        _, session = create_mock_session(
            spec,
            input_size=model.input_size or DEFAULT_MOCK_SIZE,
            layout=layout or Layout.CHANNELS_FIRST,
            variant_name=model.variant_name or "mock",
        )
        return session
    if model.path is None:
        raise ConfigurationError(f"backend {model.backend!r} requires a model path")
    _, session = load_model(
        resolve_model_path(model.path),
        backend=BackendKind(model.backend),
        layout=layout,
        input_size=model.input_size,
        category_count=model.category_count,
        variant_name=model.variant_name,
    )
    return session


def _decode_config(opts: schemas.DecodeOptions) -> DecodeConfig:
    return DecodeConfig(
        confidence_threshold=opts.confidence_threshold,
        nms_iou_threshold=opts.nms_iou_threshold,
        max_detections=opts.max_detections,
        class_aware_nms=opts.class_aware_nms,
    )


def _protocol(opts: schemas.ProtocolOptions, session: InferenceSession | None = None) -> TimingProtocol:
    proto = TimingProtocol(
        warmup_iterations=opts.warmup_iterations,
        repetitions=opts.repetitions,
        keep_raw_samples=opts.keep_raw_samples,
    )
    clock = getattr(session.backend, "clock", None) if session is not None else None
    if clock is not None:
        proto = replace(proto, clock=clock.now_ns)
    return proto


def _synthetic_frame(spec: schemas.FrameSpec) -> ImageFrame:
    stream = synthetic_stream(
        SyntheticStreamSpec(width=spec.width, height=spec.height, count=1, seed=spec.seed)
    )
    frame, _ = next(iter(stream))
    return frame


def _load_image_frame(path: Path, frame_id: int, timestamp_ns: int) -> ImageFrame:
    try:
        with Image.open(path) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise ConfigurationError(f"cannot read image {path}: {exc}") from exc
    h, w = rgb.shape[:2]
    return ImageFrame(frame_id=frame_id, width=w, height=h, pixels=rgb, timestamp_ns=timestamp_ns)


def parse_policy(text: str) -> PlacementPolicy:
    if text == "ray":
        return RayOnly()
    if text.startswith("depth:"):
        return FixedDepth(float(text.split(":", 1)[1]))
    if text.startswith("plane:"):
        plane_path = Path(text.split(":", 1)[1])
        try:
            doc = json.loads(plane_path.read_text())
            return PlaneIntersection(point=tuple(doc["point"]), normal=tuple(doc["normal"]))
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ConfigurationError(f"cannot read plane file {plane_path}: {exc}") from exc
    raise ConfigurationError(f"unknown placement policy {text!r} (ray | depth:<m> | plane:<file>)")


def _load_sidecar(opts: schemas.AnchorOptions) -> tuple[AnchorSetup, dict[str, int]]:
    """Sidecar schema: intrinsics (projection row-major, image extent),
    poses (timestamp_ns + camera_to_world row-major), frames (image basename
    to acquisition timestamp)."""
    path = Path(opts.sidecar)
    try:
        doc = json.loads(path.read_text())
        intr = doc["intrinsics"]
        intrinsics = CameraIntrinsics(
            projection=np.asarray(intr["projection"], dtype=np.float64).reshape(4, 4),
            image_width=int(intr["image_width"]),
            image_height=int(intr["image_height"]),
        )
        poses = PoseBuffer()
        for p in sorted(doc["poses"], key=lambda p: p["timestamp_ns"]):
            poses.push(
                CameraPose(
                    camera_to_world=np.asarray(p["camera_to_world"], dtype=np.float64).reshape(4, 4),
                    timestamp_ns=int(p["timestamp_ns"]),
                )
            )
        frames = {f["image"]: int(f["timestamp_ns"]) for f in doc.get("frames", [])}
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigurationError(f"cannot read sidecar {path}: {exc}") from exc
    return AnchorSetup(intrinsics=intrinsics, poses=poses, policy=parse_policy(opts.policy)), frames


def _image_id_map(annotations_path: str) -> dict[str, int]:
    try:
        doc = json.loads(Path(annotations_path).read_text())
        return {img["file_name"]: int(img["id"]) for img in doc.get("images", [])}
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigurationError(f"cannot read annotations {annotations_path}: {exc}") from exc


def _report_model(report: LatencyReport) -> schemas.LatencyReportModel:
    return schemas.LatencyReportModel(
        config=asdict(report.config),
        stages=[schemas.StageTimingModel(**asdict(s)) for s in report.stages],
        warmup_iterations=report.warmup_iterations,
        repetitions=report.repetitions,
        environment=report.environment,
        raw_samples_ms={k: list(v) for k, v in report.raw_samples_ms.items()}
        if report.raw_samples_ms is not None
        else None,
    )


def _resolved(req) -> dict:
    return req.model_dump(mode="json")


def run_detect(req: schemas.DetectRequest) -> schemas.DetectResponse:
    session = build_session(req.model)
    decode_cfg = _decode_config(req.decode)
    anchoring = None
    frame_timestamps: dict[str, int] = {}
    if req.anchor is not None:
        anchoring, frame_timestamps = _load_sidecar(req.anchor)
    id_map = _image_id_map(req.annotations) if req.annotations else {}

    records: list[schemas.DetectionRecord] = []
    for idx, image_path in enumerate(req.images):
        path = Path(image_path)
        timestamp = frame_timestamps.get(path.name, idx * 33_333_333)
        frame = _load_image_frame(path, idx, timestamp)
        if req.tile_size is not None:
            stages = build_tiled_pipeline(
                session, (frame.width, frame.height), req.overlap, decode_cfg, anchoring
            )
        else:
            stages = build_single_pipeline(session, decode_cfg, anchoring)
        ctx = run_stages(stages, frame)
        image_id = id_map.get(path.name, idx)
        anchors = ctx.anchors if anchoring is not None else [None] * len(ctx.detections)
        for det, anchor in zip(ctx.detections, anchors):
            rec = detection_to_record(det, image_id)
            records.append(
                schemas.DetectionRecord(
                    image_id=rec["image_id"],
                    category_id=rec["category_id"],
                    bbox=rec["bbox"],
                    score=rec["score"],
                    anchor=anchor_to_record(anchor) if anchor is not None else None,
                )
            )
    return schemas.DetectResponse(records=records, resolved_config=_resolved(req), version=__version__)


def _bench_stages(session: InferenceSession, decode_cfg: DecodeConfig,
                  tile_size: int | None, overlap: int, frame: ImageFrame):
    spec = getattr(session.backend, "spec", None)
    if spec is not None and spec.stage_delays_ms:
        clock = session.backend.clock
        pre = {k: v for k, v in spec.stage_delays_ms.items() if k == "preprocess"}
        post = {k: v for k, v in spec.stage_delays_ms.items() if k != "preprocess"}
        return (
            build_simulated_stages(pre, clock)
            + [simulated_inference_stage(session)]
            + build_simulated_stages(post, clock)
        )
    if tile_size is not None:
        return build_tiled_pipeline(session, (frame.width, frame.height), overlap, decode_cfg)
    return build_single_pipeline(session, decode_cfg)


def run_bench(req: schemas.BenchRequest) -> schemas.BenchResponse:
    session = build_session(req.model)
    decode_cfg = _decode_config(req.decode)
    frame = _synthetic_frame(req.frame)
    stages = _bench_stages(session, decode_cfg, req.tile_size, req.overlap, frame)
    protocol = _protocol(req.protocol, session)
    descriptor = RunDescriptor(
        variant_name=session.descriptor.variant_name,
        input_size=session.descriptor.input_size,
        backend=session.backend.name,
        tiling=f"tile={req.tile_size}" if req.tile_size else None,
    )
    report = time_pipeline(stages, frame, protocol, descriptor)
    return schemas.BenchResponse(
        report=_report_model(report), resolved_config=_resolved(req), version=__version__
    )


def _sweep_provider(variant: schemas.SweepVariant):
    layout = _layout_from_name(variant.layout)
    if variant.mock is not None:
        spec = _mock_spec(variant.mock)

        def provider(n: int) -> InferenceSession:
            _, session = create_mock_session(
                spec, input_size=n, layout=layout or Layout.CHANNELS_FIRST,
                variant_name=variant.variant_name,
            )
            return session

        return provider

    by_size: dict[int, InferenceSession] = {}
    for p in variant.paths:
        _, session = load_model(
            resolve_model_path(p),
            layout=layout,
            category_count=variant.category_count,
            variant_name=variant.variant_name,
        )
        by_size[session.descriptor.input_size] = session

    def provider(n: int) -> InferenceSession:
        if n not in by_size:
            raise ConfigurationError(
                f"variant {variant.variant_name} has no model for input size {n} "
                f"(available: {sorted(by_size)})"
            )
        return by_size[n]

    return provider


def _dataset_evaluator(dataset: schemas.DatasetOptions, decode_cfg: DecodeConfig):
    gts = load_annotations(dataset.annotations, dataset.group_key)
    id_map = _image_id_map(dataset.annotations)
    image_paths = sorted(p for p in Path(dataset.images_dir).iterdir() if p.is_file())

    def evaluator(variant: str, n: int, session: InferenceSession) -> tuple[float, float]:
        dets = []
        for idx, path in enumerate(image_paths):
            frame = _load_image_frame(path, idx, idx * 33_333_333)
            ctx = run_stages(build_single_pipeline(session, decode_cfg), frame)
            image_id = id_map.get(path.name, idx)
            dets.extend((image_id, d) for d in ctx.detections)
        result = evaluate(dets, gts)
        return result.map50, result.map50_95

    return evaluator


def run_sweep(req: schemas.SweepRequest) -> schemas.SweepResponse:
    decode_cfg = _decode_config(req.decode)
    frame = _synthetic_frame(req.frame)
    providers = {v.variant_name: _sweep_provider(v) for v in req.variants}
    protocol = TimingProtocol(
        warmup_iterations=req.protocol.warmup_iterations,
        repetitions=req.protocol.repetitions,
        keep_raw_samples=req.protocol.keep_raw_samples,
    )
    evaluator = _dataset_evaluator(req.dataset, decode_cfg) if req.dataset else None
    table = sweep(providers, req.sizes, protocol, frame, decode_cfg, evaluator)
    return schemas.SweepResponse(
        rows=[schemas.SweepRowModel(**asdict(r)) for r in table.rows],
        failures=[schemas.SweepFailureModel(**asdict(f)) for f in table.failures],
        resolved_config=_resolved(req),
        version=__version__,
    )


def run_tile_bench(req: schemas.TileBenchRequest) -> schemas.TileBenchResponse:
    n = req.tile_size
    frame_spec = req.frame or schemas.FrameSpec(width=max(1280, 2 * n), height=max(720, 2 * n))
    frame = _synthetic_frame(frame_spec)
    decode_cfg = _decode_config(req.decode)

    if req.model.backend == "mock":
        spec = _mock_spec(req.model.mock or schemas.MockOptions())
        layout = _layout_from_name(req.model.layout) or Layout.CHANNELS_FIRST

        def provider(k: int) -> InferenceSession:
            _, session = create_mock_session(
                spec, input_size=k, layout=layout, variant_name=req.model.variant_name or "mock"
            )
            return session

    else:
        if req.large_model is None:
            raise ConfigurationError(
                "tile-bench with a static real model needs large_model: a second "
                "model file taking the doubled input size"
            )
        tile_session = build_session(req.model)
        large_session = build_session(req.large_model)
        sessions = {
            tile_session.descriptor.input_size: tile_session,
            large_session.descriptor.input_size: large_session,
        }

        def provider(k: int) -> InferenceSession:
            if k not in sessions:
                raise ConfigurationError(
                    f"no model provided for input size {k} (have {sorted(sessions)})"
                )
            return sessions[k]

    protocol = TimingProtocol(
        warmup_iterations=req.protocol.warmup_iterations,
        repetitions=req.protocol.repetitions,
        keep_raw_samples=req.protocol.keep_raw_samples,
    )
    tiled, single, ratio = compare_tiled(provider, n, protocol, frame, decode_config=decode_cfg)
    return schemas.TileBenchResponse(
        tiled=_report_model(tiled),
        single=_report_model(single),
        ratio=ratio,
        resolved_config=_resolved(req),
        version=__version__,
    )


def run_select(req: schemas.SelectRequest) -> schemas.SelectResponse:
    from ..profiler import SweepRow

    if req.rows is not None:
        table = SweepTable(rows=tuple(SweepRow(**r.model_dump()) for r in req.rows))
    elif req.table_path is not None:
        table = load_sweep_table(req.table_path)
    else:
        raise ConfigurationError("select needs either inline rows or a table_path")
    budget = Budget(limit_ms=req.budget_ms, metric=req.metric)
    chosen = select_config(table, budget)
    feasible = [r for r in table.rows if r.mean_total_ms <= budget.limit_ms]
    frontier = pareto_frontier(SweepTable(rows=tuple(feasible)), budget.metric)
    return schemas.SelectResponse(
        chosen=schemas.SweepRowModel(**asdict(chosen)),
        feasible_count=len(feasible),
        frontier=[schemas.SweepRowModel(**asdict(r)) for r in frontier],
        resolved_config=_resolved(req),
        version=__version__,
    )


def run_eval(req: schemas.EvalRequest) -> schemas.EvalResponse:
    gts = load_annotations(req.annotations, req.group_key)
    dets = load_detections(req.detections)
    config = EvalConfig(
        iou_thresholds=tuple(req.iou_thresholds) if req.iou_thresholds else EvalConfig().iou_thresholds,
        max_detections_per_image=req.max_detections_per_image,
    )
    result = evaluate(dets, gts, config)
    groups = None
    if req.group_key is not None:
        groups = recall_by_group(dets, gts, req.recall_iou_threshold, req.recall_score_threshold)
    return schemas.EvalResponse(
        map50=result.map50,
        map50_95=result.map50_95,
        per_category=result.per_category,
        counts={
            "images": result.image_count,
            "ground_truths": result.gt_count,
            "detections": result.detection_count,
        },
        recall_by_group=groups,
        resolved_config=_resolved(req),
        version=__version__,
    )
