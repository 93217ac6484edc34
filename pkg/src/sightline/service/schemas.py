"""Pydantic request/response models for the service endpoints."""

from __future__ import annotations

from pydantic import BaseModel, Field


class MockOptions(BaseModel):
    """Configuration of the deterministic mock backend."""

    fixed_delay_ms: float = 0.0
    per_pixel_delay_ms: float = 0.0
    stage_delays_ms: dict[str, float] = Field(default_factory=dict)
    boxes: list[list[float]] = Field(default_factory=list)  # [cx, cy, w, h, category, score]
    category_count: int = 3
    candidate_count: int = 100


class ModelSource(BaseModel):
    """Where the model comes from and how to interpret its input."""

    path: str | None = None
    backend: str = "reference"  # reference | mock | accelerated
    layout: str = "auto"  # auto | channels_first | channels_last
    input_size: int | None = None
    category_count: int | None = None
    variant_name: str | None = None
    mock: MockOptions | None = None


class DecodeOptions(BaseModel):
    confidence_threshold: float = 0.25
    nms_iou_threshold: float = 0.45
    max_detections: int = 100
    class_aware_nms: bool = True


class FrameSpec(BaseModel):
    """Synthetic frame source used by benchmarks."""

    width: int = 1280
    height: int = 720
    seed: int = 0


class ProtocolOptions(BaseModel):
    warmup_iterations: int = 10
    repetitions: int = 100
    keep_raw_samples: bool = False


class AnchorOptions(BaseModel):
    sidecar: str  # pose/intrinsics sidecar file path
    policy: str = "ray"  # ray | depth:<meters> | plane:<file>


class DetectRequest(BaseModel):
    model: ModelSource
    images: list[str]
    annotations: str | None = None  # maps file names to image ids
    decode: DecodeOptions = Field(default_factory=DecodeOptions)
    tile_size: int | None = None
    overlap: int = 0
    anchor: AnchorOptions | None = None
    seed: int = 0


class DetectionRecord(BaseModel):
    image_id: int
    category_id: int
    bbox: list[float]
    score: float
    anchor: dict | None = None


class DetectResponse(BaseModel):
    records: list[DetectionRecord]
    resolved_config: dict
    version: str


class BenchRequest(BaseModel):
    model: ModelSource
    protocol: ProtocolOptions = Field(default_factory=ProtocolOptions)
    decode: DecodeOptions = Field(default_factory=DecodeOptions)
    frame: FrameSpec = Field(default_factory=FrameSpec)
    tile_size: int | None = None
    overlap: int = 0
    seed: int = 0


class StageTimingModel(BaseModel):
    stage: str
    mean_ms: float
    std_ms: float
    samples: int


class LatencyReportModel(BaseModel):
    config: dict
    stages: list[StageTimingModel]
    warmup_iterations: int
    repetitions: int
    environment: str
    raw_samples_ms: dict[str, list[float]] | None = None


class BenchResponse(BaseModel):
    report: LatencyReportModel
    resolved_config: dict
    version: str


class SweepVariant(BaseModel):
    """One sweep variant: either per-size model files or a mock."""

    variant_name: str
    paths: list[str] = Field(default_factory=list)
    backend: str = "reference"
    layout: str = "auto"
    category_count: int | None = None
    mock: MockOptions | None = None


class DatasetOptions(BaseModel):
    annotations: str
    images_dir: str
    group_key: str | None = None


class SweepRequest(BaseModel):
    variants: list[SweepVariant]
    sizes: list[int]
    protocol: ProtocolOptions = Field(default_factory=ProtocolOptions)
    decode: DecodeOptions = Field(default_factory=DecodeOptions)
    frame: FrameSpec = Field(default_factory=FrameSpec)
    dataset: DatasetOptions | None = None
    seed: int = 0


class SweepRowModel(BaseModel):
    variant_name: str
    input_size: int
    mean_total_ms: float
    std_ms: float
    map50: float | None = None
    map50_95: float | None = None
    parameter_count: int | None = None


class SweepFailureModel(BaseModel):
    variant_name: str
    input_size: int
    reason: str


class SweepResponse(BaseModel):
    rows: list[SweepRowModel]
    failures: list[SweepFailureModel]
    resolved_config: dict
    version: str


class TileBenchRequest(BaseModel):
    model: ModelSource
    large_model: ModelSource | None = None  # real-backend comparison partner at 2x size
    tile_size: int = 160
    protocol: ProtocolOptions = Field(default_factory=ProtocolOptions)
    decode: DecodeOptions = Field(default_factory=DecodeOptions)
    frame: FrameSpec | None = None
    seed: int = 0


class TileBenchResponse(BaseModel):
    tiled: LatencyReportModel
    single: LatencyReportModel
    ratio: float
    resolved_config: dict
    version: str


class SelectRequest(BaseModel):
    rows: list[SweepRowModel] | None = None
    table_path: str | None = None
    budget_ms: float
    metric: str = "mAP50_95"


class SelectResponse(BaseModel):
    chosen: SweepRowModel
    feasible_count: int
    frontier: list[SweepRowModel]
    resolved_config: dict
    version: str


class EvalRequest(BaseModel):
    annotations: str
    detections: str
    iou_thresholds: list[float] | None = None
    max_detections_per_image: int = 100
    group_key: str | None = None
    recall_iou_threshold: float = 0.5
    recall_score_threshold: float = 0.25


class EvalResponse(BaseModel):
    map50: float
    map50_95: float
    per_category: dict[int, dict[str, float]]
    counts: dict[str, int]
    recall_by_group: dict[str, float] | None = None
    resolved_config: dict
    version: str


class HealthResponse(BaseModel):
    status: str
    version: str
