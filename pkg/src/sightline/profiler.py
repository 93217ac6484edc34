"""Latency measurement harness.

Protocol: a configurable number of untimed warm-up runs, then the timed
repetitions (default 100); every stage is bracketed with monotonic clock
reads nested inside a total bracket, and statistics are computed over the
timed runs only. Means and stds (population) are reported in milliseconds.
A sweep evaluates a (variant x input size) grid and records per-cell
failures instead of aborting. The pixel-scaling fit regresses mean total
latency against n^2, since inference cost grows with the pixel count.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .clocks import monotonic_ns
from .decode import DecodeConfig
from .engine import InferenceSession
from .errors import InsufficientDataError, SightlineError
from .frame import ImageFrame
from .pipeline import Stage, PipeContext, build_single_pipeline, build_tiled_pipeline

# Slack allowed between the total bracket and the sum of stage brackets.
_NESTING_SLACK_MS = 1.0


@dataclass(frozen=True)
class TimingProtocol:
    warmup_iterations: int = 10
    repetitions: int = 100
    clock: Callable[[], int] = monotonic_ns
    keep_raw_samples: bool = False

    def __post_init__(self):
        if self.repetitions < 2:
            raise ValueError("repetitions must be >= 2 for a defined std")
        if self.warmup_iterations < 0:
            raise ValueError("warmup_iterations must be >= 0")


@dataclass(frozen=True)
class StageTiming:
    stage: str
    mean_ms: float
    std_ms: float
    samples: int

    def __post_init__(self):
        if self.mean_ms < 0 or self.std_ms < 0:
            raise ValueError("timing statistics must be >= 0")


@dataclass(frozen=True)
class RunDescriptor:
    """What was measured: model variant, input size, backend, tiling."""

    variant_name: str
    input_size: int
    backend: str
    tiling: str | None = None


@dataclass(frozen=True)
class LatencyReport:
    config: RunDescriptor
    stages: tuple[StageTiming, ...]
    warmup_iterations: int
    repetitions: int
    environment: str
    raw_samples_ms: dict[str, tuple[float, ...]] | None = None

    def __post_init__(self):
        names = [s.stage for s in self.stages]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate stage entries in report: {names}")
        if "total" not in names:
            raise ValueError("report must contain a total entry")
        total = self.stage("total").mean_ms
        sub = sum(s.mean_ms for s in self.stages if s.stage != "total")
        if total < sub - _NESTING_SLACK_MS:
            raise ValueError(
                f"total mean {total:.3f} ms is less than stage sum {sub:.3f} ms"
            )

    def stage(self, name: str) -> StageTiming:
        for s in self.stages:
            if s.stage == name:
                return s
        raise KeyError(name)

    @property
    def total_mean_ms(self) -> float:
        return self.stage("total").mean_ms


@dataclass(frozen=True)
class SweepRow:
    variant_name: str
    input_size: int
    mean_total_ms: float
    std_ms: float
    map50: float | None = None
    map50_95: float | None = None
    parameter_count: int | None = None


@dataclass(frozen=True)
class SweepFailure:
    variant_name: str
    input_size: int
    reason: str


@dataclass(frozen=True)
class SweepTable:
    rows: tuple[SweepRow, ...]
    failures: tuple[SweepFailure, ...] = ()

    def __post_init__(self):
        keys = [(r.variant_name, r.input_size) for r in self.rows]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (variant, size) rows in sweep table")


def _environment_note(clock: Callable[[], int]) -> str:
    import platform

    kind = "virtual" if clock is not monotonic_ns else "monotonic"
    return (
        f"python {platform.python_version()}, numpy {np.__version__}, "
        f"{platform.system().lower()}-{platform.machine()}, clock={kind}"
    )


def time_pipeline(
    stages: Sequence[Stage],
    frame: ImageFrame | None,
    protocol: TimingProtocol,
    config: RunDescriptor,
) -> LatencyReport:
    """Run warm-up then timed repetitions and report per-stage statistics.

    Each repetition runs the full stage list on a fresh context; stage
    failures abort with the stage name attached.
    """
    clock = protocol.clock

    def one_run(record: dict[str, list[float]] | None) -> None:
        ctx = PipeContext(frame=frame)
        t0 = clock()
        for name, fn in stages:
            s0 = clock()
            try:
                fn(ctx)
            except SightlineError as exc:
                raise type(exc)(f"stage '{name}' failed: {exc}") from exc
            s1 = clock()
            if record is not None:
                record[name].append((s1 - s0) / 1e6)
        t1 = clock()
        if record is not None:
            record["total"].append((t1 - t0) / 1e6)

    for _ in range(protocol.warmup_iterations):
        one_run(None)
    samples: dict[str, list[float]] = {name: [] for name, _ in stages}
    samples["total"] = []
    for _ in range(protocol.repetitions):
        one_run(samples)

    timings = tuple(
        StageTiming(
            stage=name,
            mean_ms=float(np.mean(vals)),
            std_ms=float(np.std(vals)),
            samples=len(vals),
        )
        for name, vals in samples.items()
    )
    return LatencyReport(
        config=config,
        stages=timings,
        warmup_iterations=protocol.warmup_iterations,
        repetitions=protocol.repetitions,
        environment=_environment_note(clock),
        raw_samples_ms={k: tuple(v) for k, v in samples.items()}
        if protocol.keep_raw_samples
        else None,
    )


SessionProvider = Callable[[int], InferenceSession]
"""Builds a session for a requested input size; raises SightlineError when
the variant cannot run at that size."""


def sweep(
    providers: dict[str, SessionProvider],
    sizes: Sequence[int],
    protocol: TimingProtocol,
    frame: ImageFrame,
    decode_config: DecodeConfig = DecodeConfig(),
    evaluator: Callable[[str, int, InferenceSession], tuple[float, float]] | None = None,
) -> SweepTable:
    """Time every (variant, size) cell; failures become recorded absences.

    evaluator, when given, returns (mAP50, mAP50-95) for the cell and fills
    the accuracy columns.
    """
    rows: list[SweepRow] = []
    failures: list[SweepFailure] = []
    for variant, provider in providers.items():
        for n in sizes:
            try:
                if n > min(frame.width, frame.height):
                    raise SightlineError(
                        f"input size {n} exceeds frame {frame.width}x{frame.height}"
                    )
                session = provider(n)
                stages = build_single_pipeline(session, decode_config)
                # clocks owned by mock backends drive deterministic reports
                proto = protocol
                clock = getattr(session.backend, "clock", None)
                if clock is not None:
                    proto = replace(protocol, clock=clock.now_ns)
                report = time_pipeline(
                    stages,
                    frame,
                    proto,
                    RunDescriptor(variant, n, session.backend.name),
                )
                map50 = map50_95 = None
                if evaluator is not None:
                    map50, map50_95 = evaluator(variant, n, session)
                rows.append(
                    SweepRow(
                        variant_name=variant,
                        input_size=n,
                        mean_total_ms=report.total_mean_ms,
                        std_ms=report.stage("total").std_ms,
                        map50=map50,
                        map50_95=map50_95,
                        parameter_count=session.descriptor.parameter_count,
                    )
                )
            except SightlineError as exc:
                failures.append(SweepFailure(variant, n, str(exc)))
    return SweepTable(rows=tuple(rows), failures=tuple(failures))


@dataclass(frozen=True)
class ScalingFit:
    slope_ms_per_pixel: float
    intercept_ms: float
    r_squared: float


def fit_pixel_scaling(reports: Sequence[LatencyReport]) -> ScalingFit:
    """Least-squares fit of mean total latency against input pixel count."""
    sizes = {r.config.input_size for r in reports}
    if len(sizes) < 3:
        raise InsufficientDataError(
            f"need >= 3 distinct input sizes for a scaling fit, got {sorted(sizes)}"
        )
    x = np.array([float(r.config.input_size) ** 2 for r in reports])
    y = np.array([r.total_mean_ms for r in reports])
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r2 = 1.0 if ss_tot == 0.0 and ss_res == 0.0 else 1.0 - ss_res / ss_tot
    return ScalingFit(slope_ms_per_pixel=float(slope), intercept_ms=float(intercept), r_squared=r2)


def compare_tiled(
    provider: SessionProvider,
    tile_size: int,
    protocol: TimingProtocol,
    frame: ImageFrame,
    region: tuple[int, int] | None = None,
    decode_config: DecodeConfig = DecodeConfig(),
) -> tuple[LatencyReport, LatencyReport, float]:
    """Tiled batch over a wide region vs one large square input.

    The region defaults to (2n, n): two side-by-side tiles. The single-image
    reference input is (2n, 2n), i.e. the square with the same width. The
    returned ratio is tiled total / single total.
    """
    n = tile_size
    if region is None:
        region = (2 * n, n)
    tiled_session = provider(n)
    single_session = provider(2 * n)

    def timed(stages, session, tiling):
        proto = protocol
        clock = getattr(session.backend, "clock", None)
        if clock is not None:
            proto = replace(protocol, clock=clock.now_ns)
        return time_pipeline(
            stages,
            frame,
            proto,
            RunDescriptor(session.descriptor.variant_name, session.descriptor.input_size,
                          session.backend.name, tiling),
        )

    tiled_stages = build_tiled_pipeline(tiled_session, region, 0, decode_config)
    plan_desc = f"{region[0]}x{region[1]} in {n}px tiles"
    tiled_report = timed(tiled_stages, tiled_session, plan_desc)
    single_stages = build_single_pipeline(single_session, decode_config)
    single_report = timed(single_stages, single_session, None)
    ratio = tiled_report.total_mean_ms / single_report.total_mean_ms
    return tiled_report, single_report, ratio
