"""Model loading, metadata validation and the inference backend boundary.

One real backend executes serialized ONNX graphs on the CPU; a mock
backend produces configured outputs with configured delays for protocol
tests. Sessions are exclusive: one in-flight inference at a time.
"""

from __future__ import annotations

import enum
import os
import threading
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import (
    BackendUnavailableError,
    ConfigurationError,
    InferenceError,
    ModelLoadError,
    ShapeError,
    UnsupportedModelError,
)
from ..decode import RawOutput
from ..preprocess import InputTensor, Layout
from ..tiler import BatchTensor
from .mock import MockBackend, MockSpec
from .onnx_format import ModelFile, read_model
from .reference import SUPPORTED_OPSET, ReferenceExecutor

MODEL_CACHE_ENV = "SIGHTLINE_MODEL_CACHE"

DEFAULT_WARMUP_ITERATIONS = 10


class BackendKind(enum.Enum):
    REFERENCE_CPU = "reference"
    ACCELERATED = "accelerated"
    MOCK = "mock"


@dataclass(frozen=True)
class ModelDescriptor:
    """Static facts about a loaded model."""

    source_path: Path | None
    variant_name: str
    input_extents: tuple
    layout: Layout
    input_size: int
    category_count: int
    opset_version: int
    parameter_count: int | None = None


def detect_layout(input_extents: tuple) -> Layout:
    """Resolve tensor layout from declared input dims (batch axis first).

    A channel extent of 3 on axis 1 means channels-first, on axis 3
    channels-last; both is ambiguous and needs an explicit override.
    """
    if len(input_extents) != 4:
        raise UnsupportedModelError(
            f"expected 4 input extents (batch, spatial/channel), got {input_extents}"
        )
    first = input_extents[1] == 3
    last = input_extents[3] == 3
    if first and last:
        raise ConfigurationError(
            f"input extents {input_extents} are layout-ambiguous; pass an explicit layout"
        )
    if first:
        return Layout.CHANNELS_FIRST
    if last:
        return Layout.CHANNELS_LAST
    raise UnsupportedModelError(
        f"no axis of {input_extents} has channel extent 3; only RGB inputs are supported"
    )


class InferenceSession:
    """Exclusive handle for running one loaded model."""

    def __init__(self, descriptor: ModelDescriptor, backend, input_name: str | None = None):
        self.descriptor = descriptor
        self.backend = backend
        self.input_name = input_name
        self._lock = threading.Lock()

    @property
    def backend_kind(self) -> BackendKind:
        return BackendKind.MOCK if isinstance(self.backend, MockBackend) else BackendKind.REFERENCE_CPU

    def infer(self, tensor: InputTensor | BatchTensor) -> RawOutput:
        """Run the model on a batch-1 or batched tensor.

        The tensor's layout and spatial size must match the descriptor.
        Calls must be serialized by the caller; a concurrent call fails
        rather than silently queueing (it would corrupt timing runs).
        """
        d = self.descriptor
        if tensor.layout is not d.layout:
            raise ShapeError(f"tensor layout {tensor.layout} does not match model layout {d.layout}")
        if tensor.spatial_size != d.input_size:
            raise ShapeError(
                f"tensor spatial size {tensor.spatial_size} does not match model input {d.input_size}"
            )
        if not self._lock.acquire(blocking=False):
            raise InferenceError("session is exclusive: concurrent infer() detected")
        try:
            try:
                raw_values = self.backend.run(tensor.values)
            except (UnsupportedModelError, ShapeError, InferenceError):
                raise
            except Exception as exc:
                raise InferenceError(f"backend {self.backend.name} failed: {exc}") from exc
        finally:
            self._lock.release()
        return RawOutput(values=raw_values, category_count=d.category_count)

    def warm_up(self, iterations: int = DEFAULT_WARMUP_ITERATIONS) -> None:
        """Run and discard k inferences on a zero tensor (backend warm-up)."""
        if iterations < 0:
            raise ValueError("warm-up iterations must be >= 0")
        n = self.descriptor.input_size
        shape = (1, 3, n, n) if self.descriptor.layout is Layout.CHANNELS_FIRST else (1, n, n, 3)
        zero = InputTensor(values=np.zeros(shape, dtype=np.float32), layout=self.descriptor.layout)
        for _ in range(iterations):
            self.infer(zero)


class _ReferenceBackend:
    name = "reference"

    def __init__(self, executor: ReferenceExecutor, input_name: str):
        self.executor = executor
        self.input_name = input_name

    def run(self, values: np.ndarray) -> np.ndarray:
        outputs = self.executor.run({self.input_name: np.asarray(values, dtype=np.float32)})
        return outputs[0]


def _static_dims(dims: tuple) -> list[int] | None:
    out = []
    for d in dims:
        if isinstance(d, int) and d > 0:
            out.append(d)
        else:
            return None
    return out


def _category_count_from_output(model: ModelFile) -> int:
    outs = model.graph.outputs
    if len(outs) != 1:
        raise UnsupportedModelError(f"expected a single graph output, found {len(outs)}")
    dims = _static_dims(outs[0].dims)
    if dims is None or len(dims) != 3:
        raise ConfigurationError(
            f"cannot derive category count from output dims {outs[0].dims}; "
            "pass category_count explicitly"
        )
    a, b = dims[1], dims[2]
    if a == b:
        raise ConfigurationError(
            f"output dims {dims} are orientation-ambiguous; pass category_count explicitly"
        )
    return min(a, b) - 4


def load_model(
    path: str | Path,
    *,
    backend: BackendKind = BackendKind.REFERENCE_CPU,
    layout: Layout | None = None,
    input_size: int | None = None,
    category_count: int | None = None,
    variant_name: str | None = None,
) -> tuple[ModelDescriptor, InferenceSession]:
    """Load a serialized model and build an inference session for it.

    Dynamic spatial dims require an explicit input_size; an opset newer
    than the backend's supported set is recorded and warned about but not
    rejected.
    """
    if backend is BackendKind.ACCELERATED:
        raise BackendUnavailableError(
            "no accelerated backend is bundled; install/register one or use 'reference'"
        )
    if backend is BackendKind.MOCK:
        raise ConfigurationError("mock sessions are built with create_mock_session, not load_model")
    path = Path(path)
    model = read_model(path)
    executor = ReferenceExecutor(model)
    if len(executor.input_names) != 1:
        raise UnsupportedModelError(
            f"expected a single graph input, found {executor.input_names}"
        )
    input_name = executor.input_names[0]
    in_def = next(v for v in model.graph.inputs if v.name == input_name)
    extents = in_def.dims
    if len(extents) != 4:
        raise UnsupportedModelError(
            f"expected 4 input extents (batch, spatial/channel), got {extents}"
        )
    resolved_layout = layout or detect_layout(extents)
    if resolved_layout is Layout.CHANNELS_FIRST:
        spatial = extents[2], extents[3]
    else:
        spatial = extents[1], extents[2]
    static = _static_dims(spatial)
    if static is None:
        if input_size is None:
            raise ConfigurationError(
                f"model declares dynamic spatial dims {extents}; pass input_size explicitly"
            )
        n = input_size
    else:
        if static[0] != static[1]:
            raise UnsupportedModelError(f"non-square input {static} is not supported")
        n = static[0]
        if input_size is not None and input_size != n:
            raise ConfigurationError(
                f"requested input size {input_size} but model is fixed at {n}"
            )
    c = category_count if category_count is not None else _category_count_from_output(model)
    if c < 1:
        raise UnsupportedModelError(f"derived category count {c} is invalid")
    if model.opset_version > SUPPORTED_OPSET:
        warnings.warn(
            f"model opset {model.opset_version} exceeds the reference backend's "
            f"supported set (up to {SUPPORTED_OPSET}); proceeding anyway",
            stacklevel=2,
        )
    descriptor = ModelDescriptor(
        source_path=path,
        variant_name=variant_name or path.stem,
        input_extents=tuple(extents),
        layout=resolved_layout,
        input_size=n,
        category_count=c,
        opset_version=model.opset_version,
        parameter_count=int(sum(t.array.size for t in model.graph.initializers)),
    )
    session = InferenceSession(descriptor, _ReferenceBackend(executor, input_name), input_name)
    return descriptor, session


def create_mock_session(
    spec: MockSpec,
    input_size: int = 160,
    layout: Layout = Layout.CHANNELS_FIRST,
    variant_name: str = "mock",
) -> tuple[ModelDescriptor, InferenceSession]:
    """Build a session around the deterministic mock backend."""
    if input_size < 1:
        raise ConfigurationError("input_size must be >= 1")
    n = input_size
    extents = (1, 3, n, n) if layout is Layout.CHANNELS_FIRST else (1, n, n, 3)
    descriptor = ModelDescriptor(
        source_path=None,
        variant_name=variant_name,
        input_extents=extents,
        layout=layout,
        input_size=n,
        category_count=spec.category_count,
        opset_version=0,
        parameter_count=0,
    )
    backend = MockBackend(spec, input_size=n, layout=layout)
    return descriptor, InferenceSession(descriptor, backend)


def resolve_model_path(name_or_path: str) -> Path:
    """Resolve a model argument against the filesystem and the cache dir.

    A plain name (no existing file) is looked up inside the directory named
    by the SIGHTLINE_MODEL_CACHE environment variable.
    """
    p = Path(name_or_path)
    if p.exists():
        return p
    cache = os.environ.get(MODEL_CACHE_ENV)
    if cache:
        candidate = Path(cache) / name_or_path
        if candidate.exists():
            return candidate
    raise ModelLoadError(
        f"model '{name_or_path}' not found on disk"
        + (f" or in cache {cache}" if cache else f" (set {MODEL_CACHE_ENV} to search a cache dir)")
    )


__all__ = [
    "BackendKind",
    "DEFAULT_WARMUP_ITERATIONS",
    "InferenceSession",
    "MockBackend",
    "MockSpec",
    "ModelDescriptor",
    "MODEL_CACHE_ENV",
    "SUPPORTED_OPSET",
    "create_mock_session",
    "detect_layout",
    "load_model",
    "resolve_model_path",
]
