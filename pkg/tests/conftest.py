from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sightline.engine.modelgen import make_tiny_detector
from sightline.engine.onnx_format import save_model
from sightline.frame import ImageFrame

FIXTURES = Path(__file__).parent / "fixtures"
TINY_MODEL = FIXTURES / "models" / "tiny_det_160.onnx"


def make_frame(width=1280, height=720, seed=0, frame_id=0, timestamp_ns=0) -> ImageFrame:
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8)
    return ImageFrame(frame_id=frame_id, width=width, height=height,
                      pixels=pixels, timestamp_ns=timestamp_ns)


@pytest.fixture(scope="session")
def tiny_model_path() -> Path:
    assert TINY_MODEL.exists(), "committed fixture model is missing"
    return TINY_MODEL


@pytest.fixture(scope="session")
def model_dir(tmp_path_factory) -> Path:
    """Generated models at several sizes and layouts for engine tests."""
    d = tmp_path_factory.mktemp("models")
    from sightline.preprocess import Layout

    for size in (96, 128, 160, 224, 320):
        save_model(make_tiny_detector(input_size=size), d / f"tiny_{size}.onnx")
    save_model(
        make_tiny_detector(input_size=160, layout=Layout.CHANNELS_LAST),
        d / "tiny_160_nhwc.onnx",
    )
    return d
