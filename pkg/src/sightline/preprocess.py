"""Center-crop, [0, 1] normalization and tensor assembly.

The network takes a square n x n input, so a centered n x n window is cut
from the frame without any resampling; frames smaller than n are rejected
rather than upscaled so that the crop-to-frame coordinate mapping stays
exact. Odd margins round down on the left/top side.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import FrameTooSmallError, ShapeError
from .frame import ImageFrame


class Layout(enum.Enum):
    """Memory order of the spatial tensor handed to the network."""

    CHANNELS_LAST = "channels_last"   # (1, n, n, 3)
    CHANNELS_FIRST = "channels_first"  # (1, 3, n, n)


@dataclass(frozen=True)
class CropRect:
    """Square window inside a frame: left, top, side length (pixels)."""

    x: int
    y: int
    size: int

    def __post_init__(self):
        if self.x < 0 or self.y < 0 or self.size < 1:
            raise ValueError(f"invalid crop rect {self}")


@dataclass(frozen=True)
class InputTensor:
    """Single-image network input, batch extent 1, values in [0, 1]."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        v = self.values
        if v.ndim != 4 or v.shape[0] != 1:
            raise ShapeError(f"input tensor must be 4-d with batch 1, got {v.shape}")
        c_axis = 3 if self.layout is Layout.CHANNELS_LAST else 1
        if v.shape[c_axis] != 3:
            raise ShapeError(f"channel extent must be 3 on axis {c_axis}, got {v.shape}")

    @property
    def spatial_size(self) -> int:
        return self.values.shape[1] if self.layout is Layout.CHANNELS_LAST else self.values.shape[2]


def center_crop(frame: ImageFrame, n: int) -> tuple[np.ndarray, CropRect]:
    """Cut a centered n x n RGB window out of the frame.

    Returns the copied pixels and the crop rectangle in frame coordinates.
    Raises FrameTooSmallError when the frame cannot contain the window.
    """
    if n < 1:
        raise ValueError("crop size must be >= 1")
    if n > frame.width or n > frame.height:
        raise FrameTooSmallError(
            f"crop {n}x{n} does not fit inside frame {frame.width}x{frame.height}; "
            "upscaling is not supported"
        )
    x = (frame.width - n) // 2
    y = (frame.height - n) // 2
    rect = CropRect(x=x, y=y, size=n)
    return frame.pixels[y : y + n, x : x + n].copy(), rect


def normalize(image: np.ndarray) -> np.ndarray:
    """Map 8-bit channel values to [0, 1] reals (plain division by 255)."""
    return np.asarray(image, dtype=np.float32) / np.float32(255.0)


def to_tensor(image: np.ndarray, layout: Layout = Layout.CHANNELS_FIRST) -> InputTensor:
    """Pack a normalized square n x n x 3 image into a batch-1 tensor.

    channels_last keeps (y, x, c) order; channels_first permutes to
    (c, y, x). The permutation is lossless.
    """
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected (n, n, 3) image, got {img.shape}")
    if img.shape[0] != img.shape[1]:
        raise ShapeError(f"network input must be square, got {img.shape[0]}x{img.shape[1]}")
    if layout is Layout.CHANNELS_FIRST:
        values = np.ascontiguousarray(img.transpose(2, 0, 1))[np.newaxis]
    else:
        values = np.ascontiguousarray(img)[np.newaxis]
    return InputTensor(values=values, layout=layout)


def preprocess(
    frame: ImageFrame, n: int, layout: Layout = Layout.CHANNELS_FIRST
) -> tuple[InputTensor, CropRect]:
    """center_crop -> normalize -> to_tensor, in that order."""
    cropped, rect = center_crop(frame, n)
    return to_tensor(normalize(cropped), layout), rect
