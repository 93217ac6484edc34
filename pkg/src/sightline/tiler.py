"""Square tiling of a non-square field of view, batched inference support.

A wide region is split into square tiles processed as one batch; per-tile
detections are shifted by their tile origin and deduplicated with a final
cross-tile NMS pass, so objects keep their natural pixel size instead of
being squeezed through a rectangular resize.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decode import Detection, DecodeConfig, nms, offset_detection
from .errors import PlanError, ShapeError
from .preprocess import Layout

@dataclass(frozen=True)
class TilePlan:
    """Row-major list of square tile origins covering a region."""

    tile_size: int
    origins: tuple[tuple[int, int], ...]
    region: tuple[int, int]  # (width, height)

    def __post_init__(self):
        w, h = self.region
        for x, y in self.origins:
            if x < 0 or y < 0 or x + self.tile_size > w or y + self.tile_size > h:
                raise PlanError(f"tile at ({x}, {y}) exceeds region {w}x{h}")

    @property
    def tile_count(self) -> int:
        return len(self.origins)


@dataclass(frozen=True)
class BatchTensor:
    """Stacked per-tile tensors; slice i corresponds to plan origin i."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        v = self.values
        if v.ndim != 4 or v.shape[0] < 1:
            raise ShapeError(f"batch tensor must be 4-d, got {v.shape}")
        c_axis = 3 if self.layout is Layout.CHANNELS_LAST else 1
        if v.shape[c_axis] != 3:
            raise ShapeError(f"channel extent must be 3 on axis {c_axis}, got {v.shape}")

    @property
    def batch(self) -> int:
        return self.values.shape[0]

    @property
    def spatial_size(self) -> int:
        return self.values.shape[1] if self.layout is Layout.CHANNELS_LAST else self.values.shape[2]


def _axis_starts(extent: int, tile: int, stride: int) -> list[int]:
    starts = []
    x = 0
    while True:
        if x + tile >= extent:
            starts.append(extent - tile)
            break
        starts.append(x)
        x += stride
    return starts


def plan_tiles(width: int, height: int, tile_size: int, overlap: int = 0) -> TilePlan:
    """Plan tile origins at multiples of (tile_size - overlap).

    The final row/column is shifted left/up so the last tile ends exactly at
    the region edge; tiles there may overlap more than requested. The union
    of planned tiles always covers the whole region.
    """
    if tile_size > min(width, height):
        raise PlanError(
            f"tile size {tile_size} exceeds region min dimension {min(width, height)}"
        )
    if not 0 <= overlap < tile_size:
        raise PlanError(f"overlap must be in [0, tile_size), got {overlap}")
    stride = tile_size - overlap
    xs = _axis_starts(width, tile_size, stride)
    ys = _axis_starts(height, tile_size, stride)
    origins = tuple((x, y) for y in ys for x in xs)
    return TilePlan(tile_size=tile_size, origins=origins, region=(width, height))


def assemble_batch(image: np.ndarray, plan: TilePlan, layout: Layout = Layout.CHANNELS_FIRST) -> BatchTensor:
    """Stack normalized tile slices into one batch tensor, in plan order.

    image is the normalized (height, width, 3) region the plan was built
    for; each slice is packed exactly like the single-image tensor path.
    """
    img = np.asarray(image, dtype=np.float32)
    w, h = plan.region
    if img.shape != (h, w, 3):
        raise ShapeError(f"image shape {img.shape} does not match plan region {w}x{h}")
    t = plan.tile_size
    slices = [img[y : y + t, x : x + t] for x, y in plan.origins]
    stacked = np.stack(slices)
    if layout is Layout.CHANNELS_FIRST:
        stacked = np.ascontiguousarray(stacked.transpose(0, 3, 1, 2))
    return BatchTensor(values=stacked, layout=layout)


def merge_detections(
    per_tile: list[list[Detection]], plan: TilePlan, config: DecodeConfig
) -> list[Detection]:
    """Shift per-tile detections by their origins and dedupe across tiles.

    The cross-tile pass reuses the same greedy NMS (and the same config) as
    single-image decoding, so objects straddling a tile border keep exactly
    one box. Output is sorted by descending score.
    """
    if len(per_tile) != plan.tile_count:
        raise ShapeError(
            f"got detections for {len(per_tile)} tiles, plan has {plan.tile_count}"
        )
    shifted: list[Detection] = []
    for dets, (ox, oy) in zip(per_tile, plan.origins):
        shifted.extend(offset_detection(d, ox, oy) for d in dets)
    return nms(shifted, config.nms_iou_threshold, config.class_aware_nms)
