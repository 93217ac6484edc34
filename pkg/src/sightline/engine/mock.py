"""Deterministic mock inference backend.

Stands in for a real model during protocol and plumbing tests: identical
inputs always produce identical outputs, the per-call delay is fully
configured (fixed and/or proportional to the number of input pixels), and
every call both really sleeps and advances a shared VirtualClock by the
exact configured amount so simulated timing reports are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from ..clocks import VirtualClock, precise_sleep_ms
from ..preprocess import Layout

CannedBox = tuple[float, float, float, float, int, float]  # cx, cy, w, h, category, score


@dataclass(frozen=True)
class MockSpec:
    """Fully determines the mock's outputs and simulated cost.

    boxes places canned candidates (center-format, category, score) in the
    first output columns; output_rule, when given, instead computes the
    (4+C, N) column block from each input slice. stage_delays_ms configures
    simulated non-inference pipeline stages built around this backend.
    """

    fixed_delay_ms: float = 0.0
    per_pixel_delay_ms: float = 0.0
    stage_delays_ms: Mapping[str, float] = field(default_factory=dict)
    boxes: Sequence[CannedBox] = ()
    output_rule: Callable[[np.ndarray], np.ndarray] | None = None
    category_count: int = 3
    candidate_count: int = 100

    def __post_init__(self):
        if self.fixed_delay_ms < 0 or self.per_pixel_delay_ms < 0:
            raise ValueError("mock delays must be >= 0")
        if self.category_count < 1 or self.candidate_count < 1:
            raise ValueError("mock output extents must be >= 1")
        for cx, cy, w, h, cat, score in self.boxes:
            if not 0 <= cat < self.category_count:
                raise ValueError(f"canned box category {cat} out of range")
            if not 0.0 <= score <= 1.0:
                raise ValueError(f"canned box score {score} out of range")


class MockBackend:
    """Engine backend producing canned or rule-driven outputs."""

    name = "mock"

    def __init__(self, spec: MockSpec, input_size: int, layout: Layout):
        self.spec = spec
        self.input_size = input_size
        self.layout = layout
        self.clock = VirtualClock()
        self.call_count = 0

    def _canned_columns(self) -> np.ndarray:
        width = 4 + self.spec.category_count
        cols = np.zeros((width, self.spec.candidate_count), dtype=np.float32)
        for i, (cx, cy, w, h, cat, score) in enumerate(self.spec.boxes):
            if i >= self.spec.candidate_count:
                break
            cols[0:4, i] = (cx, cy, w, h)
            cols[4 + cat, i] = score
        return cols

    def run(self, values: np.ndarray) -> np.ndarray:
        batch = values.shape[0]
        if self.layout is Layout.CHANNELS_FIRST:
            pixels = values.shape[2] * values.shape[3]
        else:
            pixels = values.shape[1] * values.shape[2]
        delay = self.spec.fixed_delay_ms + self.spec.per_pixel_delay_ms * pixels * batch
        precise_sleep_ms(delay)
        self.clock.advance_ms(delay)
        self.call_count += 1
        if self.spec.output_rule is not None:
            slices = [np.asarray(self.spec.output_rule(values[i]), dtype=np.float32) for i in range(batch)]
            return np.stack(slices)
        return np.repeat(self._canned_columns()[np.newaxis], batch, axis=0)
