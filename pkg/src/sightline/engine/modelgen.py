"""Generate tiny detector models for tests and demos.

The generated graph is a real serialized network (a few convolutions plus
a detection-style head) small enough to commit as a fixture and fast
enough for CPU timing sweeps. Box centers land inside the middle half of
the input and sides stay small, so decoded boxes are always valid and
in-bounds. Weights are seeded, so the same arguments reproduce the same
file byte for byte.

Usage: python -m sightline.engine.modelgen out.onnx --size 160
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from ..preprocess import Layout
from .onnx_format import (
    DT_FLOAT,
    GraphDef,
    ModelFile,
    NodeDef,
    TensorBlob,
    ValueDef,
    save_model,
)

_STRIDE = 16  # two stride-4 stages


def make_tiny_detector(
    input_size: int = 160,
    category_count: int = 3,
    layout: Layout = Layout.CHANNELS_FIRST,
    seed: int = 7,
    channels: tuple[int, int] = (8, 16),
) -> ModelFile:
    """Build a (1, 4+C, N) detector over an n x n RGB input.

    channels sets the two conv widths; wider stages make runtime
    compute-dominated, useful for scaling measurements.
    """
    n = input_size
    if n % _STRIDE:
        raise ValueError(f"input size must be a multiple of {_STRIDE}, got {n}")
    c = category_count
    grid = n // _STRIDE
    width = 4 + c
    ch1, ch2 = channels
    rng = np.random.default_rng(seed)

    def w(name: str, shape, scale=0.3) -> TensorBlob:
        return TensorBlob(name, rng.normal(0.0, scale, size=shape).astype(np.float32))

    def const(name: str, values) -> TensorBlob:
        return TensorBlob(name, np.asarray(values, dtype=np.float32))

    inits = [
        w("w1", (ch1, 3, 3, 3)),
        const("b1", np.zeros(ch1)),
        w("w2", (ch2, ch1, 3, 3)),
        const("b2", np.zeros(ch2)),
        w("w_head", (width, ch2, 1, 1), scale=0.5),
        const("b_head", np.zeros(width)),
        const("xy_scale", [n / 2.0]),
        const("xy_offset", [n / 4.0]),
        const("wh_scale", [n / 8.0]),
        const("wh_offset", [2.0]),
        TensorBlob("out_shape", np.asarray([0, width, grid * grid], dtype=np.int64)),
    ]

    nodes = []
    first = "images"
    if layout is Layout.CHANNELS_LAST:
        nodes.append(NodeDef("Transpose", ("images",), ("images_nchw",), {"perm": [0, 3, 1, 2]}))
        first = "images_nchw"
    conv = {"strides": [4, 4], "pads": [1, 1, 1, 1], "kernel_shape": [3, 3]}
    nodes += [
        NodeDef("Conv", (first, "w1", "b1"), ("c1",), dict(conv)),
        NodeDef("Relu", ("c1",), ("r1",)),
        NodeDef("Conv", ("r1", "w2", "b2"), ("c2",), dict(conv)),
        NodeDef("Relu", ("c2",), ("r2",)),
        NodeDef("Conv", ("r2", "w_head", "b_head"), ("head",), {"kernel_shape": [1, 1]}),
        NodeDef("Split", ("head",), ("xy_raw", "wh_raw", "cls_raw"), {"axis": 1, "split": [2, 2, c]}),
        NodeDef("Sigmoid", ("xy_raw",), ("xy_sig",)),
        NodeDef("Mul", ("xy_sig", "xy_scale"), ("xy_scaled",)),
        NodeDef("Add", ("xy_scaled", "xy_offset"), ("xy",)),
        NodeDef("Sigmoid", ("wh_raw",), ("wh_sig",)),
        NodeDef("Mul", ("wh_sig", "wh_scale"), ("wh_scaled",)),
        NodeDef("Add", ("wh_scaled", "wh_offset"), ("wh",)),
        NodeDef("Sigmoid", ("cls_raw",), ("cls",)),
        NodeDef("Concat", ("xy", "wh", "cls"), ("boxed",), {"axis": 1}),
        NodeDef("Reshape", ("boxed", "out_shape"), ("preds",)),
    ]

    in_dims = (1, 3, n, n) if layout is Layout.CHANNELS_FIRST else (1, n, n, 3)
    graph = GraphDef(
        name="tiny_detector",
        nodes=tuple(nodes),
        inputs=(ValueDef("images", DT_FLOAT, in_dims),),
        outputs=(ValueDef("preds", DT_FLOAT, (1, width, grid * grid)),),
        initializers=tuple(inits),
    )
    return ModelFile(graph=graph, opset_version=12, ir_version=8)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="generate a tiny detector model file")
    parser.add_argument("output", type=Path)
    parser.add_argument("--size", type=int, default=160)
    parser.add_argument("--categories", type=int, default=3)
    parser.add_argument("--layout", choices=[l.value for l in Layout], default=Layout.CHANNELS_FIRST.value)
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args(argv)
    model = make_tiny_detector(
        input_size=args.size,
        category_count=args.categories,
        layout=Layout(args.layout),
        seed=args.seed,
    )
    save_model(model, args.output)
    print(f"wrote {args.output}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
