from __future__ import annotations

import time

import numpy as np
import pytest

from sightline.engine import (
    BackendKind,
    MockSpec,
    create_mock_session,
    detect_layout,
    load_model,
    resolve_model_path,
)
from sightline.engine.modelgen import make_tiny_detector
from sightline.engine.onnx_format import (
    GraphDef,
    ModelFile,
    NodeDef,
    TensorBlob,
    ValueDef,
    DT_FLOAT,
    read_model,
    save_model,
    write_model,
)
from sightline.engine.reference import ReferenceExecutor
from sightline.errors import (
    BackendUnavailableError,
    ConfigurationError,
    InferenceError,
    ModelLoadError,
    ShapeError,
    UnsupportedModelError,
)
from sightline.preprocess import InputTensor, Layout

from oracles import conv2d_naive


class TestModelFormat:
    def test_write_read_round_trip(self):
        model = make_tiny_detector(96, 2)
        again = read_model(write_model(model))
        assert again.opset_version == model.opset_version
        assert len(again.graph.nodes) == len(model.graph.nodes)
        assert [n.op_type for n in again.graph.nodes] == [n.op_type for n in model.graph.nodes]
        for a, b in zip(again.graph.initializers, model.graph.initializers):
            assert a.name == b.name
            assert np.array_equal(a.array, b.array)

    def test_truncated_file_rejected(self, tmp_path):
        data = write_model(make_tiny_detector(96, 2))
        p = tmp_path / "broken.onnx"
        p.write_bytes(data[: len(data) // 2])
        with pytest.raises(ModelLoadError):
            read_model(p)

    def test_garbage_rejected(self, tmp_path):
        p = tmp_path / "garbage.onnx"
        p.write_bytes(b"not a model at all")
        with pytest.raises(ModelLoadError):
            read_model(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ModelLoadError):
            read_model(tmp_path / "nope.onnx")

    def test_negative_int_attribute_round_trip(self):
        node = NodeDef("Softmax", ("x",), ("y",), {"axis": -1})
        graph = GraphDef("g", (node,), (ValueDef("x", DT_FLOAT, (1, 4)),),
                         (ValueDef("y", DT_FLOAT, (1, 4)),), ())
        model = ModelFile(graph=graph, opset_version=13)
        again = read_model(write_model(model))
        assert again.graph.nodes[0].attrs["axis"] == -1


class TestDetectLayout:
    def test_channels_first(self):
        assert detect_layout((1, 3, 224, 224)) is Layout.CHANNELS_FIRST

    def test_channels_last(self):
        assert detect_layout((1, 224, 224, 3)) is Layout.CHANNELS_LAST

    def test_ambiguous(self):
        with pytest.raises(ConfigurationError):
            detect_layout((1, 3, 3, 3))

    def test_no_rgb_axis(self):
        with pytest.raises(UnsupportedModelError):
            detect_layout((1, 4, 224, 224))

    def test_wrong_rank(self):
        with pytest.raises(UnsupportedModelError):
            detect_layout((1, 3, 224))


class TestLoadModel:
    def test_metadata_channels_first(self, tiny_model_path):
        desc, _ = load_model(tiny_model_path)
        assert desc.layout is Layout.CHANNELS_FIRST
        assert desc.input_size == 160
        assert desc.category_count == 3
        assert desc.opset_version == 12
        assert desc.parameter_count and desc.parameter_count > 0

    def test_metadata_channels_last(self, model_dir):
        desc, _ = load_model(model_dir / "tiny_160_nhwc.onnx")
        assert desc.layout is Layout.CHANNELS_LAST
        assert desc.input_size == 160

    def test_truncated_model_file(self, tiny_model_path, tmp_path):
        p = tmp_path / "trunc.onnx"
        p.write_bytes(tiny_model_path.read_bytes()[:100])
        with pytest.raises(ModelLoadError):
            load_model(p)

    def test_accelerated_unavailable(self, tiny_model_path):
        with pytest.raises(BackendUnavailableError):
            load_model(tiny_model_path, backend=BackendKind.ACCELERATED)

    def test_dynamic_dims_need_override(self, tmp_path):
        model = make_tiny_detector(96, 2)
        graph = model.graph
        dyn_input = ValueDef("images", DT_FLOAT, (1, 3, "height", "width"))
        dyn_graph = GraphDef(graph.name, graph.nodes, (dyn_input,), graph.outputs,
                             graph.initializers)
        p = tmp_path / "dyn.onnx"
        save_model(ModelFile(graph=dyn_graph, opset_version=12), p)
        with pytest.raises(ConfigurationError):
            load_model(p)
        desc, session = load_model(p, input_size=96)
        assert desc.input_size == 96
        tensor = InputTensor(values=np.zeros((1, 3, 96, 96), dtype=np.float32),
                             layout=Layout.CHANNELS_FIRST)
        assert session.infer(tensor).values.shape[0] == 1

    def test_opset_warning(self, tmp_path):
        model = make_tiny_detector(96, 2)
        p = tmp_path / "future.onnx"
        save_model(ModelFile(graph=model.graph, opset_version=99), p)
        with pytest.warns(UserWarning, match="opset 99"):
            desc, _ = load_model(p)
        assert desc.opset_version == 99

    def test_resolve_model_path_cache(self, tiny_model_path, tmp_path, monkeypatch):
        monkeypatch.setenv("SIGHTLINE_MODEL_CACHE", str(tiny_model_path.parent))
        assert resolve_model_path("tiny_det_160.onnx") == tiny_model_path
        with pytest.raises(ModelLoadError):
            resolve_model_path("missing.onnx")


class TestInference:
    def zero_tensor(self, n=160, layout=Layout.CHANNELS_FIRST, batch=1):
        shape = (batch, 3, n, n) if layout is Layout.CHANNELS_FIRST else (batch, n, n, 3)
        values = np.zeros(shape, dtype=np.float32)
        if batch == 1:
            return InputTensor(values=values, layout=layout)
        from sightline.tiler import BatchTensor

        return BatchTensor(values=values, layout=layout)

    def test_mock_canned_output(self):
        spec = MockSpec(boxes=((80, 80, 20, 10, 1, 0.9),), category_count=3, candidate_count=5)
        _, session = create_mock_session(spec)
        raw = session.infer(self.zero_tensor())
        assert raw.values.shape == (1, 7, 5)
        assert raw.values[0, 0, 0] == 80
        assert raw.values[0, 5, 0] == pytest.approx(0.9)

    def test_batch_identical_slices_identical_outputs(self, tiny_model_path):
        _, session = load_model(tiny_model_path)
        batch = self.zero_tensor(batch=2)
        raw = session.infer(batch)
        assert raw.values.shape[0] == 2
        assert np.array_equal(raw.values[0], raw.values[1])

    def test_shape_mismatch(self, tiny_model_path):
        _, session = load_model(tiny_model_path)
        with pytest.raises(ShapeError):
            session.infer(self.zero_tensor(n=96))

    def test_layout_mismatch(self):
        _, session = create_mock_session(MockSpec(), layout=Layout.CHANNELS_FIRST)
        with pytest.raises(ShapeError):
            session.infer(self.zero_tensor(layout=Layout.CHANNELS_LAST))

    def test_deterministic_output(self, tiny_model_path):
        _, session = load_model(tiny_model_path)
        rng = np.random.default_rng(0)
        values = rng.random((1, 3, 160, 160), dtype=np.float32)
        t = InputTensor(values=values, layout=Layout.CHANNELS_FIRST)
        assert np.array_equal(session.infer(t).values, session.infer(t).values)

    def test_nhwc_model_agrees_with_nchw(self, model_dir, tiny_model_path):
        """Same weights, transposed input convention: identical predictions."""
        _, nchw = load_model(tiny_model_path)
        _, nhwc = load_model(model_dir / "tiny_160_nhwc.onnx")
        rng = np.random.default_rng(3)
        img = rng.random((160, 160, 3), dtype=np.float32)
        t_first = InputTensor(values=np.ascontiguousarray(img.transpose(2, 0, 1))[None],
                              layout=Layout.CHANNELS_FIRST)
        t_last = InputTensor(values=img[None], layout=Layout.CHANNELS_LAST)
        out_a = nchw.infer(t_first).values
        out_b = nhwc.infer(t_last).values
        assert np.allclose(out_a, out_b, atol=1e-5)

    def test_warm_up_counts_calls(self):
        _, session = create_mock_session(MockSpec())
        session.warm_up(10)
        assert session.backend.call_count == 10

    def test_warm_up_zero_is_noop(self):
        _, session = create_mock_session(MockSpec())
        session.warm_up(0)
        assert session.backend.call_count == 0

    def test_mock_wall_time_bounds(self):
        delay = 20.0
        _, session = create_mock_session(MockSpec(fixed_delay_ms=delay))
        t = self.zero_tensor()
        start = time.perf_counter_ns()
        session.infer(t)
        elapsed_ms = (time.perf_counter_ns() - start) / 1e6
        assert delay <= elapsed_ms <= delay + 10.0

    def test_mock_virtual_clock_advances_exactly(self):
        _, session = create_mock_session(MockSpec(fixed_delay_ms=2.5))
        t = self.zero_tensor()
        session.infer(t)
        session.infer(t)
        assert session.backend.clock.now_ns() == int(5.0 * 1e6)

    def test_mock_per_pixel_delay_scales_with_batch(self):
        spec = MockSpec(per_pixel_delay_ms=0.00001)
        _, session = create_mock_session(spec, input_size=32)
        session.infer(self.zero_tensor(n=32))
        one = session.backend.clock.now_ns()
        session.infer(self.zero_tensor(n=32, batch=2))
        assert session.backend.clock.now_ns() - one == 2 * one


class TestReferenceExecutorOps:
    def test_conv_matches_naive_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(1, 3, 12, 12)).astype(np.float32)
        w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        b = rng.normal(size=4).astype(np.float32)
        node = NodeDef("Conv", ("x", "w", "b"), ("y",),
                       {"strides": [2, 2], "pads": [1, 1, 1, 1], "kernel_shape": [3, 3]})
        graph = GraphDef(
            "g", (node,),
            (ValueDef("x", DT_FLOAT, (1, 3, 12, 12)),),
            (ValueDef("y", DT_FLOAT, (1, 4, 6, 6)),),
            (TensorBlob("w", w), TensorBlob("b", b)),
        )
        ex = ReferenceExecutor(ModelFile(graph=graph, opset_version=12))
        got = ex.run({"x": x})[0]
        expected = conv2d_naive(x.astype(np.float64), w.astype(np.float64), b, 2, 1)
        assert np.allclose(got, expected, atol=1e-4)

    def test_unsupported_op_rejected_at_load(self):
        node = NodeDef("FancyNewOp", ("x",), ("y",))
        graph = GraphDef("g", (node,), (ValueDef("x", DT_FLOAT, (1,)),),
                         (ValueDef("y", DT_FLOAT, (1,)),), ())
        with pytest.raises(UnsupportedModelError, match="FancyNewOp"):
            ReferenceExecutor(ModelFile(graph=graph, opset_version=12))

    @pytest.mark.parametrize("op,arrays,attrs,expected", [
        ("Sigmoid", [np.array([0.0], dtype=np.float32)], {}, np.array([0.5])),
        ("Relu", [np.array([-1.0, 2.0], dtype=np.float32)], {}, np.array([0.0, 2.0])),
        ("Add", [np.array([1.0]), np.array([2.0])], {}, np.array([3.0])),
        ("Mul", [np.array([3.0]), np.array([2.0])], {}, np.array([6.0])),
        ("Concat", [np.array([[1.0]]), np.array([[2.0]])], {"axis": 1}, np.array([[1.0, 2.0]])),
        ("Transpose", [np.arange(6.0).reshape(2, 3)], {"perm": [1, 0]},
         np.arange(6.0).reshape(2, 3).T),
        ("Softmax", [np.array([[1.0, 1.0]], dtype=np.float32)], {"axis": -1},
         np.array([[0.5, 0.5]])),
    ])
    def test_elementwise_ops(self, op, arrays, attrs, expected):
        names = [f"in{i}" for i in range(len(arrays))]
        node = NodeDef(op, tuple(names), ("y",), attrs)
        graph = GraphDef(
            "g", (node,),
            tuple(ValueDef(n, DT_FLOAT, a.shape) for n, a in zip(names, arrays)),
            (ValueDef("y", DT_FLOAT, expected.shape),),
            (),
        )
        ex = ReferenceExecutor(ModelFile(graph=graph, opset_version=13))
        got = ex.run({n: a for n, a in zip(names, arrays)})[0]
        assert np.allclose(got, expected, atol=1e-6)

    def test_maxpool(self):
        x = np.arange(16.0, dtype=np.float32).reshape(1, 1, 4, 4)
        node = NodeDef("MaxPool", ("x",), ("y",), {"kernel_shape": [2, 2], "strides": [2, 2]})
        graph = GraphDef("g", (node,), (ValueDef("x", DT_FLOAT, x.shape),),
                         (ValueDef("y", DT_FLOAT, (1, 1, 2, 2)),), ())
        ex = ReferenceExecutor(ModelFile(graph=graph, opset_version=12))
        got = ex.run({"x": x})[0]
        assert np.array_equal(got[0, 0], np.array([[5.0, 7.0], [13.0, 15.0]]))

    def test_resize_nearest_x2(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32).reshape(1, 1, 2, 2)
        scales = np.array([1.0, 1.0, 2.0, 2.0], dtype=np.float32)
        node = NodeDef("Resize", ("x", "", "scales"), ("y",),
                       {"mode": "nearest", "coordinate_transformation_mode": "asymmetric",
                        "nearest_mode": "floor"})
        graph = GraphDef("g", (node,), (ValueDef("x", DT_FLOAT, x.shape),),
                         (ValueDef("y", DT_FLOAT, (1, 1, 4, 4)),),
                         (TensorBlob("scales", scales),))
        ex = ReferenceExecutor(ModelFile(graph=graph, opset_version=13))
        got = ex.run({"x": x})[0]
        assert np.array_equal(got[0, 0], np.repeat(np.repeat(x[0, 0], 2, 0), 2, 1))

    def test_concurrent_infer_rejected(self, tiny_model_path):
        import threading

        _, session = create_mock_session(MockSpec(fixed_delay_ms=50.0))
        t = InputTensor(values=np.zeros((1, 3, 160, 160), dtype=np.float32),
                        layout=Layout.CHANNELS_FIRST)
        errors = []

        def run():
            try:
                session.infer(t)
            except InferenceError as exc:
                errors.append(exc)

        threads = [threading.Thread(target=run) for _ in range(2)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        assert len(errors) == 1

    def test_resize_bilinear_half_pixel(self):
        x = np.array([[0.0, 2.0], [4.0, 6.0]], dtype=np.float32).reshape(1, 1, 2, 2)
        scales = np.array([1.0, 1.0, 2.0, 2.0], dtype=np.float32)
        node = NodeDef("Resize", ("x", "", "scales"), ("y",),
                       {"mode": "linear", "coordinate_transformation_mode": "half_pixel"})
        graph = GraphDef("g", (node,), (ValueDef("x", DT_FLOAT, x.shape),),
                         (ValueDef("y", DT_FLOAT, (1, 1, 4, 4)),),
                         (TensorBlob("scales", scales),))
        ex = ReferenceExecutor(ModelFile(graph=graph, opset_version=13))
        got = ex.run({"x": x})[0][0, 0]
        # interior points are true bilinear interpolation; edges clamp
        expected = np.array([
            [0.0, 0.5, 1.5, 2.0],
            [1.0, 1.5, 2.5, 3.0],
            [3.0, 3.5, 4.5, 5.0],
            [4.0, 4.5, 5.5, 6.0],
        ], dtype=np.float32)
        assert np.allclose(got, expected, atol=1e-6)

    def test_slice_with_negative_and_huge_bounds(self):
        x = np.arange(10.0, dtype=np.float32)
        big = np.iinfo(np.int64).max
        node = NodeDef("Slice", ("x", "starts", "ends", "axes", "steps"), ("y",))
        graph = GraphDef(
            "g", (node,), (ValueDef("x", DT_FLOAT, (10,)),),
            (ValueDef("y", DT_FLOAT, (8,)),),
            (TensorBlob("starts", np.array([2], np.int64)),
             TensorBlob("ends", np.array([big], np.int64)),
             TensorBlob("axes", np.array([0], np.int64)),
             TensorBlob("steps", np.array([1], np.int64))),
        )
        ex = ReferenceExecutor(ModelFile(graph=graph, opset_version=13))
        assert np.array_equal(ex.run({"x": x})[0], x[2:])

    def test_split_equal_parts_from_output_count(self):
        x = np.arange(12.0, dtype=np.float32).reshape(1, 12)
        node = NodeDef("Split", ("x",), ("a", "b", "c"), {"axis": 1})
        graph = GraphDef("g", (node,), (ValueDef("x", DT_FLOAT, (1, 12)),),
                         tuple(ValueDef(n, DT_FLOAT, (1, 4)) for n in ("a", "b", "c")), ())
        ex = ReferenceExecutor(ModelFile(graph=graph, opset_version=13))
        outs = ex.run({"x": x})
        assert [o.shape for o in outs] == [(1, 4)] * 3
        assert np.array_equal(np.concatenate(outs, axis=1), x)
