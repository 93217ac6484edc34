"""Reference CPU executor for loaded model graphs.

Runs the graph with plain numpy, node by node in file order (serialized
graphs are topologically sorted). Covers the operator set found in
convolutional detector exports; anything else raises
UnsupportedModelError up front at load time so failures are immediate and
explicit. Deterministic: the same input always produces the same output.
"""

from __future__ import annotations

import numpy as np

from ..errors import InferenceError, ShapeError, UnsupportedModelError
from .onnx_format import DT_FLOAT, GraphDef, ModelFile, NodeDef, TensorBlob, _DT_TO_NP

# Highest opset whose semantics the handlers below were written against.
SUPPORTED_OPSET = 17


def _ints(node: NodeDef, key: str, default=None):
    v = node.attrs.get(key, default)
    if v is None:
        return None
    return [int(x) for x in v]


def _int(node: NodeDef, key: str, default: int) -> int:
    return int(node.attrs.get(key, default))


def _float(node: NodeDef, key: str, default: float) -> float:
    return float(node.attrs.get(key, default))


def _conv_pads(node: NodeDef, in_h: int, in_w: int, ek_h: int, ek_w: int, s_h: int, s_w: int):
    auto = node.attrs.get("auto_pad", "NOTSET")
    if isinstance(auto, bytes):
        auto = auto.decode()
    if auto in ("NOTSET", ""):
        pads = _ints(node, "pads", [0, 0, 0, 0])
        return pads[0], pads[1], pads[2], pads[3]
    if auto == "VALID":
        return 0, 0, 0, 0
    if auto in ("SAME_UPPER", "SAME_LOWER"):
        out_h = -(-in_h // s_h)
        out_w = -(-in_w // s_w)
        tot_h = max(0, (out_h - 1) * s_h + ek_h - in_h)
        tot_w = max(0, (out_w - 1) * s_w + ek_w - in_w)
        if auto == "SAME_UPPER":
            return tot_h // 2, tot_w // 2, tot_h - tot_h // 2, tot_w - tot_w // 2
        return tot_h - tot_h // 2, tot_w - tot_w // 2, tot_h // 2, tot_w // 2
    raise UnsupportedModelError(f"auto_pad mode {auto} is not supported")


def _windows(x: np.ndarray, ek_h: int, ek_w: int, s_h: int, s_w: int, d_h: int, d_w: int):
    win = np.lib.stride_tricks.sliding_window_view(x, (ek_h, ek_w), axis=(2, 3))
    return win[:, :, ::s_h, ::s_w, ::d_h, ::d_w]


def _op_conv(node: NodeDef, x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None):
    if x.ndim != 4 or w.ndim != 4:
        raise UnsupportedModelError("only 2-d convolutions are supported")
    groups = _int(node, "group", 1)
    s_h, s_w = _ints(node, "strides", [1, 1])
    d_h, d_w = _ints(node, "dilations", [1, 1])
    k_h, k_w = _ints(node, "kernel_shape", list(w.shape[2:]))
    ek_h, ek_w = (k_h - 1) * d_h + 1, (k_w - 1) * d_w + 1
    pt, pl, pb, pr = _conv_pads(node, x.shape[2], x.shape[3], ek_h, ek_w, s_h, s_w)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    win = _windows(xp, ek_h, ek_w, s_h, s_w, d_h, d_w)  # (n, cin, ho, wo, kh, kw)
    cin_g = w.shape[1]
    m_g = w.shape[0] // groups
    outs = []
    for g in range(groups):
        wg = w[g * m_g : (g + 1) * m_g]
        xg = win[:, g * cin_g : (g + 1) * cin_g]
        og = np.tensordot(xg, wg, axes=([1, 4, 5], [1, 2, 3]))  # (n, ho, wo, m_g)
        outs.append(og)
    out = np.concatenate(outs, axis=3).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out, dtype=np.float32)
    if b is not None:
        out += b.reshape(1, -1, 1, 1)
    return out


def _op_maxpool(node: NodeDef, x: np.ndarray):
    k_h, k_w = _ints(node, "kernel_shape")
    s_h, s_w = _ints(node, "strides", [1, 1])
    d_h, d_w = _ints(node, "dilations", [1, 1])
    ek_h, ek_w = (k_h - 1) * d_h + 1, (k_w - 1) * d_w + 1
    pt, pl, pb, pr = _conv_pads(node, x.shape[2], x.shape[3], ek_h, ek_w, s_h, s_w)
    if _int(node, "ceil_mode", 0):
        # extend end padding so the last partial window still fits
        rem_h = (x.shape[2] + pt + pb - ek_h) % s_h
        rem_w = (x.shape[3] + pl + pr - ek_w) % s_w
        pb += (s_h - rem_h) % s_h
        pr += (s_w - rem_w) % s_w
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)), constant_values=-np.inf)
    win = _windows(xp, ek_h, ek_w, s_h, s_w, d_h, d_w)
    return np.ascontiguousarray(win.max(axis=(4, 5)), dtype=x.dtype)


def _op_resize(node: NodeDef, x: np.ndarray, *rest: np.ndarray):
    mode = node.attrs.get("mode", "nearest")
    if isinstance(mode, bytes):
        mode = mode.decode()
    coord = node.attrs.get("coordinate_transformation_mode", "half_pixel")
    if isinstance(coord, bytes):
        coord = coord.decode()
    nearest_mode = node.attrs.get("nearest_mode", "round_prefer_floor")
    if isinstance(nearest_mode, bytes):
        nearest_mode = nearest_mode.decode()
    scales = sizes = None
    if len(rest) >= 2 and rest[1] is not None and rest[1].size:
        scales = rest[1].astype(np.float64)
    if len(rest) >= 3 and rest[2] is not None and rest[2].size:
        sizes = rest[2].astype(np.int64)
    if scales is None and sizes is None and rest and rest[0] is not None and rest[0].size:
        scales = rest[0].astype(np.float64)  # opset 10 signature (X, scales)
    if sizes is not None:
        out_shape = [int(v) for v in sizes]
        scales = np.array([o / i for o, i in zip(out_shape, x.shape)])
    else:
        out_shape = [int(np.floor(i * s)) for i, s in zip(x.shape, scales)]
    if x.ndim != 4 or out_shape[0] != x.shape[0] or out_shape[1] != x.shape[1]:
        raise UnsupportedModelError("resize is only supported on the spatial axes of 4-d tensors")

    def src_positions(out_len: int, in_len: int, scale: float) -> np.ndarray:
        i = np.arange(out_len, dtype=np.float64)
        if coord == "asymmetric":
            return i / scale
        if coord in ("half_pixel", "pytorch_half_pixel"):
            pos = (i + 0.5) / scale - 0.5
            if coord == "pytorch_half_pixel" and out_len <= 1:
                pos = np.zeros_like(pos)
            return pos
        if coord == "align_corners":
            if out_len == 1:
                return np.zeros_like(i)
            return i * (in_len - 1) / (out_len - 1)
        raise UnsupportedModelError(f"resize coordinate mode {coord} is not supported")

    if mode == "nearest":
        def pick(pos: np.ndarray, in_len: int) -> np.ndarray:
            if nearest_mode == "floor":
                idx = np.floor(pos)
            elif nearest_mode == "ceil":
                idx = np.ceil(pos)
            elif nearest_mode == "round_prefer_ceil":
                idx = np.floor(pos + 0.5)
            else:  # round_prefer_floor
                idx = np.ceil(pos - 0.5)
            return np.clip(idx, 0, in_len - 1).astype(np.int64)

        ih = pick(src_positions(out_shape[2], x.shape[2], scales[2]), x.shape[2])
        iw = pick(src_positions(out_shape[3], x.shape[3], scales[3]), x.shape[3])
        return np.ascontiguousarray(x[:, :, ih[:, None], iw[None, :]])
    if mode == "linear":
        ph = src_positions(out_shape[2], x.shape[2], scales[2])
        pw = src_positions(out_shape[3], x.shape[3], scales[3])
        h0 = np.clip(np.floor(ph).astype(np.int64), 0, x.shape[2] - 1)
        h1 = np.clip(h0 + 1, 0, x.shape[2] - 1)
        w0 = np.clip(np.floor(pw).astype(np.int64), 0, x.shape[3] - 1)
        w1 = np.clip(w0 + 1, 0, x.shape[3] - 1)
        fh = np.clip(ph - h0, 0.0, 1.0).reshape(1, 1, -1, 1)
        fw = np.clip(pw - w0, 0.0, 1.0).reshape(1, 1, 1, -1)
        g0 = x[:, :, :, w0] * (1 - fw) + x[:, :, :, w1] * fw  # (n, c, h, wo)
        out = g0[:, :, h0, :] * (1 - fh) + g0[:, :, h1, :] * fh
        return np.ascontiguousarray(out.astype(x.dtype))
    raise UnsupportedModelError(f"resize mode {mode} is not supported")


def _axes_arg(node: NodeDef, inputs: list, index: int, key: str = "axes"):
    axes = _ints(node, key)
    if axes is None and len(inputs) > index and inputs[index] is not None and inputs[index].size:
        axes = [int(v) for v in inputs[index]]
    return axes


def _op_slice(node: NodeDef, inputs: list):
    x = inputs[0]
    if "starts" in node.attrs:  # opset < 10 keeps slicing in attributes
        starts = _ints(node, "starts")
        ends = _ints(node, "ends")
        axes = _ints(node, "axes", list(range(len(starts))))
        steps = [1] * len(starts)
    else:
        starts = [int(v) for v in inputs[1]]
        ends = [int(v) for v in inputs[2]]
        axes = [int(v) for v in inputs[3]] if len(inputs) > 3 and inputs[3] is not None else list(range(len(starts)))
        steps = [int(v) for v in inputs[4]] if len(inputs) > 4 and inputs[4] is not None else [1] * len(starts)
    sl = [slice(None)] * x.ndim
    for s, e, a, st in zip(starts, ends, axes, steps):
        a = a % x.ndim
        sl[a] = slice(s, e, st)
    return np.ascontiguousarray(x[tuple(sl)])


def _op_split(node: NodeDef, inputs: list, n_outputs: int):
    x = inputs[0]
    axis = _int(node, "axis", 0) % x.ndim
    split = _ints(node, "split")
    if split is None and len(inputs) > 1 and inputs[1] is not None and inputs[1].size:
        split = [int(v) for v in inputs[1]]
    if split is None:
        if x.shape[axis] % n_outputs:
            raise ShapeError(f"cannot split extent {x.shape[axis]} into {n_outputs} equal parts")
        split = [x.shape[axis] // n_outputs] * n_outputs
    offsets = np.cumsum([0] + split)
    return tuple(
        np.ascontiguousarray(np.take(x, range(offsets[i], offsets[i + 1]), axis=axis))
        for i in range(len(split))
    )


def _op_gemm(node: NodeDef, a: np.ndarray, b: np.ndarray, c: np.ndarray | None = None):
    alpha = _float(node, "alpha", 1.0)
    beta = _float(node, "beta", 1.0)
    if _int(node, "transA", 0):
        a = a.T
    if _int(node, "transB", 0):
        b = b.T
    out = alpha * (a @ b)
    if c is not None:
        out = out + beta * c
    return out.astype(np.float32)


def _op_reduce(kind: str, node: NodeDef, inputs: list):
    x = inputs[0]
    axes = _axes_arg(node, inputs, 1)
    keep = bool(_int(node, "keepdims", 1))
    ax = tuple(a % x.ndim for a in axes) if axes else None
    fn = {"mean": np.mean, "sum": np.sum, "max": np.max, "min": np.min}[kind]
    return fn(x, axis=ax, keepdims=keep).astype(x.dtype)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return (1.0 / (1.0 + np.exp(-x.astype(np.float32)))).astype(np.float32)


class ReferenceExecutor:
    """Executes a parsed model graph on the CPU with numpy."""

    def __init__(self, model: ModelFile):
        self.model = model
        self.graph: GraphDef = model.graph
        self.constants: dict[str, np.ndarray] = {
            t.name: t.array for t in self.graph.initializers
        }
        init_names = set(self.constants)
        self.input_names = [v.name for v in self.graph.inputs if v.name not in init_names]
        self.output_names = [v.name for v in self.graph.outputs]
        unsupported = sorted(
            {n.op_type for n in self.graph.nodes if n.op_type not in _HANDLERS}
        )
        if unsupported:
            raise UnsupportedModelError(
                "model uses operators outside the reference backend's support: "
                + ", ".join(unsupported)
            )

    def run(self, feeds: dict[str, np.ndarray]) -> list[np.ndarray]:
        missing = [n for n in self.input_names if n not in feeds]
        if missing:
            raise InferenceError(f"missing graph inputs: {missing}")
        values: dict[str, np.ndarray] = dict(self.constants)
        values.update({k: np.asarray(v) for k, v in feeds.items()})
        for node in self.graph.nodes:
            args = []
            for name in node.inputs:
                if not name:
                    args.append(None)
                elif name in values:
                    args.append(values[name])
                else:
                    raise InferenceError(
                        f"node {node.op_type} consumes unknown value '{name}'"
                    )
            try:
                result = _HANDLERS[node.op_type](node, args, len(node.outputs))
            except (UnsupportedModelError, ShapeError):
                raise
            except Exception as exc:
                raise InferenceError(
                    f"operator {node.op_type} ({node.name or 'unnamed'}) failed: {exc}"
                ) from exc
            if not isinstance(result, tuple):
                result = (result,)
            for name, value in zip(node.outputs, result):
                if name:
                    values[name] = value
        try:
            return [values[name] for name in self.output_names]
        except KeyError as exc:
            raise InferenceError(f"graph output {exc} was never produced") from exc


def _h(fn):
    return lambda node, args, n_out: fn(node, *args)


def _hx(fn):
    return lambda node, args, n_out: fn(node, args)


def _elem(fn):
    return lambda node, args, n_out: fn(*args)


_HANDLERS = {
    "Conv": _h(_op_conv),
    "MaxPool": _h(_op_maxpool),
    "Resize": _h(_op_resize),
    "Slice": _hx(_op_slice),
    "Split": lambda node, args, n_out: _op_split(node, args, n_out),
    "Gemm": _h(_op_gemm),
    "MatMul": _elem(lambda a, b: (a @ b).astype(np.float32)),
    "Add": _elem(lambda a, b: a + b),
    "Sub": _elem(lambda a, b: a - b),
    "Mul": _elem(lambda a, b: a * b),
    "Div": _elem(lambda a, b: a / b),
    "Pow": _elem(lambda a, b: np.power(a, b)),
    "Min": _elem(lambda *xs: np.minimum.reduce(xs)),
    "Max": _elem(lambda *xs: np.maximum.reduce(xs)),
    "Neg": _elem(lambda a: -a),
    "Exp": _elem(lambda a: np.exp(a).astype(np.float32)),
    "Sqrt": _elem(lambda a: np.sqrt(a).astype(np.float32)),
    "Floor": _elem(np.floor),
    "Tanh": _elem(lambda a: np.tanh(a).astype(np.float32)),
    "Sigmoid": _elem(_sigmoid),
    "Relu": _elem(lambda a: np.maximum(a, 0)),
    "LeakyRelu": lambda node, args, n_out: np.where(
        args[0] > 0, args[0], _float(node, "alpha", 0.01) * args[0]
    ).astype(np.float32),
    "Clip": lambda node, args, n_out: np.clip(
        args[0],
        args[1] if len(args) > 1 and args[1] is not None else _float(node, "min", -np.inf),
        args[2] if len(args) > 2 and args[2] is not None else _float(node, "max", np.inf),
    ),
    "Softmax": lambda node, args, n_out: _softmax(args[0], _int(node, "axis", -1)),
    "Concat": lambda node, args, n_out: np.ascontiguousarray(
        np.concatenate(args, axis=_int(node, "axis", 0))
    ),
    "Reshape": lambda node, args, n_out: _reshape(args[0], args[1], _int(node, "allowzero", 0)),
    "Transpose": lambda node, args, n_out: np.ascontiguousarray(
        np.transpose(args[0], _ints(node, "perm", list(range(args[0].ndim - 1, -1, -1))))
    ),
    "Flatten": lambda node, args, n_out: _flatten(args[0], _int(node, "axis", 1)),
    "Squeeze": lambda node, args, n_out: _squeeze(args[0], _axes_arg(node, args, 1)),
    "Unsqueeze": lambda node, args, n_out: _unsqueeze(args[0], _axes_arg(node, args, 1)),
    "Shape": _elem(lambda a: np.asarray(a.shape, dtype=np.int64)),
    "Gather": lambda node, args, n_out: np.take(
        args[0], args[1].astype(np.int64), axis=_int(node, "axis", 0)
    ),
    "Expand": _elem(lambda a, s: np.broadcast_to(
        a, np.broadcast_shapes(a.shape, tuple(int(v) for v in s))
    ).copy()),
    "Where": _elem(lambda c, a, b: np.where(c, a, b)),
    "Equal": _elem(lambda a, b: a == b),
    "Cast": lambda node, args, n_out: args[0].astype(_DT_TO_NP[_int(node, "to", DT_FLOAT)]),
    "Identity": _elem(lambda a: a),
    "Constant": lambda node, args, n_out: _constant(node),
    "ConstantOfShape": lambda node, args, n_out: _constant_of_shape(node, args[0]),
    "GlobalAveragePool": _elem(lambda a: a.mean(axis=(2, 3), keepdims=True).astype(a.dtype)),
    "ReduceMean": lambda node, args, n_out: _op_reduce("mean", node, args),
    "ReduceSum": lambda node, args, n_out: _op_reduce("sum", node, args),
    "ReduceMax": lambda node, args, n_out: _op_reduce("max", node, args),
    "ReduceMin": lambda node, args, n_out: _op_reduce("min", node, args),
    "ArgMax": lambda node, args, n_out: _argmax(
        args[0], _int(node, "axis", 0), _int(node, "keepdims", 1)
    ),
    "Pad": lambda node, args, n_out: _pad(node, args),
    "BatchNormalization": lambda node, args, n_out: _batchnorm(node, args),
}


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    return (e / e.sum(axis=axis, keepdims=True)).astype(np.float32)


def _reshape(x: np.ndarray, shape: np.ndarray, allowzero: int) -> np.ndarray:
    target = [int(v) for v in shape]
    if not allowzero:
        target = [x.shape[i] if v == 0 else v for i, v in enumerate(target)]
    return np.ascontiguousarray(x.reshape(target))


def _flatten(x: np.ndarray, axis: int) -> np.ndarray:
    axis = axis % (x.ndim + 1)
    lead = int(np.prod(x.shape[:axis])) if axis else 1
    return x.reshape(lead, -1)


def _squeeze(x: np.ndarray, axes):
    if axes is None:
        return np.squeeze(x)
    return np.squeeze(x, axis=tuple(a % x.ndim for a in axes))


def _unsqueeze(x: np.ndarray, axes):
    out = x
    for a in sorted(a % (x.ndim + len(axes)) for a in axes):
        out = np.expand_dims(out, a)
    return out


def _argmax(x: np.ndarray, axis: int, keepdims: int) -> np.ndarray:
    out = np.argmax(x, axis=axis).astype(np.int64)
    if keepdims:
        out = np.expand_dims(out, axis)
    return out


def _constant(node: NodeDef) -> np.ndarray:
    if "value" in node.attrs:
        blob: TensorBlob = node.attrs["value"]
        return blob.array
    if "value_float" in node.attrs:
        return np.asarray(node.attrs["value_float"], dtype=np.float32)
    if "value_int" in node.attrs:
        return np.asarray(node.attrs["value_int"], dtype=np.int64)
    if "value_ints" in node.attrs:
        return np.asarray(node.attrs["value_ints"], dtype=np.int64)
    if "value_floats" in node.attrs:
        return np.asarray(node.attrs["value_floats"], dtype=np.float32)
    raise UnsupportedModelError("Constant node without a supported value attribute")


def _constant_of_shape(node: NodeDef, shape: np.ndarray) -> np.ndarray:
    if "value" in node.attrs:
        blob: TensorBlob = node.attrs["value"]
        fill = blob.array.reshape(-1)[0]
        dtype = blob.array.dtype
    else:
        fill, dtype = np.float32(0), np.dtype(np.float32)
    return np.full([int(v) for v in shape], fill, dtype=dtype)


def _pad(node: NodeDef, args: list) -> np.ndarray:
    x = args[0]
    mode = node.attrs.get("mode", "constant")
    if isinstance(mode, bytes):
        mode = mode.decode()
    if mode != "constant":
        raise UnsupportedModelError(f"pad mode {mode} is not supported")
    pads = _ints(node, "pads")
    if pads is None:
        pads = [int(v) for v in args[1]]
    value = 0.0
    if "value" in node.attrs:
        value = float(node.attrs["value"])
    elif len(args) > 2 and args[2] is not None and args[2].size:
        value = float(args[2].reshape(-1)[0])
    half = len(pads) // 2
    width = [(pads[i], pads[half + i]) for i in range(half)]
    return np.pad(x, width, constant_values=value)


def _batchnorm(node: NodeDef, args: list) -> np.ndarray:
    x, scale, bias, mean, var = args[:5]
    eps = _float(node, "epsilon", 1e-5)
    shape = [1, -1] + [1] * (x.ndim - 2)
    return (
        (x - mean.reshape(shape)) / np.sqrt(var.reshape(shape) + eps) * scale.reshape(shape)
        + bias.reshape(shape)
    ).astype(np.float32)
