"""Minimal reader/writer for ONNX model files.

Implements just enough of the protobuf wire format to load and save the
message subset the engine needs: graph topology, node attributes, tensor
initializers, input/output value infos and the opset declaration. This
keeps the backend self-contained; files produced by standard exporters
load fine as long as they stay within this subset (no external data,
no subgraph attributes, no sparse tensors).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ModelLoadError, UnsupportedModelError

# TensorProto.DataType values.
DT_FLOAT = 1
DT_UINT8 = 2
DT_INT8 = 3
DT_INT32 = 6
DT_INT64 = 7
DT_BOOL = 9
DT_FLOAT16 = 10
DT_DOUBLE = 11

_NP_TO_DT = {
    np.dtype(np.float32): DT_FLOAT,
    np.dtype(np.uint8): DT_UINT8,
    np.dtype(np.int8): DT_INT8,
    np.dtype(np.int32): DT_INT32,
    np.dtype(np.int64): DT_INT64,
    np.dtype(np.bool_): DT_BOOL,
    np.dtype(np.float16): DT_FLOAT16,
    np.dtype(np.float64): DT_DOUBLE,
}
_DT_TO_NP = {v: k for k, v in _NP_TO_DT.items()}

# AttributeProto.AttributeType values.
_AT_FLOAT, _AT_INT, _AT_STRING, _AT_TENSOR = 1, 2, 3, 4
_AT_FLOATS, _AT_INTS, _AT_STRINGS = 6, 7, 8


@dataclass(frozen=True)
class TensorBlob:
    """Named constant tensor (an initializer or tensor attribute)."""

    name: str
    array: np.ndarray


@dataclass(frozen=True)
class NodeDef:
    op_type: str
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    attrs: dict = field(default_factory=dict)
    name: str = ""


@dataclass(frozen=True)
class ValueDef:
    """Graph input/output: name, element type, dims.

    A dim is an int when static, a str (symbolic name) or None when dynamic.
    """

    name: str
    elem_type: int
    dims: tuple


@dataclass(frozen=True)
class GraphDef:
    name: str
    nodes: tuple[NodeDef, ...]
    inputs: tuple[ValueDef, ...]
    outputs: tuple[ValueDef, ...]
    initializers: tuple[TensorBlob, ...]


@dataclass(frozen=True)
class ModelFile:
    graph: GraphDef
    opset_version: int
    ir_version: int = 8
    producer: str = "sightline"


# --- wire-format primitives ---------------------------------------------


def _uvarint(value: int) -> bytes:
    out = bytearray()
    while True:
        b = value & 0x7F
        value >>= 7
        if value:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def _varint64(value: int) -> bytes:
    # int64 fields use two's complement, not zigzag
    return _uvarint(value & 0xFFFFFFFFFFFFFFFF)


def _tag(field_no: int, wire_type: int) -> bytes:
    return _uvarint((field_no << 3) | wire_type)


def _f_varint(field_no: int, value: int) -> bytes:
    return _tag(field_no, 0) + _varint64(value)


def _f_bytes(field_no: int, payload: bytes) -> bytes:
    return _tag(field_no, 2) + _uvarint(len(payload)) + payload


def _f_string(field_no: int, s: str) -> bytes:
    return _f_bytes(field_no, s.encode("utf-8"))


def _f_float(field_no: int, value: float) -> bytes:
    return _tag(field_no, 5) + struct.pack("<f", value)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def done(self) -> bool:
        return self.pos >= len(self.buf)

    def uvarint(self) -> int:
        result = 0
        shift = 0
        while True:
            if self.pos >= len(self.buf):
                raise ModelLoadError("truncated varint")
            b = self.buf[self.pos]
            self.pos += 1
            result |= (b & 0x7F) << shift
            if not b & 0x80:
                return result
            shift += 7
            if shift > 70:
                raise ModelLoadError("varint too long")

    def int64(self) -> int:
        v = self.uvarint()
        return v - (1 << 64) if v >= (1 << 63) else v

    def tag(self) -> tuple[int, int]:
        key = self.uvarint()
        return key >> 3, key & 0x7

    def bytes_field(self) -> bytes:
        n = self.uvarint()
        if self.pos + n > len(self.buf):
            raise ModelLoadError("truncated length-delimited field")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def fixed32(self) -> bytes:
        if self.pos + 4 > len(self.buf):
            raise ModelLoadError("truncated fixed32")
        out = self.buf[self.pos : self.pos + 4]
        self.pos += 4
        return out

    def fixed64(self) -> bytes:
        if self.pos + 8 > len(self.buf):
            raise ModelLoadError("truncated fixed64")
        out = self.buf[self.pos : self.pos + 8]
        self.pos += 8
        return out

    def skip(self, wire_type: int) -> None:
        if wire_type == 0:
            self.uvarint()
        elif wire_type == 1:
            self.fixed64()
        elif wire_type == 2:
            self.bytes_field()
        elif wire_type == 5:
            self.fixed32()
        else:
            raise ModelLoadError(f"unsupported wire type {wire_type}")


def _packed_int64s(payload: bytes) -> list[int]:
    r = _Reader(payload)
    out = []
    while not r.done():
        out.append(r.int64())
    return out


def _packed_floats(payload: bytes) -> list[float]:
    if len(payload) % 4:
        raise ModelLoadError("packed float payload not a multiple of 4 bytes")
    return list(struct.unpack(f"<{len(payload) // 4}f", payload))


# --- message decoding -----------------------------------------------------


def _decode_tensor(buf: bytes) -> TensorBlob:
    r = _Reader(buf)
    dims: list[int] = []
    data_type = DT_FLOAT
    raw: bytes | None = None
    floats: list[float] = []
    int64s: list[int] = []
    int32s: list[int] = []
    name = ""
    while not r.done():
        f, wt = r.tag()
        if f == 1:  # dims
            if wt == 2:
                dims.extend(_packed_int64s(r.bytes_field()))
            else:
                dims.append(r.int64())
        elif f == 2 and wt == 0:
            data_type = r.uvarint()
        elif f == 4:  # float_data
            if wt == 2:
                floats.extend(_packed_floats(r.bytes_field()))
            else:
                floats.append(struct.unpack("<f", r.fixed32())[0])
        elif f == 5:  # int32_data
            if wt == 2:
                int32s.extend(_packed_int64s(r.bytes_field()))
            else:
                int32s.append(r.int64())
        elif f == 7:  # int64_data
            if wt == 2:
                int64s.extend(_packed_int64s(r.bytes_field()))
            else:
                int64s.append(r.int64())
        elif f == 8 and wt == 2:
            name = r.bytes_field().decode("utf-8")
        elif f == 9 and wt == 2:
            raw = r.bytes_field()
        elif f == 13:
            raise UnsupportedModelError("external tensor data is not supported")
        else:
            r.skip(wt)
    if data_type not in _DT_TO_NP:
        raise UnsupportedModelError(f"tensor data type {data_type} is not supported")
    dtype = _DT_TO_NP[data_type]
    shape = tuple(dims)
    if raw is not None:
        array = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype)
    elif floats:
        array = np.asarray(floats, dtype=dtype)
    elif int64s:
        array = np.asarray(int64s, dtype=dtype)
    elif int32s:
        array = np.asarray(int32s, dtype=dtype)
    else:
        array = np.zeros(int(np.prod(shape)) if shape else 0, dtype=dtype)
    try:
        array = array.reshape(shape)
    except ValueError as exc:
        raise ModelLoadError(f"tensor '{name}' payload does not match dims {shape}") from exc
    return TensorBlob(name=name, array=array)


def _decode_attribute(buf: bytes) -> tuple[str, object]:
    r = _Reader(buf)
    name = ""
    atype = 0
    f_val = 0.0
    i_val = 0
    s_val = b""
    t_val: TensorBlob | None = None
    floats: list[float] = []
    ints: list[int] = []
    strings: list[bytes] = []
    while not r.done():
        f, wt = r.tag()
        if f == 1 and wt == 2:
            name = r.bytes_field().decode("utf-8")
        elif f == 2 and wt == 5:
            f_val = struct.unpack("<f", r.fixed32())[0]
        elif f == 3 and wt == 0:
            i_val = r.int64()
        elif f == 4 and wt == 2:
            s_val = r.bytes_field()
        elif f == 5 and wt == 2:
            t_val = _decode_tensor(r.bytes_field())
        elif f == 7:
            if wt == 2:
                floats.extend(_packed_floats(r.bytes_field()))
            else:
                floats.append(struct.unpack("<f", r.fixed32())[0])
        elif f == 8:
            if wt == 2:
                ints.extend(_packed_int64s(r.bytes_field()))
            else:
                ints.append(r.int64())
        elif f == 9 and wt == 2:
            strings.append(r.bytes_field())
        elif f == 20 and wt == 0:
            atype = r.uvarint()
        else:
            r.skip(wt)
    if atype == _AT_FLOAT:
        return name, f_val
    if atype == _AT_INT:
        return name, i_val
    if atype == _AT_STRING:
        return name, s_val.decode("utf-8")
    if atype == _AT_TENSOR:
        return name, t_val
    if atype == _AT_FLOATS:
        return name, [float(v) for v in floats]
    if atype == _AT_INTS:
        return name, [int(v) for v in ints]
    if atype == _AT_STRINGS:
        return name, [s.decode("utf-8") for s in strings]
    # Untyped attribute: fall back on whichever payload was present.
    if ints:
        return name, ints
    if floats:
        return name, floats
    if t_val is not None:
        return name, t_val
    if s_val:
        return name, s_val.decode("utf-8")
    return name, i_val


def _decode_node(buf: bytes) -> NodeDef:
    r = _Reader(buf)
    inputs: list[str] = []
    outputs: list[str] = []
    name = ""
    op_type = ""
    attrs: dict = {}
    while not r.done():
        f, wt = r.tag()
        if f == 1 and wt == 2:
            inputs.append(r.bytes_field().decode("utf-8"))
        elif f == 2 and wt == 2:
            outputs.append(r.bytes_field().decode("utf-8"))
        elif f == 3 and wt == 2:
            name = r.bytes_field().decode("utf-8")
        elif f == 4 and wt == 2:
            op_type = r.bytes_field().decode("utf-8")
        elif f == 5 and wt == 2:
            k, v = _decode_attribute(r.bytes_field())
            attrs[k] = v
        else:
            r.skip(wt)
    return NodeDef(op_type=op_type, inputs=tuple(inputs), outputs=tuple(outputs), attrs=attrs, name=name)


def _decode_dims(buf: bytes) -> tuple:
    # TensorShapeProto: repeated Dimension{dim_value=1 | dim_param=2}
    r = _Reader(buf)
    dims = []
    while not r.done():
        f, wt = r.tag()
        if f == 1 and wt == 2:
            dr = _Reader(r.bytes_field())
            dim: object = None
            while not dr.done():
                df, dwt = dr.tag()
                if df == 1 and dwt == 0:
                    dim = dr.int64()
                elif df == 2 and dwt == 2:
                    dim = dr.bytes_field().decode("utf-8")
                else:
                    dr.skip(dwt)
            dims.append(dim)
        else:
            r.skip(wt)
    return tuple(dims)


def _decode_value_info(buf: bytes) -> ValueDef:
    r = _Reader(buf)
    name = ""
    elem_type = 0
    dims: tuple = ()
    while not r.done():
        f, wt = r.tag()
        if f == 1 and wt == 2:
            name = r.bytes_field().decode("utf-8")
        elif f == 2 and wt == 2:
            tr = _Reader(r.bytes_field())
            while not tr.done():
                tf, twt = tr.tag()
                if tf == 1 and twt == 2:  # tensor_type
                    ttr = _Reader(tr.bytes_field())
                    while not ttr.done():
                        ttf, ttwt = ttr.tag()
                        if ttf == 1 and ttwt == 0:
                            elem_type = ttr.uvarint()
                        elif ttf == 2 and ttwt == 2:
                            dims = _decode_dims(ttr.bytes_field())
                        else:
                            ttr.skip(ttwt)
                else:
                    tr.skip(twt)
        else:
            r.skip(wt)
    return ValueDef(name=name, elem_type=elem_type, dims=dims)


def _decode_graph(buf: bytes) -> GraphDef:
    r = _Reader(buf)
    nodes: list[NodeDef] = []
    name = ""
    initializers: list[TensorBlob] = []
    inputs: list[ValueDef] = []
    outputs: list[ValueDef] = []
    while not r.done():
        f, wt = r.tag()
        if f == 1 and wt == 2:
            nodes.append(_decode_node(r.bytes_field()))
        elif f == 2 and wt == 2:
            name = r.bytes_field().decode("utf-8")
        elif f == 5 and wt == 2:
            initializers.append(_decode_tensor(r.bytes_field()))
        elif f == 11 and wt == 2:
            inputs.append(_decode_value_info(r.bytes_field()))
        elif f == 12 and wt == 2:
            outputs.append(_decode_value_info(r.bytes_field()))
        else:
            r.skip(wt)
    return GraphDef(
        name=name,
        nodes=tuple(nodes),
        inputs=tuple(inputs),
        outputs=tuple(outputs),
        initializers=tuple(initializers),
    )


def read_model(source: str | Path | bytes) -> ModelFile:
    """Parse a serialized model; raises ModelLoadError on malformed input."""
    if isinstance(source, (str, Path)):
        try:
            data = Path(source).read_bytes()
        except OSError as exc:
            raise ModelLoadError(f"cannot read model file {source}: {exc}") from exc
    else:
        data = source
    r = _Reader(data)
    ir_version = 0
    producer = ""
    graph: GraphDef | None = None
    opset_version = 0
    try:
        while not r.done():
            f, wt = r.tag()
            if f == 1 and wt == 0:
                ir_version = r.int64()
            elif f == 2 and wt == 2:
                producer = r.bytes_field().decode("utf-8")
            elif f == 7 and wt == 2:
                graph = _decode_graph(r.bytes_field())
            elif f == 8 and wt == 2:
                sr = _Reader(r.bytes_field())
                domain = ""
                version = 0
                while not sr.done():
                    sf, swt = sr.tag()
                    if sf == 1 and swt == 2:
                        domain = sr.bytes_field().decode("utf-8")
                    elif sf == 2 and swt == 0:
                        version = sr.int64()
                    else:
                        sr.skip(swt)
                if domain in ("", "ai.onnx"):
                    opset_version = version
            else:
                r.skip(wt)
    except UnsupportedModelError:
        raise
    except ModelLoadError:
        raise
    except Exception as exc:  # defensive: garbage input of many kinds
        raise ModelLoadError(f"malformed model file: {exc}") from exc
    if graph is None or ir_version == 0:
        raise ModelLoadError("file does not contain a model graph")
    return ModelFile(graph=graph, opset_version=opset_version, ir_version=ir_version, producer=producer)


# --- message encoding -----------------------------------------------------


def _encode_tensor(t: TensorBlob) -> bytes:
    arr = np.ascontiguousarray(t.array)
    if arr.dtype not in _NP_TO_DT:
        raise UnsupportedModelError(f"cannot serialize dtype {arr.dtype}")
    out = bytearray()
    for d in arr.shape:
        out += _f_varint(1, int(d))
    out += _f_varint(2, _NP_TO_DT[arr.dtype])
    out += _f_string(8, t.name)
    out += _f_bytes(9, arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    return bytes(out)


def _encode_attribute(name: str, value: object) -> bytes:
    out = bytearray()
    out += _f_string(1, name)
    if isinstance(value, bool):
        raise UnsupportedModelError("boolean attributes are encoded as ints")
    if isinstance(value, float):
        out += _f_float(2, value)
        out += _f_varint(20, _AT_FLOAT)
    elif isinstance(value, int):
        out += _f_varint(3, value)
        out += _f_varint(20, _AT_INT)
    elif isinstance(value, str):
        out += _f_string(4, value)
        out += _f_varint(20, _AT_STRING)
    elif isinstance(value, TensorBlob):
        out += _f_bytes(5, _encode_tensor(value))
        out += _f_varint(20, _AT_TENSOR)
    elif isinstance(value, (list, tuple)) and all(isinstance(v, int) for v in value):
        payload = b"".join(_varint64(int(v)) for v in value)
        out += _f_bytes(8, payload)
        out += _f_varint(20, _AT_INTS)
    elif isinstance(value, (list, tuple)) and all(isinstance(v, (int, float)) for v in value):
        payload = struct.pack(f"<{len(value)}f", *[float(v) for v in value])
        out += _f_bytes(7, payload)
        out += _f_varint(20, _AT_FLOATS)
    elif isinstance(value, (list, tuple)) and all(isinstance(v, str) for v in value):
        for v in value:
            out += _f_string(9, v)
        out += _f_varint(20, _AT_STRINGS)
    else:
        raise UnsupportedModelError(f"cannot serialize attribute {name}={value!r}")
    return bytes(out)


def _encode_value_info(v: ValueDef) -> bytes:
    dims = bytearray()
    for d in v.dims:
        if isinstance(d, int):
            dims += _f_bytes(1, _f_varint(1, d))
        elif isinstance(d, str):
            dims += _f_bytes(1, _f_string(2, d))
        else:
            dims += _f_bytes(1, b"")
    tensor_type = _f_varint(1, v.elem_type) + _f_bytes(2, bytes(dims))
    return _f_string(1, v.name) + _f_bytes(2, _f_bytes(1, tensor_type))


def _encode_node(n: NodeDef) -> bytes:
    out = bytearray()
    for i in n.inputs:
        out += _f_string(1, i)
    for o in n.outputs:
        out += _f_string(2, o)
    if n.name:
        out += _f_string(3, n.name)
    out += _f_string(4, n.op_type)
    for k in n.attrs:
        out += _f_bytes(5, _encode_attribute(k, n.attrs[k]))
    return bytes(out)


def _encode_graph(g: GraphDef) -> bytes:
    out = bytearray()
    for n in g.nodes:
        out += _f_bytes(1, _encode_node(n))
    out += _f_string(2, g.name or "graph")
    for t in g.initializers:
        out += _f_bytes(5, _encode_tensor(t))
    for v in g.inputs:
        out += _f_bytes(11, _encode_value_info(v))
    for v in g.outputs:
        out += _f_bytes(12, _encode_value_info(v))
    return bytes(out)


def write_model(model: ModelFile) -> bytes:
    out = bytearray()
    out += _f_varint(1, model.ir_version)
    out += _f_string(2, model.producer)
    out += _f_bytes(7, _encode_graph(model.graph))
    out += _f_bytes(8, _f_string(1, "") + _f_varint(2, model.opset_version))
    return bytes(out)


def save_model(model: ModelFile, path: str | Path) -> None:
    Path(path).write_bytes(write_model(model))
