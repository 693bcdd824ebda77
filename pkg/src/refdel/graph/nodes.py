"""Graph node types and the canonical node encoding."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional

NODE_TAG = 0x4E
_U64 = struct.Struct("<Q")
_I64 = struct.Struct("<q")
_F64 = struct.Struct("<d")


class OpKind(str, enum.Enum):
    MatMul = "MatMul"
    Add = "Add"
    ReLU = "ReLU"
    Softmax = "Softmax"
    CrossEntropy = "CrossEntropy"
    ParamInit = "ParamInit"
    DataInit = "DataInit"
    MatMulBwd = "MatMulBwd"
    AddBwd = "AddBwd"
    ReLUBwd = "ReLUBwd"
    SoftmaxBwd = "SoftmaxBwd"
    CrossEntropyBwd = "CrossEntropyBwd"
    SgdUpdate = "SgdUpdate"
    AdamUpdate = "AdamUpdate"


FORWARD_KINDS = frozenset(
    {OpKind.MatMul, OpKind.Add, OpKind.ReLU, OpKind.Softmax, OpKind.CrossEntropy}
)
SOURCE_KINDS = frozenset({OpKind.ParamInit, OpKind.DataInit})

Scalar = int | float


@dataclass(frozen=True)
class OperatorSpec:
    kind: OpKind
    attrs: tuple[tuple[str, Scalar], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", OpKind(self.kind))
        object.__setattr__(self, "attrs", tuple(sorted(self.attrs)))

    def attr(self, name: str, default: Scalar | None = None) -> Scalar | None:
        for k, v in self.attrs:
            if k == name:
                return v
        return default

    def with_attrs(self, **extra: Scalar) -> "OperatorSpec":
        merged = dict(self.attrs)
        merged.update(extra)
        return OperatorSpec(self.kind, tuple(merged.items()))


Pointer = tuple[str, int]


@dataclass(frozen=True)
class GraphNode:
    id: str
    op: OperatorSpec
    inputs: tuple[Pointer, ...] = ()
    n_outputs: int = 1


@dataclass(frozen=True)
class AugmentedCGNode:
    """A step's node with the digests of every tensor it consumed and emitted.

    ``outputs`` lists consumers as ``(output_slot, consumer_id, consumer_input)``.
    """

    id: str
    op: OperatorSpec
    inputs: tuple[Pointer, ...]
    outputs: tuple[tuple[int, str, int], ...]
    input_hashes: tuple[Optional[bytes], ...]
    output_hashes: tuple[Optional[bytes], ...]

    def structure(self) -> tuple:
        return (self.id, self.op, self.inputs, self.outputs,
                len(self.input_hashes), len(self.output_hashes))


@dataclass(frozen=True)
class StepTrace:
    step: int
    nodes: tuple[AugmentedCGNode, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.nodes)


class EncodingError(ValueError):
    pass


def _lp(b: bytes) -> bytes:
    return _U64.pack(len(b)) + b


def _encode_scalar(v: Scalar) -> bytes:
    if isinstance(v, bool):
        v = int(v)
    if isinstance(v, int):
        return b"i" + _I64.pack(v)
    return b"f" + _F64.pack(float(v))


def serialize_node(n: AugmentedCGNode) -> bytes:
    """Canonical, injective encoding: fixed field order, every field length-prefixed."""
    if any(h is None for h in n.input_hashes) or any(h is None for h in n.output_hashes):
        raise EncodingError(f"node {n.id!r} has an unpopulated hash slot")
    parts = [bytes([NODE_TAG]), _lp(n.id.encode()), _lp(n.op.kind.value.encode())]
    parts.append(_U64.pack(len(n.op.attrs)))
    for k, v in n.op.attrs:
        parts.append(_lp(k.encode()) + _lp(_encode_scalar(v)))
    parts.append(_U64.pack(len(n.inputs)))
    for src, slot in n.inputs:
        parts.append(_lp(src.encode()) + _U64.pack(slot))
    parts.append(_U64.pack(len(n.outputs)))
    for slot, dst, idx in n.outputs:
        parts.append(_U64.pack(slot) + _lp(dst.encode()) + _U64.pack(idx))
    for hashes in (n.input_hashes, n.output_hashes):
        parts.append(_U64.pack(len(hashes)))
        parts.extend(_lp(h) for h in hashes)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes | memoryview, pos: int = 0):
        self.buf = memoryview(buf)
        self.pos = pos

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise EncodingError("truncated encoding")
        out = bytes(self.buf[self.pos:self.pos + n])
        self.pos += n
        return out

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]

    def lp(self) -> bytes:
        return self.take(self.u64())

    def text(self) -> str:
        try:
            return self.lp().decode()
        except UnicodeDecodeError as e:
            raise EncodingError("invalid utf-8 field") from e

    def count(self, limit: int = 1 << 20) -> int:
        n = self.u64()
        if n > limit:
            raise EncodingError("implausible element count")
        return n


def _decode_scalar(b: bytes) -> Scalar:
    if len(b) != 9 or b[:1] not in (b"i", b"f"):
        raise EncodingError("bad attribute scalar")
    return _I64.unpack(b[1:])[0] if b[:1] == b"i" else _F64.unpack(b[1:])[0]


def read_node(r: _Reader) -> AugmentedCGNode:
    if r.take(1) != bytes([NODE_TAG]):
        raise EncodingError("not a node encoding")
    nid = r.text()
    try:
        kind = OpKind(r.text())
    except ValueError as e:
        raise EncodingError(str(e)) from e
    attrs = tuple((r.text(), _decode_scalar(r.lp())) for _ in range(r.count()))
    inputs = tuple((r.text(), r.u64()) for _ in range(r.count()))
    outputs = []
    for _ in range(r.count()):
        slot = r.u64()
        outputs.append((slot, r.text(), r.u64()))
    in_h = tuple(r.lp() for _ in range(r.count()))
    out_h = tuple(r.lp() for _ in range(r.count()))
    return AugmentedCGNode(nid, OperatorSpec(kind, attrs), inputs, tuple(outputs), in_h, out_h)


def deserialize_node(buf: bytes) -> AugmentedCGNode:
    r = _Reader(buf)
    node = read_node(r)
    if r.pos != len(r.buf):
        raise EncodingError("trailing bytes after node")
    return node


def serialize_trace(tr: StepTrace) -> bytes:
    body = [_U64.pack(tr.step), _U64.pack(len(tr.nodes))]
    body.extend(_lp(serialize_node(n)) for n in tr.nodes)
    return b"".join(body)


def deserialize_trace(buf: bytes) -> StepTrace:
    r = _Reader(buf)
    step = r.u64()
    nodes = tuple(deserialize_node(r.lp()) for _ in range(r.count()))
    if r.pos != len(r.buf):
        raise EncodingError("trailing bytes after trace")
    return StepTrace(step, nodes)


def lp_pack(items: Iterable[bytes]) -> bytes:
    items = list(items)
    return _U64.pack(len(items)) + b"".join(_lp(i) for i in items)
