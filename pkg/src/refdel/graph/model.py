"""Model text format, validation and canonical topological order.

Format, one declaration per line (``#`` starts a comment)::

    param <name> [d0,d1,...] seed=<u64> [init=normal|uniform|zeros] [scale=<float>]
    data  <name> [d0,d1,...]
    node  <id> <Op> inputs=<id[:slot]>,... [attrs=<k=v>,...]
    loss  <id>

Parameters and data inputs act as single-output sources that nodes may
reference by name. Ids match ``[A-Za-z_][A-Za-z0-9_]*`` so derived ids such
as ``w.upd`` or ``h.bwd`` can never collide with user ids.
"""

from __future__ import annotations

import hashlib
import heapq
import math
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

from .nodes import FORWARD_KINDS, GraphNode, OpKind, OperatorSpec

_ID_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")
_INT_RE = re.compile(r"[+-]?\d+\Z")

# kind -> (input count, output count)
FORWARD_ARITY = {
    OpKind.MatMul: (2, 1),
    OpKind.Add: (2, 1),
    OpKind.ReLU: (1, 1),
    OpKind.Softmax: (1, 1),
    OpKind.CrossEntropy: (2, 1),
}


class ModelError(ValueError):
    pass


class ParseError(ModelError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class ValidationError(ModelError):
    def __init__(self, node: str, msg: str):
        super().__init__(f"node {node!r}: {msg}")
        self.node = node


class CycleError(ValidationError):
    pass


@dataclass(frozen=True)
class ParamDecl:
    name: str
    shape: tuple[int, ...]
    seed: int
    init: str = ""
    scale: float | None = None

    def resolved_init(self) -> tuple[str, float]:
        """Initializer and scale after applying defaults.

        Rank >= 2 defaults to normal with scale 1/sqrt(shape[0]); rank < 2
        defaults to zeros.
        """
        init = self.init or ("normal" if len(self.shape) >= 2 else "zeros")
        if self.scale is not None:
            return init, self.scale
        return init, 1.0 / math.sqrt(self.shape[0]) if self.shape else 1.0


@dataclass(frozen=True)
class DataDecl:
    name: str
    shape: tuple[int, ...]


@dataclass(frozen=True)
class ModelGraph:
    nodes: tuple[GraphNode, ...]
    params: tuple[ParamDecl, ...]
    data: tuple[DataDecl, ...]
    loss: str

    @property
    def source_names(self) -> set[str]:
        return {p.name for p in self.params} | {d.name for d in self.data}

    def node(self, nid: str) -> GraphNode:
        for n in self.nodes:
            if n.id == nid:
                return n
        raise KeyError(nid)

    def digest(self) -> bytes:
        return hashlib.sha256(format_model(self).encode()).digest()


def _parse_shape(tok: str, line: int) -> tuple[int, ...]:
    if not (tok.startswith("[") and tok.endswith("]")):
        raise ParseError(line, f"shape must look like [d0,d1], got {tok!r}")
    inner = tok[1:-1].strip()
    if not inner:
        return ()
    try:
        dims = tuple(int(x) for x in inner.split(","))
    except ValueError:
        raise ParseError(line, f"bad shape {tok!r}") from None
    if any(d < 1 for d in dims):
        raise ParseError(line, f"shape extents must be >= 1: {tok!r}")
    return dims


def parse_scalar(text: str) -> int | float:
    if _INT_RE.match(text):
        return int(text)
    return float(text)


def _kv(tokens: Sequence[str], line: int) -> dict[str, str]:
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise ParseError(line, f"expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        if k in out:
            raise ParseError(line, f"duplicate field {k!r}")
        out[k] = v
    return out


def _check_id(name: str, line: int) -> str:
    if not _ID_RE.match(name):
        raise ParseError(line, f"invalid identifier {name!r}")
    return name


def parse_model(text: str) -> ModelGraph:
    nodes: list[GraphNode] = []
    params: list[ParamDecl] = []
    data: list[DataDecl] = []
    loss = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        toks = raw.split("#", 1)[0].split()
        if not toks:
            continue
        head = toks[0]
        if head == "param":
            if len(toks) < 4:
                raise ParseError(lineno, "param needs <name> <shape> seed=<u64>")
            kv = _kv(toks[3:], lineno)
            unknown = set(kv) - {"seed", "init", "scale"}
            if unknown or "seed" not in kv:
                raise ParseError(lineno, f"param fields must be seed/init/scale, got {sorted(kv)}")
            try:
                seed = int(kv["seed"])
                scale = float(kv["scale"]) if "scale" in kv else None
            except ValueError:
                raise ParseError(lineno, "seed must be an integer, scale a number") from None
            if not 0 <= seed < 1 << 64:
                raise ParseError(lineno, "seed must be an unsigned 64-bit integer")
            init = kv.get("init", "")
            if init not in ("", "normal", "uniform", "zeros"):
                raise ParseError(lineno, f"unknown init {init!r}")
            params.append(ParamDecl(_check_id(toks[1], lineno),
                                    _parse_shape(toks[2], lineno), seed, init, scale))
        elif head == "data":
            if len(toks) != 3:
                raise ParseError(lineno, "data needs <name> <shape>")
            data.append(DataDecl(_check_id(toks[1], lineno), _parse_shape(toks[2], lineno)))
        elif head == "node":
            if len(toks) < 4:
                raise ParseError(lineno, "node needs <id> <op> inputs=...")
            nid = _check_id(toks[1], lineno)
            try:
                kind = OpKind(toks[2])
            except ValueError:
                raise ParseError(lineno, f"unknown operator {toks[2]!r}") from None
            if kind not in FORWARD_KINDS:
                raise ParseError(lineno, f"{kind.value} is derived, not a model operator")
            kv = _kv(toks[3:], lineno)
            if set(kv) - {"inputs", "attrs"} or "inputs" not in kv:
                raise ParseError(lineno, "node fields are inputs= and attrs=")
            inputs = []
            for ref in filter(None, kv["inputs"].split(",")):
                src, _, slot = ref.partition(":")
                if not slot:
                    slot = "0"
                if not slot.isdigit():
                    raise ParseError(lineno, f"bad input reference {ref!r}")
                inputs.append((_check_id(src, lineno), int(slot)))
            attrs = []
            for item in filter(None, kv.get("attrs", "").split(",")):
                k, eq, v = item.partition("=")
                if not eq or not k:
                    raise ParseError(lineno, f"bad attribute {item!r}")
                try:
                    attrs.append((k, parse_scalar(v)))
                except ValueError:
                    raise ParseError(lineno, f"attribute {k!r} is not a number") from None
            nodes.append(GraphNode(nid, OperatorSpec(kind, tuple(attrs)), tuple(inputs),
                                   FORWARD_ARITY[kind][1]))
        elif head == "loss":
            if len(toks) != 2 or loss is not None:
                raise ParseError(lineno, "exactly one 'loss <id>' line expected")
            loss = toks[1]
        else:
            raise ParseError(lineno, f"unknown declaration {head!r}")
    if loss is None:
        raise ParseError(0, "missing loss declaration")
    g = ModelGraph(tuple(nodes), tuple(params), tuple(data), loss)
    validate_model(g)
    return g


def _fmt_scalar(v: int | float) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


def format_model(g: ModelGraph) -> str:
    """Canonical text rendering; parse_model(format_model(g)) == g."""
    out = []
    for p in g.params:
        s = f"param {p.name} [{','.join(map(str, p.shape))}] seed={p.seed}"
        if p.init:
            s += f" init={p.init}"
        if p.scale is not None:
            s += f" scale={p.scale!r}"
        out.append(s)
    for d in g.data:
        out.append(f"data {d.name} [{','.join(map(str, d.shape))}]")
    for n in g.nodes:
        ins = ",".join(f"{s}:{k}" for s, k in n.inputs)
        s = f"node {n.id} {n.op.kind.value} inputs={ins}"
        if n.op.attrs:
            s += " attrs=" + ",".join(f"{k}={_fmt_scalar(v)}" for k, v in n.op.attrs)
        out.append(s)
    out.append(f"loss {g.loss}")
    return "\n".join(out) + "\n"


def kahn_order(nodes: Iterable[GraphNode]) -> list[str]:
    """Kahn's algorithm; ready-set ties broken by lexicographic id.

    Inputs naming ids outside ``nodes`` are treated as already available.
    """
    nodes = list(nodes)
    ids = {n.id for n in nodes}
    indeg = {n.id: 0 for n in nodes}
    users: dict[str, list[str]] = {n.id: [] for n in nodes}
    for n in nodes:
        for src in {s for s, _ in n.inputs if s in ids}:
            indeg[n.id] += 1
            users[src].append(n.id)
    ready = [nid for nid, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        nid = heapq.heappop(ready)
        order.append(nid)
        for u in users[nid]:
            indeg[u] -= 1
            if indeg[u] == 0:
                heapq.heappush(ready, u)
    if len(order) != len(nodes):
        stuck = min(nid for nid, d in indeg.items() if d > 0)
        raise CycleError(stuck, "cycle detected")
    return order


def topo_sort(g: ModelGraph) -> list[str]:
    return kahn_order(g.nodes)


def infer_shapes(g: ModelGraph) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {p.name: p.shape for p in g.params}
    shapes.update({d.name: d.shape for d in g.data})
    by_id = {n.id: n for n in g.nodes}
    for nid in topo_sort(g):
        n = by_id[nid]
        ins = [shapes[s] for s, _ in n.inputs]
        k = n.op.kind
        if k is OpKind.MatMul:
            a, b = ins
            if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
                raise ValidationError(nid, f"MatMul shapes {a} x {b} incompatible")
            shapes[nid] = (a[0], b[1])
        elif k is OpKind.Add:
            a, b = ins
            if a != b and not (len(b) == 1 and a and a[-1] == b[0]):
                raise ValidationError(nid, f"Add shapes {a} and {b} incompatible")
            shapes[nid] = a
        elif k is OpKind.ReLU:
            shapes[nid] = ins[0]
        elif k is OpKind.Softmax:
            axis = n.op.attr("axis", -1)
            if not isinstance(axis, int) or not ins[0] or not -len(ins[0]) <= axis < len(ins[0]):
                raise ValidationError(nid, f"Softmax axis {axis!r} invalid for {ins[0]}")
            shapes[nid] = ins[0]
        elif k is OpKind.CrossEntropy:
            lg, lab = ins
            if len(lg) != 2 or lab != (lg[0],):
                raise ValidationError(nid, f"CrossEntropy shapes {lg} and {lab} incompatible")
            shapes[nid] = ()
    return shapes


def validate_model(g: ModelGraph) -> None:
    seen: set[str] = set()
    for name in [p.name for p in g.params] + [d.name for d in g.data] + [n.id for n in g.nodes]:
        if name in seen:
            raise ValidationError(name, "duplicate id")
        seen.add(name)
    sources = g.source_names
    node_ids = {n.id for n in g.nodes}
    data_names = {d.name for d in g.data}
    for n in g.nodes:
        want, _ = FORWARD_ARITY[n.op.kind]
        if len(n.inputs) != want:
            raise ValidationError(n.id, f"{n.op.kind.value} takes {want} inputs, got {len(n.inputs)}")
        for src, slot in n.inputs:
            if src not in sources and src not in node_ids:
                raise ValidationError(n.id, f"input {src!r} does not exist")
            if slot != 0:
                raise ValidationError(n.id, f"input {src}:{slot} refers to a missing output slot")
        if n.op.kind is OpKind.CrossEntropy and n.id != g.loss:
            raise ValidationError(n.id, "CrossEntropy may only be used as the loss")
    if g.loss not in node_ids:
        raise ValidationError(g.loss, "loss node does not exist")
    loss = g.node(g.loss)
    if loss.op.kind is not OpKind.CrossEntropy:
        raise ValidationError(g.loss, "loss node must be CrossEntropy")
    if loss.inputs[1][0] not in data_names:
        raise ValidationError(g.loss, "CrossEntropy labels must be a data input")
    topo_sort(g)
    # every node and parameter must feed the loss
    feeds = {g.loss}
    by_id = {n.id: n for n in g.nodes}
    stack = [g.loss]
    while stack:
        for src, _ in by_id[stack.pop()].inputs:
            if src not in feeds:
                feeds.add(src)
                if src in by_id:
                    stack.append(src)
    for nid in sorted(node_ids | {p.name for p in g.params}):
        if nid not in feeds:
            raise ValidationError(nid, "does not contribute to the loss")
    infer_shapes(g)
