"""Derivation of the full training-step graph from a forward model.

Derivation rules (these fix node ids, and ids feed the sort tie-break):

* every data input ``x`` becomes a ``DataInit`` node ``x``; every parameter
  ``w`` a ``ParamInit`` node ``w``, plus ``w.m`` and ``w.v`` under Adam;
* the loss node ``L`` gets ``L.bwd`` (CrossEntropyBwd on the saved logits
  and labels);
* other forward nodes ``f`` on the loss path get ``f.bwd``, built in reverse
  forward order. Saved tensors: MatMul keeps both operands, ReLU its input,
  Softmax its output, Add nothing;
* a tensor with several gradient contributions is summed by a left fold of
  Add nodes ``<tensor>.acc1``, ``<tensor>.acc2``, ... with contributions
  ordered by the consumer's forward position, then its input index;
* each parameter ``w`` gets ``w.upd`` consuming (w, grad[, w.m, w.v]).

The result is sorted once more with the lexicographic Kahn order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property

from .model import ModelGraph, ValidationError, infer_shapes, kahn_order, topo_sort
from .nodes import (
    AugmentedCGNode,
    GraphNode,
    OpKind,
    OperatorSpec,
    Pointer,
    serialize_node,
)

_ZERO_HASH = bytes(32)


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")

    @property
    def state_suffixes(self) -> tuple[str, ...]:
        return (".m", ".v") if self.kind == "adam" else ()

    def update_op(self) -> OperatorSpec:
        if self.kind == "sgd":
            return OperatorSpec(OpKind.SgdUpdate, (("lr", float(self.lr)),))
        return OperatorSpec(OpKind.AdamUpdate, (
            ("beta1", float(self.beta1)), ("beta2", float(self.beta2)),
            ("eps", float(self.eps)), ("lr", float(self.lr)),
        ))


class DifferentiationError(ValidationError):
    pass


@dataclass(frozen=True)
class ExtendedGraph:
    model: ModelGraph
    optimizer: OptimizerConfig
    nodes: tuple[GraphNode, ...]
    context_edges: tuple[tuple[str, str], ...]
    shapes: dict = field(compare=False, hash=False)

    @cached_property
    def index(self) -> dict[str, int]:
        return {n.id: i for i, n in enumerate(self.nodes)}

    @cached_property
    def consumers(self) -> dict[str, tuple[tuple[int, str, int], ...]]:
        out: dict[str, list] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for idx, (src, slot) in enumerate(n.inputs):
                out[src].append((slot, n.id, idx))
        return {k: tuple(sorted(v)) for k, v in out.items()}

    @cached_property
    def state_names(self) -> tuple[str, ...]:
        """Parameter and optimizer-state tensor names in byte order."""
        names = []
        for p in self.model.params:
            names.append(p.name)
            names.extend(p.name + s for s in self.optimizer.state_suffixes)
        return tuple(sorted(names, key=lambda s: s.encode()))

    def state_source(self, name: str) -> Pointer:
        """The (update node, output slot) that emits state tensor ``name``."""
        for p in self.model.params:
            if name == p.name:
                return (p.name + ".upd", 0)
            for slot, suffix in enumerate(self.optimizer.state_suffixes, 1):
                if name == p.name + suffix:
                    return (p.name + ".upd", slot)
        raise KeyError(name)

    def node_op(self, node: GraphNode, step: int) -> OperatorSpec:
        """Operator as instantiated at ``step`` (Adam carries its timestep)."""
        if node.op.kind is OpKind.AdamUpdate:
            return node.op.with_attrs(t=step + 1)
        return node.op

    def template(self, i: int, step: int) -> AugmentedCGNode:
        """Structural fields of node ``i`` at ``step`` with empty hash slots."""
        n = self.nodes[i]
        return AugmentedCGNode(
            n.id, self.node_op(n, step), n.inputs, self.consumers[n.id],
            (None,) * len(n.inputs), (None,) * n.n_outputs,
        )

    def digest(self) -> bytes:
        h = hashlib.sha256()
        for i, n in enumerate(self.nodes):
            t = self.template(i, 0)
            filled = AugmentedCGNode(t.id, n.op, t.inputs, t.outputs,
                                     (_ZERO_HASH,) * len(t.input_hashes),
                                     (_ZERO_HASH,) * len(t.output_hashes))
            h.update(serialize_node(filled))
        return h.digest()

    def __len__(self) -> int:
        return len(self.nodes)


def build_extended_graph(g: ModelGraph, opt: OptimizerConfig) -> ExtendedGraph:
    shapes = infer_shapes(g)
    data_names = {d.name for d in g.data}
    fwd_order = topo_sort(g)
    fwd_pos = {nid: i for i, nid in enumerate(fwd_order)}
    by_id = {n.id: n for n in g.nodes}

    nodes: list[GraphNode] = []
    for d in g.data:
        nodes.append(GraphNode(d.name, OperatorSpec(OpKind.DataInit)))
    for p in g.params:
        nodes.append(GraphNode(p.name, OperatorSpec(OpKind.ParamInit)))
        for suffix in opt.state_suffixes:
            nodes.append(GraphNode(p.name + suffix, OperatorSpec(OpKind.ParamInit)))
    nodes.extend(g.nodes)

    contexts: list[tuple[str, str]] = []
    # tensor id -> [(consumer forward pos, consumer input index, grad pointer)]
    grads: dict[str, list[tuple[int, int, Pointer]]] = {}

    def contribute(src: str, consumer: str, idx: int, grad: Pointer) -> None:
        if src in data_names:
            return
        grads.setdefault(src, []).append((fwd_pos[consumer], idx, grad))

    def gradient_of(tensor: str) -> Pointer:
        parts = sorted(grads.get(tensor, []))
        if not parts:
            raise DifferentiationError(tensor, "no gradient reaches this tensor")
        acc = parts[0][2]
        for i, (_, _, g_ptr) in enumerate(parts[1:], 1):
            aid = f"{tensor}.acc{i}"
            nodes.append(GraphNode(aid, OperatorSpec(OpKind.Add), (acc, g_ptr)))
            acc = (aid, 0)
        return acc

    loss = by_id[g.loss]
    lbwd = g.loss + ".bwd"
    nodes.append(GraphNode(lbwd, OperatorSpec(OpKind.CrossEntropyBwd), loss.inputs))
    contexts.append((g.loss, lbwd))
    contribute(loss.inputs[0][0], g.loss, 0, (lbwd, 0))

    for nid in reversed(fwd_order):
        if nid == g.loss:
            continue
        n = by_id[nid]
        gout = gradient_of(nid)
        bid = nid + ".bwd"
        k = n.op.kind
        if k is OpKind.MatMul:
            nodes.append(GraphNode(bid, OperatorSpec(OpKind.MatMulBwd),
                                   (n.inputs[0], n.inputs[1], gout), 2))
            contexts.append((nid, bid))
            contribute(n.inputs[0][0], nid, 0, (bid, 0))
            contribute(n.inputs[1][0], nid, 1, (bid, 1))
        elif k is OpKind.Add:
            a, b = (shapes[s] for s, _ in n.inputs)
            nodes.append(GraphNode(bid, OperatorSpec(OpKind.AddBwd, (("broadcast", int(a != b)),)),
                                   (gout,), 2))
            contribute(n.inputs[0][0], nid, 0, (bid, 0))
            contribute(n.inputs[1][0], nid, 1, (bid, 1))
        elif k is OpKind.ReLU:
            nodes.append(GraphNode(bid, OperatorSpec(OpKind.ReLUBwd), (n.inputs[0], gout)))
            contexts.append((nid, bid))
            contribute(n.inputs[0][0], nid, 0, (bid, 0))
        elif k is OpKind.Softmax:
            axis = n.op.attr("axis", -1)
            nodes.append(GraphNode(bid, OperatorSpec(OpKind.SoftmaxBwd, (("axis", axis),)),
                                   ((nid, 0), gout)))
            contexts.append((nid, bid))
            contribute(n.inputs[0][0], nid, 0, (bid, 0))
        else:
            raise DifferentiationError(nid, f"cannot differentiate {k.value}")

    upd_op = opt.update_op()
    for p in g.params:
        gp = gradient_of(p.name)
        ins = [(p.name, 0), gp] + [(p.name + s, 0) for s in opt.state_suffixes]
        nodes.append(GraphNode(p.name + ".upd", upd_op, tuple(ins), 1 + len(opt.state_suffixes)))

    by_ext = {n.id: n for n in nodes}
    if len(by_ext) != len(nodes):
        raise DifferentiationError("?", "derived node ids collide")
    order = kahn_order(nodes)
    return ExtendedGraph(g, opt, tuple(by_ext[i] for i in order), tuple(contexts), shapes)
