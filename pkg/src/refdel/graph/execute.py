"""Deterministic execution of one training step over the extended graph."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .. import commit
from .. import detops as ops
from ..detops import DetRngKey, det_rand
from ..detops.tensor import nbytes
from .extended import ExtendedGraph
from .model import ModelGraph
from .nodes import AugmentedCGNode, GraphNode, OpKind, OperatorSpec, StepTrace
from .optim import adam_update, sgd_update


class NodeExecutionError(RuntimeError):
    def __init__(self, node: str, msg: str):
        super().__init__(f"node {node!r}: {msg}")
        self.node = node


@dataclass
class TrainingState:
    step: int
    params: dict[str, np.ndarray]
    opt: dict[str, np.ndarray] = field(default_factory=dict)

    def tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.params)
        out.update(self.opt)
        return out

    def nbytes(self) -> int:
        return sum(nbytes(t) for t in self.tensors().values())


def initial_state(model: ModelGraph, optimizer) -> TrainingState:
    params, opt = {}, {}
    for p in model.params:
        init, scale = p.resolved_init()
        if init == "zeros":
            t = np.zeros(p.shape, dtype=np.float32)
        else:
            key = DetRngKey.for_label(p.seed, "param/" + p.name)
            t = det_rand(key, p.shape, init)
            if init == "uniform":
                t = (t - np.float32(0.5)) * np.float32(2)
            t = ops.canonical(t * np.float32(scale))
        params[p.name] = t
        for suffix in optimizer.state_suffixes:
            opt[p.name + suffix] = np.zeros(p.shape, dtype=np.float32)
    return TrainingState(0, params, opt)


def _attr(op: OperatorSpec, name: str):
    v = op.attr(name)
    if v is None:
        raise ValueError(f"{op.kind.value} is missing attribute {name!r}")
    return v


def run_operator(op: OperatorSpec, inputs: Sequence[np.ndarray]) -> tuple[np.ndarray, ...]:
    """Compute a non-source operator. This is also what the referee re-runs."""
    k = op.kind
    if k is OpKind.MatMul:
        return (ops.matmul(*inputs),)
    if k is OpKind.Add:
        return (ops.add(*inputs),)
    if k is OpKind.ReLU:
        return (ops.relu(*inputs),)
    if k is OpKind.Softmax:
        return (ops.softmax(inputs[0], int(op.attr("axis", -1))),)
    if k is OpKind.CrossEntropy:
        return (ops.cross_entropy(*inputs),)
    if k is OpKind.MatMulBwd:
        return ops.matmul_backward(*inputs)
    if k is OpKind.AddBwd:
        (g,) = inputs
        gb = g
        if op.attr("broadcast", 0):
            gb = ops.reduce_sum(g.reshape(-1, g.shape[-1]), 0)
        return g, gb
    if k is OpKind.ReLUBwd:
        return (ops.relu_backward(*inputs),)
    if k is OpKind.SoftmaxBwd:
        return (ops.softmax_backward(inputs[0], inputs[1], int(op.attr("axis", -1))),)
    if k is OpKind.CrossEntropyBwd:
        return (ops.cross_entropy_backward(*inputs),)
    if k is OpKind.SgdUpdate:
        return (sgd_update(inputs[0], inputs[1], _attr(op, "lr")),)
    if k is OpKind.AdamUpdate:
        return adam_update(*inputs, t=int(_attr(op, "t")), beta1=_attr(op, "beta1"),
                           beta2=_attr(op, "beta2"), eps=_attr(op, "eps"), lr=_attr(op, "lr"))
    raise ValueError(f"{k.value} is not a computable operator")


class StepHooks:
    """Interception points used to model deviating trainers.

    Honest execution uses this class unchanged.
    """

    def graph_for_step(self, step: int, eg: ExtendedGraph) -> ExtendedGraph:
        return eg

    def inputs(self, step: int, index: int, node: GraphNode, tensors: list, env: Mapping) -> list:
        return tensors

    def outputs(self, step: int, index: int, node: GraphNode, inputs: list, outputs: list) -> list:
        return outputs


HONEST = StepHooks()


@dataclass
class StepResult:
    state: TrainingState
    trace: StepTrace
    tensors: dict | None = None  # node id -> (inputs, outputs), when requested


def execute_step(
    eg: ExtendedGraph,
    state: TrainingState,
    batch: Mapping[str, np.ndarray],
    hooks: StepHooks = HONEST,
    keep_tensors: bool = False,
) -> StepResult:
    """Run one step; every node's tensor digests land in the returned trace."""
    step = state.step
    eg = hooks.graph_for_step(step, eg)
    stored = state.tensors()
    env: dict[tuple[str, int], np.ndarray] = {}
    digests: dict[tuple[str, int], bytes] = {}
    kept: dict | None = {} if keep_tensors else None
    nodes: list[AugmentedCGNode] = []

    for i, n in enumerate(eg.nodes):
        k = n.op.kind
        op = eg.node_op(n, step)
        if k is OpKind.ParamInit:
            ins: list = []
            if n.id not in stored:
                raise NodeExecutionError(n.id, "state tensor missing")
            outs = [stored[n.id]]
        elif k is OpKind.DataInit:
            ins = []
            if n.id not in batch:
                raise NodeExecutionError(n.id, "batch tensor missing")
            outs = [ops.canonical(batch[n.id])]
        else:
            ins = [env[p] for p in n.inputs]
            ins = hooks.inputs(step, i, n, ins, env)
            try:
                outs = list(run_operator(op, ins))
            except (ops.DimensionError, ValueError) as e:
                raise NodeExecutionError(n.id, str(e)) from e
        if k in (OpKind.ParamInit, OpKind.DataInit):
            want = eg.shapes.get(n.id.rsplit(".", 1)[0] if k is OpKind.ParamInit else n.id)
            if want is not None and tuple(outs[0].shape) != tuple(want):
                raise NodeExecutionError(n.id, f"shape {outs[0].shape} != declared {want}")
        outs = hooks.outputs(step, i, n, ins, outs)
        in_h = []
        for p, t in zip(n.inputs, ins):
            in_h.append(digests[p] if env.get(p) is t else commit.hash_tensor(t))
        out_h = []
        for slot, t in enumerate(outs):
            env[(n.id, slot)] = t
            h = commit.hash_tensor(t)
            digests[(n.id, slot)] = h
            out_h.append(h)
        nodes.append(AugmentedCGNode(n.id, op, n.inputs, eg.consumers[n.id],
                                     tuple(in_h), tuple(out_h)))
        if kept is not None:
            kept[n.id] = (list(ins), list(outs))

    params, opt = {}, {}
    for p in eg.model.params:
        outs = [env[(p.name + ".upd", s)] for s in range(1 + len(eg.optimizer.state_suffixes))]
        params[p.name] = outs[0]
        for suffix, t in zip(eg.optimizer.state_suffixes, outs[1:]):
            opt[p.name + suffix] = t
    return StepResult(TrainingState(step + 1, params, opt), StepTrace(step, tuple(nodes)), kept)


def parameter_gradients(eg: ExtendedGraph, state: TrainingState, batch) -> dict[str, np.ndarray]:
    """Gradients reaching each update node (input slot 1) for one step."""
    res = execute_step(eg, state, batch, keep_tensors=True)
    return {p.name: res.tensors[p.name + ".upd"][0][1] for p in eg.model.params}

