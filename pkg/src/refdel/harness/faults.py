"""Deviating trainers.

Each fault kind is a small deviation from honest behaviour. Computational
faults are step hooks, so re-execution repeats them. Reporting faults
(lies about commitments, refusals) override how queries are answered.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

import numpy as np

from .. import commit
from ..commit import CheckpointCommitment
from ..detops import flip_low_bit
from ..graph import ExtendedGraph, GraphNode, OpKind, StepHooks, execute_step, initial_state
from ..protocol.wire import QUERY_KINDS, HashList, Message, NodeHashSeq, OutputCommit, Query, Refusal
from ..trainer import Trainer, TrainingProgram

FAULT_KINDS = (
    "WrongOutputTensor",
    "WrongInputWiring",
    "WrongGraphStructure",
    "SkipSteps",
    "InconsistentCommitment",
    "NonResponse",
)

_REQUIRED = {
    "WrongOutputTensor": ("step", "node"),
    "WrongInputWiring": ("step", "node"),
    "WrongGraphStructure": ("step", "node"),
    "SkipSteps": ("count",),
    "InconsistentCommitment": ("phase", "position"),
    "NonResponse": ("query", "step", "node"),
}


class FaultError(ValueError):
    pass


@dataclass(frozen=True)
class FaultSpec:
    """``Kind key=value ...``; ``node`` is an index or a node id."""

    kind: str
    params: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise FaultError(f"unknown fault kind {self.kind!r}")
        have = {k for k, _ in self.params}
        missing = [k for k in _REQUIRED[self.kind] if k not in have]
        if missing:
            raise FaultError(f"{self.kind} needs {', '.join(missing)}")

    @classmethod
    def parse(cls, text: str) -> "FaultSpec":
        toks = text.split()
        if not toks:
            raise FaultError("empty fault spec")
        params = []
        for t in toks[1:]:
            k, sep, v = t.partition("=")
            if not sep or not k:
                raise FaultError(f"expected key=value, got {t!r}")
            params.append((k, v))
        return cls(toks[0], tuple(sorted(params)))

    def __str__(self) -> str:
        return " ".join([self.kind] + [f"{k}={v}" for k, v in self.params])

    def get(self, key: str, default: str | None = None) -> str | None:
        return dict(self.params).get(key, default)

    def int(self, key: str, default: int = 0) -> int:
        v = self.get(key)
        return default if v is None else int(v)

    def node_index(self, eg: ExtendedGraph) -> int:
        v = self.get("node", "0")
        if v in eg.index:
            return eg.index[v]
        try:
            i = int(v)
        except ValueError:
            raise FaultError(f"no node {v!r}") from None
        if not 0 <= i < len(eg):
            raise FaultError(f"node index {i} out of range")
        return i

    def check(self, program: TrainingProgram) -> None:
        n = program.steps
        if "step" in dict(self.params) and not 0 <= self.int("step") < n:
            raise FaultError(f"step {self.int('step')} outside [0, {n})")
        if "node" in dict(self.params):
            self.node_index(program.graph)
        if self.kind == "SkipSteps" and not 1 <= self.int("count") <= n:
            raise FaultError("count must be in [1, steps]")
        if self.kind == "NonResponse" and self.get("query") not in QUERY_KINDS[1:]:
            raise FaultError(f"cannot refuse {self.get('query')!r}")
        if self.kind == "InconsistentCommitment":
            if self.get("phase") not in ("1", "2"):
                raise FaultError("phase must be 1 or 2")
            if self.get("mode", "sequence") not in ("sequence", "opening"):
                raise FaultError("mode must be sequence or opening")


# -- computational deviations --------------------------------------------------


class OutputFlip(StepHooks):
    """Flip the lowest mantissa bit of one element of one output."""

    def __init__(self, step: int, index: int, slot: int = 0, element: int = 0):
        self.step, self.index, self.slot, self.element = step, index, slot, element

    def outputs(self, step, index, node, inputs, outputs):
        if step != self.step or index != self.index:
            return outputs
        outs = list(outputs)
        s = self.slot % len(outs)
        outs[s] = flip_low_bit(outs[s], self.element)
        return outs


def _same_bits(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and np.array_equal(a.view(np.uint32), b.view(np.uint32))


class InputSwap(StepHooks):
    """Feed a node a different tensor than the one its pointer names.

    Takes the earliest same-shape tensor with different contents, or a
    bit-flipped copy when none exists. The declared wiring stays honest.
    """

    def __init__(self, step: int, index: int, slot: int = 0):
        self.step, self.index, self.slot = step, index, slot

    def inputs(self, step, index, node, tensors, env):
        if step != self.step or index != self.index or not tensors:
            return tensors
        j = self.slot % len(tensors)
        cur = tensors[j]
        out = list(tensors)
        for ptr, t in env.items():
            if ptr != node.inputs[j] and t.shape == cur.shape and not _same_bits(t, cur):
                out[j] = t
                return out
        out[j] = flip_low_bit(cur, 0)
        return out


class GraphSwap(StepHooks):
    def __init__(self, step: int, graph: ExtendedGraph):
        self.step, self.graph = step, graph

    def graph_for_step(self, step, eg):
        return self.graph if step == self.step else eg


class SkipUpdates(StepHooks):
    """Lazy trainer: from ``start`` on, update nodes pass state through unchanged."""

    def __init__(self, start: int):
        self.start = start

    def outputs(self, step, index, node, inputs, outputs):
        if step >= self.start and node.op.kind in (OpKind.SgdUpdate, OpKind.AdamUpdate):
            return [inputs[0]] + list(inputs[2:])
        return outputs


def pointer_shapes(program: TrainingProgram) -> dict[tuple[str, int], tuple[int, ...]]:
    """Shape of every node output, from one dry honest step."""
    st = initial_state(program.model, program.optimizer)
    res = execute_step(program.graph, st, program.batch(0), keep_tensors=True)
    return {(nid, s): t.shape for nid, (_, outs) in res.tensors.items() for s, t in enumerate(outs)}


def _rewired(eg: ExtendedGraph, index: int, shapes) -> GraphNode | None:
    node = eg.nodes[index]
    for j, ptr in enumerate(node.inputs):
        for m in eg.nodes[:index]:
            for s in range(m.n_outputs):
                alt = (m.id, s)
                if alt != ptr and shapes.get(alt) == shapes.get(ptr):
                    ins = list(node.inputs)
                    ins[j] = alt
                    return dataclasses.replace(node, inputs=tuple(ins))
    return None


def mutate_graph(eg: ExtendedGraph, index: int, mode: str, shapes) -> ExtendedGraph:
    """Rewire one input of node ``index`` to an earlier same-shape tensor,
    or change an attribute (``mode=attr`` or when no rewiring exists)."""
    node = eg.nodes[index]
    new = _rewired(eg, index, shapes) if mode == "rewire" else None
    if new is None:
        lr = node.op.attr("lr")
        op = node.op.with_attrs(lr=lr * 2) if lr is not None else node.op.with_attrs(variant=1)
        new = GraphNode(node.id, op, node.inputs, node.n_outputs)
    nodes = list(eg.nodes)
    nodes[index] = new
    return dataclasses.replace(eg, nodes=tuple(nodes))


# -- reporting deviations -------------------------------------------------------


class LyingTrainer(Trainer):
    """Computes honestly but claims a forged final commitment.

    phase 1: hash lists stay consistent with the lie until level
    ``position``, where the true list is sent. phase 2 ``sequence``: the true
    node sequence is sent, which does not hash to the lie. phase 2
    ``opening``: the lie is the root of a sequence with a forged leaf at
    ``position``, and the true node is opened there.
    """

    def __init__(self, name, program, phase: int, position: int, mode: str = "sequence", **kw):
        super().__init__(name, program, **kw)
        self.phase, self.position, self.mode = phase, position, mode
        self._lie: CheckpointCommitment | None = None
        self._seq: tuple[bytes, ...] | None = None

    def output(self) -> CheckpointCommitment:
        if self._lie is None:
            true = super().output()
            n = self.program.steps
            if self.phase == 2 and self.mode == "opening":
                seq = [commit.hash_node(x) for x in self.open_step(n - 1).nodes]
                p = self.position % len(seq)
                seq[p] = hashlib.sha256(b"forged" + seq[p]).digest()
                self._seq = tuple(seq)
                self._lie = CheckpointCommitment(n, commit.merkle_root(seq), len(seq))
            else:
                self._lie = CheckpointCommitment(n, hashlib.sha256(b"forged" + true.root).digest(),
                                                 true.leaf_count)
        return self._lie

    def _answer(self, q: Query) -> Message:
        n = self.program.steps
        if q.kind == "HashList" and q.hi == n:
            cs = self.hash_list(q.level, q.lo, q.hi)
            if not (self.phase == 1 and q.level == self.position):
                cs[-1] = self.output()
            return HashList(tuple(cs))
        if q.kind == "NodeHashSeq" and q.step == n - 1 and self._seq_for_lie() is not None:
            return NodeHashSeq(self._seq)
        if q.kind == "OutputCommit":
            return OutputCommit(self.output())
        return super()._answer(q)

    def _seq_for_lie(self):
        self.output()
        return self._seq


class RefusingTrainer(Trainer):
    """A computational deviation plus refusal to answer one query kind."""

    def __init__(self, name, program, refuse: str, **kw):
        super().__init__(name, program, **kw)
        self.refuse = refuse

    def _answer(self, q: Query) -> Message:
        if q.kind == self.refuse:
            return Refusal(f"{q.kind} declined")
        return super()._answer(q)


def build_trainer(name: str, program: TrainingProgram, fault: FaultSpec | None = None,
                  store=None) -> Trainer:
    if fault is None:
        return Trainer(name, program, store=store)
    fault.check(program)
    eg = program.graph
    k = fault.kind
    if k == "WrongOutputTensor":
        h = OutputFlip(fault.int("step"), fault.node_index(eg), fault.int("slot"), fault.int("element"))
        return Trainer(name, program, h, store)
    if k == "WrongInputWiring":
        return Trainer(name, program, InputSwap(fault.int("step"), fault.node_index(eg), fault.int("slot")), store)
    if k == "WrongGraphStructure":
        g = mutate_graph(eg, fault.node_index(eg), fault.get("mode", "rewire"), pointer_shapes(program))
        return Trainer(name, program, GraphSwap(fault.int("step"), g), store)
    if k == "SkipSteps":
        return Trainer(name, program, SkipUpdates(program.steps - fault.int("count")), store)
    if k == "InconsistentCommitment":
        return LyingTrainer(name, program, fault.int("phase"), fault.int("position"),
                            fault.get("mode", "sequence"), store=store)
    h = OutputFlip(fault.int("step"), fault.node_index(eg), fault.int("slot"), fault.int("element"))
    return RefusingTrainer(name, program, fault.get("query"), hooks=h, store=store)
