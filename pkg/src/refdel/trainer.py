"""The trainer role: checkpointed training, segment re-execution, query answers."""

from __future__ import annotations

import configparser
import hashlib
import os
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable

import numpy as np

from . import commit
from . import detops as ops
from .commit import CheckpointCommitment
from .detops.tensor import deserialize_tensor, serialize_tensor
from .graph import (
    ExtendedGraph,
    ModelGraph,
    OptimizerConfig,
    StepHooks,
    StepResult,
    StepTrace,
    TrainingState,
    build_extended_graph,
    deserialize_trace,
    execute_step,
    format_model,
    infer_shapes,
    initial_state,
    parse_model,
    serialize_trace,
)
from .graph.execute import HONEST, NodeExecutionError
from .protocol.wire import (
    DivergenceIndex,
    HashList,
    MembershipProofMsg,
    Message,
    NodeHashSeq,
    NodeOpening,
    OutputCommit,
    Query,
    Refusal,
    TensorPayload,
)

_U64 = struct.Struct("<Q")


class ProgramError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, step: int, msg: str):
        super().__init__(f"step {step}: {msg}")
        self.step = step


class StepNotMaterialized(LookupError):
    pass


# -- dataset ---------------------------------------------------------------


@dataclass
class Dataset:
    """Row-major tensors per data input; the leading dim indexes rows."""

    tensors: dict[str, np.ndarray]

    @property
    def rows(self) -> int:
        return next(iter(self.tensors.values())).shape[0]

    def batch(self, step: int, batch_size: int) -> dict[str, np.ndarray]:
        idx = (step * batch_size + np.arange(batch_size, dtype=np.int64)) % self.rows
        return {k: ops.canonical(v[idx]) for k, v in self.tensors.items()}

    def to_bytes(self, order: Iterable[str]) -> bytes:
        return b"".join(serialize_tensor(self.tensors[n]) for n in order)

    @classmethod
    def from_bytes(cls, buf: bytes, model: ModelGraph) -> "Dataset":
        out, pos = {}, 0
        for d in model.data:
            t, pos = deserialize_tensor(buf, pos)
            if t.ndim != len(d.shape) or t.shape[1:] != d.shape[1:] or t.shape[0] < 1:
                raise ProgramError(f"dataset tensor for {d.name!r} has shape {t.shape}")
            out[d.name] = t
        if pos != len(buf):
            raise ProgramError("trailing bytes in dataset")
        if len({t.shape[0] for t in out.values()}) != 1:
            raise ProgramError("dataset tensors disagree on row count")
        return cls(out)


def label_input(model: ModelGraph) -> str:
    return model.node(model.loss).inputs[1][0]


def synthetic_dataset(model: ModelGraph, rows: int, seed: int, classes: int | None = None) -> Dataset:
    """Normal features; labels are the argmax of a random linear teacher."""
    shapes = infer_shapes(model)
    lab = label_input(model)
    n_cls = classes or shapes[model.node(model.loss).inputs[0][0]][-1]
    out: dict[str, np.ndarray] = {}
    feats = None
    for d in model.data:
        if d.name == lab:
            continue
        key = ops.DetRngKey.for_label(seed, "data/" + d.name)
        out[d.name] = ops.det_rand(key, (rows,) + d.shape[1:], "normal")
        if feats is None:
            feats = out[d.name].reshape(rows, -1)
    if feats is None:
        raise ProgramError("synthetic data needs a feature input")
    teacher = ops.det_rand(ops.DetRngKey.for_label(seed, "teacher"), (feats.shape[1], n_cls), "normal")
    scores = ops.matmul(feats, teacher)
    out[lab] = np.argmax(scores, axis=1).astype(np.float32)
    return Dataset({d.name: out[d.name] for d in model.data})


# -- program ---------------------------------------------------------------


def _parse_kv(spec: str) -> dict[str, str]:
    out = {}
    for tok in spec.split():
        k, sep, v = tok.partition("=")
        if not sep:
            raise ProgramError(f"expected key=value, got {tok!r}")
        out[k] = v
    return out


@dataclass(frozen=True)
class TrainingProgram:
    model_text: str
    optimizer: OptimizerConfig
    batch_size: int
    steps: int
    schedule: tuple[int, ...]
    seed: int = 0
    dataset_spec: str = "synthetic rows=64"
    dataset_bytes: bytes | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.steps < 1:
            raise ProgramError("steps must be >= 1")
        if not self.schedule or any(k < 2 for k in self.schedule):
            raise ProgramError("every checkpoint count must be >= 2")
        if self.batch_size < 1:
            raise ProgramError("batch_size must be >= 1")
        for d in self.model.data:
            if not d.shape or d.shape[0] != self.batch_size:
                raise ProgramError(f"data input {d.name!r} must lead with batch size {self.batch_size}")

    @cached_property
    def model(self) -> ModelGraph:
        return parse_model(self.model_text)

    @cached_property
    def graph(self) -> ExtendedGraph:
        return build_extended_graph(self.model, self.optimizer)

    @cached_property
    def dataset(self) -> Dataset:
        if self.dataset_bytes is not None:
            return Dataset.from_bytes(self.dataset_bytes, self.model)
        kind, _, rest = self.dataset_spec.partition(" ")
        if kind != "synthetic":
            raise ProgramError(f"unknown dataset spec {self.dataset_spec!r}")
        kv = _parse_kv(rest)
        classes = int(kv["classes"]) if "classes" in kv else None
        return synthetic_dataset(self.model, int(kv.get("rows", 64)), int(kv.get("seed", self.seed)), classes)

    def k(self, level: int) -> int:
        """Checkpoint count at a recursion level; the last entry repeats."""
        return self.schedule[min(level, len(self.schedule) - 1)]

    def batch(self, step: int) -> dict[str, np.ndarray]:
        return self.dataset.batch(step, self.batch_size)

    def dataset_blob(self) -> bytes:
        return self.dataset.to_bytes(d.name for d in self.model.data)

    def config_text(self, inline_data: bool = False) -> str:
        o = self.optimizer
        lines = [
            "[program]",
            f"optimizer = {o.kind}",
            f"lr = {o.lr!r}",
            f"beta1 = {o.beta1!r}",
            f"beta2 = {o.beta2!r}",
            f"eps = {o.eps!r}",
            f"batch_size = {self.batch_size}",
            f"steps = {self.steps}",
            "schedule = " + ",".join(map(str, self.schedule)),
            f"seed = {self.seed}",
            f"dataset = {'inline' if inline_data or self.dataset_bytes is not None else self.dataset_spec}",
        ]
        return "\n".join(lines) + "\n"

    def digest(self) -> bytes:
        h = hashlib.sha256()
        for part in (format_model(self.model).encode(), self.config_text(True).encode(), self.dataset_blob()):
            h.update(_U64.pack(len(part)) + part)
        return h.digest()

    @classmethod
    def from_config(cls, text: str, base_dir: str | os.PathLike = ".", model_text: str | None = None,
                    dataset_bytes: bytes | None = None, **overrides) -> "TrainingProgram":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        if "program" not in cp:
            raise ProgramError("missing [program] section")
        s = dict(cp["program"])
        s.update({k: str(v) for k, v in overrides.items()})
        base = Path(base_dir)
        if model_text is None:
            if "model" not in s:
                raise ProgramError("missing model")
            model_text = (base / s["model"]).read_text()
        spec = s.get("dataset", "synthetic rows=64")
        if dataset_bytes is None and not spec.startswith("synthetic"):
            if spec == "inline":
                raise ProgramError("inline dataset needs bytes")
            dataset_bytes = (base / spec).read_bytes()
        try:
            opt = OptimizerConfig(
                s.get("optimizer", "sgd"), float(s.get("lr", 0.01)), float(s.get("beta1", 0.9)),
                float(s.get("beta2", 0.999)), float(s.get("eps", 1e-8)),
            )
            return cls(
                model_text=model_text,
                optimizer=opt,
                batch_size=int(s["batch_size"]),
                steps=int(s["steps"]),
                schedule=tuple(int(x) for x in s.get("schedule", "20").split(",")),
                seed=int(s.get("seed", 0)),
                dataset_spec=spec if spec.startswith("synthetic") else "inline",
                dataset_bytes=dataset_bytes,
            )
        except KeyError as e:
            raise ProgramError(f"missing key {e.args[0]}") from e

    @classmethod
    def load(cls, path: str | os.PathLike, **overrides) -> "TrainingProgram":
        p = Path(path)
        return cls.from_config(p.read_text(), p.parent, **overrides)


def checkpoint_points(lo: int, hi: int, k: int) -> list[int]:
    """Steps lo + ceil(j*(hi-lo)/k), j = 0..k; every step once the span is <= k."""
    if hi <= lo or k < 2:
        raise ValueError("need lo < hi and k >= 2")
    span = hi - lo
    if span <= k:
        return list(range(lo, hi + 1))
    return sorted({lo + (j * span + k - 1) // k for j in range(k + 1)})


# -- store -----------------------------------------------------------------


@dataclass
class Checkpoint:
    commitment: CheckpointCommitment
    state: TrainingState | None = None
    trace: StepTrace | None = None  # the step that produced this checkpoint


class CheckpointStore:
    def __init__(self):
        self.entries: dict[int, Checkpoint] = {}

    def __contains__(self, step: int) -> bool:
        return step in self.entries

    def __getitem__(self, step: int) -> Checkpoint:
        return self.entries[step]

    def steps(self) -> list[int]:
        return sorted(self.entries)

    def put(self, step: int, cp: Checkpoint) -> None:
        self.entries.setdefault(step, cp)

    def base_for(self, step: int) -> int:
        cands = [s for s, e in self.entries.items() if s <= step and e.state is not None]
        if not cands:
            raise StepNotMaterialized(f"no snapshot at or before step {step}")
        return max(cands)

    def verify(self, eg: ExtendedGraph | None = None) -> bool:
        """Stored commitments equal recomputation from stored traces/state.

        With ``eg``, each later snapshot must also match the digests its
        trace records for the nodes that produced it.
        """
        for s, e in self.entries.items():
            if e.trace is not None:
                if commit.commit_step_trace(e.trace) != e.commitment:
                    return False
                if eg is not None and e.state is not None and s > 0:
                    by_id = {n.id: n for n in e.trace.nodes}
                    for name, t in e.state.tensors().items():
                        node_id, slot = eg.state_source(name)
                        if by_id[node_id].output_hashes[slot] != commit.hash_tensor(t):
                            return False
            elif s == 0 and e.state is not None:
                if commit.commit_initial_state(e.state.tensors()) != e.commitment:
                    return False
        return True

    # persistence

    def save(self, path: str | os.PathLike) -> None:
        root = Path(path)
        root.mkdir(parents=True, exist_ok=True)
        for s, e in sorted(self.entries.items()):
            d = root / f"step_{s}"
            d.mkdir(exist_ok=True)
            c = e.commitment
            (d / "commit.hex").write_text(f"{c.root.hex()}\n{c.leaf_count}\n")
            if e.state is not None:
                (d / "state.bin").write_bytes(_state_bytes(e.state))
            if e.trace is not None:
                (d / "trace.bin").write_bytes(serialize_trace(e.trace))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "CheckpointStore":
        store = cls()
        root = Path(path)
        dirs = sorted(root.glob("step_*"), key=lambda p: int(p.name[5:]))
        if not dirs:
            raise FileNotFoundError(f"no checkpoints under {root}")
        for d in dirs:
            s = int(d.name[5:])
            root_hex, count = (d / "commit.hex").read_text().split()
            c = CheckpointCommitment(s, bytes.fromhex(root_hex), int(count))
            state = _state_from(s, (d / "state.bin").read_bytes()) if (d / "state.bin").exists() else None
            trace = deserialize_trace((d / "trace.bin").read_bytes()) if (d / "trace.bin").exists() else None
            store.entries[s] = Checkpoint(c, state, trace)
        return store

    def digest(self) -> bytes:
        h = hashlib.sha256()
        for s, e in sorted(self.entries.items()):
            c = e.commitment
            h.update(_U64.pack(s) + c.root + _U64.pack(c.leaf_count))
            if e.state is not None:
                h.update(_state_bytes(e.state))
            if e.trace is not None:
                h.update(serialize_trace(e.trace))
        return h.digest()


def _state_bytes(st: TrainingState) -> bytes:
    out = [_U64.pack(st.step), _U64.pack(len(st.params) + len(st.opt))]
    for kind, group in ((b"p", st.params), (b"o", st.opt)):
        for name in sorted(group, key=str.encode):
            out += [kind, _U64.pack(len(name.encode())), name.encode(), serialize_tensor(group[name])]
    return b"".join(out)


def _state_from(step: int, buf: bytes) -> TrainingState:
    s, n = struct.unpack_from("<QQ", buf)
    if s != step:
        raise ValueError(f"state file records step {s}, expected {step}")
    pos, params, opt = 16, {}, {}
    for _ in range(n):
        kind = buf[pos:pos + 1]
        if kind not in (b"p", b"o"):
            raise ValueError(f"bad state entry kind {kind!r}")
        (ln,) = _U64.unpack_from(buf, pos + 1)
        name = buf[pos + 9:pos + 9 + ln].decode()
        t, pos = deserialize_tensor(buf, pos + 9 + ln)
        (params if kind == b"p" else opt)[name] = t
    return TrainingState(step, params, opt)


# -- trainer ---------------------------------------------------------------


class Trainer:
    """One trainer: executes the program and answers referee queries.

    ``hooks`` model computational deviations; they apply to every execution,
    including re-execution, so a deviating trainer deviates consistently.
    """

    def __init__(self, name: str, program: TrainingProgram, hooks: StepHooks = HONEST,
                 store: CheckpointStore | None = None):
        self.name = name
        self.program = program
        self.eg = program.graph
        self.hooks = hooks
        self.store = store if store is not None else CheckpointStore()
        self.steps_executed = 0
        self.steps_reexecuted = 0
        self._kept: tuple[int, dict] | None = None

    # execution

    def _run(self, state: TrainingState, reexec: bool, keep: bool = False) -> StepResult:
        try:
            res = execute_step(self.eg, state, self.program.batch(state.step), self.hooks, keep)
        except NodeExecutionError as e:
            raise TrainingError(state.step, str(e)) from e
        if reexec:
            self.steps_reexecuted += 1
        else:
            self.steps_executed += 1
        return res

    def _log(self, res: StepResult) -> CheckpointCommitment:
        c = commit.commit_step_trace(res.trace)
        self.store.put(res.state.step, Checkpoint(c, res.state, res.trace))
        return c

    def train(self) -> CheckpointCommitment:
        p = self.program
        state = initial_state(p.model, p.optimizer)
        self.store.put(0, Checkpoint(commit.commit_initial_state(state.tensors()), state))
        logged = set(checkpoint_points(0, p.steps, p.k(0)))
        while state.step < p.steps:
            res = self._run(state, reexec=False)
            if res.state.step in logged:
                self._log(res)
            state = res.state
        return self.output()

    def output(self) -> CheckpointCommitment:
        return self.store[self.program.steps].commitment

    def reexecute_segment(self, start: int, end: int, count: int) -> list[tuple[int, CheckpointCommitment]]:
        """Re-run [start, end) from the snapshot at ``start``, logging ``count`` intervals."""
        if start not in self.store or self.store[start].state is None:
            raise StepNotMaterialized(f"no snapshot at step {start}")
        if end - start < 2 or count < 2:
            raise ValueError("segment needs end - start >= 2 and count >= 2")
        pts = checkpoint_points(start, end, count)
        want = set(pts[1:])
        out = []
        state = self.store[start].state
        while state.step < end:
            res = self._run(state, reexec=True)
            state = res.state
            if state.step in want:
                c = commit.commit_step_trace(res.trace)
                self.store.put(state.step, Checkpoint(c, state, res.trace))
                out.append((state.step, self.store[state.step].commitment))
        return out

    def _ensure(self, steps: Iterable[int]) -> None:
        missing = sorted(s for s in steps if s not in self.store)
        for s in missing:
            if s in self.store:
                continue
            state = self.store[self.store.base_for(s)].state
            while state.step < s:
                res = self._run(state, reexec=True)
                state = res.state
                if state.step in missing:
                    self._log(res)

    def open_step(self, step: int) -> StepTrace:
        e = self.store.entries.get(step + 1)
        if e is None or e.trace is None:
            raise StepNotMaterialized(f"step {step} has no stored trace")
        return e.trace

    def _kept_tensors(self, step: int) -> dict:
        if self._kept is None or self._kept[0] != step:
            self._ensure([step])
            res = self._run(self.store[step].state, reexec=True, keep=True)
            self._kept = (step, res.tensors)
        return self._kept[1]

    # queries

    def hash_list(self, level: int, lo: int, hi: int) -> list[CheckpointCommitment]:
        pts = checkpoint_points(lo, hi, self.program.k(level))
        self._ensure(pts)
        return [self.store[s].commitment for s in pts]

    def membership(self, step: int, name: str) -> MembershipProofMsg:
        eg = self.eg
        if step == 0:
            e = self.store[0]
            names, leaves = commit.state_leaves(e.state.tensors())
            return MembershipProofMsg(commit.merkle_prove(leaves, names.index(name)))
        node_id, _ = eg.state_source(name)
        tr = self.open_step(step - 1)
        idx = eg.index[node_id]
        leaves = [commit.hash_node(n) for n in tr.nodes]
        return MembershipProofMsg(commit.merkle_prove(leaves, idx), tr.nodes[idx])

    def on_divergence(self, msg: DivergenceIndex) -> None:
        if msg.hi - msg.lo >= 2:
            k = self.program.k(msg.level + 1)
            pts = checkpoint_points(msg.lo, msg.hi, k)
            if any(s not in self.store for s in pts):
                self.reexecute_segment(msg.lo, msg.hi, k)

    def answer(self, msg: Message) -> Message | None:
        """Reply to a referee message; unanswerable queries yield a Refusal."""
        if isinstance(msg, DivergenceIndex):
            self.on_divergence(msg)
            return None
        if not isinstance(msg, Query):
            return Refusal(f"unexpected {type(msg).__name__}")
        try:
            return self._answer(msg)
        except (LookupError, ValueError, TrainingError) as e:
            return Refusal(f"{msg.kind}: {e}")

    def _answer(self, q: Query) -> Message:
        if q.kind == "OutputCommit":
            return OutputCommit(self.output())
        if q.kind == "HashList":
            return HashList(tuple(self.hash_list(q.level, q.lo, q.hi)))
        if q.kind == "NodeHashSeq":
            return NodeHashSeq(tuple(commit.hash_node(n) for n in self.open_step(q.step).nodes))
        if q.kind == "NodeOpening":
            return NodeOpening(self.open_step(q.step).nodes[q.index])
        if q.kind == "TensorPayload":
            node = self.eg.nodes[q.index]
            ins, _ = self._kept_tensors(q.step)[node.id]
            return TensorPayload(ins[q.slot])
        if q.kind == "MembershipProof":
            return self.membership(q.step, q.name)
        raise ValueError(f"unknown query {q.kind}")

