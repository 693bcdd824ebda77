"""The referee: step bisection, node bisection, and the single-operator decision.

The referee only talks through a transport. It is deterministic given the
replies it receives, which is what lets a verifier replay a transcript.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

from .. import commit
from ..commit import CheckpointCommitment
from ..detops.tensor import nbytes
from ..graph import AugmentedCGNode, OpKind, run_operator
from ..graph.nodes import EncodingError
from .wire import (
    REFEREE,
    DivergenceIndex,
    Evidence,
    HashList,
    MembershipProofMsg,
    Message,
    NodeHashSeq,
    NodeOpening,
    OutputCommit,
    ProgramHeader,
    Query,
    Refusal,
    TensorPayload,
    Verdict,
    VerdictMsg,
    decode_frame,
    encode_frame,
    frame_chain,
)


class Party(Protocol):
    name: str

    def answer(self, msg: Message) -> Message | None: ...


class ReplayMismatch(RuntimeError):
    pass


@dataclass
class LiveTransport:
    """In-process delivery. Every frame is encoded, logged, then decoded."""

    parties: dict[str, Party]
    frames: list[bytes] = field(default_factory=list)
    sent: dict[str, int] = field(default_factory=dict)
    received: dict[str, int] = field(default_factory=dict)

    def _count(self, table: dict, who: str, n: int) -> None:
        table[who] = table.get(who, 0) + n

    def send(self, msg: Message, to: str | None = None) -> None:
        f = encode_frame(REFEREE, msg)
        self.frames.append(f)
        self._count(self.sent, REFEREE, len(f))
        if to is not None:
            self._count(self.received, to, len(f))
            self.parties[to].answer(decode_frame(f)[1])

    def ask(self, to: str, q: Query) -> Message:
        self.send(q)
        self._count(self.received, to, len(self.frames[-1]))
        try:
            reply = self.parties[to].answer(decode_frame(self.frames[-1])[1])
        except Exception as e:  # a crashing party is a non-responding party
            reply = Refusal(f"error: {type(e).__name__}: {e}")
        if reply is None:
            reply = Refusal("no reply")
        try:
            f = encode_frame(to, reply)
        except (EncodingError, ValueError) as e:
            f = encode_frame(to, Refusal(f"unencodable reply: {e}"))
        self.frames.append(f)
        self._count(self.sent, to, len(f))
        self._count(self.received, REFEREE, len(f))
        return decode_frame(f)[1]


@dataclass
class ReplayTransport:
    """Feeds logged replies back to a referee and checks its requests match."""

    frames: list[bytes]
    pos: int = 0

    def _next(self) -> bytes:
        if self.pos >= len(self.frames):
            raise ReplayMismatch("transcript ended early")
        f = self.frames[self.pos]
        self.pos += 1
        return f

    def send(self, msg: Message, to: str | None = None) -> None:
        if self._next() != encode_frame(REFEREE, msg):
            raise ReplayMismatch(f"referee frame {self.pos - 1} differs from transcript")

    def ask(self, to: str, q: Query) -> Message:
        self.send(q)
        try:
            sender, msg = decode_frame(self._next())
        except EncodingError as e:
            raise ReplayMismatch(f"undecodable reply at frame {self.pos - 1}: {e}") from e
        if sender != to:
            raise ReplayMismatch(f"frame {self.pos - 1} is from {sender!r}, expected {to!r}")
        return msg

    @property
    def exhausted(self) -> bool:
        return self.pos == len(self.frames)


class _Concluded(Exception):
    def __init__(self, verdict: Verdict):
        self.verdict = verdict


@dataclass
class RefereeCounters:
    ops_executed: int = 0
    tensor_bytes: int = 0
    peak_tensor_bytes: int = 0
    digest_comparisons: int = 0


class Referee:
    """Arbitrates one pairwise dispute between parties ``a`` and ``b``."""

    def __init__(self, program, c0: CheckpointCommitment, transport):
        self.program = program
        self.eg = program.graph
        self.c0 = c0
        self.t = transport
        self.counters = RefereeCounters()
        self.a = self.b = ""
        self.outputs: dict[str, CheckpointCommitment] = {}
        self.step: int | None = None
        self.node: int | None = None
        self.seqs: dict[str, tuple[bytes, ...]] = {}

    # verdict helpers

    def _verdict(self, guilty, case: str, reason: str, recomputed=()) -> Verdict:
        guilty = tuple(p for p in (self.a, self.b) if p in set(guilty))
        ev = Evidence(case, reason, self.step, self.node,
                      self.eg.nodes[self.node].id if self.node is not None else "",
                      tuple(h.hex() for h in recomputed))
        parties = (self.a, self.b)
        if len(guilty) == 2:
            return Verdict("BothDishonest", guilty, None, ev, parties)
        if not guilty:
            raise AssertionError("conviction with no guilty party")
        other = self.b if guilty[0] == self.a else self.a
        return Verdict("Dishonest", guilty, self.outputs.get(other), ev, parties)

    def _convict(self, guilty, case, reason, recomputed=()):
        raise _Concluded(self._verdict(guilty, case, reason, recomputed))

    def _ask(self, to: str, q: Query, want: type) -> Message | None:
        reply = self.t.ask(to, q)
        return reply if isinstance(reply, want) else None

    # entry point

    def run(self, a: str, b: str) -> Verdict:
        self.a, self.b = a, b
        try:
            self._collect_outputs()
            if self.outputs[a] == self.outputs[b]:
                return Verdict("NoDispute", (), self.outputs[a], Evidence("none", "equal outputs"), (a, b))
            d, h_start, h_end = self.phase1()
            idx, nodes = self.phase2(d, h_end)
            return self.decide(d, idx, nodes, h_start)
        except _Concluded as c:
            return c.verdict

    def _collect_outputs(self) -> None:
        bad = []
        n = self.program.steps
        for p in (self.a, self.b):
            r = self._ask(p, Query("OutputCommit", p), OutputCommit)
            if r is None or r.commitment.step != n:
                bad.append(p)
            else:
                self.outputs[p] = r.commitment
        if bad:
            self._convict(bad, "refusal", "no valid output commitment")

    # phase 1: first diverging step

    def phase1(self):
        """Bisect over checkpoint lists until the disputed interval is one step."""
        from ..trainer import checkpoint_points

        n = self.program.steps
        known = {p: {0: self.c0, n: self.outputs[p]} for p in (self.a, self.b)}
        lo, hi, level = 0, n, 0
        while True:
            pts = checkpoint_points(lo, hi, self.program.k(level))
            lists, bad = {}, []
            for p in (self.a, self.b):
                r = self._ask(p, Query("HashList", p, level=level, lo=lo, hi=hi), HashList)
                if r is None:
                    bad.append((p, "refused hash list"))
                    continue
                cs = r.commitments
                if [c.step for c in cs] != pts:
                    bad.append((p, f"hash list at level {level} has wrong steps"))
                elif any(known[p].get(st, c) != c for st, c in zip(pts, cs)):
                    bad.append((p, f"hash list at level {level} contradicts earlier commitments"))
                else:
                    lists[p] = cs
                    known[p].update(zip(pts, cs))
            if bad:
                kind = "refusal" if all("refused" in r for _, r in bad) else "phase1"
                self._convict([p for p, _ in bad], kind, "; ".join(f"{p}: {r}" for p, r in bad))
            la, lb = lists[self.a], lists[self.b]
            j = next(i for i in range(1, len(pts)) if la[i] != lb[i])
            self.counters.digest_comparisons += j
            lo, hi = pts[j - 1], pts[j]
            for p in (self.a, self.b):
                self.t.send(DivergenceIndex(p, level, lo, hi), to=p)
            if hi - lo == 1:
                self.step = lo
                return lo, known[self.a][lo], {p: known[p][hi] for p in (self.a, self.b)}
            level += 1

    # phase 2: first diverging node

    def phase2(self, d: int, h_end: dict[str, CheckpointCommitment]):
        bad = []
        for p in (self.a, self.b):
            r = self._ask(p, Query("NodeHashSeq", p, step=d), NodeHashSeq)
            if r is None:
                bad.append((p, "refused node hash sequence"))
            elif len(r.digests) != h_end[p].leaf_count or commit.merkle_root(r.digests or [b""]) != h_end[p].root:
                bad.append((p, "node hash sequence does not match the committed checkpoint"))
            else:
                self.seqs[p] = r.digests
        if bad:
            kind = "refusal" if all("refused" in r for _, r in bad) else "consistency"
            self._convict([p for p, _ in bad], kind, "; ".join(f"{p}: {r}" for p, r in bad))

        size = len(self.eg)
        wrong = [p for p in (self.a, self.b) if len(self.seqs[p]) != size]
        if wrong:
            self._convict(wrong, "1", f"graph has {size} nodes; claimed sizes differ")
        sa, sb = self.seqs[self.a], self.seqs[self.b]
        idx = next(i for i in range(size) if sa[i] != sb[i])
        self.counters.digest_comparisons += idx + 1
        self.node = idx
        nodes, bad = {}, []
        for p in (self.a, self.b):
            r = self._ask(p, Query("NodeOpening", p, step=d, index=idx), NodeOpening)
            if r is None:
                bad.append((p, "refused node opening"))
            elif commit.hash_node(r.node) != self.seqs[p][idx]:
                bad.append((p, "opening does not hash to the committed node"))
            else:
                nodes[p] = r.node
        if bad:
            kind = "refusal" if all("refused" in r for _, r in bad) else "consistency"
            self._convict([p for p, _ in bad], kind, "; ".join(f"{p}: {r}" for p, r in bad))
        return idx, nodes

    # decision

    def decide(self, d: int, idx: int, nodes: dict[str, AugmentedCGNode], h_start) -> Verdict:
        tmpl = self.eg.template(idx, d)
        wrong = [p for p in (self.a, self.b) if nodes[p].structure() != tmpl.structure()]
        if wrong:
            self._convict(wrong, "1", "node structure differs from the reference graph")
        kind = tmpl.op.kind
        if kind is OpKind.DataInit:
            return self._case_data(d, tmpl, nodes)
        if kind is OpKind.ParamInit:
            return self._case_state(d, tmpl, nodes, h_start)
        na, nb = nodes[self.a], nodes[self.b]
        diff = [j for j in range(len(tmpl.inputs)) if na.input_hashes[j] != nb.input_hashes[j]]
        if diff:
            return self._case_wiring(d, tmpl, nodes, diff[0])
        return self._case_compute(d, idx, tmpl, nodes)

    def _case_data(self, d, tmpl, nodes) -> Verdict:
        batch = self.program.batch(d)
        h = commit.hash_tensor(batch[tmpl.id])
        wrong = [p for p in (self.a, self.b) if nodes[p].output_hashes[0] != h]
        self._convict(wrong, "2a-data", "data input digest differs from the dataset batch", (h,))

    def _case_state(self, d, tmpl, nodes, h_start: CheckpointCommitment) -> Verdict:
        wrong = []
        for p in (self.a, self.b):
            claimed = nodes[p].output_hashes[0]
            r = self._ask(p, Query("MembershipProof", p, step=d, name=tmpl.id), MembershipProofMsg)
            if r is None or not self._membership_ok(d, tmpl.id, claimed, r, h_start):
                wrong.append(p)
        self._convict(wrong, "2a-state", "state tensor digest not proven in the starting checkpoint")

    def _membership_ok(self, d, name, claimed, r: MembershipProofMsg, h_start) -> bool:
        eg = self.eg
        if d == 0:
            pos = eg.state_names.index(name)
            return (r.opening is None and r.proof.index == pos
                    and commit.merkle_verify(h_start.root, claimed, r.proof, len(eg.state_names)))
        upd, slot = eg.state_source(name)
        i = eg.index[upd]
        op = r.opening
        return (op is not None and r.proof.index == i
                and op.structure() == eg.template(i, d - 1).structure()
                and op.output_hashes[slot] == claimed
                and commit.merkle_verify(h_start.root, commit.hash_node(op), r.proof, len(eg)))

    def _case_wiring(self, d, tmpl, nodes, j) -> Verdict:
        src, slot = tmpl.inputs[j]
        si = self.eg.index[src]
        agreed = self.seqs[self.a][si]
        opened, failed = None, []
        for p in (self.a, self.b):
            r = self._ask(p, Query("NodeOpening", p, step=d, index=si), NodeOpening)
            if r is not None and commit.hash_node(r.node) == agreed:
                opened = r.node
                break
            failed.append(p)
        if opened is None:
            self._convict(failed, "refusal", f"no valid opening of source node {src!r}")
        h = opened.output_hashes[slot]
        wrong = [p for p in (self.a, self.b) if nodes[p].input_hashes[j] != h or p in failed]
        self._convict(wrong, "2b", f"input {j} does not match output {slot} of {src!r}", (h,))

    def _case_compute(self, d, idx, tmpl, nodes) -> Verdict:
        agreed = nodes[self.a].input_hashes
        inputs, failed = [], []
        for j, want in enumerate(agreed):
            got = None
            for p in (self.a, self.b):
                if p in failed:
                    continue
                r = self._ask(p, Query("TensorPayload", p, step=d, index=idx, slot=j), TensorPayload)
                if r is None:
                    failed.append(p)
                    continue
                self.counters.tensor_bytes += nbytes(r.tensor)
                if commit.hash_tensor(r.tensor) != want:
                    failed.append(p)
                    continue
                got = r.tensor
                break
            if got is None:
                self._convict(failed or [self.a, self.b], "refusal", f"no valid payload for input {j}")
            inputs.append(got)
        self.counters.ops_executed += 1
        try:
            outs = run_operator(tmpl.op, inputs)
        except ValueError as e:
            # both trainers vouched for inputs the operator rejects
            self._convict([self.a, self.b], "3", f"operator rejects the agreed inputs: {e}")
        held = sum(nbytes(t) for t in inputs) + sum(nbytes(t) for t in outs)
        self.counters.peak_tensor_bytes = max(self.counters.peak_tensor_bytes, held)
        digests = tuple(commit.hash_tensor(t) for t in outs)
        wrong = [p for p in (self.a, self.b) if nodes[p].output_hashes != digests or p in failed]
        self._convict(wrong, "3", "recomputed output digest mismatch", digests)


# -- pairwise and multiparty drivers ------------------------------------------


@dataclass
class DisputeResult:
    verdict: Verdict
    frames: list[bytes]
    counters: RefereeCounters
    bytes_sent: dict[str, int]
    bytes_received: dict[str, int]


def program_header(program, c0: CheckpointCommitment, parties) -> ProgramHeader:
    return ProgramHeader(program.model_text, program.config_text(inline_data=True),
                         program.dataset_blob(), c0, tuple(parties))


def dispute(program, c0: CheckpointCommitment, a: Party, b: Party) -> DisputeResult:
    """Run one pairwise dispute and return the sealed transcript."""
    t = LiveTransport({a.name: a, b.name: b})
    t.send(program_header(program, c0, (a.name, b.name)))
    ref = Referee(program, c0, t)
    verdict = ref.run(a.name, b.name)
    t.send(VerdictMsg(verdict, frame_chain(t.frames)))
    return DisputeResult(verdict, t.frames, ref.counters, t.sent, t.received)


def run_phase1(program, c0: CheckpointCommitment, a: Party, b: Party):
    """Phase 1 alone: ``(d, h_start, h_end)``, or the verdict when the
    outputs agree or a party is convicted before a step is isolated."""
    ref = Referee(program, c0, LiveTransport({a.name: a, b.name: b}))
    ref.a, ref.b = a.name, b.name
    try:
        ref._collect_outputs()
        if ref.outputs[a.name] == ref.outputs[b.name]:
            return Verdict("NoDispute", (), ref.outputs[a.name], Evidence("none", "equal outputs"), (a.name, b.name))
        return ref.phase1()
    except _Concluded as c:
        return c.verdict


@dataclass
class MultipartyResult:
    accepted: CheckpointCommitment | None
    convicted: tuple[str, ...]
    duels: list[tuple[str, str, DisputeResult]]
    groups: dict[str, tuple[str, ...]]


def resolve_multiparty(program, c0: CheckpointCommitment, parties) -> MultipartyResult:
    """Merge equal claims, then duel claimants in roster order.

    The survivor of each duel meets the next distinct claim. Every member of
    a convicted claim group is convicted with it.
    """
    parties = list(parties)
    if len(parties) < 2:
        raise ValueError("need at least two trainers")
    groups: dict[bytes, list] = {}
    for p in parties:
        try:
            c = p.output()
            key = c.root + c.leaf_count.to_bytes(8, "little") + c.step.to_bytes(8, "little")
        except Exception:
            key = b"silent:" + p.name.encode()
        groups.setdefault(key, []).append(p)
    reps = [g[0] for g in groups.values()]
    members = {g[0].name: tuple(x.name for x in g) for g in groups.values()}
    duels, convicted = [], []
    champ = reps[0]
    for challenger in reps[1:]:
        if champ is None:
            champ = challenger
            continue
        res = dispute(program, c0, champ, challenger)
        duels.append((champ.name, challenger.name, res))
        v = res.verdict
        for name in v.convicted:
            convicted.extend(members[name])
        if v.outcome == "BothDishonest":
            champ = None
        elif champ.name in v.convicted:
            champ = challenger
    accepted = champ.output() if champ is not None else None
    if len(reps) == 1:
        accepted = reps[0].output()
    return MultipartyResult(accepted, tuple(convicted), duels, members)
