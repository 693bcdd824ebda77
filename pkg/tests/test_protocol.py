from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from oracles import first_divergence, per_step_commitments, step_trace
from refdel import commit
from refdel.commit import CheckpointCommitment, merkle_prove
from refdel.graph.nodes import EncodingError
from refdel.harness.faults import FaultSpec, RefusingTrainer, build_trainer
from refdel.harness.scenario import initial_commitment
from refdel.harness.sweep import fork
from refdel.protocol import dispute, resolve_multiparty, verify_evidence, verify_frames
from refdel.protocol.wire import (
    REFEREE,
    DivergenceIndex,
    Evidence,
    HashList,
    MembershipProofMsg,
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
    parse_transcript,
)
from refdel.trainer import Trainer, TrainingProgram

f32 = np.float32


def C(i: int, step: int = 3) -> CheckpointCommitment:
    return CheckpointCommitment(step, bytes([i]) * 32, 22)


def trainer(name, program, fault=None):
    t = build_trainer(name, program, FaultSpec.parse(fault) if fault else None)
    t.train()
    return t


def run(program, a, b):
    return dispute(program, initial_commitment(program), a, b)


def queries(frames, kind):
    out = []
    for f in frames:
        who, m = decode_frame(f)
        if who == REFEREE and isinstance(m, Query) and m.kind == kind:
            out.append(m)
    return out


# -- wire format ------------------------------------------------------------------


def _node(sgd_reference):
    return sgd_reference.store[20].trace.nodes[5]


def messages(sgd_reference):
    node = _node(sgd_reference)
    proof = merkle_prove([bytes([i]) * 32 for i in range(5)], 3)
    ev = Evidence("3", "output differs", 11, 5, "h", ("ab" * 32,))
    return [
        OutputCommit(C(1)),
        HashList((C(1, 0), C(2, 4), C(3, 8))),
        HashList(()),
        DivergenceIndex("A", 1, 120, 140),
        NodeHashSeq((b"\x01" * 32, b"\x02" * 32)),
        NodeOpening(node),
        MembershipProofMsg(proof),
        MembershipProofMsg(proof, node),
        TensorPayload(np.arange(12, dtype=f32).reshape(3, 4)),
        TensorPayload(f32(-0.0)),
        Refusal("declined"),
        Refusal(),
        VerdictMsg(Verdict("Dishonest", ("B",), C(4), ev, ("A", "B")), b"\x07" * 32),
        VerdictMsg(Verdict("NoDispute", (), None, Evidence("none", "equal"), ("A", "B")), b"\x00" * 32),
        Query("NodeOpening", "A", step=11, index=5),
        Query("MembershipProof", "B", step=20, name="w2"),
        ProgramHeader("model text", "[program]\n", b"\x00\x01", C(9, 0), ("A", "B")),
    ]


def test_every_message_roundtrips(sgd_reference):
    msgs = messages(sgd_reference)
    assert {type(m) for m in msgs} >= {
        OutputCommit, HashList, DivergenceIndex, NodeHashSeq, NodeOpening, MembershipProofMsg,
        TensorPayload, Refusal, VerdictMsg, Query, ProgramHeader,
    }
    for m in msgs:
        f = encode_frame("A", m)
        who, back = decode_frame(f)
        assert who == "A" and back == m and encode_frame("A", back) == f


def test_tensor_payload_keeps_bits():
    t = np.array([np.nan, -0.0, np.inf, 1e-45], f32)
    back = decode_frame(encode_frame("A", TensorPayload(t)))[1].tensor
    assert back.dtype == f32 and back.tobytes() == t.tobytes()


def test_decode_rejects_malformed(sgd_reference):
    f = encode_frame("A", Refusal("x"))
    with pytest.raises(EncodingError):
        decode_frame(b"\xee" + f[1:])
    with pytest.raises(EncodingError):
        decode_frame(f + b"\x00")
    with pytest.raises(EncodingError):
        decode_frame(f[:-1])
    with pytest.raises(EncodingError):
        decode_frame(encode_frame("A", Query("Gossip", "A")))
    with pytest.raises(EncodingError):
        parse_transcript(b"NOPE")


def test_absent_optional_must_be_zero():
    v = Verdict("NoDispute", (), None, Evidence("none", "equal"), ("A", "B"))
    f = bytearray(encode_frame(REFEREE, VerdictMsg(v, bytes(32))))
    # the absent step value sits right before the absent node index
    pos = bytes(f).find(b"\x00" + bytes(8) + b"\x00" + bytes(8))
    assert pos > 0
    f[pos + 3] = 1
    with pytest.raises(EncodingError):
        decode_frame(bytes(f))


# -- phase 1 -------------------------------------------------------------------------


@pytest.fixture(scope="module")
def long_program(fixtures_dir):
    return TrainingProgram.load(fixtures_dir / "mlp_small_sgd.prog", steps=400, schedule="20")


@pytest.fixture(scope="module")
def long_reference(long_program):
    return trainer("A", long_program)


def test_phase1_finds_step_137(long_program, long_reference):
    bad = trainer("B", long_program, "WrongOutputTensor step=137 node=w1.upd element=3")
    d = first_divergence(per_step_commitments(long_reference), per_step_commitments(bad))
    assert d == 137
    res = run(long_program, fork(long_reference, "A"), bad)
    v = res.verdict
    assert v.convicted == ("B",) and v.evidence.step == 137 and v.evidence.case == "3"
    # 400 steps with 20 intervals: one level of width 20, then single steps
    levels = [m for f in res.frames for who, m in [decode_frame(f)] if isinstance(m, DivergenceIndex)]
    assert [(m.level, m.lo, m.hi) for m in levels[::2]] == [(0, 120, 140), (1, 137, 138)]
    assert len(queries(res.frames, "HashList")) == 4


def test_phase1_fault_at_step_zero(sgd_program, sgd_reference):
    bad = trainer("B", sgd_program, "WrongOutputTensor step=0 node=w1.upd element=3")
    assert first_divergence(per_step_commitments(sgd_reference), per_step_commitments(bad)) == 0
    v = run(sgd_program, fork(sgd_reference, "A"), bad).verdict
    assert v.convicted == ("B",) and v.evidence.step == 0


def test_equal_outputs_no_dispute(sgd_program, sgd_reference):
    res = run(sgd_program, fork(sgd_reference, "A"), fork(sgd_reference, "B"))
    assert res.verdict.outcome == "NoDispute" and res.verdict.accepted == sgd_reference.output()
    assert queries(res.frames, "HashList") == []
    assert verify_frames(res.frames).ok


def test_phase1_contradiction_convicts(sgd_program, sgd_reference):
    bad = trainer("B", sgd_program, "InconsistentCommitment phase=1 position=1")
    v = run(sgd_program, fork(sgd_reference, "A"), bad).verdict
    assert v.convicted == ("B",) and v.evidence.case == "phase1"


# -- phase 2 ----------------------------------------------------------------------------


def test_phase2_finds_first_node(sgd_program, sgd_reference):
    bad = trainer("B", sgd_program, "WrongOutputTensor step=11 node=h element=3")
    # oracle: first differing node digest in independently replayed traces
    ta = [commit.hash_node(x) for x in step_trace(sgd_reference, 11).nodes]
    tb = [commit.hash_node(x) for x in step_trace(bad, 11).nodes]
    want = next(i for i in range(len(ta)) if ta[i] != tb[i])
    assert want == 5 == sgd_program.graph.index["h"]
    v = run(sgd_program, fork(sgd_reference, "A"), bad).verdict
    assert v.evidence.node_index == 5 and v.evidence.node_id == "h"


@pytest.mark.parametrize("mode", ["sequence", "opening"])
def test_inconsistent_phase2(sgd_program, sgd_reference, mode):
    bad = trainer("B", sgd_program, f"InconsistentCommitment phase=2 position=7 mode={mode}")
    res = run(sgd_program, fork(sgd_reference, "A"), bad)
    v = res.verdict
    assert v.convicted == ("B",) and v.evidence.case == "consistency" and v.evidence.step == 39
    if mode == "sequence":
        assert queries(res.frames, "NodeOpening") == []
    else:
        assert v.evidence.node_index == 7


# -- decision cases ------------------------------------------------------------------------


@pytest.mark.parametrize("fault, case, node", [
    ("WrongGraphStructure step=9 node=w1.upd mode=attr", "1", "w1.upd"),
    # o now reads h, so h's consumer list is the first node that differs
    ("WrongGraphStructure step=9 node=o mode=rewire", "1", "h"),
    ("WrongOutputTensor step=11 node=x element=10", "2a-data", "x"),
    ("WrongOutputTensor step=11 node=w1", "2a-state", "w1"),
    ("WrongInputWiring step=5 node=o", "2b", "o"),
    ("WrongOutputTensor step=11 node=h element=3", "3", "h"),
    ("SkipSteps count=3", "3", None),
])
@pytest.mark.parametrize("faulty", ["A", "B"])
def test_decision_cases(sgd_program, sgd_reference, fault, case, node, faulty):
    honest = "B" if faulty == "A" else "A"
    bad = trainer(faulty, sgd_program, fault)
    good = fork(sgd_reference, honest)
    res = run(sgd_program, *((bad, good) if faulty == "A" else (good, bad)))
    v = res.verdict
    assert v.outcome == "Dishonest" and v.convicted == (faulty,)
    assert v.winner == honest and v.accepted == sgd_reference.output()
    assert v.evidence.case == case
    if node is not None:
        assert v.evidence.node_id == node
    assert verify_frames(res.frames).ok


def test_case2a_state_at_step_zero_uses_initial_state(sgd_program, sgd_reference):
    bad = trainer("B", sgd_program, "WrongOutputTensor step=0 node=w1")
    res = run(sgd_program, fork(sgd_reference, "A"), bad)
    assert res.verdict.evidence.case == "2a-state" and res.verdict.convicted == ("B",)
    assert queries(res.frames, "MembershipProof")


def test_case3_recomputes_one_operator(sgd_program, sgd_reference):
    bad = trainer("B", sgd_program, "WrongOutputTensor step=11 node=h element=3")
    res = run(sgd_program, fork(sgd_reference, "A"), bad)
    assert res.counters.ops_executed == 1
    # the referee's own digest of the recomputed output is the honest one
    want = step_trace(sgd_reference, 11).nodes[5].output_hashes[0]
    assert want.hex() in res.verdict.evidence.recomputed


def test_both_dishonest(sgd_program):
    a = trainer("A", sgd_program, "WrongOutputTensor step=11 node=h element=3")
    b = trainer("B", sgd_program, "WrongOutputTensor step=11 node=h element=31")
    v = run(sgd_program, a, b).verdict
    assert v.outcome == "BothDishonest" and v.convicted == ("A", "B") and v.accepted is None
    assert v.winner is None


# -- refusals ---------------------------------------------------------------------------------


@pytest.mark.parametrize("kind, case", [
    ("HashList", "refusal"), ("NodeHashSeq", "refusal"), ("NodeOpening", "refusal"),
    # inputs agree, so the payload comes from the other party and case 3 decides
    ("TensorPayload", "3"),
])
def test_refusal_convicts_refuser(sgd_program, sgd_reference, kind, case):
    from refdel.harness.faults import OutputFlip

    eg = sgd_program.graph
    hook = OutputFlip(11, eg.index["h"], 0, 3)
    bad = RefusingTrainer("B", sgd_program, kind, hooks=hook)
    bad.train()
    v = run(sgd_program, fork(sgd_reference, "A"), bad).verdict
    assert v.convicted == ("B",) and v.winner == "A"
    assert v.evidence.case == case


def test_refused_evidence_counts_against_the_refuser(sgd_program, sgd_reference):
    from refdel.harness.faults import InputSwap, OutputFlip

    eg = sgd_program.graph
    for kind, hook, case in [
        ("TensorPayload", InputSwap(5, eg.index["o"], 0), "2b"),
        ("MembershipProof", OutputFlip(11, eg.index["w1"], 0, 0), "2a-state"),
    ]:
        bad = RefusingTrainer("B", sgd_program, kind, hooks=hook)
        bad.train()
        v = run(sgd_program, fork(sgd_reference, "A"), bad).verdict
        assert v.convicted == ("B",) and v.evidence.case == case


def test_honest_party_refusing_loses(sgd_program, sgd_reference):
    # refusing is never safe, even for a party whose run was correct
    good = RefusingTrainer("A", sgd_program, "NodeOpening", store=fork(sgd_reference, "s").store)
    bad = trainer("B", sgd_program, "WrongOutputTensor step=11 node=h element=3")
    v = run(sgd_program, good, bad).verdict
    assert v.convicted == ("A",) and v.evidence.case == "refusal"


def test_missing_output_commit(sgd_program, sgd_reference):
    silent = RefusingTrainer("B", sgd_program, "OutputCommit", store=fork(sgd_reference, "s").store)
    v = run(sgd_program, fork(sgd_reference, "A"), silent).verdict
    assert v.convicted == ("B",) and v.evidence.case == "refusal"


# -- evidence --------------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def case3_frames(sgd_program, sgd_reference):
    bad = trainer("B", sgd_program, "WrongOutputTensor step=11 node=h element=3")
    return run(sgd_program, fork(sgd_reference, "A"), bad).frames


def _blob(frames):
    from refdel.protocol.wire import TRANSCRIPT_MAGIC, _lp

    return TRANSCRIPT_MAGIC + b"".join(_lp(f) for f in frames)


def test_evidence_verifies(case3_frames, tmp_path):
    from refdel.protocol.wire import write_transcript

    chk = verify_frames(case3_frames)
    assert chk.ok and chk.verdict.convicted == ("B",)
    write_transcript(tmp_path / "t.rdtx", case3_frames)
    assert verify_evidence(tmp_path / "t.rdtx").ok
    assert verify_evidence(_blob(case3_frames)).ok


def test_evidence_rejects_any_flipped_byte(case3_frames):
    blob = _blob(case3_frames)
    rng = np.random.default_rng(5)
    for pos in rng.choice(len(blob), size=300, replace=False):
        bad = bytearray(blob)
        bad[pos] ^= 1 << int(rng.integers(8))
        assert not verify_evidence(bytes(bad)).ok, pos


def test_evidence_rejects_forged_verdict(case3_frames):
    _, last = decode_frame(case3_frames[-1])
    v = last.verdict
    swapped = dataclasses.replace(v, convicted=("A",))
    forged = case3_frames[:-1] + [encode_frame(REFEREE, VerdictMsg(swapped, last.chain))]
    chk = verify_frames(forged)
    assert not chk.ok and "differs" in chk.reason
    # a consistent chain over edited frames still fails replay
    edited = list(case3_frames[:-1])
    i = next(i for i, f in enumerate(edited) if isinstance(decode_frame(f)[1], NodeHashSeq))
    who, m = decode_frame(edited[i])
    edited[i] = encode_frame(who, NodeHashSeq((bytes(32),) + m.digests[1:]))
    rechained = edited + [encode_frame(REFEREE, VerdictMsg(v, frame_chain(edited)))]
    assert not verify_frames(rechained).ok


def test_evidence_rejects_wrong_c0(case3_frames):
    _, head = decode_frame(case3_frames[0])
    fake = dataclasses.replace(head, c0=dataclasses.replace(head.c0, root=bytes(32)))
    frames = [encode_frame(REFEREE, fake)] + list(case3_frames[1:-1])
    _, last = decode_frame(case3_frames[-1])
    frames.append(encode_frame(REFEREE, VerdictMsg(last.verdict, frame_chain(frames))))
    chk = verify_frames(frames)
    assert not chk.ok and "C0" in chk.reason


def test_evidence_rejects_non_referee_verdict(case3_frames):
    _, last = decode_frame(case3_frames[-1])
    frames = list(case3_frames[:-1]) + [encode_frame("A", last)]
    assert not verify_frames(frames).ok
    assert not verify_frames(case3_frames[:1]).ok


# -- multiparty ----------------------------------------------------------------------------------------


def test_multiparty_equal_claims_merge(sgd_program, sgd_reference):
    mp = resolve_multiparty(sgd_program, initial_commitment(sgd_program),
                            [fork(sgd_reference, n) for n in "ABC"])
    assert mp.duels == [] and mp.convicted == () and mp.accepted == sgd_reference.output()
    assert mp.groups == {"A": ("A", "B", "C")}


def test_multiparty_two_matches_dispute(sgd_program, sgd_reference):
    bad = trainer("B", sgd_program, "WrongInputWiring step=5 node=o")
    mp = resolve_multiparty(sgd_program, initial_commitment(sgd_program), [fork(sgd_reference, "A"), bad])
    res = run(sgd_program, fork(sgd_reference, "A"), bad)
    assert len(mp.duels) == 1 and mp.duels[0][2].frames == res.frames
    assert mp.convicted == ("B",) and mp.accepted == sgd_reference.output()


def test_multiparty_group_convicted_together(sgd_program, sgd_reference):
    spec = "WrongOutputTensor step=11 node=h element=3"
    roster = [trainer("A", sgd_program, spec), fork(sgd_reference, "B"), trainer("C", sgd_program, spec)]
    mp = resolve_multiparty(sgd_program, initial_commitment(sgd_program), roster)
    assert len(mp.duels) == 1
    assert set(mp.convicted) == {"A", "C"} and mp.accepted == sgd_reference.output()
    with pytest.raises(ValueError):
        resolve_multiparty(sgd_program, initial_commitment(sgd_program), roster[:1])


def test_divergence_announcements_reach_trainers(sgd_program, sgd_reference):
    got = []

    class Spy(Trainer):
        def on_divergence(self, msg):
            got.append(msg)
            super().on_divergence(msg)

    spy = Spy("A", sgd_program, store=fork(sgd_reference, "s").store)
    run(sgd_program, spy, trainer("B", sgd_program, "WrongOutputTensor step=11 node=h element=3"))
    assert got and all(m.target == "A" for m in got) and got[-1].hi - got[-1].lo == 1
