"""Offline re-verification of a sealed dispute transcript."""

from __future__ import annotations

from dataclasses import dataclass

from .. import commit
from ..graph import initial_state
from ..graph.nodes import EncodingError
from .referee import Referee, ReplayMismatch, ReplayTransport
from .wire import REFEREE, ProgramHeader, Verdict, VerdictMsg, decode_frame, encode_frame, frame_chain, parse_transcript


@dataclass(frozen=True)
class EvidenceCheck:
    ok: bool
    reason: str
    verdict: Verdict | None = None


def verify_frames(frames: list[bytes]) -> EvidenceCheck:
    """Replay the referee against the logged replies and compare verdicts.

    Needs nothing but the transcript: the header carries the program, the
    dataset and the agreed initial commitment.
    """
    from ..trainer import ProgramError, TrainingProgram

    if len(frames) < 2:
        return EvidenceCheck(False, "transcript too short")
    try:
        decoded = [decode_frame(f) for f in frames]
    except EncodingError as e:
        return EvidenceCheck(False, f"undecodable frame: {e}")
    # one byte string per message, so no byte can change without changing a message
    for i, (f, (who, msg)) in enumerate(zip(frames, decoded)):
        if encode_frame(who, msg) != f:
            return EvidenceCheck(False, f"frame {i} is not canonically encoded")
    (head_from, head), (last_from, last) = decoded[0], decoded[-1]
    if head_from != REFEREE or last_from != REFEREE:
        return EvidenceCheck(False, "header and verdict must come from the referee")
    if not isinstance(head, ProgramHeader) or not isinstance(last, VerdictMsg):
        return EvidenceCheck(False, "transcript must start with a program header and end with a verdict")
    if last.chain != frame_chain(frames[:-1]):
        return EvidenceCheck(False, "hash chain does not match the logged frames", last.verdict)
    if len(head.parties) != 2:
        return EvidenceCheck(False, "header must name two parties")
    try:
        program = TrainingProgram.from_config(head.config_text, model_text=head.model_text,
                                              dataset_bytes=head.dataset)
    except (ProgramError, ValueError, KeyError) as e:
        return EvidenceCheck(False, f"bad program in header: {e}")
    st = initial_state(program.model, program.optimizer)
    if commit.commit_initial_state(st.tensors()) != head.c0:
        return EvidenceCheck(False, "header C0 is not the program's initial state", last.verdict)
    replay = ReplayTransport(frames[1:-1])
    ref = Referee(program, head.c0, replay)
    try:
        verdict = ref.run(*head.parties)
    except (ReplayMismatch, EncodingError) as e:
        return EvidenceCheck(False, str(e), last.verdict)
    if not replay.exhausted:
        return EvidenceCheck(False, "transcript has frames the referee never consumed", last.verdict)
    if verdict != last.verdict:
        return EvidenceCheck(False, "replayed verdict differs from the recorded one", last.verdict)
    return EvidenceCheck(True, "verdict re-verified", verdict)


def verify_evidence(path_or_bytes) -> EvidenceCheck:
    try:
        if isinstance(path_or_bytes, (bytes, bytearray)):
            frames = parse_transcript(bytes(path_or_bytes))
        else:
            with open(path_or_bytes, "rb") as fh:
                frames = parse_transcript(fh.read())
    except (EncodingError, OSError) as e:
        return EvidenceCheck(False, f"cannot read transcript: {e}")
    return verify_frames(frames)
