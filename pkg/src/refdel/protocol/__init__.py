"""Dispute protocol: wire messages, the referee, and evidence verification."""

from .referee import (
    DisputeResult,
    LiveTransport,
    MultipartyResult,
    Referee,
    RefereeCounters,
    ReplayMismatch,
    ReplayTransport,
    dispute,
    program_header,
    resolve_multiparty,
    run_phase1,
)
from .verify import EvidenceCheck, verify_evidence, verify_frames
from .wire import (
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
    read_transcript,
    write_transcript,
)

__all__ = [
    "DisputeResult",
    "DivergenceIndex",
    "Evidence",
    "HashList",
    "LiveTransport",
    "MembershipProofMsg",
    "Message",
    "MultipartyResult",
    "NodeHashSeq",
    "NodeOpening",
    "OutputCommit",
    "ProgramHeader",
    "Query",
    "Referee",
    "RefereeCounters",
    "Refusal",
    "ReplayMismatch",
    "ReplayTransport",
    "TensorPayload",
    "Verdict",
    "VerdictMsg",
    "decode_frame",
    "dispute",
    "encode_frame",
    "program_header",
    "read_transcript",
    "resolve_multiparty",
    "run_phase1",
    "write_transcript",
    "EvidenceCheck",
    "verify_evidence",
    "verify_frames",
]
