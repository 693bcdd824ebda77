"""Protocol messages and their frame codec.

A frame is ``tag (1 byte) || lp(sender) || lp(payload)`` where
``lp(b) = u64le(len(b)) || b``. Transcripts are a magic header followed by
length-prefixed frames.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import ClassVar, Iterable

import numpy as np

from ..commit import CheckpointCommitment, MerkleProof
from ..detops.tensor import deserialize_tensor, serialize_tensor
from ..graph.nodes import AugmentedCGNode, EncodingError, _Reader, deserialize_node, serialize_node

_U64 = struct.Struct("<Q")
TRANSCRIPT_MAGIC = b"RDTX\x01"
REFEREE = "referee"

QUERY_KINDS = ("OutputCommit", "HashList", "NodeHashSeq", "NodeOpening",
               "TensorPayload", "MembershipProof")


def _lp(b: bytes) -> bytes:
    return _U64.pack(len(b)) + b


def _text(s: str) -> bytes:
    return _lp(s.encode())


def _commit_bytes(c: CheckpointCommitment) -> bytes:
    if len(c.root) != 32:
        raise EncodingError("commitment root must be 32 bytes")
    return _U64.pack(c.step) + c.root + _U64.pack(c.leaf_count)


def _read_commit(r: _Reader) -> CheckpointCommitment:
    step = r.u64()
    root = r.take(32)
    return CheckpointCommitment(step, root, r.u64())


def _done(r: _Reader) -> None:
    if r.pos != len(r.buf):
        raise EncodingError("trailing bytes in payload")


class Message:
    TAG: ClassVar[int]

    def payload(self) -> bytes:
        raise NotImplementedError

    @classmethod
    def parse(cls, r: _Reader) -> "Message":
        raise NotImplementedError


@dataclass(frozen=True)
class OutputCommit(Message):
    TAG: ClassVar[int] = 0x01
    commitment: CheckpointCommitment

    def payload(self) -> bytes:
        return _commit_bytes(self.commitment)

    @classmethod
    def parse(cls, r):
        return cls(_read_commit(r))


@dataclass(frozen=True)
class HashList(Message):
    TAG: ClassVar[int] = 0x02
    commitments: tuple[CheckpointCommitment, ...]

    def payload(self) -> bytes:
        return _U64.pack(len(self.commitments)) + b"".join(map(_commit_bytes, self.commitments))

    @classmethod
    def parse(cls, r):
        return cls(tuple(_read_commit(r) for _ in range(r.count())))


@dataclass(frozen=True)
class DivergenceIndex(Message):
    """Referee announcement of the sub-interval chosen at ``level``."""

    TAG: ClassVar[int] = 0x03
    target: str
    level: int
    lo: int
    hi: int

    def payload(self) -> bytes:
        return _text(self.target) + struct.pack("<QQQ", self.level, self.lo, self.hi)

    @classmethod
    def parse(cls, r):
        return cls(r.text(), r.u64(), r.u64(), r.u64())


@dataclass(frozen=True)
class NodeHashSeq(Message):
    TAG: ClassVar[int] = 0x04
    digests: tuple[bytes, ...]

    def payload(self) -> bytes:
        if any(len(d) != 32 for d in self.digests):
            raise EncodingError("node digests must be 32 bytes")
        return _U64.pack(len(self.digests)) + b"".join(self.digests)

    @classmethod
    def parse(cls, r):
        return cls(tuple(r.take(32) for _ in range(r.count())))


@dataclass(frozen=True)
class NodeOpening(Message):
    TAG: ClassVar[int] = 0x05
    node: AugmentedCGNode

    def payload(self) -> bytes:
        return serialize_node(self.node)

    @classmethod
    def parse(cls, r):
        return cls(deserialize_node(r.take(len(r.buf) - r.pos)))


@dataclass(frozen=True)
class MembershipProofMsg(Message):
    """Merkle path, plus the emitting node's opening for step >= 1 checkpoints."""

    TAG: ClassVar[int] = 0x06
    proof: MerkleProof
    opening: AugmentedCGNode | None = None

    def payload(self) -> bytes:
        out = _lp(self.proof.encode())
        if self.opening is None:
            return out + b"\x00"
        return out + b"\x01" + _lp(serialize_node(self.opening))

    @classmethod
    def parse(cls, r):
        try:
            proof = MerkleProof.decode(r.lp())
        except ValueError as e:
            raise EncodingError(str(e)) from e
        flag = r.take(1)
        if flag == b"\x00":
            return cls(proof)
        if flag != b"\x01":
            raise EncodingError("bad opening flag")
        return cls(proof, deserialize_node(r.lp()))


@dataclass(frozen=True, eq=False)
class TensorPayload(Message):
    TAG: ClassVar[int] = 0x07
    tensor: np.ndarray

    def payload(self) -> bytes:
        return serialize_tensor(self.tensor)

    @classmethod
    def parse(cls, r):
        try:
            t, end = deserialize_tensor(r.buf, r.pos)
        except ValueError as e:
            raise EncodingError(str(e)) from e
        r.pos = end
        return cls(t)

    def __eq__(self, other):
        return isinstance(other, TensorPayload) and self.payload() == other.payload()


@dataclass(frozen=True)
class Refusal(Message):
    TAG: ClassVar[int] = 0x08
    reason: str = ""

    def payload(self) -> bytes:
        return _text(self.reason)

    @classmethod
    def parse(cls, r):
        return cls(r.text())


@dataclass(frozen=True)
class Evidence:
    case: str
    reason: str
    step: int | None = None
    node_index: int | None = None
    node_id: str = ""
    recomputed: tuple[str, ...] = ()  # hex digests the referee computed itself


@dataclass(frozen=True)
class Verdict:
    outcome: str  # NoDispute | Dishonest | BothDishonest
    convicted: tuple[str, ...]
    accepted: CheckpointCommitment | None
    evidence: Evidence
    parties: tuple[str, ...] = ()

    @property
    def winner(self) -> str | None:
        rest = [p for p in self.parties if p not in self.convicted]
        return rest[0] if self.accepted is not None and rest else None


def _opt_int(v: int | None) -> bytes:
    return b"\x00" + bytes(8) if v is None else b"\x01" + _U64.pack(v)


def _read_opt_int(r: _Reader) -> int | None:
    flag, v = r.take(1), r.u64()
    if flag not in (b"\x00", b"\x01"):
        raise EncodingError("bad optional flag")
    if flag == b"\x00" and v:
        raise EncodingError("absent optional value must be zero")
    return v if flag == b"\x01" else None


@dataclass(frozen=True)
class VerdictMsg(Message):
    """The verdict plus a SHA-256 chain over every earlier transcript frame."""

    TAG: ClassVar[int] = 0x09
    verdict: Verdict
    chain: bytes

    def payload(self) -> bytes:
        v, ev = self.verdict, self.verdict.evidence
        out = [_text(v.outcome), _U64.pack(len(v.parties))]
        out += [_text(p) for p in v.parties]
        out.append(_U64.pack(len(v.convicted)))
        out += [_text(p) for p in v.convicted]
        out.append(b"\x00" if v.accepted is None else b"\x01" + _commit_bytes(v.accepted))
        out += [_text(ev.case), _text(ev.reason), _opt_int(ev.step), _opt_int(ev.node_index),
                _text(ev.node_id), _U64.pack(len(ev.recomputed))]
        out += [_text(h) for h in ev.recomputed]
        out.append(self.chain)
        return b"".join(out)

    @classmethod
    def parse(cls, r):
        outcome = r.text()
        parties = tuple(r.text() for _ in range(r.count()))
        convicted = tuple(r.text() for _ in range(r.count()))
        flag = r.take(1)
        if flag not in (b"\x00", b"\x01"):
            raise EncodingError("bad accepted flag")
        accepted = _read_commit(r) if flag == b"\x01" else None
        case, reason = r.text(), r.text()
        step, node = _read_opt_int(r), _read_opt_int(r)
        node_id = r.text()
        recomputed = tuple(r.text() for _ in range(r.count()))
        chain = r.take(32)
        ev = Evidence(case, reason, step, node, node_id, recomputed)
        return cls(Verdict(outcome, convicted, accepted, ev, parties), chain)


@dataclass(frozen=True)
class Query(Message):
    TAG: ClassVar[int] = 0x0A
    kind: str
    target: str
    level: int = 0
    lo: int = 0
    hi: int = 0
    step: int = 0
    index: int = 0
    slot: int = 0
    name: str = ""

    def payload(self) -> bytes:
        return (_text(self.kind) + _text(self.target)
                + struct.pack("<QQQQQQ", self.level, self.lo, self.hi, self.step, self.index, self.slot)
                + _text(self.name))

    @classmethod
    def parse(cls, r):
        kind, target = r.text(), r.text()
        if kind not in QUERY_KINDS:
            raise EncodingError(f"unknown query kind {kind!r}")
        nums = [r.u64() for _ in range(6)]
        return cls(kind, target, *nums, name=r.text())


@dataclass(frozen=True)
class ProgramHeader(Message):
    """Everything a standalone verifier needs: program, dataset and C0."""

    TAG: ClassVar[int] = 0x0B
    model_text: str
    config_text: str
    dataset: bytes
    c0: CheckpointCommitment
    parties: tuple[str, ...] = field(default=())

    def payload(self) -> bytes:
        out = [_text(self.model_text), _text(self.config_text), _lp(self.dataset),
               _commit_bytes(self.c0), _U64.pack(len(self.parties))]
        out += [_text(p) for p in self.parties]
        return b"".join(out)

    @classmethod
    def parse(cls, r):
        model, cfg, data = r.text(), r.text(), r.lp()
        c0 = _read_commit(r)
        parties = tuple(r.text() for _ in range(r.count()))
        return cls(model, cfg, data, c0, parties)


MESSAGE_TYPES: dict[int, type[Message]] = {
    m.TAG: m for m in (OutputCommit, HashList, DivergenceIndex, NodeHashSeq, NodeOpening,
                       MembershipProofMsg, TensorPayload, Refusal, VerdictMsg, Query, ProgramHeader)
}


def encode_frame(sender: str, msg: Message) -> bytes:
    return bytes([msg.TAG]) + _text(sender) + _lp(msg.payload())


def decode_frame(frame: bytes) -> tuple[str, Message]:
    r = _Reader(frame)
    tag = r.take(1)[0]
    cls = MESSAGE_TYPES.get(tag)
    if cls is None:
        raise EncodingError(f"unknown message tag 0x{tag:02x}")
    sender = r.text()
    body = _Reader(r.lp())
    _done(r)
    msg = cls.parse(body)
    _done(body)
    return sender, msg


def frame_chain(frames: Iterable[bytes]) -> bytes:
    h = hashlib.sha256()
    for f in frames:
        h.update(_lp(f))
    return h.digest()


def write_transcript(path, frames: Iterable[bytes]) -> None:
    with open(path, "wb") as fh:
        fh.write(TRANSCRIPT_MAGIC)
        for f in frames:
            fh.write(_lp(f))


def read_transcript(path) -> list[bytes]:
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_transcript(data)


def parse_transcript(data: bytes) -> list[bytes]:
    if not data.startswith(TRANSCRIPT_MAGIC):
        raise EncodingError("not a transcript file")
    r = _Reader(data, len(TRANSCRIPT_MAGIC))
    frames = []
    while r.pos < len(r.buf):
        frames.append(r.lp())
    return frames
