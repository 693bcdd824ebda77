"""Digests, Merkle trees and checkpoint commitments.

Domain-separation bytes: 0x00 Merkle leaf, 0x01 Merkle internal node,
0x54 tensor encoding, 0x4E node encoding. An unpaired rightmost node is
promoted to the next level unchanged (never duplicated).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .detops.tensor import serialize_tensor
from .graph.nodes import AugmentedCGNode, StepTrace, serialize_node

LEAF = b"\x00"
INTERNAL = b"\x01"
DIGEST_SIZE = 32
_U64 = struct.Struct("<Q")


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def hash_tensor(t: np.ndarray) -> bytes:
    return sha256(serialize_tensor(t))


def hash_node(n: AugmentedCGNode) -> bytes:
    return sha256(serialize_node(n))


def _leaf(d: bytes) -> bytes:
    return sha256(LEAF + d)


def _parent(left: bytes, right: bytes) -> bytes:
    return sha256(INTERNAL + left + right)


def _levels(leaves: Sequence[bytes]) -> list[list[bytes]]:
    if not leaves:
        raise ValueError("Merkle tree needs at least one leaf")
    level = [_leaf(d) for d in leaves]
    out = [level]
    while len(level) > 1:
        nxt = [_parent(level[i], level[i + 1]) for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
        out.append(level)
    return out


def merkle_root(leaves: Sequence[bytes]) -> bytes:
    return _levels(leaves)[-1][0]


# sibling side flags
LEFT, RIGHT = 0, 1


@dataclass(frozen=True)
class MerkleProof:
    index: int
    leaf_count: int
    path: tuple[tuple[bytes, int], ...]  # (sibling digest, side of sibling)

    def encode(self) -> bytes:
        out = [_U64.pack(self.index), _U64.pack(self.leaf_count), _U64.pack(len(self.path))]
        for sib, side in self.path:
            out.append(bytes([side]) + sib)
        return b"".join(out)

    @classmethod
    def decode(cls, buf: bytes) -> "MerkleProof":
        if len(buf) < 24:
            raise ValueError("truncated Merkle proof")
        index, count, n = struct.unpack_from("<QQQ", buf)
        if n > 64 or len(buf) != 24 + 33 * n:
            raise ValueError("malformed Merkle proof")
        path = []
        for i in range(n):
            off = 24 + 33 * i
            path.append((bytes(buf[off + 1:off + 33]), buf[off]))
        return cls(index, count, tuple(path))


def _path_shape(index: int, count: int) -> list[int | None]:
    """Expected sibling side per level; None where the node is promoted."""
    shape = []
    while count > 1:
        if index % 2:
            shape.append(LEFT)
        elif index + 1 < count:
            shape.append(RIGHT)
        else:
            shape.append(None)
        index //= 2
        count = (count + 1) // 2
    return shape


def merkle_prove(leaves: Sequence[bytes], index: int) -> MerkleProof:
    if not 0 <= index < len(leaves):
        raise IndexError(f"leaf index {index} out of range for {len(leaves)} leaves")
    levels = _levels(leaves)
    path, i = [], index
    for level in levels[:-1]:
        if i % 2:
            path.append((level[i - 1], LEFT))
        elif i + 1 < len(level):
            path.append((level[i + 1], RIGHT))
        i //= 2
    return MerkleProof(index, len(leaves), tuple(path))


def merkle_verify(root: bytes, leaf: bytes, proof: MerkleProof, leaf_count: int | None = None) -> bool:
    """Check ``leaf`` sits at ``proof.index`` of the tree committed by ``root``.

    Side flags must match the shape implied by (index, leaf_count), so a
    proof cannot be replayed at another index.
    """
    if leaf_count is not None and leaf_count != proof.leaf_count:
        return False
    if not 0 <= proof.index < proof.leaf_count:
        return False
    expected = [s for s in _path_shape(proof.index, proof.leaf_count) if s is not None]
    if [side for _, side in proof.path] != expected:
        return False
    h = _leaf(leaf)
    for sib, side in proof.path:
        if len(sib) != DIGEST_SIZE:
            return False
        h = _parent(sib, h) if side == LEFT else _parent(h, sib)
    return h == root


@dataclass(frozen=True)
class CheckpointCommitment:
    step: int
    root: bytes
    leaf_count: int

    def hex(self) -> str:
        return self.root.hex()


def commit_step_trace(tr: StepTrace) -> CheckpointCommitment:
    """Commitment to the state after step ``tr.step``, i.e. checkpoint ``tr.step + 1``."""
    if not tr.nodes:
        raise ValueError("cannot commit an empty trace")
    leaves = [hash_node(n) for n in tr.nodes]
    return CheckpointCommitment(tr.step + 1, merkle_root(leaves), len(leaves))


def state_leaves(tensors: Mapping[str, np.ndarray]) -> tuple[list[str], list[bytes]]:
    names = sorted(tensors, key=lambda s: s.encode())
    return names, [hash_tensor(tensors[n]) for n in names]


def commit_initial_state(tensors: Mapping[str, np.ndarray], step: int = 0) -> CheckpointCommitment:
    """Step-0 commitment: leaves are tensor digests in byte order of their names."""
    _, leaves = state_leaves(tensors)
    return CheckpointCommitment(step, merkle_root(leaves), len(leaves))
