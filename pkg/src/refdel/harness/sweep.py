"""Randomized fault sampling for soundness sweeps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..protocol import DisputeResult, EvidenceCheck, dispute, resolve_multiparty, verify_frames
from ..protocol.referee import MultipartyResult
from ..trainer import Trainer, TrainingError, TrainingProgram
from .faults import FAULT_KINDS, FaultSpec, build_trainer
from .scenario import initial_commitment

REFUSABLE = ("HashList", "NodeHashSeq", "NodeOpening", "TensorPayload", "MembershipProof")


def sample_fault(program: TrainingProgram, rng: np.random.Generator, kind: str | None = None) -> FaultSpec:
    """A fault of ``kind`` (random if None) at a random location."""
    eg = program.graph
    kind = kind or FAULT_KINDS[int(rng.integers(len(FAULT_KINDS)))]
    n, size = program.steps, len(eg)
    step = int(rng.integers(n))
    node = int(rng.integers(size))
    el = int(rng.integers(1 << 16))
    if kind == "WrongOutputTensor":
        slot = int(rng.integers(eg.nodes[node].n_outputs))
        text = f"{kind} step={step} node={node} slot={slot} element={el}"
    elif kind == "WrongInputWiring":
        computed = [i for i, x in enumerate(eg.nodes) if x.inputs]
        text = f"{kind} step={step} node={computed[int(rng.integers(len(computed)))]}"
    elif kind == "WrongGraphStructure":
        mode = ("rewire", "attr")[int(rng.integers(2))]
        text = f"{kind} step={step} node={node} mode={mode}"
    elif kind == "SkipSteps":
        text = f"{kind} count={int(rng.integers(1, min(n, 5) + 1))}"
    elif kind == "InconsistentCommitment":
        phase = int(rng.integers(1, 3))
        if phase == 1:
            text = f"{kind} phase=1 position={int(rng.integers(4))}"
        else:
            mode = ("sequence", "opening")[int(rng.integers(2))]
            text = f"{kind} phase=2 position={node} mode={mode}"
    else:
        q = REFUSABLE[int(rng.integers(len(REFUSABLE)))]
        text = f"{kind} query={q} step={step} node={node} element={el}"
    return FaultSpec.parse(text)


def fork(t: Trainer, name: str) -> Trainer:
    """A fresh honest trainer sharing an already-trained store's contents."""
    out = Trainer(name, t.program)
    out.store.entries = dict(t.store.entries)
    return out


def faulty_trainer(program, name, rng, kind, reference: Trainer, tries: int = 50):
    """Sample until the fault actually changes the final commitment.

    Some single-bit deviations are absorbed by later rounding or touch
    unused outputs; the run's output is then correct and there is nothing
    to dispute. Others (e.g. a corrupted label) crash the deviating run, which
    then has no output to claim.
    """
    for _ in range(tries):
        spec = sample_fault(program, rng, kind)
        t = build_trainer(name, program, spec)
        try:
            t.train()
        except TrainingError:
            continue
        if t.output() != reference.output():
            return spec, t
    raise RuntimeError(f"no effective {kind} fault found in {tries} draws")


@dataclass
class SweepCase:
    fault: FaultSpec
    honest: str
    result: DisputeResult
    check: EvidenceCheck

    @property
    def sound(self) -> bool:
        v = self.result.verdict
        faulty = "B" if self.honest == "A" else "A"
        return (v.outcome == "Dishonest" and v.convicted == (faulty,)
                and v.winner == self.honest and self.check.ok)


def soundness_case(program: TrainingProgram, reference: Trainer, rng, kind: str) -> SweepCase:
    honest_name = ("A", "B")[int(rng.integers(2))]
    faulty_name = "B" if honest_name == "A" else "A"
    spec, bad = faulty_trainer(program, faulty_name, rng, kind, reference)
    good = fork(reference, honest_name)
    pair = (good, bad) if honest_name == "A" else (bad, good)
    res = dispute(program, initial_commitment(program), *pair)
    return SweepCase(spec, honest_name, res, verify_frames(res.frames))


def multiparty_case(program: TrainingProgram, reference: Trainer, rng, k: int):
    """k trainers, exactly one honest at a random roster position."""
    names = [chr(ord("A") + i) for i in range(k)]
    honest = names[int(rng.integers(k))]
    roster, specs = [], {}
    for nm in names:
        if nm == honest:
            roster.append(fork(reference, nm))
        else:
            spec, t = faulty_trainer(program, nm, rng, None, reference)
            roster.append(t)
            specs[nm] = spec
    mp: MultipartyResult = resolve_multiparty(program, initial_commitment(program), roster)
    return honest, specs, mp
