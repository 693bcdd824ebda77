"""Scenario configs, end-to-end runs and line-oriented reports."""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path

from .. import commit
from ..graph import initial_state
from ..protocol import dispute, resolve_multiparty, write_transcript
from ..protocol.referee import DisputeResult
from ..trainer import Trainer, TrainingProgram
from .faults import FaultSpec, build_trainer


class ScenarioError(ValueError):
    pass


def estimate_reexecution_fraction(n: int) -> float:
    """Closed form of 1/N + 1/N^2 + ... for a per-level checkpoint count N."""
    if n < 2:
        raise ValueError("checkpoint count must be >= 2")
    return 1.0 / (n - 1)


@dataclass
class ScenarioConfig:
    name: str
    program: TrainingProgram
    roster: list[tuple[str, FaultSpec | None]]
    expect: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_text(cls, text: str, base_dir=".", name: str = "scenario") -> "ScenarioConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        if "scenario" not in cp:
            raise ScenarioError("missing [scenario] section")
        s = cp["scenario"]
        if "program" not in s:
            raise ScenarioError("missing program")
        overrides = {k: s[k] for k in ("steps", "schedule", "optimizer", "lr", "seed") if k in s}
        program = TrainingProgram.load(Path(base_dir) / s["program"], **overrides)
        names = [t.strip() for t in s.get("trainers", "A, B").split(",") if t.strip()]
        if len(names) < 2 or len(set(names)) != len(names):
            raise ScenarioError("need at least two distinct trainer names")
        roster = []
        for t in names:
            sec = cp[f"trainer.{t}"] if f"trainer.{t}" in cp else {}
            spec = sec.get("fault", "").strip()
            fault = FaultSpec.parse(spec) if spec else None
            if fault is not None:
                fault.check(program)
            roster.append((t, fault))
        expect = {k[7:]: v.strip() for k, v in s.items() if k.startswith("expect_")}
        return cls(s.get("name", name), program, roster, expect)

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        p = Path(path)
        return cls.from_text(p.read_text(), p.parent, p.stem)


@dataclass
class Report:
    scenario: str
    outcome: str
    convicted: tuple[str, ...]
    accepted_hex: str
    accepted_from: str
    case: str
    step: int | None
    node: int | None
    node_id: str
    trainers: dict[str, dict[str, int]]
    referee: dict[str, int]
    state_bytes: int
    duels: list[DisputeResult]
    expect: dict[str, str]
    transcripts: list[str] = field(default_factory=list)
    figure: str = ""

    def actual(self) -> dict[str, str]:
        return {
            "outcome": self.outcome,
            "convicted": ",".join(self.convicted) or "none",
            "accepted": self.accepted_from or "none",
            "case": self.case,
            "step": "none" if self.step is None else str(self.step),
            "node": "none" if self.node is None else str(self.node),
        }

    def mismatches(self) -> list[str]:
        act = self.actual()
        out = []
        for k, want in self.expect.items():
            got = act.get(k)
            if got is None:
                out.append(f"unknown expectation {k}")
            elif k == "convicted":
                if set(want.split(",")) != set(got.split(",")):
                    out.append(f"convicted: expected {want}, got {got}")
            elif k == "node" and want == self.node_id:
                continue
            elif want != got:
                out.append(f"{k}: expected {want}, got {got}")
        return out

    @property
    def ok(self) -> bool:
        return not self.mismatches()

    def lines(self) -> list[str]:
        out = [f"scenario = {self.scenario}"]
        out += [f"{k} = {v}" for k, v in self.actual().items()]
        out += [f"accepted_commitment = {self.accepted_hex or 'none'}", f"node_id = {self.node_id or 'none'}"]
        for t, counters in self.trainers.items():
            out += [f"{k}.{t} = {v}" for k, v in counters.items()]
        out += [f"referee_{k} = {v}" for k, v in self.referee.items()]
        out += [f"state_bytes = {self.state_bytes}", f"duels = {len(self.duels)}"]
        out += [f"transcript = {p}" for p in self.transcripts]
        if self.figure:
            out.append(f"figure = {self.figure}")
        out += [f"expect_{k} = {v}" for k, v in self.expect.items()]
        out += [f"mismatch = {m}" for m in self.mismatches()]
        out.append(f"result = {'PASS' if self.ok else 'FAIL'}")
        return out

    def text(self) -> str:
        return "\n".join(self.lines()) + "\n"


def _trainer_counters(t: Trainer, duels) -> dict[str, int]:
    sent = sum(d.bytes_sent.get(t.name, 0) for d in duels)
    recv = sum(d.bytes_received.get(t.name, 0) for d in duels)
    return {"steps_executed": t.steps_executed, "steps_reexecuted": t.steps_reexecuted,
            "bytes_sent": sent, "bytes_received": recv}


def initial_commitment(program: TrainingProgram) -> commit.CheckpointCommitment:
    """C0 as the client computes it from the program."""
    st = initial_state(program.model, program.optimizer)
    return commit.commit_initial_state(st.tensors())


def run_trainers(trainers) -> None:
    for t in trainers:
        t.train()


def report_from(name, program, trainers, duels, accepted, convicted, expect) -> Report:
    by_name = {t.name: t for t in trainers}
    if duels:
        last = duels[-1].verdict
        ev = last.evidence
        outcome = last.outcome if len(duels) == 1 else ("Dishonest" if accepted is not None else "BothDishonest")
        case, step, node, node_id = ev.case, ev.step, ev.node_index, ev.node_id
    else:
        outcome, case, step, node, node_id = "NoDispute", "none", None, None, ""
    acc_from = ""
    if accepted is not None:
        acc_from = next((t.name for t in trainers if t.name not in convicted and t.output() == accepted), "")
    referee = {
        "ops_executed": sum(d.counters.ops_executed for d in duels),
        "tensor_bytes": sum(d.counters.tensor_bytes for d in duels),
        "peak_tensor_bytes": max((d.counters.peak_tensor_bytes for d in duels), default=0),
        "bytes_received": sum(d.bytes_received.get("referee", 0) for d in duels),
    }
    state = trainers[0].store[0].state
    return Report(
        name, outcome, tuple(convicted), accepted.hex() if accepted is not None else "", acc_from,
        case, step, node, node_id, {t: _trainer_counters(by_name[t], duels) for t in by_name},
        referee, state.nbytes(), list(duels), dict(expect),
    )


def run_scenario(cfg: ScenarioConfig, out_dir: str | os.PathLike | None = None,
                 figure: str | os.PathLike | None = None) -> Report:
    """Train every roster member, resolve disputes, and report."""
    program = cfg.program
    trainers = [build_trainer(n, program, f) for n, f in cfg.roster]
    run_trainers(trainers)
    c0 = initial_commitment(program)
    if len(trainers) == 2:
        res = dispute(program, c0, trainers[0], trainers[1])
        duels = [res] if res.verdict.outcome != "NoDispute" else []
        report = report_from(cfg.name, program, trainers, duels, res.verdict.accepted,
                             res.verdict.convicted, cfg.expect)
        all_duels = [res]
    else:
        mp = resolve_multiparty(program, c0, trainers)
        all_duels = [d for _, _, d in mp.duels]
        report = report_from(cfg.name, program, trainers, all_duels, mp.accepted, mp.convicted, cfg.expect)
    if figure is not None:
        from .plots import plot_report

        plot_report(report, figure)
        report.figure = str(figure)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i, d in enumerate(all_duels):
            p = out / f"{cfg.name}.{i}.rdtx"
            write_transcript(p, d.frames)
            report.transcripts.append(str(p))
        (out / f"{cfg.name}.report").write_text(report.text())
    return report
