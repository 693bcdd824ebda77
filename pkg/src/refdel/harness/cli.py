"""Command line: ``refdel train | dispute | scenario run | verify-evidence | bench detops``.

Verdict subcommands exit 0 when the outcome matches what was expected and 1
otherwise; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from .. import commit
from .. import detops as ops
from ..protocol import dispute, verify_evidence, write_transcript
from ..trainer import CheckpointStore, ProgramError, TrainingError, TrainingProgram
from .faults import FaultError, FaultSpec, build_trainer
from .scenario import ScenarioConfig, ScenarioError, initial_commitment, report_from, run_scenario

FAULT_FILE = "fault.txt"


def _block(title: str, lines) -> str:
    return "\n".join([f"=== {title} ===", *lines, "=== end ==="])


def cmd_train(args) -> int:
    program = TrainingProgram.load(args.program)
    fault = FaultSpec.parse(args.fault) if args.fault else None
    trainer = build_trainer("trainer", program, fault)
    with ops.workers(args.workers):
        out = trainer.train()
    trainer.store.save(args.out)
    if fault is not None:
        (Path(args.out) / FAULT_FILE).write_text(str(fault) + "\n")
    print(out.hex())
    return 0


def _restore(name: str, path: str, program: TrainingProgram):
    p = Path(path)
    fault = None
    if (p / FAULT_FILE).exists():
        fault = FaultSpec.parse((p / FAULT_FILE).read_text().strip())
    store = CheckpointStore.load(p)
    if not store.verify(program.graph):
        raise ProgramError(f"store {path} is internally inconsistent")
    return build_trainer(name, program, fault, store=store)


def _expectation(text: str | None) -> dict[str, str]:
    if not text:
        return {}
    outcome, _, convicted = text.partition(":")
    exp = {"outcome": outcome}
    if convicted:
        exp["convicted"] = convicted
    return exp


def cmd_dispute(args) -> int:
    program = TrainingProgram.load(args.program)
    a = _restore("a", args.a, program)
    b = _restore("b", args.b, program)
    res = dispute(program, initial_commitment(program), a, b)
    duels = [res] if res.verdict.outcome != "NoDispute" else []
    report = report_from("dispute", program, [a, b], duels, res.verdict.accepted,
                         res.verdict.convicted, _expectation(args.expect))
    if args.transcript:
        write_transcript(args.transcript, res.frames)
        report.transcripts.append(args.transcript)
    text = report.text()
    if args.report:
        Path(args.report).write_text(text)
    print(_block("dispute", text.splitlines()))
    return 0 if report.ok else 1


def cmd_scenario(args) -> int:
    cfg = ScenarioConfig.load(args.config)
    report = run_scenario(cfg, args.out, args.figure)
    print(_block(f"scenario {cfg.name}", report.lines()))
    return 0 if report.ok else 1


def cmd_verify(args) -> int:
    chk = verify_evidence(args.transcript)
    lines = [f"ok = {str(chk.ok).lower()}", f"reason = {chk.reason}"]
    if chk.verdict is not None:
        v = chk.verdict
        lines += [f"outcome = {v.outcome}", f"convicted = {','.join(v.convicted) or 'none'}",
                  f"case = {v.evidence.case}"]
    print(_block("evidence", lines))
    return 0 if chk.ok else 1


_BENCH_OPS = {
    "matmul": (lambda d, rng: (rng(d[0], d[1]), rng(d[1], d[2])), ops.matmul, lambda d: 2 * d[0] * d[1] * d[2]),
    "softmax": (lambda d, rng: (rng(d[0], d[1]),), ops.softmax, lambda d: 5 * d[0] * d[1]),
    "reduce_sum": (lambda d, rng: (rng(d[0], d[1]),), lambda x: ops.reduce_sum(x, 1), lambda d: d[0] * d[1]),
}


def cmd_bench(args) -> int:
    dims = tuple(int(x) for x in args.dims.split(","))
    need = 3 if args.op == "matmul" else 2
    if len(dims) != need:
        raise ValueError(f"{args.op} needs {need} dims")
    make, fn, flops = _BENCH_OPS[args.op]
    key = ops.DetRngKey.for_label(0, "bench")
    inputs = make(dims, lambda *s: ops.det_rand(key, s, "normal"))
    rows, digests = [], set()
    for w in (int(x) for x in args.workers.split(",")):
        with ops.workers(w):
            fn(*inputs)
            t0 = time.perf_counter()
            for _ in range(args.repeat):
                out = fn(*inputs)
            dt = (time.perf_counter() - t0) / args.repeat
        h = commit.hash_tensor(out).hex()
        digests.add(h)
        rows.append({"workers": w, "seconds": dt, "gflops": flops(dims) / dt / 1e9, "digest": h,
                     "label": f"{args.op} {args.dims}"})
    lines = [f"op = {args.op}", f"dims = {args.dims}", "workers  seconds    GFLOP/s  digest"]
    lines += [f"{r['workers']:>7}  {r['seconds']:.5f}  {r['gflops']:9.3f}  {r['digest'][:16]}" for r in rows]
    lines.append(f"bitwise_identical = {str(len(digests) == 1).lower()}")
    if args.figure:
        from .plots import plot_bench

        plot_bench(rows, args.figure)
        lines.append(f"figure = {args.figure}")
    print(_block("bench detops", lines))
    return 0 if len(digests) == 1 else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="refdel", description="Refereed delegation of training runs.")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("train", help="run the trainer role and print the final commitment")
    p.add_argument("program")
    p.add_argument("--out", required=True, help="checkpoint store directory")
    p.add_argument("--fault", help="fault spec, e.g. 'WrongOutputTensor step=3 node=mm'")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("dispute", help="referee two stored training runs")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--program", required=True)
    p.add_argument("--report")
    p.add_argument("--transcript")
    p.add_argument("--expect", help="OUTCOME[:convicted], e.g. Dishonest:b")
    p.set_defaults(fn=cmd_dispute)

    p = sub.add_parser("scenario", help="fault-injection scenarios")
    ssub = p.add_subparsers(dest="action", required=True)
    r = ssub.add_parser("run")
    r.add_argument("config")
    r.add_argument("--out", help="directory for transcripts and the report")
    r.add_argument("--figure", help="write a report figure (png)")
    r.set_defaults(fn=cmd_scenario)

    p = sub.add_parser("verify-evidence", help="re-verify a dispute transcript offline")
    p.add_argument("transcript")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("bench", help="operator benchmarks")
    bsub = p.add_subparsers(dest="target", required=True)
    b = bsub.add_parser("detops")
    b.add_argument("--op", choices=sorted(_BENCH_OPS), default="matmul")
    b.add_argument("--dims", default="128,256,128")
    b.add_argument("--workers", default="1,2,4,8")
    b.add_argument("--repeat", type=int, default=3)
    b.add_argument("--figure")
    b.set_defaults(fn=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ProgramError, ScenarioError, FaultError, TrainingError, FileNotFoundError, ValueError) as e:
        print(f"refdel: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
