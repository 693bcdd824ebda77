"""Report figures, rendered headless to files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_report(report, path) -> None:
    """Trainer work per party, and referee bytes against one state snapshot."""
    names = list(report.trainers)
    executed = [report.trainers[n]["steps_executed"] for n in names]
    reexec = [report.trainers[n]["steps_reexecuted"] for n in names]
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.5))
    xs = range(len(names))
    ax0.bar([x - 0.2 for x in xs], executed, 0.4, label="executed")
    ax0.bar([x + 0.2 for x in xs], reexec, 0.4, label="re-executed")
    ax0.set_xticks(list(xs), names)
    ax0.set_ylabel("training steps")
    ax0.legend(frameon=False)
    ax0.set_title("trainer work")
    labels = ["state snapshot", "referee received", "referee payloads"]
    vals = [report.state_bytes, report.referee["bytes_received"], report.referee["tensor_bytes"]]
    ax1.bar(labels, [max(v, 1) for v in vals], color=["0.6", "tab:blue", "tab:orange"])
    ax1.set_yscale("log")
    ax1.set_ylabel("bytes")
    ax1.set_title(f"referee cost ({report.referee['ops_executed']} op)")
    ax1.tick_params(axis="x", labelsize=8)
    fig.suptitle(f"{report.scenario}: {report.outcome} case {report.case}")
    fig.tight_layout()
    _save(fig, path)


def plot_bench(rows, path) -> None:
    """Throughput per worker count; rows are dicts with workers and gflops."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([r["workers"] for r in rows], [r["gflops"] for r in rows], "o-")
    ax.set_xlabel("workers")
    ax.set_ylabel("GFLOP/s")
    ax.set_xscale("log", base=2)
    ax.set_title(rows[0]["label"] if rows else "")
    fig.tight_layout()
    _save(fig, path)
