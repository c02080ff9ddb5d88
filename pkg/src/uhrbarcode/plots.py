"""Report figures written next to the JSON outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def pr_figure(curves: dict[str, tuple], path) -> Path:
    """``curves`` maps a label to (recall, precision) arrays."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, (recall, precision) in curves.items():
        ax.step(recall, precision, where="post", label=label)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(loc="lower left")
    fig.tight_layout()
    return _save(fig, path)


def latency_figure(report: dict, path) -> Path:
    """Median bars with p95 whiskers per stage, end-to-end and the sliding-window baseline."""
    rows = [(k, v) for k, v in report["stages"].items()]
    rows.append(("end_to_end", report["end_to_end"]))
    if "sliding_window" in report:
        rows.append(("sliding_window", report["sliding_window"]))
    labels = [k for k, _ in rows]
    med = [v["median_ms"] or 0.0 for _, v in rows]
    err = [max((v["p95_ms"] or 0.0) - (v["median_ms"] or 0.0), 0.0) for _, v in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(labels, med, yerr=[[0] * len(err), err], capsize=3, color="#4878a8")
    ax.set_ylabel("ms (median, whisker = p95)")
    ax.set_yscale("log")
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    return _save(fig, path)


def _save(fig, path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.png")
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(tmp, dpi=100, metadata={"Software": None})
    plt.close(fig)
    tmp.replace(path)
    return path
