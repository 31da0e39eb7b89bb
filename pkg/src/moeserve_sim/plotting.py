"""PNG figures for a result bundle, rendered off-screen."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_breakdown(results: dict, path: Path) -> Path:
    """Bars at the average latency, whiskers spanning min to max."""
    rows = results.get("breakdown") or []
    fig, ax = plt.subplots(figsize=(5, 3.2))
    if rows:
        names = [r["op"] for r in rows]
        avg = [r["avg_us"] for r in rows]
        lo = [r["avg_us"] - r["min_us"] for r in rows]
        hi = [r["max_us"] - r["avg_us"] for r in rows]
        ax.bar(names, avg, yerr=[lo, hi], capsize=6, color=["#4c72b0", "#dd8452"][:len(rows)])
        ax.set_ylabel("latency (us)")
    else:
        ax.text(0.5, 0.5, "no breakdown (empty run)", ha="center", va="center", transform=ax.transAxes)
    tpot = results.get("tpot_ms")
    ax.set_title(f"{results.get('name') or results.get('deployment')}: TPOT "
                 f"{'n/a' if tpot is None else f'{tpot:.2f} ms'}")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_timeline(trace_csv: str, path: Path, max_layers: int = 4) -> Path:
    """Gantt chart of the first ``max_layers`` layers of an MA iteration trace."""
    rows = [r for r in csv.DictReader(io.StringIO(trace_csv)) if "res=" in r["detail"]]
    fields = [dict(kv.split("=", 1) for kv in r["detail"].split()) for r in rows]
    keep = [(r, f) for r, f in zip(rows, fields) if int(f["layer"]) < max_layers]
    lanes = sorted({f["res"] for _, f in keep})
    colors = {"MLAProlog": "#4c72b0", "MLA": "#55a868", "Gating": "#8172b2", "A2E": "#c44e52",
              "A2E'": "#c44e52", "MoE": "#dd8452", "E2A": "#937860", "MLA_A2A": "#64b5cd"}
    fig, ax = plt.subplots(figsize=(9, 1 + 0.5 * max(1, len(lanes))))
    for r, f in keep:
        start = int(r["time_ns"]) / 1e6
        dur = int(r["size"]) / 1e6
        ax.broken_barh([(start, dur)], (lanes.index(f["res"]) - 0.4, 0.8),
                       facecolors=colors.get(r["op"], "#999999"), edgecolor="white", linewidth=0.3)
    ax.set_yticks(range(len(lanes)))
    ax.set_yticklabels(lanes)
    ax.set_xlabel("time (ms)")
    ax.set_title(f"first {max_layers} layers")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_ttft(requests_csv: str, path: Path) -> Path:
    vals = [float(r["ttft_ms"]) for r in csv.DictReader(io.StringIO(requests_csv)) if r["ttft_ms"]]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    if vals:
        ax.hist(vals, bins=min(30, max(5, len(vals) // 4)), color="#4c72b0")
    ax.set_xlabel("TTFT (ms)")
    ax.set_ylabel("requests")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def render_all(result_dir: Path, results: dict) -> List[Path]:
    result_dir = Path(result_dir)
    out = [plot_breakdown(results, result_dir / "breakdown.png")]
    trace = result_dir / "trace.csv"
    if results.get("deployment") == "disagg_ma" and trace.exists():
        out.append(plot_timeline(trace.read_text(), result_dir / "timeline.png"))
    reqs = result_dir / "requests.csv"
    if reqs.exists():
        out.append(plot_ttft(reqs.read_text(), result_dir / "ttft.png"))
    return out
